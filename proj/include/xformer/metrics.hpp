#pragma once

#include <string>
#include <vector>

#include "xformer/tensor.hpp"

namespace xf {

/// Joint subset and root used by the joint metrics.
struct EvalProtocol {
    std::vector<std::size_t> subset;  // empty = all joints
    std::size_t root = 0;             // index after subsetting

    /// 14 of the 17 Human3.6M-ordered joints (spine, thorax and neck/nose dropped), pelvis root.
    static EvalProtocol h36m_14_of_17();
    static EvalProtocol all_joints(std::size_t root = 0);

    Tensor select(const Tensor& joints) const;
};

/// Mean Euclidean distance after subtracting joint `root` from both sets.
double mpjpe(const Tensor& pred, const Tensor& gt, std::size_t root = 0);

/// s·R·X + t closest to Y in Frobenius norm (R proper rotation, s > 0).
/// Throws AlignmentError when X has rank < 2.
Tensor procrustes_align(const Tensor& x, const Tensor& y);

/// Mean joint distance after Procrustes alignment.
double pa_mpjpe(const Tensor& pred, const Tensor& gt);

/// Mean per-vertex distance after centring each mesh on its own root joint.
double pve(const Tensor& vertices_pred, const Tensor& root_pred, const Tensor& vertices_gt, const Tensor& root_gt);

struct SampleMetrics {
    double mpjpe = 0.0, pa_mpjpe = 0.0, pve = 0.0;
};

/// Joint metrics under `protocol`; pve uses the protocol root of each joint set.
SampleMetrics evaluate_sample(const Tensor& joints_pred, const Tensor& joints_gt, const Tensor& vertices_pred,
                              const Tensor& vertices_gt, const EvalProtocol& protocol);

struct EvalRow {
    std::string name;
    std::vector<SampleMetrics> samples;
    double mpjpe = 0.0, pa_mpjpe = 0.0, pve = 0.0;

    void finalize();
};

struct EvalReport {
    std::vector<EvalRow> rows;

    const EvalRow& row(const std::string& name) const;
    /// One line per row: name,samples,mpjpe,pa_mpjpe,pve.
    std::string csv() const;
    /// One line per (row, sample).
    std::string per_sample_csv() const;
    std::string summary() const;
};

}  // namespace xf
