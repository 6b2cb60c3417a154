#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xformer/attention.hpp"
#include "xformer/keypoints.hpp"
#include "xformer/mesh_head.hpp"
#include "xformer/sample.hpp"

namespace xf {

// Canonical term names, in report order.
inline const std::vector<std::string>& loss_term_names() {
    static const std::vector<std::string> names{"map",   "kp_V",  "kp_J",     "kp_Jreg",   "kp_Jproj",
                                                "img_V", "img_J", "img_Jreg", "img_Jproj", "cons"};
    return names;
}

/// Mean-absolute map error, averaged over keypoints with weights w_k
/// (0 for invisible keypoints), for heatmaps plus offsets.
Tensor loss_map(const HeatmapSet& pred, const HeatmapSet& gt, const std::vector<double>& weights);

/// Per-point L1 distance (sum over coordinates), averaged over points.
Tensor loss_vertex(const Tensor& pred, const Tensor& gt);
Tensor loss_joint(const Tensor& pred, const Tensor& gt);
Tensor loss_joint_reg(const Tensor& vertices, const Tensor& joints_gt, const JointRegressor& reg);

/// Mean absolute coordinate error of projected joints over visible joints;
/// 0 with zero gradient when none is visible.
Tensor loss_reproj(const Tensor& joints3d, const WeakPerspectiveCamera& cam, const Tensor& joints2d_gt,
                   const std::vector<bool>& visible);

/// ‖F_mha − F_mlp‖_F / √T; gradients reach both arguments.
Tensor loss_consistency(const std::optional<Tensor>& mha, const Tensor& mlp);

struct LossWeights {
    std::vector<double> values = std::vector<double>(10, 1.0);  // indexed like loss_term_names()

    double get(const std::string& term) const;
    void set(const std::string& term, double w);
};

struct LossOptions {
    LossWeights weights;
    bool keypoint_branch = true;
    bool image_branch = true;
    bool map_loss = true;
    bool consistency = true;
    /// Reprojection term for image-free samples.
    bool mocap_reprojection = true;
};

/// Terms active for a dataset type under the given toggles, in canonical order.
std::vector<std::string> active_terms(DatasetType type, const LossOptions& options);

struct BranchOutputs {
    std::optional<MeshPrediction> keypoint;
    std::optional<MeshPrediction> image;
    std::optional<HeatmapSet> heatmaps;
    std::vector<ConsistencyPair> consistency;
};

struct LossTargets {
    std::optional<HeatmapSet> maps;
    std::vector<double> map_weights;
    std::optional<Tensor> vertices;   // M_full × 3
    std::optional<Tensor> joints3d;   // K_joint × 3
    std::optional<Tensor> joints2d;   // K_joint × 2, normalized image units
    std::vector<bool> joints2d_visible;
};

struct LossReport {
    std::vector<std::pair<std::string, double>> terms;  // active terms only
    double total = 0.0;
    Tensor total_tensor;

    bool has(const std::string& term) const;
    double get(const std::string& term) const;

    static std::string csv_header();
    /// Inactive terms are empty cells.
    std::string csv_row(std::uint64_t step, const std::string& tag) const;
};

LossReport total_loss(DatasetType type, const BranchOutputs& outputs, const LossTargets& targets,
                      const JointRegressor& reg, const LossOptions& options);

}  // namespace xf
