#pragma once

#include <string>
#include <vector>

#include "xformer/attention.hpp"
#include "xformer/params.hpp"
#include "xformer/template_mesh.hpp"

namespace xf {

enum class Branch { keypoint, image, fused };
const char* branch_name(Branch b);

/// Weak-perspective camera as a 1×3 row (s, tx, ty), s > 0.
struct WeakPerspectiveCamera {
    Tensor params;

    double s() const { return params.at(0); }
    double tx() const { return params.at(1); }
    double ty() const { return params.at(2); }

    static WeakPerspectiveCamera make(double s, double tx, double ty);
};

struct MeshPrediction {
    Tensor coarse;   // M_coarse × 3
    Tensor full;     // M_full × 3
    Tensor joints;   // K_joint × 3
    WeakPerspectiveCamera camera;
    Branch branch = Branch::fused;
};

struct MeshHeadParams {
    Linear vertex_hidden;  // d_model → d_model
    Linear vertex;         // d_model → 3, residual on template vertices
    Linear joint_hidden;   // d_model → d_model
    Linear joint;          // d_model → 3, residual on template joints
    Linear cam1;    // d_model → d_model
    Linear cam2;    // d_model → 3 (raw s, tx, ty)

    /// The raw-scale bias starts at softplus⁻¹(`initial_scale`).
    static MeshHeadParams create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                 double initial_scale, Initializer& init);
};

/// Coarse vertices, joints and camera from the template-token slots of `tokens`.
/// `full` is left undefined; see upsample_mesh.
MeshPrediction predict_mesh(const TokenSequence& tokens, const TemplateMesh& mesh, const MeshHeadParams& params,
                            Branch branch);

struct UpsamplerParams {
    Tensor weight;  // M_full × M_coarse
    Tensor bias;    // M_full × 3

    static UpsamplerParams create(ParameterStore& store, const std::string& name, const Tensor& init_weight);
};

/// V_full = U·V_coarse + b, one shared map for the three coordinates.
Tensor upsample_mesh(const Tensor& coarse, const UpsamplerParams& params);

/// Row-stochastic K_joint × M_full matrix.
struct JointRegressor {
    Tensor weights;

    std::size_t joints() const { return weights.dim(0); }
    std::size_t vertices() const { return weights.dim(1); }

    /// Nonnegative entries and rows summing to 1 ± 1e-9.
    void validate() const;

    /// One row of whitespace-separated floats per joint.
    static JointRegressor parse(const std::string& text);
    static JointRegressor load(const std::string& path);
    std::string serialize() const;
};

Tensor regress_joints(const Tensor& vertices, const JointRegressor& reg);

/// (x, y, z) ↦ s·(x, y) + t.
Tensor project_weak_perspective(const Tensor& joints, const WeakPerspectiveCamera& cam);

/// λ·kp + (1−λ)·img for vertices, joints and camera; λ ∈ {0, 1} returns the
/// matching branch exactly.
MeshPrediction ensemble(const MeshPrediction& kp, const MeshPrediction& img, double lambda);

/// "v x y z" lines followed by "e i j" lines.
std::string mesh_text(const Tensor& vertices, const std::vector<Edge>& edges);

}  // namespace xf
