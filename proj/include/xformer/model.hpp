#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xformer/attention.hpp"
#include "xformer/image.hpp"
#include "xformer/keypoints.hpp"
#include "xformer/losses.hpp"
#include "xformer/mesh_head.hpp"
#include "xformer/params.hpp"
#include "xformer/sample.hpp"
#include "xformer/template_mesh.hpp"

namespace xf {

/// Every architectural, loss and training knob of a run.
struct ModelConfig {
    BlockConfig block = BlockConfig::ours_small();
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t keypoints = 17;       // K
    std::size_t joints = 14;          // K_joint
    std::size_t coarse_vertices = 32; // M_coarse
    std::size_t full_vertices = 128;  // M_full
    std::size_t image_h = 128, image_w = 128;
    std::size_t gcn_depth = 2, gcn_width = 64;
    std::vector<std::size_t> backbone_channels{8, 16, 32, 64, 128};
    double lambda = 0.5;

    // Ablation toggles.
    bool keypoint_branch = true;
    bool image_branch = true;
    bool use_mlp = true;
    bool consistency_loss = true;
    bool map_loss = true;
    bool mocap_reprojection = true;
    bool use_mocap = true;
    bool teacher_forcing = true;  // ground-truth keypoints feed the keypoint branch in training
    LossWeights loss_weights;

    AugmentConfig augment;
    std::uint64_t seed = 0;

    // Optimization.
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t batch = 8;
    std::size_t steps = 1000;
    std::size_t eval_every = 0;  // 0 = only after the last step
    DatasetSpec train_data, eval_data;

    // Optional user-supplied assets; empty = synthetic.
    std::string template_path, regressor_path;

    /// Throws ContractError naming the first violated constraint.
    void validate() const;
    LossOptions loss_options() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    static ModelConfig load(const std::string& path);

    static ModelConfig ours_small_toy();
    /// Full-scale mesh (431 coarse / 6890 full vertices); shape tests and benchmarks only.
    static ModelConfig paper_shape();
};

struct ForwardOptions {
    bool use_gt_keypoints = true;
    std::optional<double> lambda;  // overrides the config λ
};

struct ModelOutput {
    BranchOutputs branches;
    std::optional<MeshPrediction> fused;
    Keypoints2D keypoints_used;
    std::vector<CrossModalOutput> cross;  // every cross-modal module, block order
    std::optional<TokenSequence> image_tokens, keypoint_tokens;  // after the last block
};

/// Assets, parameters and forward pass of the two-branch network.
class XFormerModel {
public:
    /// Parameters are created in a fixed order from config.seed.
    explicit XFormerModel(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }
    const TemplateMesh& mesh() const { return mesh_; }
    const JointRegressor& regressor() const { return regressor_; }
    const BodyModel& body() const { return body_; }
    SynthesisContext synthesis_context() const;

    /// Mocap samples run the keypoint branch only; the backbone is never touched for them.
    ModelOutput forward(const PoseSample& sample, const ForwardOptions& options = {}) const;

    LossTargets targets(const PoseSample& sample) const;

    LossReport loss(const PoseSample& sample, const ModelOutput& out) const;

    /// Tokens per image / keypoint sequence at this configuration.
    std::size_t image_token_count() const;
    std::size_t keypoint_token_count() const;

private:
    ModelConfig config_;
    BodyModel body_;
    TemplateMesh mesh_;
    JointRegressor regressor_;
    SkeletonGraph skeleton_;
    ParameterStore store_;

    std::optional<BackboneParams> backbone_;
    std::optional<KeypointDecoderParams> decoder_;
    std::optional<ImageTokenParams> image_tokens_;
    std::optional<GcnParams> gcn_;
    std::optional<KeypointTokenParams> keypoint_tokens_;
    std::vector<XFormerBlockParams> blocks_;
    std::optional<MeshHeadParams> keypoint_head_, image_head_;
    UpsamplerParams upsampler_;
};

/// Normalized image units: u = px / (W/2) − 1, v = py / (H/2) − 1.
Tensor normalize_pixels(const Tensor& px, std::size_t image_h, std::size_t image_w);

}  // namespace xf
