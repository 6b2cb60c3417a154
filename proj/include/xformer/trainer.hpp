#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xformer/losses.hpp"
#include "xformer/metrics.hpp"
#include "xformer/model.hpp"
#include "xformer/params.hpp"

namespace xf {

struct AdamState {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<Tensor> m, v;  // mirror ParameterStore order and shapes

    static AdamState for_store(const ParameterStore& store, double lr, double beta1, double beta2, double eps);
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient (absent gradient = 0). A non-finite gradient throws NumericError
/// naming the parameter before anything is modified.
void adam_step(ParameterStore& params, AdamState& state);

struct BranchMpjpe {
    double fused = 0.0;
    std::optional<double> keypoint, image;  // absent when the branch never ran
};

/// MPJPE (all joints, pelvis root) averaged over samples with 3D joints.
BranchMpjpe branch_mpjpe(const XFormerModel& model, const std::vector<PoseSample>& samples, bool use_gt_keypoints);
/// Fused-output part of branch_mpjpe.
double mean_mpjpe(const XFormerModel& model, const std::vector<PoseSample>& samples, bool use_gt_keypoints);

/// Keypoint, image and fused rows over image samples with 3D targets; rows for
/// disabled branches are omitted.
EvalReport evaluate(const XFormerModel& model, const std::vector<PoseSample>& samples);

struct StepRecord {
    std::uint64_t step = 0;
    double loss = 0.0;
    std::vector<LossReport> reports;  // one per batch sample
    std::vector<DatasetType> types;
};

/// Single-threaded training loop over a fixed synthetic training set.
class Trainer {
public:
    explicit Trainer(ModelConfig config);
    /// Uses `train` instead of synthesizing config.train_data.
    Trainer(ModelConfig config, std::vector<PoseSample> train);

    XFormerModel& model() { return model_; }
    const XFormerModel& model() const { return model_; }
    const AdamState& optimizer() const { return adam_; }
    const std::vector<PoseSample>& train_set() const { return train_; }
    /// Indices of train_set() the batch sampler draws from.
    const std::vector<std::size_t>& eligible() const { return eligible_; }
    std::uint64_t steps_done() const { return adam_.step; }

    /// Draw a batch, average per-sample totals, backpropagate, update.
    /// A non-finite loss throws NumericError with the step index.
    StepRecord step();

    /// Runs `steps` steps; `on_step` sees every record.
    void run(std::size_t steps, const std::function<void(const StepRecord&)>& on_step = {});

    /// Little-endian "XFC1": config, optimizer and rng state, then a tensor table
    /// (name, dtype, shape, offset) and the raw buffers.
    std::string checkpoint_bytes() const;
    void save(const std::string& path) const;
    /// Restores parameters, Adam state and the batch rng; the training set is
    /// re-synthesized from the stored config.
    static Trainer from_checkpoint_bytes(const std::string& bytes);
    static Trainer load(const std::string& path);

private:
    void init_eligible();

    ModelConfig config_;
    XFormerModel model_;
    std::vector<PoseSample> train_;
    std::vector<std::size_t> eligible_;
    AdamState adam_;
    std::mt19937_64 rng_;
};

/// Model with parameters read from a checkpoint (optimizer state ignored).
XFormerModel load_model(const std::string& path);

struct BenchmarkReport {
    std::size_t iterations = 0, warmup = 0;
    double median_ms = 0.0, p95_ms = 0.0;
    std::uint64_t flops = 0;            // counted multiply-adds ×2 per forward
    std::uint64_t attention_flops = 0;  // analytic QKᵀ + AV estimate per forward
    std::size_t image_tokens = 0, keypoint_tokens = 0;
    double tokens_per_second = 0.0;

    std::string text() const;
};

/// 2·(T_q·T_k·d) for the scores plus the same for the weighted values.
std::uint64_t attention_flops(std::size_t tq, std::size_t tk, std::size_t d);

/// Timed inference passes (decoded keypoints, both branches, ensemble) on one
/// synthetic image sample after `warmup` discarded passes.
BenchmarkReport benchmark(const XFormerModel& model, std::size_t iterations, std::size_t warmup = 10);

}  // namespace xf
