#include "xformer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "xformer/binary_io.hpp"
#include "xformer/ops.hpp"

namespace xf {

AdamState AdamState::for_store(const ParameterStore& store, double lr, double beta1, double beta2, double eps) {
    AdamState s{lr, beta1, beta2, eps, 0, {}, {}};
    for (const auto& [name, t] : store.entries()) {
        s.m.push_back(Tensor::zeros(t.shape()));
        s.v.push_back(Tensor::zeros(t.shape()));
    }
    return s;
}

void adam_step(ParameterStore& params, AdamState& state) {
    const auto& entries = params.entries();
    if (state.m.size() != entries.size() || state.v.size() != entries.size())
        throw ContractError("adam_step: optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                            std::to_string(entries.size()) + " parameters");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, p] = entries[i];
        if (state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape())
            throw DimensionError("adam_step: moment shape mismatch for '" + name + "'");
        if (!p.has_grad()) continue;
        for (double g : p.grad())
            if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t), c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor p = entries[i].second;
        auto w = p.data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        const std::vector<double> g = p.grad();
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            w[k] -= state.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
        }
    }
}

BranchMpjpe branch_mpjpe(const XFormerModel& model, const std::vector<PoseSample>& samples, bool use_gt_keypoints) {
    NoGradGuard guard;
    double fused = 0.0, kp = 0.0, img = 0.0;
    std::size_t n = 0, n_kp = 0, n_img = 0;
    for (const auto& s : samples) {
        if (!s.joints3d) continue;
        if (!model.config().keypoint_branch && !has_image(s.type)) continue;
        const auto out = model.forward(s, {use_gt_keypoints, {}});
        fused += mpjpe(out.fused->joints, *s.joints3d, 0);
        ++n;
        if (out.branches.keypoint) {
            kp += mpjpe(out.branches.keypoint->joints, *s.joints3d, 0);
            ++n_kp;
        }
        if (out.branches.image) {
            img += mpjpe(out.branches.image->joints, *s.joints3d, 0);
            ++n_img;
        }
    }
    if (n == 0) throw ContractError("mean_mpjpe: no samples with 3D joints");
    BranchMpjpe r;
    r.fused = fused / static_cast<double>(n);
    if (n_kp) r.keypoint = kp / static_cast<double>(n_kp);
    if (n_img) r.image = img / static_cast<double>(n_img);
    return r;
}

double mean_mpjpe(const XFormerModel& model, const std::vector<PoseSample>& samples, bool use_gt_keypoints) {
    return branch_mpjpe(model, samples, use_gt_keypoints).fused;
}

EvalReport evaluate(const XFormerModel& model, const std::vector<PoseSample>& samples) {
    NoGradGuard guard;
    const auto protocol = EvalProtocol::all_joints(0);
    const auto& c = model.config();
    EvalRow kp{"keypoint", {}, 0, 0, 0}, img{"image", {}, 0, 0, 0}, fused{"fused", {}, 0, 0, 0};
    for (const auto& s : samples) {
        if (!has_image(s.type) || !s.image || !s.joints3d || !s.vertices3d) continue;
        const auto out = model.forward(s, {false, {}});
        auto score = [&](const MeshPrediction& p) {
            return evaluate_sample(p.joints, *s.joints3d, p.full, *s.vertices3d, protocol);
        };
        if (out.branches.keypoint) kp.samples.push_back(score(*out.branches.keypoint));
        if (out.branches.image) img.samples.push_back(score(*out.branches.image));
        fused.samples.push_back(score(*out.fused));
    }
    if (fused.samples.empty()) throw ContractError("evaluate: no image samples with 3D targets");
    EvalReport report;
    if (c.keypoint_branch) report.rows.push_back(std::move(kp));
    if (c.image_branch) report.rows.push_back(std::move(img));
    report.rows.push_back(std::move(fused));
    for (auto& r : report.rows) r.finalize();
    return report;
}

// Trainer ---------------------------------------------------------------------

Trainer::Trainer(ModelConfig config) : Trainer(config, {}) {
    train_ = make_dataset(config_.train_data, model_.synthesis_context());
    init_eligible();
}

Trainer::Trainer(ModelConfig config, std::vector<PoseSample> train)
    : config_(config), model_(std::move(config)), train_(std::move(train)),
      adam_(AdamState::for_store(model_.parameters(), config_.lr, config_.beta1, config_.beta2, config_.eps)),
      rng_(config_.seed) {
    if (!train_.empty()) init_eligible();
}

void Trainer::init_eligible() {
    eligible_.clear();
    const bool pooled = config_.block.fusion == FusionMode::add || config_.block.fusion == FusionMode::concat;
    for (std::size_t i = 0; i < train_.size(); ++i) {
        const auto t = train_[i].type;
        if (t == DatasetType::mocap && (!config_.use_mocap || !config_.keypoint_branch || pooled)) continue;
        if (active_terms(t, config_.loss_options()).empty()) continue;
        eligible_.push_back(i);
    }
    if (eligible_.empty()) throw ContractError("trainer: no training sample is usable under this configuration");
}

StepRecord Trainer::step() {
    StepRecord rec;
    rec.step = adam_.step;
    auto& store = model_.parameters();
    store.zero_grad();
    Tape::current().clear();
    std::uniform_int_distribution<std::size_t> pick(0, eligible_.size() - 1);
    Tensor total;
    try {
        for (std::size_t b = 0; b < config_.batch; ++b) {
            const auto& sample = train_[eligible_[pick(rng_)]];
            const auto out = model_.forward(sample, {config_.teacher_forcing, {}});
            auto report = model_.loss(sample, out);
            total = total.defined() ? add(total, report.total_tensor) : report.total_tensor;
            rec.types.push_back(sample.type);
            rec.reports.push_back(std::move(report));
        }
    } catch (const NumericError& e) {
        Tape::current().clear();
        throw NumericError("step " + std::to_string(rec.step) + ": " + e.what());
    }
    Tensor loss = scale(total, 1.0 / static_cast<double>(config_.batch));
    rec.loss = loss.item();
    if (!std::isfinite(rec.loss)) {
        Tape::current().clear();
        throw NumericError("step " + std::to_string(rec.step) + ": non-finite loss");
    }
    backward(loss);
    try {
        adam_step(store, adam_);
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(rec.step) + ": " + e.what());
    }
    return rec;
}

void Trainer::run(std::size_t steps, const std::function<void(const StepRecord&)>& on_step) {
    for (std::size_t i = 0; i < steps; ++i) {
        const auto rec = step();
        if (on_step) on_step(rec);
    }
}

// Checkpoints -----------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'X', 'F', 'C', '1'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

struct TableEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    Tensor tensor;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct ParsedCheckpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    double lr = 0, beta1 = 0, beta2 = 0, eps = 0;
    std::string rng;
    std::map<std::string, Tensor> tensors;
};

ParsedCheckpoint parse_checkpoint(const std::string& bytes) {
    io::Reader r(bytes, "XFC1");
    r.expect(kCkptMagic, 4);
    const std::uint32_t version = r.u32();
    if (version != kCkptVersion) throw FormatError("XFC1: unsupported version " + std::to_string(version));
    ParsedCheckpoint c;
    c.config = ModelConfig::from_json(r.bytes(r.u64()));
    c.step = r.u64();
    c.lr = r.f64();
    c.beta1 = r.f64();
    c.beta2 = r.f64();
    c.eps = r.f64();
    c.rng = r.bytes(r.u64());
    const std::uint32_t count = r.u32();
    std::vector<TableEntry> table(count);
    for (auto& e : table) {
        e.name = r.bytes(r.u64());
        if (r.u8() != kDtypeF64) throw FormatError("XFC1: tensor '" + e.name + "' has an unknown dtype");
        const std::uint32_t rank = r.u32();
        for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.u32());
        e.offset = r.u64();
    }
    const std::size_t base = r.position();
    for (auto& e : table) {
        const std::size_t n = shape_numel(e.shape);
        if (e.offset > bytes.size() - base || n * 8 > bytes.size() - base - e.offset)
            throw FormatError("XFC1: buffer of '" + e.name + "' out of range");
        std::vector<double> v(n);
        std::memcpy(v.data(), bytes.data() + base + e.offset, n * 8);
        if (!c.tensors.emplace(e.name, Tensor::from(e.shape, std::move(v))).second)
            throw FormatError("XFC1: duplicate tensor '" + e.name + "'");
    }
    return c;
}

void restore_parameters(ParameterStore& store, const std::map<std::string, Tensor>& tensors) {
    for (const auto& [name, p] : store.entries()) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint lacks parameter '" + name + "'");
        if (it->second.shape() != p.shape())
            throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                              ", model expects " + shape_str(p.shape()));
        Tensor dst = p;
        std::copy(it->second.data().begin(), it->second.data().end(), dst.data().begin());
    }
}

const Tensor& find_tensor(const std::map<std::string, Tensor>& tensors, const std::string& name, const Shape& shape) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint lacks '" + name + "'");
    if (it->second.shape() != shape) throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
    return it->second;
}

}  // namespace

std::string Trainer::checkpoint_bytes() const {
    static_assert(sizeof(double) == 8);
    std::vector<TableEntry> table;
    std::uint64_t offset = 0;
    auto push = [&](const std::string& name, const Tensor& t) {
        table.push_back({name, t.shape(), offset, t});
        offset += t.numel() * 8;
    };
    const auto& entries = model_.parameters().entries();
    for (const auto& [name, t] : entries) push(name, t);
    for (std::size_t i = 0; i < entries.size(); ++i) push("adam_m:" + entries[i].first, adam_.m[i]);
    for (std::size_t i = 0; i < entries.size(); ++i) push("adam_v:" + entries[i].first, adam_.v[i]);

    io::Writer w;
    w.raw(kCkptMagic, 4);
    w.u32(kCkptVersion);
    w.str(config_.to_json());
    w.u64(adam_.step);
    w.f64(adam_.lr);
    w.f64(adam_.beta1);
    w.f64(adam_.beta2);
    w.f64(adam_.eps);
    std::ostringstream rng_text;
    rng_text << rng_;
    w.str(rng_text.str());
    w.u32(static_cast<std::uint32_t>(table.size()));
    for (const auto& e : table) {
        w.str(e.name);
        w.u8(kDtypeF64);
        w.u32(static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
        w.u64(e.offset);
    }
    for (const auto& e : table)
        for (double v : e.tensor.data()) w.f64(v);
    return w.take();
}

void Trainer::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
    const auto bytes = checkpoint_bytes();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

Trainer Trainer::from_checkpoint_bytes(const std::string& bytes) {
    auto c = parse_checkpoint(bytes);
    Trainer t(c.config);
    restore_parameters(t.model_.parameters(), c.tensors);
    t.adam_.step = c.step;
    t.adam_.lr = c.lr;
    t.adam_.beta1 = c.beta1;
    t.adam_.beta2 = c.beta2;
    t.adam_.eps = c.eps;
    const auto& entries = t.model_.parameters().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& shape = entries[i].second.shape();
        t.adam_.m[i] = find_tensor(c.tensors, "adam_m:" + entries[i].first, shape).detach();
        t.adam_.v[i] = find_tensor(c.tensors, "adam_v:" + entries[i].first, shape).detach();
    }
    std::istringstream rng_text(c.rng);
    rng_text >> t.rng_;
    if (!rng_text) throw FormatError("XFC1: unreadable rng state");
    return t;
}

Trainer Trainer::load(const std::string& path) { return from_checkpoint_bytes(read_file(path)); }

XFormerModel load_model(const std::string& path) {
    auto c = parse_checkpoint(read_file(path));
    XFormerModel model(c.config);
    restore_parameters(model.parameters(), c.tensors);
    return model;
}

// Benchmark -------------------------------------------------------------------

std::uint64_t attention_flops(std::size_t tq, std::size_t tk, std::size_t d) {
    return 4ull * tq * tk * d;
}

std::string BenchmarkReport::text() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "iterations %zu (warmup %zu)\nmedian_ms %.4f\np95_ms %.4f\nflops %llu\nattention_flops %llu\n"
                  "image_tokens %zu\nkeypoint_tokens %zu\ntokens_per_second %.1f\n",
                  iterations, warmup, median_ms, p95_ms, static_cast<unsigned long long>(flops),
                  static_cast<unsigned long long>(attention_flops), image_tokens, keypoint_tokens, tokens_per_second);
    return buf;
}

BenchmarkReport benchmark(const XFormerModel& model, std::size_t iterations, std::size_t warmup) {
    if (iterations == 0) throw ContractError("benchmark: need at least one iteration");
    if (warmup < 10) throw ContractError("benchmark: at least 10 warmup iterations are required");
    const auto& c = model.config();
    const PoseSample sample = synthesize_sample(model.synthesis_context(), DatasetType::image_3d, c.seed, 0);
    NoGradGuard guard;
    BenchmarkReport rep;
    rep.iterations = iterations;
    rep.warmup = warmup;

    ModelOutput probe;
    for (std::size_t i = 0; i < warmup; ++i) {
        reset_flop_count();
        probe = model.forward(sample, {false, {}});
        rep.flops = flop_count();
    }
    rep.image_tokens = probe.image_tokens ? probe.image_tokens->size() : 0;
    rep.keypoint_tokens = probe.keypoint_tokens ? probe.keypoint_tokens->size() : 0;

    const std::size_t ti = rep.image_tokens, tk = rep.keypoint_tokens, d = c.d_model;
    const bool cross = c.block.fusion == FusionMode::cross_attention && ti > 0 && tk > 0;
    const std::uint64_t self = attention_flops(ti, ti, d) + attention_flops(tk, tk, d);
    rep.attention_flops = c.block.repeats * ((c.block.front + c.block.back) * self +
                                             (cross ? c.block.cross * 2 * attention_flops(ti, tk, d) : 0));

    std::vector<double> ms;
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = model.forward(sample, {false, {}});
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    auto quantile = [&](double q) {
        const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(ms.size()))) - 1;
        return ms[std::min(idx, ms.size() - 1)];
    };
    rep.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
    rep.p95_ms = quantile(0.95);
    rep.tokens_per_second = static_cast<double>(ti + tk) / (rep.median_ms / 1000.0);
    return rep;
}

}  // namespace xf
