#include "xformer/model.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "xformer/ops.hpp"

namespace xf {

namespace {

using nlohmann::json;

json spec_json(const DatasetSpec& spec) {
    json counts = json::object();
    for (const auto& [t, n] : spec.counts) counts[dataset_type_name(t)] = n;
    return {{"seed", spec.seed}, {"counts", counts}};
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* known : keys) ok = ok || k == known;
        if (!ok) throw FormatError("config: unknown key '" + k + "' in " + where);
    }
}

void positive(std::size_t v, const char* what) {
    if (v == 0) throw ContractError(std::string("config: ") + what + " must be positive");
}

}  // namespace

ModelConfig ModelConfig::ours_small_toy() {
    ModelConfig c;
    c.train_data.seed = 1;
    c.train_data.counts = {{DatasetType::image_3d, 32}, {DatasetType::image_2d_only, 8},
                           {DatasetType::image_pseudo3d, 8}, {DatasetType::mocap, 16}};
    c.eval_data.seed = 2;
    c.eval_data.counts = {{DatasetType::image_3d, 16}};
    return c;
}

ModelConfig ModelConfig::paper_shape() {
    ModelConfig c = ours_small_toy();
    c.coarse_vertices = 431;
    c.full_vertices = 6890;
    return c;
}

void ModelConfig::validate() const {
    try {
        block.validate();
    } catch (const std::exception& e) {
        throw ContractError(std::string("config: ") + e.what());
    }
    positive(d_model, "d_model");
    positive(heads, "heads");
    if (d_model % heads != 0) throw ContractError("config: d_model must be divisible by heads");
    if (keypoints != kCocoKeypoints)
        throw ContractError("config: the keypoint skeleton has " + std::to_string(kCocoKeypoints) + " keypoints");
    if (joints != kBodyJoints)
        throw ContractError("config: the body model has " + std::to_string(kBodyJoints) + " joints");
    positive(coarse_vertices, "coarse_vertices");
    if (coarse_vertices > full_vertices) throw ContractError("config: coarse_vertices exceeds full_vertices");
    if (image_h == 0 || image_w == 0 || image_h % 32 != 0 || image_w % 32 != 0)
        throw ContractError("config: image extent must be a positive multiple of 32");
    positive(gcn_depth, "gcn depth");
    positive(gcn_width, "gcn width");
    if (backbone_channels.size() != 5) throw ContractError("config: backbone needs five stage widths");
    for (auto c : backbone_channels) positive(c, "backbone channel count");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("config: lambda must lie in [0, 1]");
    if (!keypoint_branch && !image_branch) throw ContractError("config: at least one branch must be enabled");
    if ((!keypoint_branch || !image_branch) && block.fusion != FusionMode::none)
        throw ContractError("config: a single-branch model needs fusion 'none'");
    for (double w : loss_weights.values)
        if (!(w >= 0.0)) throw ContractError("config: loss weights must be nonnegative");
    if (!(lr > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
        throw ContractError("config: optimizer hyperparameters out of range");
    positive(batch, "batch");
    if (augment.scale_min <= 0.0 || augment.scale_min > augment.scale_max)
        throw ContractError("config: augmentation scale range is invalid");
}

LossOptions ModelConfig::loss_options() const {
    LossOptions o;
    o.weights = loss_weights;
    o.keypoint_branch = keypoint_branch;
    o.image_branch = image_branch;
    o.map_loss = map_loss && keypoint_branch;
    o.consistency = consistency_loss && use_mlp && block.fusion == FusionMode::cross_attention;
    o.mocap_reprojection = mocap_reprojection;
    return o;
}

std::string ModelConfig::to_json() const {
    json weights = json::object();
    for (std::size_t i = 0; i < loss_term_names().size(); ++i) weights[loss_term_names()[i]] = loss_weights.values[i];
    json j{
        {"block",
         {{"front", block.front}, {"cross", block.cross}, {"back", block.back}, {"repeats", block.repeats},
          {"fusion", fusion_mode_name(block.fusion)}}},
        {"d_model", d_model},
        {"heads", heads},
        {"keypoints", keypoints},
        {"joints", joints},
        {"coarse_vertices", coarse_vertices},
        {"full_vertices", full_vertices},
        {"image", {{"height", image_h}, {"width", image_w}}},
        {"gcn", {{"depth", gcn_depth}, {"width", gcn_width}}},
        {"backbone_channels", backbone_channels},
        {"lambda", lambda},
        {"toggles",
         {{"keypoint_branch", keypoint_branch}, {"image_branch", image_branch}, {"use_mlp", use_mlp},
          {"consistency_loss", consistency_loss}, {"map_loss", map_loss}, {"mocap_reprojection", mocap_reprojection},
          {"use_mocap", use_mocap}, {"teacher_forcing", teacher_forcing}}},
        {"loss_weights", weights},
        {"augment",
         {{"roll", augment.roll}, {"pitch", augment.pitch}, {"yaw", augment.yaw}, {"shift", augment.shift},
          {"scale_min", augment.scale_min}, {"scale_max", augment.scale_max}}},
        {"seed", seed},
        {"optimizer", {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}}},
        {"batch", batch},
        {"steps", steps},
        {"eval_every", eval_every},
        {"train_data", spec_json(train_data)},
        {"eval_data", spec_json(eval_data)},
        {"template", template_path},
        {"regressor", regressor_path},
    };
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        if (!j.is_object()) throw FormatError("config: top level must be an object");
        reject_unknown(j,
                       {"preset", "block", "d_model", "heads", "keypoints", "joints", "coarse_vertices", "full_vertices",
                        "image", "gcn", "backbone_channels", "lambda", "toggles", "loss_weights", "augment", "seed",
                        "optimizer", "batch", "steps", "eval_every", "train_data", "eval_data", "template",
                        "regressor"},
                       "config");
        const std::string preset = j.value("preset", std::string("ours_small_toy"));
        if (preset == "ours_small_toy")
            c = ours_small_toy();
        else if (preset == "paper_shape")
            c = paper_shape();
        else
            throw FormatError("config: unknown preset '" + preset + "'");
        if (j.contains("block")) {
            const auto& b = j.at("block");
            reject_unknown(b, {"front", "cross", "back", "repeats", "fusion"}, "block");
            read(b, "front", c.block.front);
            read(b, "cross", c.block.cross);
            read(b, "back", c.block.back);
            read(b, "repeats", c.block.repeats);
            if (b.contains("fusion")) c.block.fusion = parse_fusion_mode(b.at("fusion").get<std::string>());
        }
        read(j, "d_model", c.d_model);
        read(j, "heads", c.heads);
        read(j, "keypoints", c.keypoints);
        read(j, "joints", c.joints);
        read(j, "coarse_vertices", c.coarse_vertices);
        read(j, "full_vertices", c.full_vertices);
        if (j.contains("image")) {
            reject_unknown(j.at("image"), {"height", "width"}, "image");
            read(j.at("image"), "height", c.image_h);
            read(j.at("image"), "width", c.image_w);
        }
        if (j.contains("gcn")) {
            reject_unknown(j.at("gcn"), {"depth", "width"}, "gcn");
            read(j.at("gcn"), "depth", c.gcn_depth);
            read(j.at("gcn"), "width", c.gcn_width);
        }
        read(j, "backbone_channels", c.backbone_channels);
        read(j, "lambda", c.lambda);
        if (j.contains("toggles")) {
            const auto& t = j.at("toggles");
            reject_unknown(t,
                           {"keypoint_branch", "image_branch", "use_mlp", "consistency_loss", "map_loss",
                            "mocap_reprojection", "use_mocap", "teacher_forcing"},
                           "toggles");
            read(t, "keypoint_branch", c.keypoint_branch);
            read(t, "image_branch", c.image_branch);
            read(t, "use_mlp", c.use_mlp);
            read(t, "consistency_loss", c.consistency_loss);
            read(t, "map_loss", c.map_loss);
            read(t, "mocap_reprojection", c.mocap_reprojection);
            read(t, "use_mocap", c.use_mocap);
            read(t, "teacher_forcing", c.teacher_forcing);
        }
        if (j.contains("loss_weights"))
            for (const auto& [name, w] : j.at("loss_weights").items()) {
                try {
                    c.loss_weights.set(name, w.get<double>());
                } catch (const ContractError& e) {
                    throw FormatError(std::string("config: ") + e.what());
                }
            }
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            reject_unknown(a, {"roll", "pitch", "yaw", "shift", "scale_min", "scale_max"}, "augment");
            read(a, "roll", c.augment.roll);
            read(a, "pitch", c.augment.pitch);
            read(a, "yaw", c.augment.yaw);
            read(a, "shift", c.augment.shift);
            read(a, "scale_min", c.augment.scale_min);
            read(a, "scale_max", c.augment.scale_max);
        }
        read(j, "seed", c.seed);
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            reject_unknown(o, {"lr", "beta1", "beta2", "eps"}, "optimizer");
            read(o, "lr", c.lr);
            read(o, "beta1", c.beta1);
            read(o, "beta2", c.beta2);
            read(o, "eps", c.eps);
        }
        read(j, "batch", c.batch);
        read(j, "steps", c.steps);
        read(j, "eval_every", c.eval_every);
        if (j.contains("train_data")) c.train_data = DatasetSpec::parse_json(j.at("train_data").dump());
        if (j.contains("eval_data")) c.eval_data = DatasetSpec::parse_json(j.at("eval_data").dump());
        read(j, "template", c.template_path);
        read(j, "regressor", c.regressor_path);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

Tensor normalize_pixels(const Tensor& px, std::size_t image_h, std::size_t image_w) {
    if (px.rank() != 2 || px.dim(1) != 2) throw DimensionError("normalize_pixels: expected N×2, got " + shape_str(px.shape()));
    std::vector<double> v(px.numel());
    const double hx = static_cast<double>(image_w) / 2.0, hy = static_cast<double>(image_h) / 2.0;
    for (std::size_t i = 0; i < px.dim(0); ++i) {
        v[i * 2] = px.at(i, 0) / hx - 1.0;
        v[i * 2 + 1] = px.at(i, 1) / hy - 1.0;
    }
    return Tensor::from(px.shape(), std::move(v));
}

XFormerModel::XFormerModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto& c = config_;
    auto assets = make_synthetic_assets(c.full_vertices, c.coarse_vertices);
    body_ = std::move(assets.body);
    Tensor upsample_init = assets.upsample_init;
    if (!c.template_path.empty()) {
        mesh_ = TemplateMesh::load(c.template_path, c.full_vertices);
        if (mesh_.coarse_count() != c.coarse_vertices || mesh_.joint_count() != c.joints)
            throw ContractError("template '" + c.template_path + "' does not match the configured vertex/joint counts");
        upsample_init = interpolation_weights(body_.rest_vertices(), mesh_.vertices);
    } else {
        mesh_ = std::move(assets.mesh);
    }
    if (!c.regressor_path.empty()) {
        regressor_ = JointRegressor::load(c.regressor_path);
        if (regressor_.joints() != c.joints || regressor_.vertices() != c.full_vertices)
            throw ContractError("joint regressor '" + c.regressor_path + "' does not match K_joint × M_full");
    } else {
        regressor_.weights = body_.joint_regressor();
    }
    regressor_.validate();
    skeleton_ = SkeletonGraph::coco17();

    const OrthoFrame frame = OrthoFrame::for_image(c.image_h, c.image_w);
    const double initial_scale = frame.pixels_per_unit / (static_cast<double>(c.image_w) / 2.0);

    Initializer init(c.seed);
    const bool need_backbone = c.image_branch || c.keypoint_branch;
    if (need_backbone) backbone_ = BackboneParams::create(store_, "backbone", c.backbone_channels, init);
    if (c.keypoint_branch) {
        decoder_ = KeypointDecoderParams::create(store_, "decoder", *backbone_, c.keypoints, init);
        gcn_ = GcnParams::create(store_, "gcn", 2, c.gcn_width, c.gcn_depth, init);
        keypoint_tokens_ = KeypointTokenParams::create(store_, "kp_tokens", gcn_->out_dim(), c.d_model, init);
    }
    if (c.image_branch) image_tokens_ = ImageTokenParams::create(store_, "img_tokens", *backbone_, c.d_model, init);
    for (std::size_t r = 0; r < c.block.repeats; ++r)
        blocks_.push_back(XFormerBlockParams::create(store_, "block" + std::to_string(r), c.block, c.d_model, c.heads,
                                                     c.image_branch, c.keypoint_branch, init));
    if (c.keypoint_branch) keypoint_head_ = MeshHeadParams::create(store_, "kp_head", c.d_model, initial_scale, init);
    if (c.image_branch) image_head_ = MeshHeadParams::create(store_, "img_head", c.d_model, initial_scale, init);
    upsampler_ = UpsamplerParams::create(store_, "upsampler", upsample_init);
}

SynthesisContext XFormerModel::synthesis_context() const {
    SynthesisContext ctx;
    ctx.body = &body_;
    ctx.image_h = config_.image_h;
    ctx.image_w = config_.image_w;
    ctx.augment = config_.augment;
    ctx.frame = OrthoFrame::for_image(config_.image_h, config_.image_w);
    return ctx;
}

std::size_t XFormerModel::image_token_count() const {
    return config_.coarse_vertices + config_.joints + (config_.image_h / 16) * (config_.image_w / 16);
}

std::size_t XFormerModel::keypoint_token_count() const {
    return config_.coarse_vertices + config_.joints + config_.keypoints;
}

ModelOutput XFormerModel::forward(const PoseSample& sample, const ForwardOptions& options) const {
    const auto& c = config_;
    const bool with_image = has_image(sample.type) && sample.image.has_value();
    ModelOutput out;

    std::optional<BackboneFeatures> feats;
    if (with_image) feats = backbone_forward(*sample.image, *backbone_);
    if (feats && decoder_) out.branches.heatmaps = keypoint_decoder(*feats, *decoder_);

    std::optional<TokenSequence> kp_seq, img_seq;
    if (c.keypoint_branch) {
        if (options.use_gt_keypoints || !out.branches.heatmaps) {
            if (!sample.keypoints) throw ContractError("forward: sample has no 2D keypoints for the keypoint branch");
            out.keypoints_used = *sample.keypoints;
        } else {
            out.keypoints_used = decode_keypoints(*out.branches.heatmaps);
        }
        Tensor coords = normalize_keypoints(out.keypoints_used, c.image_h, c.image_w);
        kp_seq = assemble_kp_tokens(gcn_forward(coords, skeleton_, *gcn_), coords, mesh_, *keypoint_tokens_);
    }
    if (c.image_branch && feats) img_seq = assemble_img_tokens(*feats, mesh_, *image_tokens_, c.image_h, c.image_w);
    if (!kp_seq && !img_seq) throw ContractError("forward: image-branch-only model needs an image sample");

    CrossModalOptions cross_opts;
    cross_opts.use_mlp = c.use_mlp;
    for (const auto& block : blocks_) {
        auto res = xformer_block(img_seq, kp_seq, c.block, block, cross_opts);
        img_seq = std::move(res.image);
        kp_seq = std::move(res.keypoint);
        for (auto& p : res.consistency) out.branches.consistency.push_back(std::move(p));
        for (auto& x : res.cross_outputs) out.cross.push_back(std::move(x));
    }

    if (kp_seq) {
        auto p = predict_mesh(*kp_seq, mesh_, *keypoint_head_, Branch::keypoint);
        p.full = upsample_mesh(p.coarse, upsampler_);
        out.branches.keypoint = std::move(p);
    }
    if (img_seq) {
        auto p = predict_mesh(*img_seq, mesh_, *image_head_, Branch::image);
        p.full = upsample_mesh(p.coarse, upsampler_);
        out.branches.image = std::move(p);
    }
    const double lambda = options.lambda.value_or(c.lambda);
    if (out.branches.keypoint && out.branches.image) {
        out.fused = ensemble(*out.branches.keypoint, *out.branches.image, lambda);
    } else {
        out.fused = out.branches.keypoint ? *out.branches.keypoint : *out.branches.image;
        out.fused->branch = Branch::fused;
    }
    out.image_tokens = std::move(img_seq);
    out.keypoint_tokens = std::move(kp_seq);
    return out;
}

LossTargets XFormerModel::targets(const PoseSample& sample) const {
    const auto& c = config_;
    LossTargets t;
    if (sample.image && sample.keypoints) {
        t.maps = render_gt_maps(*sample.keypoints, c.image_h, c.image_w);
        for (bool v : sample.keypoints->visible) t.map_weights.push_back(v ? 1.0 : 0.0);
    }
    t.vertices = sample.vertices3d;
    t.joints3d = sample.joints3d;
    if (sample.joints2d) {
        t.joints2d = normalize_pixels(*sample.joints2d, c.image_h, c.image_w);
        t.joints2d_visible = sample.joints2d_visible;
    }
    return t;
}

LossReport XFormerModel::loss(const PoseSample& sample, const ModelOutput& out) const {
    return total_loss(sample.type, out.branches, targets(sample), regressor_, config_.loss_options());
}

}  // namespace xf
