#include "xformer/attention.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "xformer/ops.hpp"

namespace xf {

const char* token_role_name(TokenRole role) {
    switch (role) {
        case TokenRole::vertex: return "vertex";
        case TokenRole::joint: return "joint";
        case TokenRole::keypoint: return "keypoint";
        case TokenRole::grid: return "grid";
        case TokenRole::global: return "global";
    }
    return "unknown";
}

AttentionParams AttentionParams::create(ParameterStore& store, const std::string& name,
                                        std::size_t d_model, std::size_t heads, Initializer& init) {
    if (heads == 0 || d_model % heads != 0)
        throw ContractError(name + ": d_model " + std::to_string(d_model) + " not divisible by " +
                            std::to_string(heads) + " heads");
    AttentionParams p;
    p.d_model = d_model;
    p.heads = heads;
    p.query = Linear::create(store, name + ".query", d_model, d_model, init);
    p.key = Linear::create(store, name + ".key", d_model, d_model, init);
    p.value = Linear::create(store, name + ".value", d_model, d_model, init);
    p.output = Linear::create(store, name + ".output", d_model, d_model, init);
    return p;
}

AttentionResult multi_head_attention(const Tensor& queries, const AttentionParams& query_side,
                                     const Tensor& keys_values, const AttentionParams& kv_side) {
    const std::size_t d = query_side.d_model;
    if (queries.rank() != 2 || queries.dim(1) != d)
        throw DimensionError("attention: query tokens " + shape_str(queries.shape()) +
                             " do not match d_model " + std::to_string(d));
    if (keys_values.rank() != 2 || keys_values.dim(1) != kv_side.d_model || kv_side.d_model != d ||
        kv_side.heads != query_side.heads)
        throw DimensionError("attention: key/value tokens " + shape_str(keys_values.shape()) +
                             " incompatible with query side d_model " + std::to_string(d));
    const std::size_t heads = query_side.heads, dh = query_side.d_head();
    const std::size_t tq = queries.dim(0), tk = keys_values.dim(0);
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = query_side.query(queries);
    Tensor k = kv_side.key(keys_values);
    Tensor v = kv_side.value(keys_values);

    std::vector<Tensor> head_out;
    std::vector<double> avg(tq * tk, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
        Tensor kh = heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
        Tensor vh = heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
        Tensor probs = softmax(scale(matmul(qh, transpose(kh)), inv_scale), 1);
        auto pd = probs.data();
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += pd[i];
        head_out.push_back(matmul(probs, vh));
    }
    for (auto& a : avg) a /= static_cast<double>(heads);
    Tensor merged = heads == 1 ? head_out.front() : concat(head_out, 1);
    return {query_side.output(merged), Tensor::from({tq, tk}, std::move(avg))};
}

EncoderLayer EncoderLayer::create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                  std::size_t heads, Initializer& init) {
    EncoderLayer l;
    l.attention = AttentionParams::create(store, name + ".attn", d_model, heads, init);
    l.norm1 = LayerNormParams::create(store, name + ".norm1", d_model);
    l.ff1 = Linear::create(store, name + ".ff1", d_model, 2 * d_model, init);
    l.ff2 = Linear::create(store, name + ".ff2", 2 * d_model, d_model, init);
    l.norm2 = LayerNormParams::create(store, name + ".norm2", d_model);
    return l;
}

TokenSequence self_attention_encoder(const TokenSequence& tokens, const EncoderLayer& layer) {
    if (tokens.features.rank() != 2 || tokens.features.dim(1) != layer.attention.d_model)
        throw DimensionError("encoder: tokens " + shape_str(tokens.features.shape()) +
                             " do not match d_model " + std::to_string(layer.attention.d_model));
    auto attn = multi_head_attention(tokens.features, layer.attention, tokens.features, layer.attention);
    Tensor h = layer.norm1(add(attn.output, tokens.features));
    Tensor ff = layer.ff2(gelu(layer.ff1(h)));
    return {layer.norm2(add(ff, h)), tokens.roles};
}

Tensor ModalitySwitch::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

ModalitySwitch ModalitySwitch::create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                      Initializer& init) {
    return {Linear::create(store, name + ".fc1", d_model, d_model, init),
            Linear::create(store, name + ".fc2", d_model, d_model, init)};
}

CrossModalParams CrossModalParams::create(ParameterStore& store, const std::string& name,
                                          std::size_t d_model, std::size_t heads, Initializer& init) {
    CrossModalParams p;
    p.image = AttentionParams::create(store, name + ".image", d_model, heads, init);
    p.keypoint = AttentionParams::create(store, name + ".keypoint", d_model, heads, init);
    p.modality_switch = ModalitySwitch::create(store, name + ".switch", d_model, init);
    p.norm_image = LayerNormParams::create(store, name + ".norm_image", d_model);
    p.norm_keypoint = LayerNormParams::create(store, name + ".norm_keypoint", d_model);
    return p;
}

const TokenSequence& CrossModalOutput::image_features() const {
    if (!image_att) throw ContractError("cross-modal output has no image branch: image modality was absent");
    return *image_att;
}

CrossModalOutput cross_modal_attention(const std::optional<TokenSequence>& image,
                                       const TokenSequence& keypoint, const CrossModalParams& params,
                                       const CrossModalOptions& options) {
    const std::size_t d = params.keypoint.d_model;
    if (keypoint.features.rank() != 2 || keypoint.features.dim(1) != d)
        throw DimensionError("cross-modal attention: keypoint tokens " +
                             shape_str(keypoint.features.shape()) + " do not match d_model " +
                             std::to_string(d));
    CrossModalOutput out;
    if (options.mlp_override) {
        out.keypoint_mlp = *options.mlp_override;
    } else if (options.use_mlp) {
        out.keypoint_mlp = params.modality_switch(keypoint.features);
    }

    if (image) {
        if (image->features.rank() != 2 || image->features.dim(1) != d)
            throw DimensionError("cross-modal attention: image tokens " +
                                 shape_str(image->features.shape()) + " do not match d_model " +
                                 std::to_string(d));
        auto img_mha = multi_head_attention(image->features, params.image, keypoint.features, params.keypoint);
        auto kp_mha = multi_head_attention(keypoint.features, params.keypoint, image->features, params.image);
        out.image_att = TokenSequence{params.norm_image(add(img_mha.output, image->features)), image->roles};
        out.keypoint_att = TokenSequence{params.norm_keypoint(add(kp_mha.output, keypoint.features)),
                                         keypoint.roles};
        out.keypoint_mha = kp_mha.output;
        out.attn_image_over_keypoint = img_mha.head_weights;
        out.attn_keypoint_over_image = kp_mha.head_weights;
    } else {
        Tensor switched = out.keypoint_mlp ? add(*out.keypoint_mlp, keypoint.features) : keypoint.features;
        out.keypoint_att = TokenSequence{params.norm_keypoint(switched), keypoint.roles};
    }
    return out;
}

const char* fusion_mode_name(FusionMode mode) {
    switch (mode) {
        case FusionMode::cross_attention: return "cross_attention";
        case FusionMode::add: return "add";
        case FusionMode::concat: return "concat";
        case FusionMode::none: return "none";
    }
    return "unknown";
}

FusionMode parse_fusion_mode(const std::string& name) {
    for (auto m : {FusionMode::cross_attention, FusionMode::add, FusionMode::concat, FusionMode::none})
        if (name == fusion_mode_name(m)) return m;
    throw FormatError("unknown fusion mode '" + name + "'");
}

void BlockConfig::validate() const {
    if (repeats < 1) throw ContractError("block config: N_x must be at least 1");
}

XFormerBlockParams XFormerBlockParams::create(ParameterStore& store, const std::string& name,
                                              const BlockConfig& config, std::size_t d_model,
                                              std::size_t heads, bool image_branch, bool keypoint_branch,
                                              Initializer& init) {
    config.validate();
    XFormerBlockParams p;
    for (std::size_t i = 0; i < config.front; ++i) {
        if (image_branch)
            p.front_image.push_back(
                EncoderLayer::create(store, name + ".front" + std::to_string(i) + ".image", d_model, heads, init));
        if (keypoint_branch)
            p.front_keypoint.push_back(EncoderLayer::create(
                store, name + ".front" + std::to_string(i) + ".keypoint", d_model, heads, init));
    }
    for (std::size_t i = 0; i < config.cross; ++i) {
        const std::string cname = name + ".cross" + std::to_string(i);
        if (config.fusion == FusionMode::cross_attention) {
            p.cross.push_back(CrossModalParams::create(store, cname, d_model, heads, init));
        } else if (config.fusion == FusionMode::concat) {
            p.pooled.push_back({Linear::create(store, cname + ".image_proj", 2 * d_model, d_model, init),
                                Linear::create(store, cname + ".keypoint_proj", 2 * d_model, d_model, init)});
        }
    }
    for (std::size_t i = 0; i < config.back; ++i) {
        if (image_branch)
            p.back_image.push_back(
                EncoderLayer::create(store, name + ".back" + std::to_string(i) + ".image", d_model, heads, init));
        if (keypoint_branch)
            p.back_keypoint.push_back(EncoderLayer::create(
                store, name + ".back" + std::to_string(i) + ".keypoint", d_model, heads, init));
    }
    return p;
}

namespace {

void self_attend(std::optional<TokenSequence>& seq, const std::vector<EncoderLayer>& layers, std::size_t i) {
    if (!seq) return;
    if (i >= layers.size()) throw ContractError("xformer block: missing self-attention parameters");
    seq = self_attention_encoder(*seq, layers[i]);
}

TokenSequence pooled_fusion(const TokenSequence& target, const TokenSequence& other, const Linear* proj) {
    Tensor pooled = mean(other.features, 0);
    if (!proj) return {add(target.features, pooled), target.roles};
    Tensor joined = concat({target.features, repeat_rows(pooled, target.size())}, 1);
    return {(*proj)(joined), target.roles};
}

}  // namespace

BlockOutput xformer_block(const std::optional<TokenSequence>& image,
                          const std::optional<TokenSequence>& keypoint, const BlockConfig& config,
                          const XFormerBlockParams& params, const CrossModalOptions& options) {
    config.validate();
    BlockOutput out{image, keypoint, {}, {}};
    for (std::size_t i = 0; i < config.front; ++i) {
        self_attend(out.image, params.front_image, i);
        self_attend(out.keypoint, params.front_keypoint, i);
    }
    for (std::size_t i = 0; i < config.cross; ++i) {
        switch (config.fusion) {
            case FusionMode::cross_attention: {
                if (!out.keypoint) throw ContractError("cross-modal attention requires the keypoint branch");
                if (i >= params.cross.size()) throw ContractError("xformer block: missing cross-modal parameters");
                auto res = cross_modal_attention(out.image, *out.keypoint, params.cross[i], options);
                if (out.image) out.image = *res.image_att;
                out.keypoint = res.keypoint_att;
                if (res.keypoint_mha && res.keypoint_mlp)
                    out.consistency.push_back({*res.keypoint_mha, *res.keypoint_mlp});
                out.cross_outputs.push_back(std::move(res));
                break;
            }
            case FusionMode::add:
            case FusionMode::concat: {
                if (!out.image || !out.keypoint)
                    throw ContractError(std::string(fusion_mode_name(config.fusion)) +
                                        " fusion requires both modalities");
                const bool cat = config.fusion == FusionMode::concat;
                if (cat && i >= params.pooled.size())
                    throw ContractError("xformer block: missing concat fusion parameters");
                auto img = pooled_fusion(*out.image, *out.keypoint, cat ? &params.pooled[i].image_proj : nullptr);
                auto kp = pooled_fusion(*out.keypoint, *out.image, cat ? &params.pooled[i].keypoint_proj : nullptr);
                out.image = std::move(img);
                out.keypoint = std::move(kp);
                break;
            }
            case FusionMode::none: break;
        }
    }
    for (std::size_t i = 0; i < config.back; ++i) {
        self_attend(out.image, params.back_image, i);
        self_attend(out.keypoint, params.back_keypoint, i);
    }
    return out;
}

std::string attention_csv(const Tensor& weights, const std::vector<TokenRole>& query_roles,
                          const std::vector<TokenRole>& key_roles) {
    if (weights.rank() != 2 || weights.dim(0) != query_roles.size() || weights.dim(1) != key_roles.size())
        throw DimensionError("attention_csv: matrix " + shape_str(weights.shape()) +
                             " does not match role counts");
    std::ostringstream os;
    os << "query";
    for (std::size_t j = 0; j < key_roles.size(); ++j) os << ',' << token_role_name(key_roles[j]) << ':' << j;
    os << '\n';
    char buf[40];
    for (std::size_t i = 0; i < query_roles.size(); ++i) {
        os << token_role_name(query_roles[i]) << ':' << i;
        for (std::size_t j = 0; j < key_roles.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", weights.at(i, j));
            os << ',' << buf;
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace xf
