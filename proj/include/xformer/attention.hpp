#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xformer/params.hpp"
#include "xformer/tensor.hpp"

namespace xf {

enum class TokenRole : std::uint8_t { vertex, joint, keypoint, grid, global };

const char* token_role_name(TokenRole role);

/// T×D feature matrix with one role label per token.
struct TokenSequence {
    Tensor features;
    std::vector<TokenRole> roles;

    std::size_t size() const { return roles.size(); }
    std::size_t dim() const { return features.dim(1); }
};

/// Q/K/V/output projections of one modality. d_head = d_model / heads is the
/// attention scaling denominator.
struct AttentionParams {
    Linear query, key, value, output;
    std::size_t d_model = 0;
    std::size_t heads = 1;

    std::size_t d_head() const { return d_model / heads; }

    static AttentionParams create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                  std::size_t heads, Initializer& init);
};

struct AttentionResult {
    Tensor output;         // T_q × D, after the output projection
    Tensor head_weights;   // T_q × T_kv, head-averaged softmax rows (no gradient)
};

/// Multi-head attention with queries projected by `query_side` and keys/values
/// by `kv_side`; the output projection belongs to the query side.
AttentionResult multi_head_attention(const Tensor& queries, const AttentionParams& query_side,
                                     const Tensor& keys_values, const AttentionParams& kv_side);

/// Post-norm transformer encoder layer: MHA + Add&Norm, then a GELU feed-forward
/// (hidden = 2·d_model) + Add&Norm.
struct EncoderLayer {
    AttentionParams attention;
    LayerNormParams norm1, norm2;
    Linear ff1, ff2;

    static EncoderLayer create(ParameterStore& store, const std::string& name, std::size_t d_model,
                               std::size_t heads, Initializer& init);
};

TokenSequence self_attention_encoder(const TokenSequence& tokens, const EncoderLayer& layer);

/// affine → gelu → affine, all at d_model width.
struct ModalitySwitch {
    Linear fc1, fc2;

    Tensor operator()(const Tensor& x) const;

    static ModalitySwitch create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                 Initializer& init);
};

struct CrossModalParams {
    AttentionParams image, keypoint;
    ModalitySwitch modality_switch;
    LayerNormParams norm_image, norm_keypoint;

    static CrossModalParams create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                   std::size_t heads, Initializer& init);
};

struct CrossModalOptions {
    /// false removes the switch MLP: the image-free path becomes LN(F_kp).
    bool use_mlp = true;
    /// Replaces the switch MLP output (path-consistency checks).
    std::optional<Tensor> mlp_override;
};

struct CrossModalOutput {
    std::optional<TokenSequence> image_att;
    TokenSequence keypoint_att;
    std::optional<Tensor> keypoint_mha;
    std::optional<Tensor> keypoint_mlp;
    std::optional<Tensor> attn_image_over_keypoint;  // T_img × T_kp
    std::optional<Tensor> attn_keypoint_over_image;  // T_kp × T_img

    /// Throws ContractError when the image modality was absent.
    const TokenSequence& image_features() const;
};

/// Key-value exchange between the two modalities with the modality switch.
///
/// With an image sequence: F_img^att = LN(F_img^MHA + F_img) and
/// F_kp^att = LN(F_kp^MHA + F_kp), where each side queries the other's keys and
/// values. Without one: F_kp^att = LN(MLP(F_kp) + F_kp).
CrossModalOutput cross_modal_attention(const std::optional<TokenSequence>& image,
                                       const TokenSequence& keypoint, const CrossModalParams& params,
                                       const CrossModalOptions& options = {});

enum class FusionMode { cross_attention, add, concat, none };

const char* fusion_mode_name(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& name);

struct BlockConfig {
    std::size_t front = 0;   // N_f
    std::size_t cross = 1;   // N_c
    std::size_t back = 0;    // N_b
    std::size_t repeats = 1; // N_x
    FusionMode fusion = FusionMode::cross_attention;

    void validate() const;

    static BlockConfig ours_small() { return {0, 1, 0, 1, FusionMode::cross_attention}; }
    static BlockConfig ours_large() { return {1, 1, 2, 3, FusionMode::cross_attention}; }
};

/// Pooled-feature fusion used by the add/concat baselines.
struct PooledFusionParams {
    Linear image_proj, keypoint_proj;  // concat only: 2·D → D
};

struct XFormerBlockParams {
    std::vector<EncoderLayer> front_image, front_keypoint;
    std::vector<CrossModalParams> cross;
    std::vector<PooledFusionParams> pooled;
    std::vector<EncoderLayer> back_image, back_keypoint;

    static XFormerBlockParams create(ParameterStore& store, const std::string& name,
                                     const BlockConfig& config, std::size_t d_model, std::size_t heads,
                                     bool image_branch, bool keypoint_branch, Initializer& init);
};

struct ConsistencyPair {
    Tensor mha;
    Tensor mlp;
};

struct BlockOutput {
    std::optional<TokenSequence> image;
    std::optional<TokenSequence> keypoint;
    std::vector<ConsistencyPair> consistency;
    std::vector<CrossModalOutput> cross_outputs;
};

/// N_f self-attention layers per branch, N_c fusion modules, N_b self-attention
/// layers per branch, in that order.
BlockOutput xformer_block(const std::optional<TokenSequence>& image,
                          const std::optional<TokenSequence>& keypoint, const BlockConfig& config,
                          const XFormerBlockParams& params, const CrossModalOptions& options = {});

/// Row-major CSV of an attention matrix with role-labelled header and rows.
std::string attention_csv(const Tensor& weights, const std::vector<TokenRole>& query_roles,
                          const std::vector<TokenRole>& key_roles);

}  // namespace xf
