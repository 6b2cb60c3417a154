#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xformer/attention.hpp"
#include "xformer/keypoints.hpp"
#include "xformer/ops.hpp"
#include "xformer/params.hpp"
#include "xformer/template_mesh.hpp"

namespace xf {

/// Five 3×3 stride-2 convolutions with relu.
struct BackboneParams {
    std::vector<Tensor> weights;  // C_out × C_in × 3 × 3
    std::vector<Tensor> biases;

    std::size_t channels(std::size_t stage) const { return weights[stage].dim(0); }

    static BackboneParams create(ParameterStore& store, const std::string& name,
                                 const std::vector<std::size_t>& channels, Initializer& init);
};

struct BackboneFeatures {
    Tensor s4, s8, s16, s32;  // C × H/stride × W/stride
    Tensor global;            // 1 × C_32, spatial mean of s32
};

/// Converts an H×W×3 image to the 3×H×W layout the convolutions use.
Tensor image_to_chw(const Tensor& image);

/// `image` is H×W×3 with H and W divisible by 32.
BackboneFeatures backbone_forward(const Tensor& image, const BackboneParams& params,
                                  ConvAlgo algo = ConvAlgo::im2col);

/// Number of backbone_forward calls on this process (instrumentation).
std::uint64_t backbone_invocations();

struct KeypointDecoderParams {
    Tensor up1_w, up1_b, skip16_w, skip16_b;
    Tensor up2_w, up2_b, skip8_w, skip8_b;
    Tensor up3_w, up3_b;
    Tensor head_w, head_b;  // 1×1 conv → 3K channels

    std::size_t keypoints() const { return head_w.dim(0) / 3; }

    static KeypointDecoderParams create(ParameterStore& store, const std::string& name,
                                        const BackboneParams& backbone, std::size_t keypoints, Initializer& init);
};

/// Three ×2 transposed convolutions from stride 32 to stride 4, with 1×1-projected
/// stride-16 and stride-8 features added after the first and second upsample.
HeatmapSet keypoint_decoder(const BackboneFeatures& feats, const KeypointDecoderParams& params,
                            ConvAlgo algo = ConvAlgo::im2col);

struct ImageTokenParams {
    Linear template_proj;  // 3 + C_32 → d_model
    Linear grid_proj;      // C_16 + 2 → d_model

    static ImageTokenParams create(ParameterStore& store, const std::string& name, const BackboneParams& backbone,
                                   std::size_t d_model, Initializer& init);
};

/// [template vertex tokens, template joint tokens, stride-16 grid tokens].
TokenSequence assemble_img_tokens(const BackboneFeatures& feats, const TemplateMesh& mesh,
                                  const ImageTokenParams& params, std::size_t image_h, std::size_t image_w);

}  // namespace xf
