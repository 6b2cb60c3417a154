#include "xformer/image.hpp"

#include <atomic>

namespace xf {

namespace {

std::atomic<std::uint64_t> g_backbone_calls{0};

Tensor conv_weight(Initializer& init, std::size_t out, std::size_t in, std::size_t k) {
    return init.xavier({out, in, k, k}, in * k * k, out * k * k);
}

// Spatial mean of a C×H×W map as a 1×C row.
Tensor spatial_mean(const Tensor& map) {
    const std::size_t c = map.dim(0);
    return reshape(mean(reshape(map, {c, map.dim(1) * map.dim(2)}), 1), {1, c});
}

}  // namespace

BackboneParams BackboneParams::create(ParameterStore& store, const std::string& name,
                                      const std::vector<std::size_t>& channels, Initializer& init) {
    if (channels.size() != 5) throw ContractError("backbone needs exactly five stage widths");
    BackboneParams p;
    std::size_t in = 3;
    for (std::size_t s = 0; s < channels.size(); ++s) {
        const std::string stage = name + ".stage" + std::to_string(s);
        p.weights.push_back(store.add(stage + ".weight", conv_weight(init, channels[s], in, 3)));
        p.biases.push_back(store.add(stage + ".bias", Tensor::zeros({channels[s]})));
        in = channels[s];
    }
    return p;
}

Tensor image_to_chw(const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw DimensionError("image must be H×W×3, got " + shape_str(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1);
    return reshape(transpose(reshape(image, {h * w, 3})), {3, h, w});
}

BackboneFeatures backbone_forward(const Tensor& image, const BackboneParams& params, ConvAlgo algo) {
    if (image.rank() != 3 || image.dim(0) % 32 != 0 || image.dim(1) % 32 != 0 || image.dim(0) == 0 ||
        image.dim(1) == 0)
        throw DimensionError("backbone: image " + shape_str(image.shape()) + " must be H×W×3 with H, W divisible by 32");
    ++g_backbone_calls;
    Tensor x = image_to_chw(image);
    std::vector<Tensor> stages;
    for (std::size_t s = 0; s < params.weights.size(); ++s) {
        x = relu(conv2d(x, params.weights[s], params.biases[s], {2, 1}, algo));
        stages.push_back(x);
    }
    return {stages[1], stages[2], stages[3], stages[4], spatial_mean(stages[4])};
}

std::uint64_t backbone_invocations() { return g_backbone_calls.load(); }

KeypointDecoderParams KeypointDecoderParams::create(ParameterStore& store, const std::string& name,
                                                    const BackboneParams& backbone, std::size_t keypoints,
                                                    Initializer& init) {
    const std::size_t c8 = backbone.channels(2), c16 = backbone.channels(3), c32 = backbone.channels(4);
    KeypointDecoderParams p;
    auto add = [&](const std::string& n, Tensor t) { return store.add(name + "." + n, std::move(t)); };
    p.up1_w = add("up1.weight", init.xavier({c32, c16, 2, 2}, c32 * 4, c16 * 4));
    p.up1_b = add("up1.bias", Tensor::zeros({c16}));
    p.skip16_w = add("skip16.weight", conv_weight(init, c16, c16, 1));
    p.skip16_b = add("skip16.bias", Tensor::zeros({c16}));
    p.up2_w = add("up2.weight", init.xavier({c16, c8, 2, 2}, c16 * 4, c8 * 4));
    p.up2_b = add("up2.bias", Tensor::zeros({c8}));
    p.skip8_w = add("skip8.weight", conv_weight(init, c8, c8, 1));
    p.skip8_b = add("skip8.bias", Tensor::zeros({c8}));
    p.up3_w = add("up3.weight", init.xavier({c8, c8, 2, 2}, c8 * 4, c8 * 4));
    p.up3_b = add("up3.bias", Tensor::zeros({c8}));
    p.head_w = add("head.weight", conv_weight(init, 3 * keypoints, c8, 1));
    p.head_b = add("head.bias", Tensor::zeros({3 * keypoints}));
    return p;
}

HeatmapSet keypoint_decoder(const BackboneFeatures& feats, const KeypointDecoderParams& p, ConvAlgo algo) {
    const Conv2dGeometry up{2, 0}, pointwise{1, 0};
    Tensor x = conv_transpose2d(feats.s32, p.up1_w, p.up1_b, up, algo);
    if (x.shape() != feats.s16.shape())
        throw DimensionError("keypoint decoder: upsampled " + shape_str(x.shape()) + " vs skip " +
                             shape_str(feats.s16.shape()));
    x = relu(add(x, conv2d(feats.s16, p.skip16_w, p.skip16_b, pointwise, algo)));
    x = conv_transpose2d(x, p.up2_w, p.up2_b, up, algo);
    x = relu(add(x, conv2d(feats.s8, p.skip8_w, p.skip8_b, pointwise, algo)));
    x = relu(conv_transpose2d(x, p.up3_w, p.up3_b, up, algo));
    Tensor head = conv2d(x, p.head_w, p.head_b, pointwise, algo);
    const std::size_t k = p.keypoints(), h = head.dim(1), w = head.dim(2);
    Tensor heat = sigmoid(slice(head, 0, 0, k));
    Tensor off = reshape(scale(tanh(slice(head, 0, k, 3 * k)), 2.0), {k, 2, h, w});
    return {heat, off};
}

ImageTokenParams ImageTokenParams::create(ParameterStore& store, const std::string& name,
                                          const BackboneParams& backbone, std::size_t d_model, Initializer& init) {
    return {Linear::create(store, name + ".template_proj", 3 + backbone.channels(4), d_model, init),
            Linear::create(store, name + ".grid_proj", backbone.channels(3) + 2, d_model, init)};
}

TokenSequence assemble_img_tokens(const BackboneFeatures& feats, const TemplateMesh& mesh,
                                  const ImageTokenParams& params, std::size_t image_h, std::size_t image_w) {
    const std::size_t c16 = feats.s16.dim(0), gh = feats.s16.dim(1), gw = feats.s16.dim(2);
    if (gh * 16 != image_h || gw * 16 != image_w)
        throw DimensionError("assemble_img_tokens: stride-16 map " + shape_str(feats.s16.shape()) +
                             " does not match image " + std::to_string(image_h) + "x" + std::to_string(image_w));
    if (c16 + 2 != params.grid_proj.in_dim() || feats.global.dim(1) + 3 != params.template_proj.in_dim())
        throw DimensionError("assemble_img_tokens: feature widths do not match token projections");
    const std::size_t mc = mesh.coarse_count(), kj = mesh.joint_count();

    Tensor xyz = concat({mesh.vertices, mesh.joints}, 0);
    Tensor tmpl = params.template_proj(concat({xyz, repeat_rows(feats.global, mc + kj)}, 1));

    std::vector<double> centers(gh * gw * 2);
    for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x) {
            centers[(y * gw + x) * 2] = (static_cast<double>(x) + 0.5) * 16.0 / (static_cast<double>(image_w) / 2.0) - 1.0;
            centers[(y * gw + x) * 2 + 1] = (static_cast<double>(y) + 0.5) * 16.0 / (static_cast<double>(image_h) / 2.0) - 1.0;
        }
    Tensor cells = transpose(reshape(feats.s16, {c16, gh * gw}));
    Tensor grid = params.grid_proj(concat({cells, Tensor::from({gh * gw, 2}, std::move(centers))}, 1));

    std::vector<TokenRole> roles(mc, TokenRole::vertex);
    roles.insert(roles.end(), kj, TokenRole::joint);
    roles.insert(roles.end(), gh * gw, TokenRole::grid);
    return {concat({tmpl, grid}, 0), std::move(roles)};
}

}  // namespace xf
