#include "doctest.h"

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/helpers.hpp"
#include "xformer/image.hpp"
#include "xformer/ops.hpp"

using namespace xf;
using namespace xf::testing;

namespace {

const std::vector<std::size_t> kToyChannels{8, 16, 32, 64, 128};

void zero_biases(ParameterStore& store) {
    for (auto& [name, t] : store.entries())
        if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0)
            for (auto& v : const_cast<Tensor&>(t).data()) v = 0.0;
}

TemplateMesh small_mesh(std::mt19937_64& rng) {
    TemplateMesh m;
    m.vertices = random_tensor({6, 3}, rng);
    m.joints = random_tensor({4, 3}, rng);
    m.full_vertices = 6;
    return m;
}

}  // namespace

TEST_CASE("backbone stage extents and global feature") {
    ParameterStore store;
    Initializer init(1);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    std::mt19937_64 rng(1);
    const auto f = backbone_forward(random_tensor({128, 128, 3}, rng, 0.0, 1.0), bb);
    CHECK(f.s4.shape() == Shape{16, 32, 32});
    CHECK(f.s8.shape() == Shape{32, 16, 16});
    CHECK(f.s16.shape() == Shape{64, 8, 8});
    CHECK(f.s32.shape() == Shape{128, 4, 4});
    CHECK(f.global.shape() == Shape{1, 128});
    for (std::size_t c = 0; c < 128; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < 16; ++i) s += f.s32.data()[c * 16 + i];
        CHECK(f.global.at(0, c) == doctest::Approx(s / 16.0).epsilon(1e-14));
    }
    CHECK_THROWS_AS(backbone_forward(Tensor::zeros({100, 128, 3}), bb), DimensionError);
    CHECK_THROWS_AS(backbone_forward(Tensor::zeros({128, 128, 1}), bb), DimensionError);
}

TEST_CASE("zero image with zero biases gives zero features") {
    ParameterStore store;
    Initializer init(2);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    zero_biases(store);
    const auto f = backbone_forward(Tensor::zeros({64, 64, 3}), bb);
    for (const auto* t : {&f.s4, &f.s8, &f.s16, &f.s32, &f.global})
        for (double v : t->data()) CHECK(v == 0.0);
}

TEST_CASE("image_to_chw transposes channels to the front") {
    std::mt19937_64 rng(3);
    const auto img = random_tensor({4, 5, 3}, rng);
    const auto chw = image_to_chw(img);
    CHECK(chw.shape() == Shape{3, 4, 5});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 5; ++x)
            for (std::size_t c = 0; c < 3; ++c) CHECK(chw.data()[(c * 4 + y) * 5 + x] == img.data()[(y * 5 + x) * 3 + c]);
}

TEST_CASE("backbone calls are counted") {
    ParameterStore store;
    Initializer init(4);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    const auto before = backbone_invocations();
    backbone_forward(Tensor::zeros({32, 32, 3}), bb);
    backbone_forward(Tensor::zeros({32, 32, 3}), bb);
    CHECK(backbone_invocations() == before + 2);
}

TEST_CASE("keypoint decoder output geometry and ranges") {
    ParameterStore store;
    Initializer init(5);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    const auto dec = KeypointDecoderParams::create(store, "dec", bb, 17, init);
    std::mt19937_64 rng(5);
    randomize(store, rng, 2.0);
    const auto f = backbone_forward(random_tensor({128, 128, 3}, rng, 0.0, 1.0), bb);
    const auto maps = keypoint_decoder(f, dec);
    CHECK(maps.heatmaps.shape() == Shape{17, 32, 32});
    CHECK(maps.offsets.shape() == Shape{17, 2, 32, 32});
    CHECK_NOTHROW(maps.validate(128, 128));
    for (double v : maps.offsets.data()) REQUIRE(std::abs(v) <= 2.0);
    for (double v : maps.heatmaps.data()) REQUIRE((v >= 0.0 && v <= 1.0));

    const auto f2 = backbone_forward(random_tensor({64, 96, 3}, rng, 0.0, 1.0), bb);
    const auto maps2 = keypoint_decoder(f2, dec);
    CHECK(maps2.heatmaps.shape() == Shape{17, 16, 24});
}

TEST_CASE("zero decoder weights give 0.5 heatmaps and zero offsets") {
    ParameterStore store;
    Initializer init(6);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    const auto dec = KeypointDecoderParams::create(store, "dec", bb, 3, init);
    for (auto& [name, t] : store.entries())
        if (has_prefix(name, "dec.")) for (auto& v : const_cast<Tensor&>(t).data()) v = 0.0;
    std::mt19937_64 rng(6);
    const auto maps = keypoint_decoder(backbone_forward(random_tensor({64, 64, 3}, rng, 0.0, 1.0), bb), dec);
    for (double v : maps.heatmaps.data()) CHECK(v == 0.5);
    for (double v : maps.offsets.data()) CHECK(v == 0.0);
}

TEST_CASE("image tokens: count, roles, grid-cell coordinates") {
    std::mt19937_64 rng(7);
    const auto mesh = small_mesh(rng);
    ParameterStore store;
    Initializer init(7);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    const auto tp = ImageTokenParams::create(store, "tok", bb, 16, init);
    const auto f = backbone_forward(random_tensor({128, 128, 3}, rng, 0.0, 1.0), bb);
    const auto seq = assemble_img_tokens(f, mesh, tp, 128, 128);
    CHECK(seq.size() == 6 + 4 + 64);
    CHECK(seq.features.shape() == Shape{74, 16});
    CHECK(seq.roles[0] == TokenRole::vertex);
    CHECK(seq.roles[6] == TokenRole::joint);
    CHECK(seq.roles[10] == TokenRole::grid);

    // Grid token (row 2, col 5) = grid_proj(s16[:, 2, 5] ⊕ cell centre).
    const std::size_t y = 2, x = 5, idx = 10 + y * 8 + x;
    std::vector<double> in;
    for (std::size_t c = 0; c < 64; ++c) in.push_back(f.s16.data()[(c * 8 + y) * 8 + x]);
    in.push_back((x + 0.5) * 16.0 / 64.0 - 1.0);
    in.push_back((y + 0.5) * 16.0 / 64.0 - 1.0);
    for (std::size_t o = 0; o < 16; ++o) {
        double s = tp.grid_proj.bias.at(o);
        for (std::size_t k = 0; k < in.size(); ++k) s += in[k] * tp.grid_proj.weight.at(k, o);
        CHECK(std::abs(seq.features.at(idx, o) - s) < 1e-12);
    }

    const auto f2 = backbone_forward(random_tensor({64, 96, 3}, rng, 0.0, 1.0), bb);
    CHECK(assemble_img_tokens(f2, mesh, tp, 64, 96).size() == 10 + 4 * 6);
    CHECK_THROWS_AS(assemble_img_tokens(f2, mesh, tp, 128, 128), DimensionError);
}

TEST_CASE("grid tokens only see their receptive field") {
    std::mt19937_64 rng(8);
    const auto mesh = small_mesh(rng);
    ParameterStore store;
    Initializer init(8);
    const auto bb = BackboneParams::create(store, "bb", kToyChannels, init);
    const auto tp = ImageTokenParams::create(store, "tok", bb, 16, init);
    randomize(store, rng);
    auto a = random_tensor({128, 128, 3}, rng, 0.0, 1.0);
    auto b = a.detach();
    // Stride-16 cell (0, 0) sees input pixels below 31 on both axes; change pixels far outside.
    for (std::size_t y = 64; y < 128; ++y)
        for (std::size_t x = 0; x < 128; ++x)
            for (std::size_t c = 0; c < 3; ++c) b.data()[(y * 128 + x) * 3 + c] = 1.0 - b.data()[(y * 128 + x) * 3 + c];
    const auto ta = assemble_img_tokens(backbone_forward(a, bb), mesh, tp, 128, 128);
    const auto tb = assemble_img_tokens(backbone_forward(b, bb), mesh, tp, 128, 128);
    const std::size_t first_grid = 10;
    bool same = true, any_diff = false;
    for (std::size_t o = 0; o < 16; ++o) {
        same = same && ta.features.at(first_grid, o) == tb.features.at(first_grid, o);
        any_diff = any_diff || ta.features.at(first_grid + 63, o) != tb.features.at(first_grid + 63, o);
    }
    CHECK(same);
    CHECK(any_diff);
}

TEST_CASE("gradient check: backbone, decoder and image tokens") {
    std::mt19937_64 rng(9);
    const auto mesh = small_mesh(rng);
    const std::vector<std::size_t> tiny{2, 3, 4, 4, 5};
    for (int trial = 0; trial < 10; ++trial) {
        ParameterStore store;
        Initializer init(200 + trial);
        const auto bb = BackboneParams::create(store, "bb", tiny, init);
        const auto dec = KeypointDecoderParams::create(store, "dec", bb, 2, init);
        const auto tp = ImageTokenParams::create(store, "tok", bb, 4, init);
        randomize(store, rng);
        const auto image = random_tensor({32, 32, 3}, rng, 0.0, 1.0);
        std::vector<Tensor> inputs{image};
        for (const auto& [n, t] : store.entries()) inputs.push_back(t);
        const auto wh = random_tensor({2, 8, 8}, rng), wo = random_tensor({2, 2, 8, 8}, rng);
        const auto wt = random_tensor({6 + 4 + 4, 4}, rng);
        const auto r = grad_check(
            [&](const std::vector<Tensor>& in) {
                const auto f = backbone_forward(in[0], bb);
                const auto maps = keypoint_decoder(f, dec);
                const auto seq = assemble_img_tokens(f, mesh, tp, 32, 32);
                return add(add(sum(mul(maps.heatmaps, wh)), sum(mul(maps.offsets, wo))), sum(mul(seq.features, wt)));
            },
            inputs, 1e-5, 8, static_cast<unsigned>(trial));
        CHECK(r.rel_error < 1e-4);
    }
}
