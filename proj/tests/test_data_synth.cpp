#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "support/helpers.hpp"
#include "xformer/mesh_head.hpp"
#include "xformer/sample.hpp"

using namespace xf;
using namespace xf::testing;

namespace {

const BodyModel& body() {
    static const BodyModel b = BodyModel::create(128);
    return b;
}

SynthesisContext context() {
    SynthesisContext ctx;
    ctx.body = &body();
    ctx.frame = OrthoFrame::for_image(128, 128);
    return ctx;
}

// Rz(roll)·Rx(pitch)·Ry(yaw) written out independently of the library.
std::array<double, 9> oracle_rotation(double yaw, double pitch, double roll) {
    const double cy = std::cos(yaw), sy = std::sin(yaw), cp = std::cos(pitch), sp = std::sin(pitch);
    const double cr = std::cos(roll), sr = std::sin(roll);
    const double rz[9] = {cr, -sr, 0, sr, cr, 0, 0, 0, 1};
    const double rx[9] = {1, 0, 0, 0, cp, -sp, 0, sp, cp};
    const double ry[9] = {cy, 0, sy, 0, 1, 0, -sy, 0, cy};
    double t[9] = {}, out[9] = {};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) t[i * 3 + j] += rx[i * 3 + k] * ry[k * 3 + j];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) out[i * 3 + j] += rz[i * 3 + k] * t[k * 3 + j];
    std::array<double, 9> r{};
    std::copy(out, out + 9, r.begin());
    return r;
}

}  // namespace

TEST_CASE("zero articulation reproduces the rest body") {
    const auto pose = body().pose(Articulation{});
    CHECK(bitwise_equal(pose.vertices, body().rest_vertices()));
}

TEST_CASE("poses are deterministic and joints are regressed from vertices") {
    std::mt19937_64 a(7), b(7);
    const auto pa = body().pose(Articulation::random(a)), pb = body().pose(Articulation::random(b));
    CHECK(bitwise_equal(pa.vertices, pb.vertices));
    CHECK(bitwise_equal(pa.joints, pb.joints));

    const JointRegressor reg{body().joint_regressor()};
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
        const auto pose = body().pose(Articulation::random(rng));
        const auto j = regress_joints(pose.vertices, reg);
        CHECK(pose.joints.shape() == Shape{14, 3});
        CHECK(pose.keypoints.shape() == Shape{17, 3});
        for (std::size_t k = 0; k < j.numel(); ++k) CHECK(std::abs(j.data()[k] - pose.joints.data()[k]) < 1e-12);
    }
}

TEST_CASE("identity augmentation projects by dropping depth") {
    std::mt19937_64 rng(9);
    const auto pose = body().pose(Articulation::random(rng));
    const OrthoFrame unit{1.0, 0.0, 0.0};
    const auto s = mocap_to_sample(pose, AugmentDraw{}, unit, 128, 128);
    CHECK(s.type == DatasetType::mocap);
    CHECK_FALSE(s.image.has_value());
    for (std::size_t i = 0; i < 14; ++i) {
        CHECK(s.joints2d->at(i, 0) == pose.joints.at(i, 0));
        CHECK(s.joints2d->at(i, 1) == pose.joints.at(i, 1));
    }
    CHECK(bitwise_equal(*s.joints3d, pose.joints));
    CHECK(bitwise_equal(*s.vertices3d, pose.vertices));
}

TEST_CASE("90 degree yaw turns the x axis into depth") {
    AugmentDraw d;
    d.yaw = M_PI / 2.0;
    const auto px = project_points(Tensor::from({1, 3}, {1, 0, 0}), d, OrthoFrame{1.0, 0.0, 0.0});
    CHECK(std::abs(px[0][0]) < 1e-15);
    CHECK(std::abs(px[0][1]) < 1e-15);
}

TEST_CASE("shift adds exactly its offset to every keypoint") {
    std::mt19937_64 rng(10);
    const auto pose = body().pose(Articulation::random(rng));
    const auto frame = OrthoFrame::for_image(128, 128);
    AugmentDraw base;
    base.yaw = 0.3;
    base.roll = -0.2;
    auto shifted = base;
    shifted.shift_x = 20.0;
    shifted.shift_y = -20.0;
    const auto a = mocap_to_sample(pose, base, frame, 128, 128), b = mocap_to_sample(pose, shifted, frame, 128, 128);
    for (std::size_t i = 0; i < 17; ++i) {
        CHECK(std::abs(b.keypoints->coords[i][0] - a.keypoints->coords[i][0] - 20.0) < 1e-12);
        CHECK(std::abs(b.keypoints->coords[i][1] - a.keypoints->coords[i][1] + 20.0) < 1e-12);
    }
    for (std::size_t i = 0; i < 14; ++i) {
        CHECK(std::abs(b.joints2d->at(i, 0) - a.joints2d->at(i, 0) - 20.0) < 1e-12);
        CHECK(std::abs(b.joints2d->at(i, 1) - a.joints2d->at(i, 1) + 20.0) < 1e-12);
    }
    CHECK(bitwise_equal(*a.joints3d, *b.joints3d));
}

TEST_CASE("projection then augmentation is the closed-form affine map") {
    std::mt19937_64 rng(11);
    const auto pose = body().pose(Articulation::random(rng));
    const auto frame = OrthoFrame::for_image(96, 128);
    CHECK(frame.pixels_per_unit == doctest::Approx(0.35 * 96));
    const AugmentConfig cfg;
    for (int trial = 0; trial < 20; ++trial) {
        const auto d = AugmentDraw::sample(cfg, rng);
        const auto r = oracle_rotation(d.yaw, d.pitch, d.roll);
        const auto lib = d.rotation();
        for (int k = 0; k < 9; ++k) CHECK(std::abs(lib[k] - r[k]) < 1e-15);
        const auto s = mocap_to_sample(pose, d, frame, 96, 128);
        for (std::size_t i = 0; i < 14; ++i) {
            const double x = pose.joints.at(i, 0), y = pose.joints.at(i, 1), z = pose.joints.at(i, 2);
            const double rx = r[0] * x + r[1] * y + r[2] * z, ry = r[3] * x + r[4] * y + r[5] * z;
            const double u = frame.center_x + d.scale * (frame.pixels_per_unit * rx) + d.shift_x;
            const double v = frame.center_y + d.scale * (frame.pixels_per_unit * ry) + d.shift_y;
            CHECK(std::abs(s.joints2d->at(i, 0) - u) < 1e-9);
            CHECK(std::abs(s.joints2d->at(i, 1) - v) < 1e-9);
            CHECK(s.joints2d_visible[i] == (u >= 0 && v >= 0 && u < 128 && v < 96));
        }
    }
}

TEST_CASE("augmentation draws stay within their ranges") {
    const AugmentConfig cfg;
    CHECK(cfg.roll == 30.0);
    CHECK(cfg.pitch == 30.0);
    CHECK(cfg.yaw == 60.0);
    CHECK(cfg.shift == 20.0);
    CHECK(cfg.scale_min == 0.9);
    CHECK(cfg.scale_max == 1.1);
    std::mt19937_64 rng(12);
    const double deg = M_PI / 180.0;
    double max_yaw = 0.0;
    bool ok = true;
    for (int i = 0; i < 100000; ++i) {
        const auto d = AugmentDraw::sample(cfg, rng);
        ok = ok && std::abs(d.roll) <= 30 * deg && std::abs(d.pitch) <= 30 * deg && std::abs(d.yaw) <= 60 * deg;
        ok = ok && std::abs(d.shift_x) <= 20 && std::abs(d.shift_y) <= 20 && d.scale >= 0.9 && d.scale <= 1.1;
        max_yaw = std::max(max_yaw, std::abs(d.yaw));
    }
    CHECK(ok);
    CHECK(max_yaw > 59 * deg);
}

TEST_CASE("rendering: background, determinism and foreground placement") {
    std::mt19937_64 r1(13), r2(13);
    const auto empty = render_synthetic_image({}, {}, 32, 48, r1);
    CHECK(empty.shape() == Shape{32, 48, 3});
    for (double v : empty.data()) CHECK((v >= 0.0 && v < 0.2));
    CHECK(bitwise_equal(empty, render_synthetic_image({}, {}, 32, 48, r2)));
    CHECK_THROWS_AS(render_synthetic_image({{1.0, 1.0}}, {}, 8, 8, r1), DimensionError);

    std::mt19937_64 rng(14);
    const auto frame = OrthoFrame::for_image(128, 128);
    for (int trial = 0; trial < 10; ++trial) {
        const auto pose = body().pose(Articulation::random(rng));
        const auto px = project_points(pose.vertices, AugmentDraw::sample(AugmentConfig{}, rng), frame);
        const auto seed = rng();
        std::mt19937_64 ra(seed), rb(seed);
        const auto img = render_synthetic_image(px, body().vertex_parts(), 128, 128, ra);
        const auto bg = render_synthetic_image({}, {}, 128, 128, rb);
        double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
        for (const auto& p : px) {
            x0 = std::min(x0, p[0]);
            x1 = std::max(x1, p[0]);
            y0 = std::min(y0, p[1]);
            y1 = std::max(y1, p[1]);
        }
        double inside = 0.0, total = 0.0;
        for (std::size_t y = 0; y < 128; ++y)
            for (std::size_t x = 0; x < 128; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    const std::size_t i = (y * 128 + x) * 3 + c;
                    const double m = std::abs(img.data()[i] - bg.data()[i]);
                    total += m;
                    if (x >= x0 && x <= x1 && y >= y0 && y <= y1) inside += m;
                }
        CHECK(total > 0.0);
        CHECK(inside / total >= 0.9);
    }
}

TEST_CASE("synthesized samples are deterministic and obey type invariants") {
    const auto ctx = context();
    for (auto type : kDatasetTypes) {
        const auto a = synthesize_sample(ctx, type, 5, 17), b = synthesize_sample(ctx, type, 5, 17);
        CHECK(same_sample(a, b));
        CHECK_NOTHROW(a.validate());
        CHECK(a.image.has_value() == has_image(type));
        CHECK(a.joints3d.has_value() == has_3d(type));
        CHECK(a.keypoints->size() == 17);
    }
    CHECK_FALSE(same_sample(synthesize_sample(ctx, DatasetType::image_3d, 5, 17), synthesize_sample(ctx, DatasetType::image_3d, 5, 18)));
    CHECK_THROWS_AS(synthesize_sample(SynthesisContext{}, DatasetType::mocap, 0, 0), ContractError);
}

TEST_CASE("sample validation rejects type violations") {
    const auto ctx = context();
    auto mocap = synthesize_sample(ctx, DatasetType::mocap, 1, 0);
    mocap.image = Tensor::zeros({4, 4, 3});
    CHECK_THROWS_AS(mocap.validate(), ContractError);
    auto two_d = synthesize_sample(ctx, DatasetType::image_2d_only, 1, 0);
    two_d.joints3d = Tensor::zeros({14, 3});
    two_d.vertices3d = Tensor::zeros({128, 3});
    CHECK_THROWS_AS(two_d.validate(), ContractError);
}

TEST_CASE("datasets have exact type counts and deterministic streams") {
    const auto ctx = context();
    DatasetSpec spec;
    spec.seed = 3;
    spec.counts = {{DatasetType::image_3d, 6}, {DatasetType::image_2d_only, 3}, {DatasetType::image_pseudo3d, 2},
                   {DatasetType::mocap, 5}};
    const auto a = make_dataset(spec, ctx), b = make_dataset(spec, ctx);
    REQUIRE(a.size() == 16);
    std::map<DatasetType, std::size_t> seen;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++seen[a[i].type];
        CHECK(same_sample(a[i], b[i]));
        if (a[i].type == DatasetType::mocap) CHECK_FALSE(a[i].image.has_value());
    }
    CHECK(seen == spec.counts);
    // Interleaving: the first half already holds half of every type.
    const auto order = interleave_types(spec);
    CHECK(std::count(order.begin(), order.begin() + 8, DatasetType::image_3d) == 3);
    CHECK(std::count(order.begin(), order.begin() + 8, DatasetType::mocap) >= 2);

    DatasetSpec mocap_only;
    mocap_only.counts = {{DatasetType::mocap, 10}};
    const auto m = make_dataset(mocap_only, ctx);
    CHECK(m.size() == 10);
    for (const auto& s : m) CHECK_FALSE(s.image.has_value());
}

TEST_CASE("dataset spec JSON") {
    const auto spec = DatasetSpec::parse_json(R"({"seed": 9, "counts": {"mocap": 4, "image_2d_only": 2}})");
    CHECK(spec.seed == 9);
    CHECK(spec.total() == 6);
    CHECK(spec.counts.at(DatasetType::mocap) == 4);
    CHECK_THROWS_AS(DatasetSpec::parse_json(R"({"counts": {"video": 1}})"), FormatError);
    CHECK_THROWS_AS(DatasetSpec::parse_json("{"), FormatError);
}

TEST_CASE("XFS1 sample streams roundtrip exactly") {
    const auto ctx = context();
    DatasetSpec spec;
    spec.seed = 4;
    spec.counts = {{DatasetType::image_3d, 2}, {DatasetType::image_2d_only, 1}, {DatasetType::image_pseudo3d, 1},
                   {DatasetType::mocap, 2}};
    auto samples = make_dataset(spec, ctx);
    samples[1].frame = 99;
    const auto bytes = serialize_samples(samples);
    CHECK(bytes.compare(0, 4, "XFS1") == 0);
    const auto back = deserialize_samples(bytes);
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(same_sample(back[i], samples[i]));
    CHECK(serialize_samples(back) == bytes);

    CHECK_THROWS_AS(deserialize_samples("XFS2" + bytes.substr(4)), FormatError);
    CHECK_THROWS_AS(deserialize_samples(bytes.substr(0, bytes.size() - 3)), FormatError);
    CHECK_THROWS_AS(deserialize_samples(bytes + "x"), FormatError);
}
