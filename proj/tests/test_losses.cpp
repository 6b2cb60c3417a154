#include "doctest.h"

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/helpers.hpp"
#include "support/loss_oracle.hpp"
#include "xformer/losses.hpp"
#include "xformer/ops.hpp"

using namespace xf;
using namespace xf::testing;

TEST_CASE("map loss examples") {
    std::mt19937_64 rng(1);
    const auto gt = random_maps(3, 4, 5, rng);
    CHECK(loss_map(gt, gt, {1, 1, 1}).item() == 0.0);

    auto pred = random_maps(3, 4, 5, rng);
    CHECK(loss_map(pred, gt, {0, 0, 0}).item() == 0.0);

    HeatmapSet one{Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 2, 4, 4})};
    HeatmapSet shifted{Tensor::full({1, 4, 4}, 0.5), Tensor::zeros({1, 2, 4, 4})};
    CHECK(loss_map(shifted, one, {1.0}).item() == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(loss_map(pred, gt, {1, 1}), DimensionError);
    CHECK_THROWS_AS(loss_map(random_maps(3, 4, 4, rng), gt, {1, 1, 1}), DimensionError);
    CHECK_THROWS_AS(loss_map(pred, gt, {1, -1, 1}), ContractError);
}

TEST_CASE("vertex and joint loss examples") {
    std::mt19937_64 rng(2);
    const auto v = random_tensor({7, 3}, rng);
    CHECK(loss_vertex(v, v).item() == 0.0);
    auto off = v.detach();
    off.at(3, 1) += 1.0;
    CHECK(loss_vertex(off, v).item() == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
    CHECK(loss_joint(off, v).item() == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
    CHECK_THROWS_AS(loss_vertex(v, random_tensor({6, 3}, rng)), DimensionError);
    CHECK_THROWS_AS(loss_joint(random_tensor({2, 3, 1}, rng), random_tensor({2, 3, 1}, rng)), DimensionError);
}

TEST_CASE("regressed joint loss examples") {
    std::mt19937_64 rng(3);
    const auto reg = random_regressor(4, 9, rng);
    const auto v = random_tensor({9, 3}, rng);
    CHECK(loss_joint_reg(v, regress_joints(v, reg), reg).item() == doctest::Approx(0.0).epsilon(1e-15));

    JointRegressor onehot{Tensor::from({2, 3}, {0, 1, 0, 0, 0, 1})};
    const auto verts = random_tensor({3, 3}, rng), gt = random_tensor({2, 3}, rng);
    const auto selected = Tensor::from({2, 3}, {verts.at(1, 0), verts.at(1, 1), verts.at(1, 2), verts.at(2, 0),
                                                verts.at(2, 1), verts.at(2, 2)});
    CHECK(loss_joint_reg(verts, gt, onehot).item() == doctest::Approx(loss_joint(selected, gt).item()).epsilon(1e-15));
}

TEST_CASE("reprojection loss examples") {
    const auto cam = WeakPerspectiveCamera::make(1.0, 0.0, 0.0);
    const auto j = Tensor::from({1, 3}, {1, 2, 5});
    CHECK(loss_reproj(j, cam, Tensor::zeros({1, 2}), {true}).item() == 1.5);
    CHECK(loss_reproj(Tensor::from({1, 3}, {1, 2, -40}), cam, Tensor::zeros({1, 2}), {true}).item() == 1.5);
    CHECK(loss_reproj(j, cam, Tensor::from({1, 2}, {1, 2}), {true}).item() == 0.0);
    CHECK_THROWS_AS(loss_reproj(j, cam, Tensor::zeros({2, 2}), {true, true}), DimensionError);
    CHECK_THROWS_AS(loss_reproj(j, cam, Tensor::zeros({1, 2}), {true, true}), DimensionError);
}

TEST_CASE("all-invisible reprojection is zero with zero gradient") {
    std::mt19937_64 rng(4);
    auto j = random_tensor({3, 3}, rng);
    auto cam = WeakPerspectiveCamera::make(1.2, 0.3, 0.1);
    j.set_requires_grad(true);
    cam.params.set_requires_grad(true);
    Tape::current().clear();
    const auto l = loss_reproj(j, cam, random_tensor({3, 2}, rng), {false, false, false});
    CHECK(l.item() == 0.0);
    backward(l);
    for (double g : j.grad()) CHECK(g == 0.0);
    for (double g : cam.params.grad()) CHECK(g == 0.0);
    for (double v : l.data()) CHECK(std::isfinite(v));
}

TEST_CASE("consistency loss examples") {
    std::mt19937_64 rng(5);
    const auto a = random_tensor({6, 4}, rng);
    CHECK(loss_consistency(a, a).item() == 0.0);
    CHECK(loss_consistency(Tensor::full({6, 4}, 1.0), Tensor::zeros({6, 4})).item() == doctest::Approx(2.0).epsilon(1e-15));
    CHECK_THROWS_AS(loss_consistency(std::nullopt, a), ContractError);
    CHECK_THROWS_AS(loss_consistency(a, random_tensor({6, 3}, rng)), DimensionError);

    auto mha = random_tensor({6, 4}, rng), mlp = random_tensor({6, 4}, rng);
    mha.set_requires_grad(true);
    mlp.set_requires_grad(true);
    Tape::current().clear();
    backward(loss_consistency(mha, mlp));
    double gm = 0.0, gl = 0.0;
    for (double g : mha.grad()) gm += g * g;
    for (double g : mlp.grad()) gl += g * g;
    CHECK(gm > 0.0);
    CHECK(gl > 0.0);
}

TEST_CASE("losses match scalar-loop oracles on random inputs") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_maps(4, 5, 6, rng), g = random_maps(4, 5, 6, rng);
        std::vector<double> w{1.0, 0.0, 0.5, 1.0};
        CHECK(std::abs(loss_map(p, g, w).item() - oracle_map(p, g, w)) < 1e-10);

        const auto a = random_tensor({11, 3}, rng), b = random_tensor({11, 3}, rng);
        CHECK(std::abs(loss_vertex(a, b).item() - oracle_points(a, b)) < 1e-10);
        CHECK(std::abs(loss_joint(a, b).item() - oracle_points(a, b)) < 1e-10);

        const auto reg = random_regressor(5, 11, rng);
        const auto jt = random_tensor({5, 3}, rng);
        CHECK(std::abs(loss_joint_reg(a, jt, reg).item() - oracle_points(regress_joints(a, reg), jt)) < 1e-10);

        const auto j2 = random_tensor({5, 2}, rng);
        const auto vis = random_visibility(5, rng);
        const auto cam = WeakPerspectiveCamera::make(0.6 + 0.1 * trial, 0.2, -0.3);
        CHECK(std::abs(loss_reproj(jt, cam, j2, vis).item() - oracle_reproj(jt, cam.s(), 0.2, -0.3, j2, vis)) < 1e-10);

        const auto f1 = random_tensor({7, 5}, rng), f2 = random_tensor({7, 5}, rng);
        CHECK(std::abs(loss_consistency(f1, f2).item() - oracle_consistency(f1, f2)) < 1e-10);
    }
}

TEST_CASE("losses are nonnegative") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = random_tensor({4, 3}, rng, -5.0, 5.0), b = random_tensor({4, 3}, rng, -5.0, 5.0);
        CHECK(loss_vertex(a, b).item() >= 0.0);
        CHECK(loss_reproj(a, WeakPerspectiveCamera::make(1.0, 0.0, 0.0), random_tensor({4, 2}, rng), random_visibility(4, rng))
                  .item() >= 0.0);
        CHECK(loss_consistency(a, b).item() >= 0.0);
    }
}

TEST_CASE("routing table for every dataset type") {
    const LossOptions all;
    using V = std::vector<std::string>;
    const V full{"map", "kp_V", "kp_J", "kp_Jreg", "kp_Jproj", "img_V", "img_J", "img_Jreg", "img_Jproj", "cons"};
    CHECK(active_terms(DatasetType::image_3d, all) == full);
    CHECK(active_terms(DatasetType::image_pseudo3d, all) == full);
    CHECK(active_terms(DatasetType::image_2d_only, all) == V{"map", "kp_Jproj", "img_Jproj", "cons"});
    CHECK(active_terms(DatasetType::mocap, all) == V{"kp_V", "kp_J", "kp_Jreg", "kp_Jproj"});

    LossOptions no_reproj;
    no_reproj.mocap_reprojection = false;
    CHECK(active_terms(DatasetType::mocap, no_reproj) == V{"kp_V", "kp_J", "kp_Jreg"});

    LossOptions image_only;
    image_only.keypoint_branch = false;
    CHECK(active_terms(DatasetType::image_3d, image_only) == V{"img_V", "img_J", "img_Jreg", "img_Jproj"});
    CHECK(active_terms(DatasetType::mocap, image_only).empty());

    LossOptions kp_only;
    kp_only.image_branch = false;
    CHECK(active_terms(DatasetType::image_2d_only, kp_only) == V{"map", "kp_Jproj"});

    LossOptions no_cons;
    no_cons.consistency = false;
    CHECK(active_terms(DatasetType::image_2d_only, no_cons) == V{"map", "kp_Jproj", "img_Jproj"});
}

TEST_CASE("perfect predictions give a zero total with exactly the routed terms") {
    std::mt19937_64 rng(8);
    const LossOptions options;
    for (auto type : kDatasetTypes) {
        const auto c = perfect_case(type, rng);
        const auto report = total_loss(type, c.outputs, c.targets, c.reg, options);
        const auto expected = active_terms(type, options);
        REQUIRE(report.terms.size() == expected.size());
        for (std::size_t i = 0; i < expected.size(); ++i) {
            CHECK(report.terms[i].first == expected[i]);
            CHECK(std::abs(report.terms[i].second) < 1e-12);
        }
        CHECK(std::abs(report.total) < 1e-12);
    }
}

TEST_CASE("total is the weighted sum of active terms") {
    std::mt19937_64 rng(9);
    auto c = perfect_case(DatasetType::image_3d, rng);
    c.outputs.keypoint->full = random_tensor({9, 3}, rng);
    c.outputs.image->joints = random_tensor({4, 3}, rng);
    c.outputs.heatmaps = random_maps(3, 4, 4, rng);
    c.outputs.consistency[0].mlp = random_tensor({5, 4}, rng);
    LossOptions options;
    for (std::size_t i = 0; i < loss_term_names().size(); ++i) options.weights.values[i] = 0.25 + 0.5 * static_cast<double>(i);
    const auto report = total_loss(DatasetType::image_3d, c.outputs, c.targets, c.reg, options);
    double expected = 0.0;
    for (const auto& [name, value] : report.terms) expected += options.weights.get(name) * value;
    CHECK(std::abs(report.total - expected) < 1e-12);
    CHECK(report.total_tensor.item() == report.total);
    CHECK(report.get("map") > 0.0);
    CHECK(report.get("cons") > 0.0);
}

TEST_CASE("inactive terms are absent from the report and empty in CSV") {
    std::mt19937_64 rng(10);
    const auto c = perfect_case(DatasetType::mocap, rng);
    const auto report = total_loss(DatasetType::mocap, c.outputs, c.targets, c.reg, {});
    CHECK(report.terms.size() == 4);
    CHECK_FALSE(report.has("map"));
    CHECK_FALSE(report.has("cons"));
    CHECK_THROWS_AS(report.get("img_V"), ContractError);
    CHECK(LossReport::csv_header() == "step,tag,map,kp_V,kp_J,kp_Jreg,kp_Jproj,img_V,img_J,img_Jreg,img_Jproj,cons,total");
    CHECK(report.csv_row(3, "mocap") == "3,mocap,,0,0,0,0,,,,,,0");
}

TEST_CASE("routing contract errors") {
    std::mt19937_64 rng(11);
    auto mocap = perfect_case(DatasetType::mocap, rng);
    const auto image = perfect_case(DatasetType::image_3d, rng);
    auto with_image = mocap;
    with_image.outputs.image = image.outputs.image;
    CHECK_THROWS_AS(total_loss(DatasetType::mocap, with_image.outputs, mocap.targets, mocap.reg, {}), ContractError);

    auto missing = image;
    missing.targets.vertices.reset();
    CHECK_THROWS_AS(total_loss(DatasetType::image_3d, missing.outputs, missing.targets, missing.reg, {}), ContractError);
    // 2D-only samples never touch 3D targets.
    CHECK_NOTHROW(total_loss(DatasetType::image_2d_only, missing.outputs, missing.targets, missing.reg, {}));

    auto no_pairs = image;
    no_pairs.outputs.consistency.clear();
    CHECK_THROWS_AS(total_loss(DatasetType::image_2d_only, no_pairs.outputs, no_pairs.targets, no_pairs.reg, {}), ContractError);

    LossOptions image_only;
    image_only.keypoint_branch = false;
    CHECK_THROWS_AS(total_loss(DatasetType::mocap, mocap.outputs, mocap.targets, mocap.reg, image_only), ContractError);

    LossWeights w;
    CHECK_THROWS_AS(w.set("kp_V", -1.0), ContractError);
    CHECK_THROWS_AS(w.set("bogus", 1.0), ContractError);
}

TEST_CASE("gradient check: every loss term") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const auto gt = random_maps(2, 3, 3, rng);
        const auto reg = random_regressor(4, 6, rng);
        const auto jt = random_tensor({4, 3}, rng), vt = random_tensor({6, 3}, rng), j2 = random_tensor({4, 2}, rng);
        const auto vis = random_visibility(4, rng);
        std::vector<Tensor> inputs{random_tensor({2, 3, 3}, rng, 0.0, 1.0), random_tensor({2, 2, 3, 3}, rng, -2.0, 2.0),
                                   random_tensor({6, 3}, rng), random_tensor({4, 3}, rng),
                                   Tensor::from({1, 3}, {0.9, 0.1, -0.1}), random_tensor({5, 4}, rng),
                                   random_tensor({5, 4}, rng)};
        const auto r = grad_check(
            [&](const std::vector<Tensor>& in) {
                const WeakPerspectiveCamera cam{in[4]};
                Tensor l = loss_map({in[0], in[1]}, gt, {1.0, 0.5});
                l = add(l, loss_vertex(in[2], vt));
                l = add(l, loss_joint(in[3], jt));
                l = add(l, loss_joint_reg(in[2], jt, reg));
                l = add(l, loss_reproj(in[3], cam, j2, vis));
                return add(l, loss_consistency(in[5], in[6]));
            },
            inputs, 1e-5, 0, static_cast<unsigned>(trial));
        CHECK(r.rel_error < 1e-4);
    }
}
