#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"
#include "xformer/ops.hpp"

using namespace xf;
using namespace xf::testing;

constexpr double kGradTol = 1e-4;

TEST_CASE("matmul worked examples") {
    std::mt19937_64 rng3(3);
    auto a = random_tensor({3, 4}, rng3);
    auto id = matmul(Tensor::eye(3), a);
    CHECK(id.to_vector() == a.to_vector());

    std::mt19937_64 rng(4);
    auto z = matmul(Tensor::zeros({2, 3}), random_tensor({3, 4}, rng));
    CHECK(z.shape() == Shape{2, 4});
    for (double v : z.data()) CHECK(v == 0.0);

    auto p = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {5, 6}));
    CHECK(p.to_vector() == std::vector<double>{17, 39});

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul is associative on random triples") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = rand_extent(rng, 1, 6), k = rand_extent(rng, 1, 6), l = rand_extent(rng, 1, 6),
                   n = rand_extent(rng, 1, 6);
        auto a = random_tensor({m, k}, rng), b = random_tensor({k, l}, rng), c = random_tensor({l, n}, rng);
        auto left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.numel(); ++i) CHECK(std::abs(left.at(i) - right.at(i)) < 1e-9);
    }
}

TEST_CASE("softmax worked examples and invariants") {
    auto u = softmax(Tensor::from({1, 3}, {2.5, 2.5, 2.5}), 1);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(softmax(Tensor::from({3, 1}, {4, -2, 7}), 1).to_vector() == std::vector<double>{1, 1, 1});
    auto s = softmax(Tensor::from({1, 2}, {0.0, std::log(2.0)}), 1);
    CHECK(std::abs(s.at(0) - 1.0 / 3.0) < 1e-15);
    CHECK(std::abs(s.at(1) - 2.0 / 3.0) < 1e-15);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor({4, 7}, rng, -30, 30);
        auto y = softmax(x, 1);
        auto shifted = softmax(add_scalar(x, 123.0), 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                CHECK(y.at(r, c) >= 0.0);
                total += y.at(r, c);
                CHECK(std::abs(y.at(r, c) - shifted.at(r, c)) < 1e-9);
            }
            CHECK(std::abs(total - 1.0) < 1e-9);
        }
    }
    // axis 0 normalizes columns
    auto cols = softmax(Tensor::from({2, 2}, {0.0, 1.0, 0.0, 1.0}), 0);
    CHECK(cols.at(0, 0) == doctest::Approx(0.5));
    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), DimensionError);
}

TEST_CASE("layer_norm worked examples") {
    auto ones = Tensor::full({2}, 1.0), zeros = Tensor::zeros({2});
    auto c = layer_norm(Tensor::from({1, 3}, {4, 4, 4}), Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5);
    for (double v : c.data()) CHECK(v == 0.0);
    auto r = layer_norm(Tensor::from({1, 2}, {-1, 1}), ones, zeros, 1e-14);
    CHECK(r.at(0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(r.at(1) == doctest::Approx(1.0).epsilon(1e-12));
    std::mt19937_64 rng(9);
    auto beta = random_tensor({5}, rng);
    auto collapsed = layer_norm(random_tensor({3, 5}, rng), Tensor::zeros({5}), beta, 1e-5);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(collapsed.at(i, j) == beta.at(j));
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 3}), ones, zeros, 1e-5), DimensionError);
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 2}), ones, zeros, 0.0), ContractError);
}

TEST_CASE("conv2d and conv_transpose2d worked examples") {
    auto one = Tensor::from({1, 1, 1, 1}, {1.0});
    std::mt19937_64 rng(2);
    auto x = random_tensor({1, 5, 4}, rng);
    CHECK(conv2d(x, one, Tensor(), {1, 0}).to_vector() == x.to_vector());
    auto zero_in = conv2d(Tensor::zeros({2, 6, 6}), random_tensor({3, 2, 3, 3}, rng), Tensor(), {2, 1});
    for (double v : zero_in.data()) CHECK(v == 0.0);
    auto grid = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto sums = conv2d(grid, Tensor::full({1, 1, 2, 2}, 1.0), Tensor(), {1, 0});
    CHECK(sums.shape() == Shape{1, 2, 2});
    CHECK(sums.to_vector() == std::vector<double>{12, 16, 24, 28});

    // transposed conv of a single impulse stamps the kernel
    auto impulse = Tensor::from({1, 1, 1}, {2.0});
    auto stamp = conv_transpose2d(impulse, Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}), Tensor(), {2, 0});
    CHECK(stamp.to_vector() == std::vector<double>{2, 4, 6, 8});
    auto up = conv_transpose2d(Tensor::zeros({3, 4, 4}), random_tensor({3, 2, 2, 2}, rng), Tensor(), {2, 0});
    CHECK(up.shape() == Shape{2, 8, 8});

    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 2, 2}), Tensor::zeros({1, 2, 3, 3}), Tensor(), {1, 0}),
                    DimensionError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), {1, 0}),
                    DimensionError);
}

TEST_CASE("im2col convolution is bit-equal to the direct loops") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 12; ++trial) {
        const auto cin = rand_extent(rng, 1, 4), cout = rand_extent(rng, 1, 4);
        const auto k = rand_extent(rng, 1, 3), stride = rand_extent(rng, 1, 2), pad = rand_extent(rng, 0, 1);
        const auto h = rand_extent(rng, k, 7), w = rand_extent(rng, k, 7);
        auto x = random_tensor({cin, h, w}, rng), wt = random_tensor({cout, cin, k, k}, rng),
             b = random_tensor({cout}, rng);
        auto gseed = static_cast<unsigned>(trial);

        auto run = [&](ConvAlgo algo, bool transposed) {
            auto xi = x.detach(), wi = wt.detach(), bi = b.detach();
            xi.set_requires_grad(true);
            wi.set_requires_grad(true);
            bi.set_requires_grad(true);
            Tensor y;
            if (transposed) {
                auto wt_t = Tensor::from({cin, cout, k, k}, wi.to_vector(), true);
                wi = wt_t;
                auto bt = Tensor::from({cout}, bi.to_vector(), true);
                bi = bt;
                y = conv_transpose2d(xi, wi, bi, {stride, pad}, algo);
            } else {
                y = conv2d(xi, wi, bi, {stride, pad}, algo);
            }
            backward(weighted_sum(y, gseed));
            return std::vector<std::vector<double>>{y.to_vector(), xi.grad(), wi.grad(), bi.grad()};
        };
        for (bool transposed : {false, true}) {
            if (transposed && (h - 1) * stride + k <= 2 * pad) continue;
            auto fast = run(ConvAlgo::im2col, transposed);
            auto slow = run(ConvAlgo::direct, transposed);
            for (std::size_t part = 0; part < fast.size(); ++part) {
                REQUIRE(fast[part].size() == slow[part].size());
                CHECK(std::memcmp(fast[part].data(), slow[part].data(),
                                  fast[part].size() * sizeof(double)) == 0);
            }
        }
    }
}

TEST_CASE("backward basics") {
    auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    auto y = Tensor::from({4}, {1.5, -2, 0.25, 3}, true);
    backward(sum(mul(y, y)));
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.grad()[i] == 2.0 * y.at(i));

    auto z = Tensor::from({2}, {1, 2}, true);
    auto nonscalar = scale(z, 2.0);
    CHECK_THROWS_AS(backward(nonscalar), ContractError);
    Tape::current().clear();
}

TEST_CASE("tape replays each node once and is consumed") {
    auto x = Tensor::from({3}, {1, 2, 3}, true);
    auto loss = sum(mul(x, x));
    CHECK(Tape::current().size() == 2);
    backward(loss);
    CHECK(Tape::current().size() == 0);
    {
        NoGradGuard guard;
        auto untracked = sum(mul(x, x));
        CHECK_FALSE(untracked.requires_grad());
        CHECK(Tape::current().size() == 0);
    }
}

TEST_CASE("non-finite values are contract violations") {
    CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NumericError);
    CHECK_THROWS_AS(scale(Tensor::from({1}, {1e308}), 1e10), NumericError);
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs") {
    auto run = [] {
        std::mt19937_64 rng(77);
        auto x = random_tensor({3, 8, 8}, rng);
        auto w = random_tensor({4, 3, 3, 3}, rng);
        auto y = gelu(conv2d(x, w, Tensor(), {2, 1}));
        return softmax(reshape(y, {4, 16}), 1).to_vector();
    };
    auto a = run(), b = run();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

// Randomized gradient checks: ≥10 random shapes per differentiable op.
TEST_CASE("gradient check: every differentiable op") {
    std::mt19937_64 rng(2024);
    for (const auto& c : op_gradcheck_cases()) {
        for (unsigned instance = 0; instance < 10; ++instance) {
            auto [fn, inputs] = c.make(rng, instance + 100);
            auto res = grad_check(fn, inputs);
            INFO(c.name << " instance " << instance << " rel err " << res.rel_error);
            CHECK(res.rel_error < kGradTol);
        }
    }
}
