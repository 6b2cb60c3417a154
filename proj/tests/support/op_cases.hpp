#pragma once

#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "support/gradcheck.hpp"
#include "xformer/ops.hpp"

namespace xf::testing {

// Weighted sum with a fixed random weight so every output coordinate matters.
inline Tensor weighted_sum(const Tensor& y, unsigned seed) {
    std::mt19937_64 rng(seed);
    auto w = random_tensor(y.shape(), rng);
    return sum(mul(y, w));
}

inline std::size_t rand_extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// One differentiable op family: `make(rng, seed)` draws random shapes and inputs.
struct OpCase {
    const char* name;
    std::function<std::pair<GradFn, std::vector<Tensor>>(std::mt19937_64&, unsigned)> make;
};

inline std::vector<OpCase> op_gradcheck_cases() {
    using Fn = GradFn;
    return {
        {"matmul",
         [](auto& r, unsigned s) {
             auto m = rand_extent(r, 1, 5), k = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) { return weighted_sum(matmul(in[0], in[1]), s); },
                 {random_tensor({m, k}, r), random_tensor({k, n}, r)}};
         }},
        {"transpose",
         [](auto& r, unsigned s) {
             auto m = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
             return std::pair<Fn, std::vector<Tensor>>{[s](auto& in) { return weighted_sum(transpose(in[0]), s); },
                                                       {random_tensor({m, n}, r)}};
         }},
        {"linear",
         [](auto& r, unsigned s) {
             auto t = rand_extent(r, 1, 5), i = rand_extent(r, 1, 5), o = rand_extent(r, 1, 5);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) { return weighted_sum(linear(in[0], in[1], in[2]), s); },
                 {random_tensor({t, i}, r), random_tensor({i, o}, r), random_tensor({o}, r)}};
         }},
        {"add/sub/mul",
         [](auto& r, unsigned s) {
             auto m = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) {
                     return weighted_sum(mul(sub(add(in[0], in[1]), in[2]), add(in[0], in[3])), s);
                 },
                 {random_tensor({m, n}, r), random_tensor({m, n}, r), random_tensor({m, n}, r),
                  random_tensor({n}, r)}};
         }},
        {"scale/add_scalar",
         [](auto& r, unsigned s) {
             auto n = rand_extent(r, 1, 9);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) { return weighted_sum(add_scalar(scale(in[0], -1.7), 0.3), s); },
                 {random_tensor({n}, r)}};
         }},
        {"mul_scalar",
         [](auto& r, unsigned s) {
             auto m = rand_extent(r, 1, 4), n = rand_extent(r, 1, 4);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) { return weighted_sum(mul_scalar(in[0], in[1]), s); },
                 {random_tensor({m, n}, r), random_tensor({1}, r)}};
         }},
        {"relu/gelu/sigmoid/tanh/softplus/abs",
         [](auto& r, unsigned s) {
             auto m = rand_extent(r, 1, 4), n = rand_extent(r, 1, 4);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) {
                     auto x = in[0];
                     return add(add(add(weighted_sum(relu(x), s), weighted_sum(gelu(x), s + 1)),
                                    add(weighted_sum(sigmoid(x), s + 2), weighted_sum(tanh(x), s + 3))),
                                add(weighted_sum(softplus(x), s + 4), weighted_sum(abs(x), s + 5)));
                 },
                 {random_tensor({m, n}, r, -2, 2)}};
         }},
        {"sum/mean along axis",
         [](auto& r, unsigned s) {
             auto a = rand_extent(r, 1, 4), b = rand_extent(r, 1, 4), c = rand_extent(r, 1, 4);
             auto axis = rand_extent(r, 0, 2);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s, axis](auto& in) {
                     return add(weighted_sum(sum(in[0], axis), s), weighted_sum(mean(in[0], axis), s + 1));
                 },
                 {random_tensor({a, b, c}, r)}};
         }},
        {"mean/mean_abs/sum_squares/frobenius_norm",
         [](auto& r, unsigned) {
             auto m = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
             return std::pair<Fn, std::vector<Tensor>>{
                 [](auto& in) {
                     return add(add(mean(in[0]), mean_abs(in[0])),
                                add(sum_squares(in[0]), frobenius_norm(in[0])));
                 },
                 {random_tensor({m, n}, r)}};
         }},
        {"reshape/concat/slice/repeat_rows",
         [](auto& r, unsigned s) {
             auto m = rand_extent(r, 2, 5), n = rand_extent(r, 1, 4), axis = rand_extent(r, 0, 1);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s, axis, m](auto& in) {
                     auto cat = concat({in[0], in[1]}, axis);
                     auto part = slice(cat, axis, 1, cat.dim(axis));
                     auto rows = repeat_rows(in[2], m);
                     return add(weighted_sum(reshape(part, {part.numel()}), s), weighted_sum(rows, s + 1));
                 },
                 {random_tensor({m, n}, r), random_tensor({m, n}, r), random_tensor({1, n}, r)}};
         }},
        {"softmax",
         [](auto& r, unsigned s) {
             auto a = rand_extent(r, 1, 4), b = rand_extent(r, 1, 4), c = rand_extent(r, 1, 4);
             auto axis = rand_extent(r, 0, 2);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s, axis](auto& in) { return weighted_sum(softmax(in[0], axis), s); },
                 {random_tensor({a, b, c}, r, -3, 3)}};
         }},
        {"layer_norm",
         [](auto& r, unsigned s) {
             auto t = rand_extent(r, 1, 5), d = rand_extent(r, 2, 6);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-5), s); },
                 {random_tensor({t, d}, r), random_tensor({d}, r), random_tensor({d}, r)}};
         }},
        {"conv2d",
         [](auto& r, unsigned s) {
             auto ci = rand_extent(r, 1, 3), co = rand_extent(r, 1, 3), k = rand_extent(r, 1, 3);
             auto st = rand_extent(r, 1, 2), pad = rand_extent(r, 0, 1);
             auto h = rand_extent(r, k, 6), w = rand_extent(r, k, 6);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s, st, pad](auto& in) { return weighted_sum(conv2d(in[0], in[1], in[2], {st, pad}), s); },
                 {random_tensor({ci, h, w}, r), random_tensor({co, ci, k, k}, r), random_tensor({co}, r)}};
         }},
        {"conv_transpose2d",
         [](auto& r, unsigned s) {
             auto ci = rand_extent(r, 1, 3), co = rand_extent(r, 1, 3), k = rand_extent(r, 1, 3);
             auto st = rand_extent(r, 1, 2);
             auto h = rand_extent(r, 1, 5), w = rand_extent(r, 1, 5);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s, st](auto& in) {
                     return weighted_sum(conv_transpose2d(in[0], in[1], in[2], {st, 0}), s);
                 },
                 {random_tensor({ci, h, w}, r), random_tensor({ci, co, k, k}, r), random_tensor({co}, r)}};
         }},
        {"max_pool2d",
         [](auto& r, unsigned s) {
             auto c = rand_extent(r, 1, 3), h = rand_extent(r, 2, 6), w = rand_extent(r, 2, 6);
             return std::pair<Fn, std::vector<Tensor>>{
                 [s](auto& in) { return weighted_sum(max_pool2d(in[0], 2, 2), s); },
                 {random_tensor({c, h, w}, r)}};
         }},
    };
}

}  // namespace xf::testing
