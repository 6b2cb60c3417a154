#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "xformer/tensor.hpp"

namespace xf {

// Linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x[T×in] · w[in×out] + b[out]; `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise ---------------------------------------------------------------

/// a + b; b may equal a's shape or be a row vector ([D] or [1×D]) broadcast over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product of equal shapes.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x · s for a one-element tensor `s`; differentiable in both.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor abs(const Tensor& x);

// Reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduce along `axis`, keeping it with extent 1.
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
/// mean(|x|)
Tensor mean_abs(const Tensor& x);
/// sum(x²)
Tensor sum_squares(const Tensor& x);
/// sqrt(sum(x²)); the gradient at x = 0 is taken as 0.
Tensor frobenius_norm(const Tensor& x);

// Structure -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Repeats a [D] or [1×D] row `rows` times → [rows×D].
Tensor repeat_rows(const Tensor& row, std::size_t rows);

// Normalization -------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis);
/// Per-row normalization over the last axis of x[T×D].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Spatial (feature maps are C×H×W) ------------------------------------------

enum class ConvAlgo { im2col, direct };

struct Conv2dGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Cross-correlation. w: [C_out×C_in×kh×kw]; b: [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geom,
              ConvAlgo algo = ConvAlgo::im2col);
/// Transpose of conv2d. w: [C_in×C_out×kh×kw]; b: [C_out] or undefined.
/// Output extent: (H-1)·stride − 2·padding + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geom,
                        ConvAlgo algo = ConvAlgo::im2col);
/// Non-overlapping or strided max pooling; ties route the gradient to the first maximum.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

// FLOP accounting -------------------------------------------------------------

/// Per-thread count of forward multiply-adds (×2) issued by matmul, linear and
/// the convolutions. Backward passes are not counted.
std::uint64_t flop_count();
void reset_flop_count();


}  // namespace xf
