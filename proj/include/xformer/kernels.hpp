#pragma once

#include <cstddef>
#include <span>

namespace xf::kernels {

// Raw row-major GEMM helpers. Every output element accumulates its products
// in ascending inner-index order starting from the current value of C, so
// results are reproducible bit-for-bit across call sites.

/// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);
/// C[m×n] += A[m×k] · B[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);
/// C[m×n] += A[k×m]ᵀ · B[k×n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c);

struct ConvShape {
    std::size_t channels, height, width;
    std::size_t kh, kw;
    std::size_t stride, padding;
    std::size_t out_h, out_w;
};

/// cols[(c·kh·kw) × (out_h·out_w)] from image[c×h×w]; out-of-bounds taps are 0.
void im2col(const ConvShape& s, const double* image, double* cols);
/// Scatter-add of cols back into image (adjoint of im2col).
void col2im(const ConvShape& s, const double* cols, double* image);

}  // namespace xf::kernels
