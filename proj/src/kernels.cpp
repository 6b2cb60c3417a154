#include "xformer/kernels.hpp"

namespace xf::kernels {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void im2col(const ConvShape& s, const double* image, double* cols) {
    const std::size_t plane = s.out_h * s.out_w;
    for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t ky = 0; ky < s.kh; ++ky)
            for (std::size_t kx = 0; kx < s.kw; ++kx) {
                double* row = cols + ((c * s.kh + ky) * s.kw + kx) * plane;
                for (std::size_t oy = 0; oy < s.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
                    for (std::size_t ox = 0; ox < s.out_w; ++ox) {
                        const long ix =
                            static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(s.height) &&
                                            ix < static_cast<long>(s.width);
                        row[oy * s.out_w + ox] =
                            inside ? image[(c * s.height + iy) * s.width + ix] : 0.0;
                    }
                }
            }
}

void col2im(const ConvShape& s, const double* cols, double* image) {
    const std::size_t plane = s.out_h * s.out_w;
    for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t ky = 0; ky < s.kh; ++ky)
            for (std::size_t kx = 0; kx < s.kw; ++kx) {
                const double* row = cols + ((c * s.kh + ky) * s.kw + kx) * plane;
                for (std::size_t oy = 0; oy < s.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
                    if (iy < 0 || iy >= static_cast<long>(s.height)) continue;
                    for (std::size_t ox = 0; ox < s.out_w; ++ox) {
                        const long ix =
                            static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
                        if (ix < 0 || ix >= static_cast<long>(s.width)) continue;
                        image[(c * s.height + iy) * s.width + ix] += row[oy * s.out_w + ox];
                    }
                }
            }
}

}  // namespace xf::kernels
