#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "xformer/tensor.hpp"

namespace xf::testing {

using Mat3 = std::array<double, 9>;

inline Mat3 rotation(double a, double b, double c) {
    const double ca = std::cos(a), sa = std::sin(a), cb = std::cos(b), sb = std::sin(b), cc = std::cos(c), sc = std::sin(c);
    // Rz(c)·Ry(b)·Rx(a)
    return {cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa,
            sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa,
            -sb,     cb * sa,                cb * ca};
}

inline Tensor similarity(const Tensor& x, double s, const Mat3& r, const std::array<double, 3>& t) {
    auto y = x.detach();
    for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t a = 0; a < 3; ++a)
            y.at(i, a) = s * (r[a * 3] * x.at(i, 0) + r[a * 3 + 1] * x.at(i, 1) + r[a * 3 + 2] * x.at(i, 2)) + t[a];
    return y;
}

inline double frobenius(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
    return std::sqrt(s);
}

// Residual of the best similarity for a fixed rotation: closed-form scale and translation.
inline double residual_for(const Tensor& x, const Tensor& y, const Mat3& r) {
    const std::size_t n = x.dim(0);
    double mx[3] = {}, my[3] = {};
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) {
            mx[a] += x.at(i, a) / static_cast<double>(n);
            my[a] += y.at(i, a) / static_cast<double>(n);
        }
    std::vector<std::array<double, 3>> rx(n);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            rx[i][a] = 0.0;
            for (int b = 0; b < 3; ++b) rx[i][a] += r[a * 3 + b] * (x.at(i, b) - mx[b]);
            num += rx[i][a] * (y.at(i, a) - my[a]);
            den += rx[i][a] * rx[i][a];
        }
    }
    const double s = std::max(num / den, 0.0);
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) {
            const double d = s * rx[i][a] - (y.at(i, a) - my[a]);
            res += d * d;
        }
    return std::sqrt(res);
}

// Coarse grid over Euler angles, then repeated local grids shrinking to below 1e-3 rad.
inline double grid_search_residual(const Tensor& x, const Tensor& y) {
    struct Cand {
        double res, a, b, c;
    };
    std::vector<Cand> cands;
    const int n = 24;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= n / 2; ++j)
            for (int k = 0; k < n; ++k) {
                const double a = -M_PI + 2 * M_PI * i / n, b = -M_PI / 2 + M_PI * j / (n / 2), c = -M_PI + 2 * M_PI * k / n;
                cands.push_back({residual_for(x, y, rotation(a, b, c)), a, b, c});
            }
    std::partial_sort(cands.begin(), cands.begin() + 8, cands.end(), [](auto& p, auto& q) { return p.res < q.res; });
    double best = cands[0].res;
    for (int s = 0; s < 8; ++s) {
        Cand cur = cands[static_cast<std::size_t>(s)];
        for (double step = 2 * M_PI / n; step > 2e-4; step *= 0.5) {
            bool moved = true;
            while (moved) {
                moved = false;
                for (int da = -1; da <= 1; ++da)
                    for (int db = -1; db <= 1; ++db)
                        for (int dc = -1; dc <= 1; ++dc) {
                            const double a = cur.a + da * step, b = cur.b + db * step, c = cur.c + dc * step;
                            const double r = residual_for(x, y, rotation(a, b, c));
                            if (r < cur.res - 1e-15) {
                                cur = {r, a, b, c};
                                moved = true;
                            }
                        }
            }
        }
        best = std::min(best, cur.res);
    }
    return best;
}

}  // namespace xf::testing
