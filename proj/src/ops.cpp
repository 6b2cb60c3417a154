#include "xformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "xformer/kernels.hpp"

namespace xf {

namespace {

thread_local std::uint64_t t_flops = 0;

void count_macs(std::size_t macs) { t_flops += 2 * static_cast<std::uint64_t>(macs); }

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

/// Gradient buffer of an input, or nullptr when it does not track gradients.
double* grad_of(const ImplPtr& p) {
    if (!p || !p->requires_grad) return nullptr;
    p->ensure_grad();
    return p->grad.data();
}

template <class F>
void on_backward(const Tensor& out, F fn) {
    if (!out.requires_grad()) return;
    Tape::current().record([oi = out.impl_ptr(), fn = std::move(fn)]() {
        if (oi->grad.empty()) return;
        fn(oi->grad.data());
    });
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (!t.defined()) throw DimensionError(std::string(op) + ": undefined operand");
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

struct AxisSplit {
    std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
    if (axis >= s.size())
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                             shape_str(s));
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
    auto result = make_result(op, x.shape(), std::move(out), {&x});
    on_backward(result, [xi = x.impl_ptr(), oi = result.impl(), deriv](const double* g) {
        if (double* gx = grad_of(xi)) {
            for (std::size_t i = 0; i < xi->data.size(); ++i)
                gx[i] += g[i] * deriv(xi->data[i], oi->data[i]);
        }
    });
    return result;
}

}  // namespace

// Linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                             shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    count_macs(m * n * k);
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    auto result = make_result("matmul", {m, n}, std::move(out), {&a, &b});
    on_backward(result, [ai = a.impl_ptr(), bi = b.impl_ptr(), m, n, k](const double* g) {
        if (double* ga = grad_of(ai)) kernels::gemm_nt(m, k, n, g, bi->data.data(), ga);
        if (double* gb = grad_of(bi)) kernels::gemm_tn(k, n, m, ai->data.data(), g, gb);
    });
    return result;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    auto ad = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
    auto result = make_result("transpose", {c, r}, std::move(out), {&a});
    on_backward(result, [ai = a.impl_ptr(), r, c](const double* g) {
        if (double* ga = grad_of(ai))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
    return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const std::size_t t = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    if (w.dim(0) != in)
        throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(w.shape()));
    if (b.defined() && b.numel() != out_dim)
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match " +
                             std::to_string(out_dim) + " outputs");
    std::vector<double> out(t * out_dim, 0.0);
    count_macs(t * out_dim * in);
    kernels::gemm_nn(t, out_dim, in, x.data().data(), w.data().data(), out.data());
    if (b.defined()) {
        auto bd = b.data();
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bd[j];
    }
    auto result = make_result("linear", {t, out_dim}, std::move(out), {&x, &w, &b});
    on_backward(result, [xi = x.impl_ptr(), wi = w.impl_ptr(), bi = b.impl_ptr(), t, in,
                         out_dim](const double* g) {
        if (double* gx = grad_of(xi)) kernels::gemm_nt(t, in, out_dim, g, wi->data.data(), gx);
        if (double* gw = grad_of(wi)) kernels::gemm_tn(in, out_dim, t, xi->data.data(), g, gw);
        if (double* gb = grad_of(bi))
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
    });
    return result;
}

// Elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        std::vector<double> out(a.numel());
        auto ad = a.data();
        auto bd = b.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
        auto result = make_result("add", a.shape(), std::move(out), {&a, &b});
        on_backward(result, [ai = a.impl_ptr(), bi = b.impl_ptr()](const double* g) {
            const std::size_t n = ai->data.size();
            if (double* ga = grad_of(ai))
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            if (double* gb = grad_of(bi))
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        });
        return result;
    }
    const std::size_t cols = a.shape().back();
    const bool row_broadcast =
        a.rank() == 2 && b.numel() == cols && (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1));
    if (!row_broadcast)
        throw DimensionError("add: cannot combine " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const std::size_t rows = a.dim(0);
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = ad[i * cols + j] + bd[j];
    auto result = make_result("add", a.shape(), std::move(out), {&a, &b});
    on_backward(result, [ai = a.impl_ptr(), bi = b.impl_ptr(), rows, cols](const double* g) {
        if (double* ga = grad_of(ai))
            for (std::size_t i = 0; i < rows * cols; ++i) ga[i] += g[i];
        if (double* gb = grad_of(bi))
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
    });
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    auto result = make_result("sub", a.shape(), std::move(out), {&a, &b});
    on_backward(result, [ai = a.impl_ptr(), bi = b.impl_ptr()](const double* g) {
        const std::size_t n = ai->data.size();
        if (double* ga = grad_of(ai))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        if (double* gb = grad_of(bi))
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
    });
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    auto result = make_result("mul", a.shape(), std::move(out), {&a, &b});
    on_backward(result, [ai = a.impl_ptr(), bi = b.impl_ptr()](const double* g) {
        const std::size_t n = ai->data.size();
        if (double* ga = grad_of(ai))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bi->data[i];
        if (double* gb = grad_of(bi))
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ai->data[i];
    });
    return result;
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](double v) { return v * factor; },
        [factor](double, double) { return factor; });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar: factor must have one element, got " + shape_str(s.shape()));
    const double f = s.item();
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * f;
    auto result = make_result("mul_scalar", x.shape(), std::move(out), {&x, &s});
    on_backward(result, [xi = x.impl_ptr(), si = s.impl_ptr(), f](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[i] * f;
        if (double* gs = grad_of(si)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < xi->data.size(); ++i) acc += g[i] * xi->data[i];
            gs[0] += acc;
        }
    });
    return result;
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        "add_scalar", a, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
    return unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [inv_sqrt_2pi](double v, double) {
            return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
    return unary(
        "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        });
}

Tensor abs(const Tensor& x) {
    return unary(
        "abs", x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// Reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto result = make_result("sum", {1}, {s}, {&x});
    on_backward(result, [xi = x.impl_ptr()](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0];
    });
    return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, std::size_t axis) {
    const auto sp = split_axis(x.shape(), axis, "sum");
    Shape shape = x.shape();
    shape[axis] = 1;
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < sp.extent; ++e)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += xd[(o * sp.extent + e) * sp.inner + i];
    auto result = make_result("sum", std::move(shape), std::move(out), {&x});
    on_backward(result, [xi = x.impl_ptr(), sp](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t e = 0; e < sp.extent; ++e)
                    for (std::size_t i = 0; i < sp.inner; ++i)
                        gx[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i];
    });
    return result;
}

Tensor mean(const Tensor& x, std::size_t axis) {
    return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor mean_abs(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += std::abs(v);
    auto result = make_result("mean_abs", {1}, {s / n}, {&x});
    on_backward(result, [xi = x.impl_ptr(), n](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t i = 0; i < xi->data.size(); ++i) {
                const double v = xi->data[i];
                const double sign = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                gx[i] += g[0] * sign / n;
            }
    });
    return result;
}

Tensor sum_squares(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    auto result = make_result("sum_squares", {1}, {s}, {&x});
    on_backward(result, [xi = x.impl_ptr()](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += 2.0 * g[0] * xi->data[i];
    });
    return result;
}

Tensor frobenius_norm(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    const double norm = std::sqrt(s);
    auto result = make_result("frobenius_norm", {1}, {norm}, {&x});
    on_backward(result, [xi = x.impl_ptr(), norm](const double* g) {
        if (norm == 0.0) return;
        if (double* gx = grad_of(xi))
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0] * xi->data[i] / norm;
    });
    return result;
}

// Structure -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
    auto result = make_result("reshape", std::move(shape), x.to_vector(), {&x});
    on_backward(result, [xi = x.impl_ptr()](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[i];
    });
    return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no operands");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape shape = first;
    shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t d = 0; d < first.size(); ++d)
            if (d != axis && p.dim(d) != first[d])
                throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " +
                                     shape_str(first) + " along axis " + std::to_string(axis));
        shape[axis] += p.dim(axis);
    }
    const auto sp = split_axis(shape, axis, "concat");
    std::vector<double> out(shape_numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t ext = p.dim(axis);
        auto pd = p.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(pd.begin() + o * ext * sp.inner, ext * sp.inner,
                        out.begin() + (o * sp.extent + offset) * sp.inner);
        offset += ext;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    auto result = make_result("concat", shape, std::move(out), {});
    if (any_grad && Tape::current().enabled()) {
        result.set_requires_grad(true);
        std::vector<ImplPtr> impls;
        for (const auto& p : parts) impls.push_back(p.impl_ptr());
        on_backward(result, [impls, offsets, sp](const double* g) {
            for (std::size_t k = 0; k < impls.size(); ++k) {
                double* gp = grad_of(impls[k]);
                if (!gp) continue;
                const std::size_t ext = impls[k]->data.size() / (sp.outer * sp.inner);
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t i = 0; i < ext * sp.inner; ++i)
                        gp[o * ext * sp.inner + i] += g[(o * sp.extent + offsets[k]) * sp.inner + i];
            }
        });
    }
    return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto sp = split_axis(x.shape(), axis, "slice");
    if (begin >= end || end > sp.extent)
        throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") invalid for extent " + std::to_string(sp.extent));
    Shape shape = x.shape();
    const std::size_t ext = end - begin;
    shape[axis] = ext;
    std::vector<double> out(sp.outer * ext * sp.inner);
    auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xd.begin() + (o * sp.extent + begin) * sp.inner, ext * sp.inner,
                    out.begin() + o * ext * sp.inner);
    auto result = make_result("slice", std::move(shape), std::move(out), {&x});
    on_backward(result, [xi = x.impl_ptr(), sp, begin, ext](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < ext * sp.inner; ++i)
                    gx[(o * sp.extent + begin) * sp.inner + i] += g[o * ext * sp.inner + i];
    });
    return result;
}

Tensor repeat_rows(const Tensor& row, std::size_t rows) {
    const bool is_row = row.rank() == 1 || (row.rank() == 2 && row.dim(0) == 1);
    if (!is_row || rows == 0)
        throw DimensionError("repeat_rows: expected a row vector, got " + shape_str(row.shape()));
    const std::size_t cols = row.numel();
    std::vector<double> out(rows * cols);
    auto rd = row.data();
    for (std::size_t i = 0; i < rows; ++i) std::copy(rd.begin(), rd.end(), out.begin() + i * cols);
    auto result = make_result("repeat_rows", {rows, cols}, std::move(out), {&row});
    on_backward(result, [ri = row.impl_ptr(), rows, cols](const double* g) {
        if (double* gr = grad_of(ri))
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) gr[j] += g[i * cols + j];
    });
    return result;
}

// Normalization -------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto sp = split_axis(x.shape(), axis, "softmax");
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            auto idx = [&](std::size_t e) { return (o * sp.extent + e) * sp.inner + i; };
            double mx = xd[idx(0)];
            for (std::size_t e = 1; e < sp.extent; ++e) mx = std::max(mx, xd[idx(e)]);
            double z = 0.0;
            for (std::size_t e = 0; e < sp.extent; ++e) {
                const double v = std::exp(xd[idx(e)] - mx);
                out[idx(e)] = v;
                z += v;
            }
            for (std::size_t e = 0; e < sp.extent; ++e) out[idx(e)] /= z;
        }
    auto result = make_result("softmax", x.shape(), std::move(out), {&x});
    on_backward(result, [xi = x.impl_ptr(), oi = result.impl(), sp](const double* g) {
        double* gx = grad_of(xi);
        if (!gx) return;
        const auto& y = oi->data;
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                auto idx = [&](std::size_t e) { return (o * sp.extent + e) * sp.inner + i; };
                double dot = 0.0;
                for (std::size_t e = 0; e < sp.extent; ++e) dot += g[idx(e)] * y[idx(e)];
                for (std::size_t e = 0; e < sp.extent; ++e) gx[idx(e)] += y[idx(e)] * (g[idx(e)] - dot);
            }
    });
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    const std::size_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d)
        throw DimensionError("layer_norm: parameters " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " do not match feature dim " + std::to_string(d));
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * inv_std[r];
            out[r * d + j] = gd[j] * xhat[r * d + j] + bd[j];
        }
    }
    auto result = make_result("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta});
    on_backward(result, [xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(),
                         xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                         d](const double* g) {
        double* gx = grad_of(xi);
        double* gg = grad_of(gi);
        double* gb = grad_of(bi);
        const double* gam = gi->data.data();
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* grow = g + r * d;
            const double* xh = xhat.data() + r * d;
            if (gg)
                for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * xh[j];
            if (gb)
                for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
            if (gx) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = grow[j] * gam[j];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 /= dd;
                m2 /= dd;
                for (std::size_t j = 0; j < d; ++j)
                    gx[r * d + j] += inv_std[r] * (grow[j] * gam[j] - m1 - xh[j] * m2);
            }
        }
    });
    return result;
}

// Spatial -------------------------------------------------------------------

namespace {

kernels::ConvShape conv_shape(std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                              std::size_t kw, Conv2dGeometry geom, const char* op) {
    if (geom.stride == 0) throw DimensionError(std::string(op) + ": stride must be positive");
    const long oh = (static_cast<long>(h) + 2 * static_cast<long>(geom.padding) - static_cast<long>(kh)) /
                        static_cast<long>(geom.stride) + 1;
    const long ow = (static_cast<long>(w) + 2 * static_cast<long>(geom.padding) - static_cast<long>(kw)) /
                        static_cast<long>(geom.stride) + 1;
    if (h + 2 * geom.padding < kh || w + 2 * geom.padding < kw || oh <= 0 || ow <= 0)
        throw DimensionError(std::string(op) + ": kernel " + std::to_string(kh) + "x" +
                             std::to_string(kw) + " does not fit input " + std::to_string(h) + "x" +
                             std::to_string(w));
    return {c, h, w, kh, kw, geom.stride, geom.padding, static_cast<std::size_t>(oh),
            static_cast<std::size_t>(ow)};
}

void check_bias(const Tensor& b, std::size_t channels, const char* op) {
    if (b.defined() && b.numel() != channels)
        throw DimensionError(std::string(op) + ": bias " + shape_str(b.shape()) + " does not match " +
                             std::to_string(channels) + " output channels");
}

// Direct-loop convolution used as the reference for the im2col path. Loop
// nests follow the same accumulation order as the GEMM kernels.
void conv_direct_forward(const kernels::ConvShape& s, std::size_t cout, const double* x,
                         const double* w, double* out) {
    const std::size_t ksz = s.channels * s.kh * s.kw;
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t oy = 0; oy < s.out_h; ++oy)
            for (std::size_t ox = 0; ox < s.out_w; ++ox) {
                double acc = 0.0;
                for (std::size_t ci = 0; ci < s.channels; ++ci)
                    for (std::size_t ky = 0; ky < s.kh; ++ky) {
                        const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
                        if (iy < 0 || iy >= static_cast<long>(s.height)) continue;
                        for (std::size_t kx = 0; kx < s.kw; ++kx) {
                            const long ix =
                                static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
                            if (ix < 0 || ix >= static_cast<long>(s.width)) continue;
                            acc += w[co * ksz + (ci * s.kh + ky) * s.kw + kx] *
                                   x[(ci * s.height + iy) * s.width + ix];
                        }
                    }
                out[(co * s.out_h + oy) * s.out_w + ox] = acc;
            }
}

void conv_direct_backward(const kernels::ConvShape& s, std::size_t cout, const double* x,
                          const double* w, const double* g, double* gx, double* gw) {
    const std::size_t ksz = s.channels * s.kh * s.kw;
    if (gw)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < s.channels; ++ci)
                for (std::size_t ky = 0; ky < s.kh; ++ky)
                    for (std::size_t kx = 0; kx < s.kw; ++kx) {
                        double acc = 0.0;
                        for (std::size_t oy = 0; oy < s.out_h; ++oy) {
                            const long iy =
                                static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
                            if (iy < 0 || iy >= static_cast<long>(s.height)) continue;
                            for (std::size_t ox = 0; ox < s.out_w; ++ox) {
                                const long ix =
                                    static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
                                if (ix < 0 || ix >= static_cast<long>(s.width)) continue;
                                acc += g[(co * s.out_h + oy) * s.out_w + ox] *
                                       x[(ci * s.height + iy) * s.width + ix];
                            }
                        }
                        gw[co * ksz + (ci * s.kh + ky) * s.kw + kx] += acc;
                    }
    if (gx) {
        std::vector<double> tmp(s.channels * s.height * s.width, 0.0);
        for (std::size_t ci = 0; ci < s.channels; ++ci)
            for (std::size_t ky = 0; ky < s.kh; ++ky)
                for (std::size_t kx = 0; kx < s.kw; ++kx)
                    for (std::size_t oy = 0; oy < s.out_h; ++oy) {
                        const long iy =
                            static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
                        for (std::size_t ox = 0; ox < s.out_w; ++ox) {
                            const long ix =
                                static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
                            double acc = 0.0;
                            for (std::size_t co = 0; co < cout; ++co)
                                acc += w[co * ksz + (ci * s.kh + ky) * s.kw + kx] *
                                       g[(co * s.out_h + oy) * s.out_w + ox];
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(s.height) ||
                                ix >= static_cast<long>(s.width))
                                continue;
                            tmp[(ci * s.height + iy) * s.width + ix] += acc;
                        }
                    }
        for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    }
}

// Transposed convolution: `s` describes the adjoint conv, i.e. s.channels is
// C_out, (height,width) the transposed output and (out_h,out_w) the input.
void tconv_direct_forward(const kernels::ConvShape& s, std::size_t cin, const double* x,
                          const double* w, double* out) {
    const std::size_t cout = s.channels;
    const std::size_t ksz = cout * s.kh * s.kw;
    const std::size_t plane = s.out_h * s.out_w;
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ky = 0; ky < s.kh; ++ky)
            for (std::size_t kx = 0; kx < s.kw; ++kx)
                for (std::size_t iy = 0; iy < s.out_h; ++iy) {
                    const long oy = static_cast<long>(iy * s.stride + ky) - static_cast<long>(s.padding);
                    for (std::size_t ix = 0; ix < s.out_w; ++ix) {
                        const long ox =
                            static_cast<long>(ix * s.stride + kx) - static_cast<long>(s.padding);
                        double acc = 0.0;
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            acc += w[ci * ksz + (co * s.kh + ky) * s.kw + kx] * x[ci * plane + iy * s.out_w + ix];
                        if (oy < 0 || ox < 0 || oy >= static_cast<long>(s.height) ||
                            ox >= static_cast<long>(s.width))
                            continue;
                        out[(co * s.height + oy) * s.width + ox] += acc;
                    }
                }
}

void tconv_direct_backward(const kernels::ConvShape& s, std::size_t cin, const double* x,
                           const double* w, const double* g, double* gx, double* gw) {
    const std::size_t cout = s.channels;
    const std::size_t ksz = cout * s.kh * s.kw;
    const std::size_t plane = s.out_h * s.out_w;
    auto gval = [&](std::size_t co, std::size_t ky, std::size_t kx, std::size_t iy,
                    std::size_t ix) -> double {
        const long oy = static_cast<long>(iy * s.stride + ky) - static_cast<long>(s.padding);
        const long ox = static_cast<long>(ix * s.stride + kx) - static_cast<long>(s.padding);
        if (oy < 0 || ox < 0 || oy >= static_cast<long>(s.height) || ox >= static_cast<long>(s.width))
            return 0.0;
        return g[(co * s.height + oy) * s.width + ox];
    };
    if (gx)
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t iy = 0; iy < s.out_h; ++iy)
                for (std::size_t ix = 0; ix < s.out_w; ++ix) {
                    double acc = 0.0;
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t ky = 0; ky < s.kh; ++ky)
                            for (std::size_t kx = 0; kx < s.kw; ++kx)
                                acc += w[ci * ksz + (co * s.kh + ky) * s.kw + kx] * gval(co, ky, kx, iy, ix);
                    gx[ci * plane + iy * s.out_w + ix] += acc;
                }
    if (gw)
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ky = 0; ky < s.kh; ++ky)
                    for (std::size_t kx = 0; kx < s.kw; ++kx) {
                        double acc = 0.0;
                        for (std::size_t iy = 0; iy < s.out_h; ++iy)
                            for (std::size_t ix = 0; ix < s.out_w; ++ix)
                                acc += x[ci * plane + iy * s.out_w + ix] * gval(co, ky, kx, iy, ix);
                        gw[ci * ksz + (co * s.kh + ky) * s.kw + kx] += acc;
                    }
}

void add_bias_planes(std::vector<double>& out, const Tensor& b, std::size_t channels, std::size_t plane) {
    if (!b.defined()) return;
    auto bd = b.data();
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] += bd[c];
}

void bias_grad(const ImplPtr& bi, const double* g, std::size_t channels, std::size_t plane) {
    if (double* gb = grad_of(bi))
        for (std::size_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += g[c * plane + p];
            gb[c] += acc;
        }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geom, ConvAlgo algo) {
    require_rank(x, 3, "conv2d");
    require_rank(w, 4, "conv2d");
    if (w.dim(1) != x.dim(0))
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " expects " +
                             std::to_string(w.dim(1)) + " input channels, input is " + shape_str(x.shape()));
    const std::size_t cout = w.dim(0);
    check_bias(b, cout, "conv2d");
    const auto s = conv_shape(x.dim(0), x.dim(1), x.dim(2), w.dim(2), w.dim(3), geom, "conv2d");
    const std::size_t plane = s.out_h * s.out_w;
    const std::size_t ksz = s.channels * s.kh * s.kw;
    std::vector<double> out(cout * plane, 0.0);
    count_macs(cout * plane * ksz);
    if (algo == ConvAlgo::im2col) {
        std::vector<double> cols(ksz * plane);
        kernels::im2col(s, x.data().data(), cols.data());
        kernels::gemm_nn(cout, plane, ksz, w.data().data(), cols.data(), out.data());
    } else {
        conv_direct_forward(s, cout, x.data().data(), w.data().data(), out.data());
    }
    add_bias_planes(out, b, cout, plane);
    auto result = make_result("conv2d", {cout, s.out_h, s.out_w}, std::move(out), {&x, &w, &b});
    on_backward(result, [xi = x.impl_ptr(), wi = w.impl_ptr(), bi = b.impl_ptr(), s, cout, plane, ksz,
                         algo](const double* g) {
        bias_grad(bi, g, cout, plane);
        double* gx = grad_of(xi);
        double* gw = grad_of(wi);
        if (algo == ConvAlgo::direct) {
            conv_direct_backward(s, cout, xi->data.data(), wi->data.data(), g, gx, gw);
            return;
        }
        if (gw) {
            std::vector<double> cols(ksz * plane);
            kernels::im2col(s, xi->data.data(), cols.data());
            kernels::gemm_nt(cout, ksz, plane, g, cols.data(), gw);
        }
        if (gx) {
            std::vector<double> dcols(ksz * plane, 0.0);
            kernels::gemm_tn(ksz, plane, cout, wi->data.data(), g, dcols.data());
            std::vector<double> tmp(xi->data.size(), 0.0);
            kernels::col2im(s, dcols.data(), tmp.data());
            for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        }
    });
    return result;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geom,
                        ConvAlgo algo) {
    require_rank(x, 3, "conv_transpose2d");
    require_rank(w, 4, "conv_transpose2d");
    if (w.dim(0) != x.dim(0))
        throw DimensionError("conv_transpose2d: kernel " + shape_str(w.shape()) + " expects " +
                             std::to_string(w.dim(0)) + " input channels, input is " + shape_str(x.shape()));
    if (geom.stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    check_bias(b, cout, "conv_transpose2d");
    const long oh = static_cast<long>((h - 1) * geom.stride + kh) - 2 * static_cast<long>(geom.padding);
    const long ow = static_cast<long>((wd - 1) * geom.stride + kw) - 2 * static_cast<long>(geom.padding);
    if (oh <= 0 || ow <= 0)
        throw DimensionError("conv_transpose2d: output extent would be non-positive");
    const kernels::ConvShape s{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw,
                               geom.stride, geom.padding, h, wd};
    const std::size_t in_plane = h * wd;
    const std::size_t out_plane = s.height * s.width;
    const std::size_t ksz = cout * kh * kw;
    std::vector<double> out(cout * out_plane, 0.0);
    count_macs(cin * in_plane * ksz);
    if (algo == ConvAlgo::im2col) {
        std::vector<double> cols(ksz * in_plane, 0.0);
        kernels::gemm_tn(ksz, in_plane, cin, w.data().data(), x.data().data(), cols.data());
        kernels::col2im(s, cols.data(), out.data());
    } else {
        tconv_direct_forward(s, cin, x.data().data(), w.data().data(), out.data());
    }
    add_bias_planes(out, b, cout, out_plane);
    auto result = make_result("conv_transpose2d", {cout, s.height, s.width}, std::move(out), {&x, &w, &b});
    on_backward(result, [xi = x.impl_ptr(), wi = w.impl_ptr(), bi = b.impl_ptr(), s, cin, cout,
                         in_plane, out_plane, ksz, algo](const double* g) {
        bias_grad(bi, g, cout, out_plane);
        double* gx = grad_of(xi);
        double* gw = grad_of(wi);
        if (algo == ConvAlgo::direct) {
            tconv_direct_backward(s, cin, xi->data.data(), wi->data.data(), g, gx, gw);
            return;
        }
        std::vector<double> dcols(ksz * in_plane);
        kernels::im2col(s, g, dcols.data());
        if (gx) {
            std::vector<double> tmp(cin * in_plane, 0.0);
            kernels::gemm_nn(cin, in_plane, ksz, wi->data.data(), dcols.data(), tmp.data());
            for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        }
        if (gw) kernels::gemm_nt(cin, ksz, in_plane, xi->data.data(), dcols.data(), gw);
    });
    return result;
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
    require_rank(x, 3, "max_pool2d");
    if (kernel == 0 || stride == 0) throw DimensionError("max_pool2d: kernel and stride must be positive");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (kernel > h || kernel > w) throw DimensionError("max_pool2d: kernel larger than input");
    const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    std::vector<double> out(c * oh * ow);
    std::vector<std::size_t> argmax(out.size());
    auto xd = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (ch * h + oy * stride) * w + ox * stride;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const std::size_t idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if (xd[idx] > xd[best]) best = idx;
                    }
                const std::size_t o = (ch * oh + oy) * ow + ox;
                out[o] = xd[best];
                argmax[o] = best;
            }
    auto result = make_result("max_pool2d", {c, oh, ow}, std::move(out), {&x});
    on_backward(result, [xi = x.impl_ptr(), argmax = std::move(argmax)](const double* g) {
        if (double* gx = grad_of(xi))
            for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
    });
    return result;
}

std::uint64_t flop_count() { return t_flops; }

void reset_flop_count() { t_flops = 0; }

}  // namespace xf
