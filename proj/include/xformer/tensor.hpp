#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xformer/errors.hpp"

namespace xf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};
}  // namespace detail

/// Dense row-major float64 array with optional gradient tracking.
///
/// A Tensor is a handle: copies share storage. Operations that consume a
/// tensor with requires_grad() record a backward closure on the current
/// thread's tape; `backward()` replays that tape in reverse.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor eye(std::size_t n);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    std::vector<double> to_vector() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; zeros if no gradient has reached this tensor.
    std::vector<double> grad() const;
    std::span<double> grad_mut();
    void zero_grad() { impl_->grad.clear(); }

    double item() const;
    double at(std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const;
    double& at(std::size_t r, std::size_t c);

    /// Deep copy without gradient history.
    Tensor detach() const;

    /// Throws NumericError if any value is NaN/Inf.
    void check_finite(const std::string& where) const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                              std::initializer_list<const Tensor*> inputs);
};

/// Ordered record of differentiable operations executed on this thread.
///
/// Entries are appended in execution order, so inputs always precede the
/// operations that consume them. Backward replays the record in reverse and
/// then clears it.
class Tape {
public:
    static Tape& current();

    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    bool enabled() const { return enabled_; }
    void set_enabled(bool flag) { enabled_ = flag; }

    void run_backward();

private:
    std::vector<std::function<void()>> entries_;
    bool enabled_ = true;
};

/// Disables tape recording for its lifetime (inference, finite differences).
class NoGradGuard {
public:
    NoGradGuard() : previous_(Tape::current().enabled()) { Tape::current().set_enabled(false); }
    ~NoGradGuard() { Tape::current().set_enabled(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Allocates the result of `op`; it tracks gradients iff recording is on and any
/// input does. Non-finite results raise NumericError naming `op`.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs);

/// Seeds d(loss)/d(loss) = 1 and replays the current tape. `loss` must be scalar.
void backward(const Tensor& loss);

}  // namespace xf
