#include "xformer/tensor.hpp"

#include <cmath>
#include <sstream>

namespace xf {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}
}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != data.size())
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    Tensor t(std::move(impl));
    t.check_finite("Tensor::from");
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::eye(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[axis];
}

std::vector<double> Tensor::grad() const {
    if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
    return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    return impl_->data[r * impl_->shape.back() + c];
}

double& Tensor::at(std::size_t r, std::size_t c) { return impl_->data[r * impl_->shape.back() + c]; }

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

void Tensor::check_finite(const std::string& where) const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + where);
}

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::run_backward() {
    // Entries were appended in execution order; reverse order is a valid
    // reverse-topological order.
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (Tape::current().enabled()) {
        for (const Tensor* in : inputs)
            if (in->defined() && in->requires_grad()) {
                impl->requires_grad = true;
                break;
            }
    }
    Tensor out(std::move(impl));
    out.check_finite(op);
    return out;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() requires a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad()) throw ContractError("backward() on a loss that tracks no gradient");
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    Tape::current().run_backward();
}

}  // namespace xf
