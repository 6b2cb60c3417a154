#include "xformer/params.hpp"

#include <cmath>

#include "xformer/ops.hpp"

namespace xf {

Tensor ParameterStore::add(const std::string& name, Tensor value) {
    if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    entries_.emplace_back(name, value);
    return value;
}

Tensor ParameterStore::get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw ContractError("unknown parameter '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.first == name) return true;
    return false;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

Tensor Initializer::uniform(Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng_);
    return Tensor::from(std::move(shape), std::move(v));
}

Tensor Initializer::xavier(Shape shape, std::size_t fan_in, std::size_t fan_out) {
    return uniform(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Linear Linear::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                      Initializer& init) {
    Linear l;
    l.weight = store.add(name + ".weight", init.xavier({in, out}, in, out));
    l.bias = store.add(name + ".bias", Tensor::zeros({out}));
    return l;
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

LayerNormParams LayerNormParams::create(ParameterStore& store, const std::string& name, std::size_t dim) {
    LayerNormParams p;
    p.gamma = store.add(name + ".gamma", Tensor::full({dim}, 1.0));
    p.beta = store.add(name + ".beta", Tensor::zeros({dim}));
    return p;
}

}  // namespace xf
