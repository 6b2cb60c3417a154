#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xformer/tensor.hpp"

namespace xf {

/// Named trainable tensors in registration order. Order is part of the
/// checkpoint format and of the deterministic optimizer sweep.
class ParameterStore {
public:
    Tensor add(const std::string& name, Tensor value);
    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Seeded weight initializer.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    Tensor uniform(Shape shape, double bound);
    /// Glorot-uniform with explicit fan sizes.
    Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out);

private:
    std::mt19937_64 rng_;
};

/// y = x·W + b for x[T×in].
struct Linear {
    Tensor weight;  // in × out
    Tensor bias;    // out

    Tensor operator()(const Tensor& x) const;
    std::size_t in_dim() const { return weight.dim(0); }
    std::size_t out_dim() const { return weight.dim(1); }

    static Linear create(ParameterStore& store, const std::string& name, std::size_t in,
                         std::size_t out, Initializer& init);
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-5;

    Tensor operator()(const Tensor& x) const;

    static LayerNormParams create(ParameterStore& store, const std::string& name, std::size_t dim);
};

}  // namespace xf
