#pragma once

#include <cstring>
#include <random>
#include <string>

#include "xformer/params.hpp"
#include "xformer/sample.hpp"
#include "xformer/tensor.hpp"

namespace xf::testing {

// Replaces every parameter with random values so biases and affine terms are exercised.
inline void randomize(ParameterStore& store, std::mt19937_64& rng, double amp = 0.5) {
    std::uniform_real_distribution<double> dist(-amp, amp);
    for (auto& [name, t] : store.entries()) {
        auto d = const_cast<Tensor&>(t).data();
        const bool gamma = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
        for (auto& v : d) v = (gamma ? 1.0 : 0.0) + dist(rng);
    }
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

inline bool has_prefix(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

// Field-by-field bitwise comparison.
inline bool same_sample(const PoseSample& a, const PoseSample& b) {
    auto same_opt = [](const std::optional<Tensor>& x, const std::optional<Tensor>& y) {
        return x.has_value() == y.has_value() && (!x || bitwise_equal(*x, *y));
    };
    if (a.type != b.type || a.sequence != b.sequence || a.frame != b.frame) return false;
    if (!same_opt(a.image, b.image) || !same_opt(a.joints2d, b.joints2d) || !same_opt(a.joints3d, b.joints3d) ||
        !same_opt(a.vertices3d, b.vertices3d))
        return false;
    if (a.joints2d_visible != b.joints2d_visible) return false;
    if (a.keypoints.has_value() != b.keypoints.has_value()) return false;
    if (a.keypoints) {
        if (a.keypoints->visible != b.keypoints->visible || a.keypoints->size() != b.keypoints->size()) return false;
        for (std::size_t i = 0; i < a.keypoints->size(); ++i)
            if (std::memcmp(a.keypoints->coords[i].data(), b.keypoints->coords[i].data(), 2 * sizeof(double)) != 0)
                return false;
    }
    return true;
}

}  // namespace xf::testing
