#pragma once

#include <array>
#include <string>
#include <vector>

#include "xformer/body.hpp"
#include "xformer/tensor.hpp"

namespace xf {

using Edge = std::array<std::size_t, 2>;

/// Coarse template used for positional encoding and as the residual base of
/// the mesh heads.
struct TemplateMesh {
    Tensor vertices;  // M_coarse × 3
    Tensor joints;    // K_joint × 3
    std::vector<Edge> edges;
    std::size_t full_vertices = 0;  // M_full targeted by the upsampler

    std::size_t coarse_count() const { return vertices.dim(0); }
    std::size_t joint_count() const { return joints.dim(0); }

    void validate() const;

    /// Text format: "v x y z", "j x y z", "e i j" lines; '#' starts a comment.
    static TemplateMesh parse(const std::string& text, std::size_t full_vertices);
    static TemplateMesh load(const std::string& path, std::size_t full_vertices);
    std::string serialize() const;
    void save(const std::string& path) const;
};

/// Procedural stand-ins for the body-model assets: body, coarse template
/// (farthest-point subset of the rest mesh), and an interpolating upsampler init.
struct SyntheticAssets {
    BodyModel body;
    TemplateMesh mesh;
    std::vector<std::size_t> coarse_indices;
    Tensor upsample_init;  // M_full × M_coarse, rows sum to one
};

/// M_full × M_coarse map: one-hot where a full vertex coincides with a coarse
/// one, otherwise inverse-distance weights over the three nearest coarse vertices.
Tensor interpolation_weights(const Tensor& full, const Tensor& coarse);

SyntheticAssets make_synthetic_assets(std::size_t full_vertices, std::size_t coarse_vertices);

/// Undirected k-nearest-neighbour edges, each pair once with i < j.
std::vector<Edge> knn_edges(const Tensor& vertices, std::size_t k);

}  // namespace xf
