#pragma once

#include <array>
#include <string>
#include <vector>

#include "xformer/attention.hpp"
#include "xformer/params.hpp"
#include "xformer/template_mesh.hpp"
#include "xformer/tensor.hpp"

namespace xf {

/// Quarter-resolution confidence and offset maps.
struct HeatmapSet {
    Tensor heatmaps;  // K × h × w
    Tensor offsets;   // K × 2 × h × w, channel 0 = x, 1 = y, heatmap-cell units

    std::size_t keypoints() const { return heatmaps.dim(0); }
    std::size_t height() const { return heatmaps.dim(1); }
    std::size_t width() const { return heatmaps.dim(2); }

    /// Checks shapes against an input image of `image_h` × `image_w`.
    void validate(std::size_t image_h, std::size_t image_w) const;
};

/// Keypoints in input-image pixel coordinates (x right, y down).
struct Keypoints2D {
    std::vector<std::array<double, 2>> coords;
    std::vector<bool> visible;

    std::size_t size() const { return coords.size(); }
};

inline constexpr double kDefaultVisibilityThreshold = 0.05;

/// Per keypoint: argmax cell p (first in row-major order on ties), offset o at p,
/// coordinate 4·(p + o). Visible iff the peak exceeds `threshold`.
Keypoints2D decode_keypoints(const HeatmapSet& maps, double threshold = kDefaultVisibilityThreshold);

/// Gaussian confidence maps and near-keypoint offsets for an image of
/// `image_h` × `image_w` pixels. Invisible keypoints render all-zero maps.
HeatmapSet render_gt_maps(const Keypoints2D& kp, std::size_t image_h, std::size_t image_w, double sigma = 2.0);

struct SkeletonGraph {
    std::vector<std::string> names;
    std::vector<Edge> edges;
    Tensor adjacency;  // D^{-1/2}(A+I)D^{-1/2}

    std::size_t size() const { return names.size(); }

    /// Validates indices and connectivity, then builds the normalized adjacency.
    static SkeletonGraph create(std::vector<std::string> names, std::vector<Edge> edges);
    /// Graph with self-loops only; not connected, for tests.
    static SkeletonGraph identity(std::size_t nodes);
    static SkeletonGraph coco17();
    /// JSON: {"nodes": [names...], "edges": [[i, j], ...]}.
    static SkeletonGraph parse_json(const std::string& text);
    static SkeletonGraph load(const std::string& path);
};

struct GcnParams {
    std::vector<Linear> layers;

    std::size_t out_dim() const { return layers.back().out_dim(); }

    static GcnParams create(ParameterStore& store, const std::string& name, std::size_t in_dim,
                            std::size_t width, std::size_t depth, Initializer& init);
};

/// Maps pixel coordinates into [−1, 1] by image extent; invisible keypoints become 0.
Tensor normalize_keypoints(const Keypoints2D& kp, std::size_t image_h, std::size_t image_w);

/// Stacked X' = relu(Â·X·Θ + b) over normalized K × 2 coordinates.
Tensor gcn_forward(const Tensor& coords, const SkeletonGraph& graph, const GcnParams& params);

struct KeypointTokenParams {
    Linear template_proj;  // 3 + (d_gcn + 2) → d_model
    Linear keypoint_proj;  // d_gcn + 2 → d_model

    static KeypointTokenParams create(ParameterStore& store, const std::string& name, std::size_t gcn_dim,
                                      std::size_t d_model, Initializer& init);
};

/// [template vertex tokens, template joint tokens, keypoint tokens]: template
/// tokens carry (xyz ⊕ mean-pooled keypoint feature), keypoint tokens carry
/// (GCN feature ⊕ normalized coordinate).
TokenSequence assemble_kp_tokens(const Tensor& features, const Tensor& coords, const TemplateMesh& mesh,
                                 const KeypointTokenParams& params);

}  // namespace xf
