#include "xformer/keypoints.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "xformer/ops.hpp"

namespace xf {

void HeatmapSet::validate(std::size_t image_h, std::size_t image_w) const {
    if (heatmaps.rank() != 3 || heatmaps.dim(1) * 4 != image_h || heatmaps.dim(2) * 4 != image_w)
        throw DimensionError("heatmaps " + shape_str(heatmaps.shape()) + " are not a quarter of " +
                             std::to_string(image_h) + "x" + std::to_string(image_w));
    const Shape want{keypoints(), 2, height(), width()};
    if (offsets.shape() != want)
        throw DimensionError("offsets " + shape_str(offsets.shape()) + " expected " + shape_str(want));
}

Keypoints2D decode_keypoints(const HeatmapSet& maps, double threshold) {
    const std::size_t k = maps.keypoints(), h = maps.height(), w = maps.width(), hw = h * w;
    if (maps.offsets.shape() != Shape{k, 2, h, w})
        throw DimensionError("decode_keypoints: offsets " + shape_str(maps.offsets.shape()) +
                             " do not match heatmaps " + shape_str(maps.heatmaps.shape()));
    const auto hm = maps.heatmaps.data();
    const auto off = maps.offsets.data();
    Keypoints2D kp;
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i)
            if (hm[j * hw + i] > hm[j * hw + best]) best = i;
        const double px = static_cast<double>(best % w), py = static_cast<double>(best / w);
        const double ox = off[(j * 2) * hw + best], oy = off[(j * 2 + 1) * hw + best];
        kp.coords.push_back({4.0 * (px + ox), 4.0 * (py + oy)});
        kp.visible.push_back(hm[j * hw + best] > threshold);
    }
    return kp;
}

HeatmapSet render_gt_maps(const Keypoints2D& kp, std::size_t image_h, std::size_t image_w, double sigma) {
    if (image_h % 4 != 0 || image_w % 4 != 0 || image_h == 0 || image_w == 0)
        throw DimensionError("render_gt_maps: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                             " is not divisible by 4");
    if (kp.visible.size() != kp.size()) throw DimensionError("render_gt_maps: visibility length mismatch");
    const std::size_t k = kp.size(), h = image_h / 4, w = image_w / 4, hw = h * w;
    std::vector<double> hm(k * hw, 0.0), off(k * 2 * hw, 0.0);
    const double denom = 2.0 * sigma * sigma;
    for (std::size_t j = 0; j < k; ++j) {
        if (!kp.visible[j]) continue;
        const double mx = kp.coords[j][0] / 4.0, my = kp.coords[j][1] / 4.0;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = mx - static_cast<double>(x), dy = my - static_cast<double>(y);
                const double d2 = dx * dx + dy * dy;
                const std::size_t cell = y * w + x;
                hm[j * hw + cell] = std::exp(-d2 / denom);
                if (d2 < 4.0) {
                    off[(j * 2) * hw + cell] = dx;
                    off[(j * 2 + 1) * hw + cell] = dy;
                }
            }
    }
    return {Tensor::from({k, h, w}, std::move(hm)), Tensor::from({k, 2, h, w}, std::move(off))};
}

SkeletonGraph SkeletonGraph::create(std::vector<std::string> names, std::vector<Edge> edges) {
    const std::size_t n = names.size();
    if (n == 0) throw FormatError("skeleton graph has no nodes");
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] = 1.0;
    for (const auto& e : edges) {
        if (e[0] >= n || e[1] >= n || e[0] == e[1])
            throw FormatError("skeleton edge (" + std::to_string(e[0]) + ", " + std::to_string(e[1]) + ") invalid for " +
                              std::to_string(n) + " nodes");
        a[e[0] * n + e[1]] = 1.0;
        a[e[1] * n + e[0]] = 1.0;
    }
    // Connectivity by flood fill.
    std::vector<bool> seen(n, false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    while (!stack.empty()) {
        const auto i = stack.back();
        stack.pop_back();
        for (std::size_t j = 0; j < n; ++j)
            if (a[i * n + j] != 0.0 && !seen[j]) {
                seen[j] = true;
                stack.push_back(j);
            }
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!seen[i]) throw FormatError("skeleton graph is not connected: node '" + names[i] + "' unreachable");

    SkeletonGraph g;
    g.names = std::move(names);
    g.edges = std::move(edges);
    std::vector<double> deg(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) deg[i] += a[i * n + j];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= std::sqrt(deg[i] * deg[j]);
    g.adjacency = Tensor::from({n, n}, std::move(a));
    return g;
}

SkeletonGraph SkeletonGraph::identity(std::size_t nodes) {
    SkeletonGraph g;
    for (std::size_t i = 0; i < nodes; ++i) g.names.push_back("n" + std::to_string(i));
    g.adjacency = Tensor::eye(nodes);
    return g;
}

SkeletonGraph SkeletonGraph::coco17() {
    const auto& n = coco_keypoint_names();
    return create({n.begin(), n.end()}, {{15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12},
                                         {5, 6},   {5, 7},   {6, 8},   {7, 9},   {8, 10},  {1, 2},  {0, 1},
                                         {0, 2},   {1, 3},   {2, 4},   {3, 5},   {4, 6}});
}

SkeletonGraph SkeletonGraph::parse_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("skeleton graph JSON: ") + e.what());
    }
    if (!j.contains("nodes") || !j.contains("edges")) throw FormatError("skeleton graph JSON needs 'nodes' and 'edges'");
    try {
        return create(j.at("nodes").get<std::vector<std::string>>(), j.at("edges").get<std::vector<Edge>>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("skeleton graph JSON: ") + e.what());
    }
}

SkeletonGraph SkeletonGraph::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str());
}

GcnParams GcnParams::create(ParameterStore& store, const std::string& name, std::size_t in_dim, std::size_t width,
                            std::size_t depth, Initializer& init) {
    if (depth == 0 || width == 0) throw ContractError("GCN needs positive depth and width");
    GcnParams p;
    for (std::size_t l = 0; l < depth; ++l)
        p.layers.push_back(Linear::create(store, name + ".layer" + std::to_string(l), l == 0 ? in_dim : width, width, init));
    return p;
}

Tensor normalize_keypoints(const Keypoints2D& kp, std::size_t image_h, std::size_t image_w) {
    std::vector<double> v(kp.size() * 2, 0.0);
    for (std::size_t i = 0; i < kp.size(); ++i) {
        if (!kp.visible[i]) continue;
        v[i * 2] = kp.coords[i][0] / (static_cast<double>(image_w) / 2.0) - 1.0;
        v[i * 2 + 1] = kp.coords[i][1] / (static_cast<double>(image_h) / 2.0) - 1.0;
    }
    return Tensor::from({kp.size(), 2}, std::move(v));
}

Tensor gcn_forward(const Tensor& coords, const SkeletonGraph& graph, const GcnParams& params) {
    if (coords.rank() != 2 || coords.dim(0) != graph.size())
        throw DimensionError("gcn_forward: features " + shape_str(coords.shape()) + " vs " +
                             std::to_string(graph.size()) + " graph nodes");
    Tensor x = coords;
    for (const auto& layer : params.layers) x = relu(add(matmul(graph.adjacency, matmul(x, layer.weight)), layer.bias));
    return x;
}

KeypointTokenParams KeypointTokenParams::create(ParameterStore& store, const std::string& name, std::size_t gcn_dim,
                                                std::size_t d_model, Initializer& init) {
    return {Linear::create(store, name + ".template_proj", 3 + gcn_dim + 2, d_model, init),
            Linear::create(store, name + ".keypoint_proj", gcn_dim + 2, d_model, init)};
}

TokenSequence assemble_kp_tokens(const Tensor& features, const Tensor& coords, const TemplateMesh& mesh,
                                 const KeypointTokenParams& params) {
    if (features.rank() != 2 || coords.rank() != 2 || coords.dim(1) != 2 || features.dim(0) != coords.dim(0))
        throw DimensionError("assemble_kp_tokens: features " + shape_str(features.shape()) + " vs coords " +
                             shape_str(coords.shape()));
    if (features.dim(1) + 2 != params.keypoint_proj.in_dim())
        throw DimensionError("assemble_kp_tokens: feature width " + std::to_string(features.dim(1)) +
                             " does not match projection input " + std::to_string(params.keypoint_proj.in_dim()));
    const std::size_t mc = mesh.coarse_count(), kj = mesh.joint_count(), k = features.dim(0);
    Tensor per_kp = concat({features, coords}, 1);
    Tensor global = mean(per_kp, 0);
    Tensor xyz = concat({mesh.vertices, mesh.joints}, 0);
    Tensor tmpl = params.template_proj(concat({xyz, repeat_rows(global, mc + kj)}, 1));
    Tensor kps = params.keypoint_proj(per_kp);
    std::vector<TokenRole> roles(mc, TokenRole::vertex);
    roles.insert(roles.end(), kj, TokenRole::joint);
    roles.insert(roles.end(), k, TokenRole::keypoint);
    return {concat({tmpl, kps}, 0), std::move(roles)};
}

}  // namespace xf
