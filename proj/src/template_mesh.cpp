#include "xformer/template_mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace xf {

namespace {

double dist2(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double d = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        const double e = a.at(i, c) - b.at(j, c);
        d += e * e;
    }
    return d;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void TemplateMesh::validate() const {
    if (!vertices.defined() || vertices.rank() != 2 || vertices.dim(1) != 3 || vertices.dim(0) == 0)
        throw DimensionError("template mesh: vertices must be M×3 with M > 0");
    if (!joints.defined() || joints.rank() != 2 || joints.dim(1) != 3 || joints.dim(0) == 0)
        throw DimensionError("template mesh: joints must be K×3 with K > 0");
    vertices.check_finite("template vertices");
    joints.check_finite("template joints");
    for (const auto& e : edges)
        if (e[0] >= coarse_count() || e[1] >= coarse_count())
            throw FormatError("template mesh: edge references vertex beyond " + std::to_string(coarse_count()));
}

TemplateMesh TemplateMesh::parse(const std::string& text, std::size_t full_vertices) {
    std::istringstream in(text);
    std::string line;
    std::vector<double> v, j;
    TemplateMesh mesh;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag)) continue;
        auto fail = [&] { throw FormatError("template mesh line " + std::to_string(lineno) + ": '" + line + "'"); };
        if (tag == "v" || tag == "j") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) fail();
            auto& dst = tag == "v" ? v : j;
            dst.insert(dst.end(), {x, y, z});
        } else if (tag == "e") {
            std::size_t a, b;
            if (!(ls >> a >> b)) fail();
            mesh.edges.push_back({a, b});
        } else {
            fail();
        }
    }
    if (v.empty() || j.empty()) throw FormatError("template mesh needs at least one v and one j line");
    mesh.vertices = Tensor::from({v.size() / 3, 3}, std::move(v));
    mesh.joints = Tensor::from({j.size() / 3, 3}, std::move(j));
    mesh.full_vertices = full_vertices;
    mesh.validate();
    return mesh;
}

TemplateMesh TemplateMesh::load(const std::string& path, std::size_t full_vertices) {
    return parse(read_file(path), full_vertices);
}

std::string TemplateMesh::serialize() const {
    std::ostringstream os;
    char buf[96];
    for (std::size_t i = 0; i < coarse_count(); ++i) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", vertices.at(i, 0), vertices.at(i, 1), vertices.at(i, 2));
        os << buf;
    }
    for (std::size_t i = 0; i < joint_count(); ++i) {
        std::snprintf(buf, sizeof buf, "j %.17g %.17g %.17g\n", joints.at(i, 0), joints.at(i, 1), joints.at(i, 2));
        os << buf;
    }
    for (const auto& e : edges) os << "e " << e[0] << ' ' << e[1] << '\n';
    return os.str();
}

void TemplateMesh::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out << serialize();
}

std::vector<Edge> knn_edges(const Tensor& vertices, std::size_t k) {
    const std::size_t m = vertices.dim(0);
    std::set<Edge> edges;
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](auto a, auto b) { return dist2(vertices, i, vertices, a) < dist2(vertices, i, vertices, b); });
        std::size_t taken = 0;
        for (auto j : idx) {
            if (taken == k) break;
            if (j == i) continue;
            edges.insert({std::min(i, j), std::max(i, j)});
            ++taken;
        }
    }
    return {edges.begin(), edges.end()};
}

Tensor interpolation_weights(const Tensor& full, const Tensor& coarse) {
    if (full.rank() != 2 || coarse.rank() != 2 || full.dim(1) != 3 || coarse.dim(1) != 3 || coarse.dim(0) == 0)
        throw DimensionError("interpolation_weights: expected N×3 point sets");
    const std::size_t nf = full.dim(0), nc = coarse.dim(0);
    const std::size_t nn = std::min<std::size_t>(3, nc);
    std::vector<double> u(nf * nc, 0.0);
    std::vector<std::size_t> order(nc);
    for (std::size_t i = 0; i < nf; ++i) {
        double* row = u.data() + i * nc;
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nn), order.end(), [&](auto x, auto y) {
            const double dx = dist2(full, i, coarse, x), dy = dist2(full, i, coarse, y);
            return dx < dy || (dx == dy && x < y);
        });
        if (dist2(full, i, coarse, order[0]) == 0.0) {
            row[order[0]] = 1.0;
            continue;
        }
        double z = 0.0;
        for (std::size_t k = 0; k < nn; ++k) z += 1.0 / std::sqrt(dist2(full, i, coarse, order[k]));
        for (std::size_t k = 0; k < nn; ++k) row[order[k]] = 1.0 / std::sqrt(dist2(full, i, coarse, order[k])) / z;
    }
    return Tensor::from({nf, nc}, std::move(u));
}

SyntheticAssets make_synthetic_assets(std::size_t full_vertices, std::size_t coarse_vertices) {
    if (coarse_vertices == 0 || coarse_vertices > full_vertices)
        throw ContractError("synthetic assets: need 0 < M_coarse <= M_full, got " + std::to_string(coarse_vertices) +
                            " and " + std::to_string(full_vertices));
    SyntheticAssets a{BodyModel::create(full_vertices), {}, {}, {}};
    const Tensor& rest = a.body.rest_vertices();
    a.coarse_indices = farthest_point_subset(rest, coarse_vertices);

    std::vector<double> cv;
    for (auto i : a.coarse_indices)
        for (std::size_t c = 0; c < 3; ++c) cv.push_back(rest.at(i, c));
    a.mesh.vertices = Tensor::from({coarse_vertices, 3}, std::move(cv));
    a.mesh.joints = a.body.pose(Articulation{}).joints;
    a.mesh.edges = knn_edges(a.mesh.vertices, 3);
    a.mesh.full_vertices = full_vertices;

    a.upsample_init = interpolation_weights(rest, a.mesh.vertices);
    return a;
}

}  // namespace xf
