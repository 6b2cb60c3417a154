#include "xformer/mesh_head.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xformer/ops.hpp"

namespace xf {

const char* branch_name(Branch b) {
    switch (b) {
        case Branch::keypoint: return "keypoint";
        case Branch::image: return "image";
        case Branch::fused: return "fused";
    }
    return "unknown";
}

WeakPerspectiveCamera WeakPerspectiveCamera::make(double s, double tx, double ty) {
    if (!(s > 0.0)) throw ContractError("camera scale must be positive");
    return {Tensor::from({1, 3}, {s, tx, ty})};
}

MeshHeadParams MeshHeadParams::create(ParameterStore& store, const std::string& name, std::size_t d_model,
                                      double initial_scale, Initializer& init) {
    MeshHeadParams p;
    p.vertex_hidden = Linear::create(store, name + ".vertex_hidden", d_model, d_model, init);
    p.vertex = Linear::create(store, name + ".vertex", d_model, 3, init);
    p.joint_hidden = Linear::create(store, name + ".joint_hidden", d_model, d_model, init);
    p.joint = Linear::create(store, name + ".joint", d_model, 3, init);
    p.cam1 = Linear::create(store, name + ".cam1", d_model, d_model, init);
    p.cam2 = Linear::create(store, name + ".cam2", d_model, 3, init);
    p.cam2.bias.data()[0] = std::log(std::expm1(initial_scale));
    return p;
}

MeshPrediction predict_mesh(const TokenSequence& tokens, const TemplateMesh& mesh, const MeshHeadParams& params,
                            Branch branch) {
    const std::size_t mc = mesh.coarse_count(), kj = mesh.joint_count();
    if (tokens.size() < mc + kj || tokens.features.dim(0) != tokens.size())
        throw ContractError("predict_mesh: " + std::to_string(tokens.size()) + " tokens cannot hold " +
                            std::to_string(mc) + " vertex and " + std::to_string(kj) + " joint slots");
    for (std::size_t i = 0; i < mc + kj; ++i)
        if (tokens.roles[i] != (i < mc ? TokenRole::vertex : TokenRole::joint))
            throw ContractError("predict_mesh: token " + std::to_string(i) + " has role " +
                                token_role_name(tokens.roles[i]) + ", expected " + (i < mc ? "vertex" : "joint"));
    MeshPrediction out;
    out.branch = branch;
    out.coarse = add(mesh.vertices, params.vertex(gelu(params.vertex_hidden(slice(tokens.features, 0, 0, mc)))));
    out.joints = add(mesh.joints, params.joint(gelu(params.joint_hidden(slice(tokens.features, 0, mc, mc + kj)))));
    Tensor raw = params.cam2(gelu(params.cam1(mean(tokens.features, 0))));
    out.camera.params = concat({softplus(slice(raw, 1, 0, 1)), slice(raw, 1, 1, 3)}, 1);
    return out;
}

UpsamplerParams UpsamplerParams::create(ParameterStore& store, const std::string& name, const Tensor& init_weight) {
    return {store.add(name + ".weight", init_weight.detach()),
            store.add(name + ".bias", Tensor::zeros({init_weight.dim(0), 3}))};
}

Tensor upsample_mesh(const Tensor& coarse, const UpsamplerParams& params) {
    if (coarse.rank() != 2 || coarse.dim(1) != 3 || coarse.dim(0) != params.weight.dim(1))
        throw DimensionError("upsample_mesh: coarse vertices " + shape_str(coarse.shape()) + " vs upsampler " +
                             shape_str(params.weight.shape()));
    return add(matmul(params.weight, coarse), params.bias);
}

void JointRegressor::validate() const {
    if (!weights.defined() || weights.rank() != 2) throw DimensionError("joint regressor must be a matrix");
    for (std::size_t r = 0; r < joints(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < vertices(); ++c) {
            if (weights.at(r, c) < 0.0) throw FormatError("joint regressor row " + std::to_string(r) + " has a negative weight");
            s += weights.at(r, c);
        }
        if (std::abs(s - 1.0) > 1e-9) throw FormatError("joint regressor row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
}

JointRegressor JointRegressor::parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        if (!ls.eof()) throw FormatError("joint regressor row " + std::to_string(rows) + " has a non-numeric entry");
        if (row.empty()) continue;
        if (cols == 0) cols = row.size();
        if (row.size() != cols)
            throw FormatError("joint regressor row " + std::to_string(rows) + " has " + std::to_string(row.size()) +
                              " entries, expected " + std::to_string(cols));
        values.insert(values.end(), row.begin(), row.end());
        ++rows;
    }
    if (rows == 0) throw FormatError("joint regressor file is empty");
    JointRegressor reg{Tensor::from({rows, cols}, std::move(values))};
    reg.validate();
    return reg;
}

JointRegressor JointRegressor::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string JointRegressor::serialize() const {
    std::ostringstream os;
    char buf[32];
    for (std::size_t r = 0; r < joints(); ++r) {
        for (std::size_t c = 0; c < vertices(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", weights.at(r, c));
            os << (c ? " " : "") << buf;
        }
        os << '\n';
    }
    return os.str();
}

Tensor regress_joints(const Tensor& vertices, const JointRegressor& reg) {
    if (vertices.rank() != 2 || vertices.dim(0) != reg.vertices())
        throw DimensionError("regress_joints: vertices " + shape_str(vertices.shape()) + " vs regressor " +
                             shape_str(reg.weights.shape()));
    return matmul(reg.weights, vertices);
}

Tensor project_weak_perspective(const Tensor& joints, const WeakPerspectiveCamera& cam) {
    if (joints.rank() != 2 || joints.dim(1) != 3)
        throw DimensionError("project_weak_perspective: joints " + shape_str(joints.shape()) + " must be K×3");
    return add(mul_scalar(slice(joints, 1, 0, 2), slice(cam.params, 1, 0, 1)), slice(cam.params, 1, 1, 3));
}

MeshPrediction ensemble(const MeshPrediction& kp, const MeshPrediction& img, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("ensemble: lambda must lie in [0, 1]");
    auto pick = [](const MeshPrediction& p) {
        MeshPrediction f = p;
        f.branch = Branch::fused;
        return f;
    };
    if (lambda == 1.0) return pick(kp);
    if (lambda == 0.0) return pick(img);
    if (kp.full.shape() != img.full.shape() || kp.joints.shape() != img.joints.shape())
        throw DimensionError("ensemble: branch predictions have different shapes");
    auto mix = [&](const Tensor& a, const Tensor& b) { return add(scale(a, lambda), scale(b, 1.0 - lambda)); };
    MeshPrediction f;
    f.branch = Branch::fused;
    f.coarse = mix(kp.coarse, img.coarse);
    f.full = mix(kp.full, img.full);
    f.joints = mix(kp.joints, img.joints);
    f.camera.params = mix(kp.camera.params, img.camera.params);
    return f;
}

std::string mesh_text(const Tensor& vertices, const std::vector<Edge>& edges) {
    std::ostringstream os;
    char buf[96];
    for (std::size_t i = 0; i < vertices.dim(0); ++i) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", vertices.at(i, 0), vertices.at(i, 1), vertices.at(i, 2));
        os << buf;
    }
    for (const auto& e : edges) os << "e " << e[0] << ' ' << e[1] << '\n';
    return os.str();
}

}  // namespace xf
