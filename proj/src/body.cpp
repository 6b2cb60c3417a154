#include "xformer/body.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace xf {

namespace {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;

const Mat3 kIdentity{1, 0, 0, 0, 1, 0, 0, 0, 1};

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Vec3 scaled(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
Vec3 normalized(const Vec3& a) { return scaled(a, 1.0 / std::sqrt(dot(a, a))); }

Vec3 mat_vec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 compose(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) c[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
    return c;
}

// Rest skeleton pivots.
enum Pivot : std::size_t {
    pPelvis, pNeck, pHeadCenter, pHeadTop, pLShoulder, pLElbow, pLWrist, pRShoulder, pRElbow, pRWrist,
    pLHip, pLKnee, pLAnkle, pRHip, pRKnee, pRAnkle, kPivots
};

const std::array<Vec3, kPivots> kRest{{
    {0.0, 0.05, 0.0},     // pelvis
    {0.0, -0.5, 0.0},     // neck
    {0.0, -0.71, 0.0},    // head center
    {0.0, -0.86, 0.0},    // head top
    {0.19, -0.47, 0.0},   {0.36, -0.27, 0.02},  {0.52, -0.08, 0.05},
    {-0.19, -0.47, 0.0},  {-0.36, -0.27, 0.02}, {-0.52, -0.08, 0.05},
    {0.1, 0.1, 0.0},      {0.11, 0.5, 0.02},    {0.12, 0.88, 0.0},
    {-0.1, 0.1, 0.0},     {-0.11, 0.5, 0.02},   {-0.12, 0.88, 0.0},
}};

struct PartGeometry {
    Pivot from, to;
    double radius;
    Bone bone;
};

// Indexed by BodyPart. The torso capsule spans pelvis to neck.
const std::array<PartGeometry, kBodyParts> kParts{{
    {pPelvis, pNeck, 0.15, Bone::spine},
    {pHeadCenter, pHeadTop, 0.1, Bone::neck},
    {pLShoulder, pLElbow, 0.05, Bone::left_shoulder},
    {pLElbow, pLWrist, 0.04, Bone::left_elbow},
    {pRShoulder, pRElbow, 0.05, Bone::right_shoulder},
    {pRElbow, pRWrist, 0.04, Bone::right_elbow},
    {pLHip, pLKnee, 0.07, Bone::left_hip},
    {pLKnee, pLAnkle, 0.05, Bone::left_knee},
    {pRHip, pRKnee, 0.07, Bone::right_hip},
    {pRKnee, pRAnkle, 0.05, Bone::right_knee},
}};

struct BoneDef {
    int parent;  // index into bones, −1 for the root frame
    Pivot pivot;
};

// Indexed by Bone; parents precede children.
const std::array<BoneDef, kBones> kBoneDefs{{
    {-1, pPelvis},
    {0, pNeck},
    {0, pLShoulder}, {2, pLElbow},
    {0, pRShoulder}, {4, pRElbow},
    {-1, pLHip}, {6, pLKnee},
    {-1, pRHip}, {8, pRKnee},
}};

// Joint regressor targets, in BodyJoint order.
const std::array<Pivot, kBodyJoints> kJointPivots{pPelvis, pRHip, pRKnee, pRAnkle, pLHip, pLKnee, pLAnkle,
                                                  pHeadCenter, pLShoulder, pLElbow, pLWrist,
                                                  pRShoulder, pRElbow, pRWrist};

std::vector<Vec3> keypoint_targets() {
    const Vec3 h = kRest[pHeadCenter];
    std::vector<Vec3> t{
        add(h, {0.0, 0.02, 0.1}),                                      // nose
        add(h, {0.035, -0.02, 0.09}), add(h, {-0.035, -0.02, 0.09}),   // eyes
        add(h, {0.1, 0.0, 0.0}), add(h, {-0.1, 0.0, 0.0}),             // ears
    };
    for (auto p : {pLShoulder, pRShoulder, pLElbow, pRElbow, pLWrist, pRWrist, pLHip, pRHip, pLKnee, pRKnee,
                   pLAnkle, pRAnkle})
        t.push_back(kRest[p]);
    return t;
}

// Largest-remainder split of `total` proportional to lateral capsule area, at least 2 each.
std::array<std::size_t, kBodyParts> allocate(std::size_t total) {
    std::array<double, kBodyParts> area{};
    double sum = 0.0;
    for (std::size_t p = 0; p < kBodyParts; ++p) {
        const auto axis = sub(kRest[kParts[p].to], kRest[kParts[p].from]);
        area[p] = kParts[p].radius * std::sqrt(dot(axis, axis));
        sum += area[p];
    }
    const std::size_t floor_each = 2, spare = total - floor_each * kBodyParts;
    std::array<std::size_t, kBodyParts> n{};
    std::array<double, kBodyParts> rem{};
    std::size_t used = 0;
    for (std::size_t p = 0; p < kBodyParts; ++p) {
        const double share = static_cast<double>(spare) * area[p] / sum;
        n[p] = floor_each + static_cast<std::size_t>(std::floor(share));
        rem[p] = share - std::floor(share);
        used += n[p];
    }
    std::array<std::size_t, kBodyParts> order{};
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; used < total; ++i, ++used) ++n[order[i % kBodyParts]];
    return n;
}

}  // namespace

const std::array<const char*, kBodyJoints>& body_joint_names() {
    static const std::array<const char*, kBodyJoints> names{
        "pelvis", "right_hip", "right_knee", "right_ankle", "left_hip", "left_knee", "left_ankle",
        "head", "left_shoulder", "left_elbow", "left_wrist", "right_shoulder", "right_elbow", "right_wrist"};
    return names;
}

const std::array<const char*, kCocoKeypoints>& coco_keypoint_names() {
    static const std::array<const char*, kCocoKeypoints> names{
        "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
        "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip",
        "left_knee", "right_knee", "left_ankle", "right_ankle"};
    return names;
}

std::array<double, 9> euler_rotation(const std::array<double, 3>& a) {
    const double cy = std::cos(a[0]), sy = std::sin(a[0]);
    const double cx = std::cos(a[1]), sx = std::sin(a[1]);
    const double cz = std::cos(a[2]), sz = std::sin(a[2]);
    const Mat3 ry{cy, 0, sy, 0, 1, 0, -sy, 0, cy};
    const Mat3 rx{1, 0, 0, 0, cx, -sx, 0, sx, cx};
    const Mat3 rz{cz, -sz, 0, sz, cz, 0, 0, 0, 1};
    return compose(rz, compose(rx, ry));
}

Articulation Articulation::random(std::mt19937_64& rng) {
    Articulation a;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto draw = [&](Bone b, double yaw, double pitch, double roll) {
        a.angles[static_cast<std::size_t>(b)] = {yaw * u(rng), pitch * u(rng), roll * u(rng)};
    };
    draw(Bone::spine, 0.3, 0.25, 0.15);
    draw(Bone::neck, 0.4, 0.3, 0.2);
    draw(Bone::left_shoulder, 0.4, 0.6, 0.7);
    draw(Bone::right_shoulder, 0.4, 0.6, 0.7);
    draw(Bone::left_hip, 0.2, 0.5, 0.25);
    draw(Bone::right_hip, 0.2, 0.5, 0.25);
    // Single-axis hinges: flexion only.
    std::uniform_real_distribution<double> flex(0.0, 1.2);
    a.angles[static_cast<std::size_t>(Bone::left_elbow)] = {0.0, -flex(rng), 0.0};
    a.angles[static_cast<std::size_t>(Bone::right_elbow)] = {0.0, -flex(rng), 0.0};
    a.angles[static_cast<std::size_t>(Bone::left_knee)] = {0.0, flex(rng), 0.0};
    a.angles[static_cast<std::size_t>(Bone::right_knee)] = {0.0, flex(rng), 0.0};
    std::uniform_real_distribution<double> s(0.9, 1.1);
    a.shape = {s(rng), s(rng), s(rng)};
    return a;
}

Tensor nearest_vertex_regressor(const Tensor& vertices, const std::vector<std::array<double, 3>>& targets,
                                std::size_t neighbours) {
    const std::size_t m = vertices.dim(0);
    neighbours = std::min(neighbours, m);
    std::vector<double> w(targets.size() * m, 0.0);
    std::vector<std::size_t> idx(m);
    std::vector<double> d2(m);
    for (std::size_t t = 0; t < targets.size(); ++t) {
        for (std::size_t i = 0; i < m; ++i) {
            const Vec3 v{vertices.at(i, 0), vertices.at(i, 1), vertices.at(i, 2)};
            const auto d = sub(v, targets[t]);
            d2[i] = dot(d, d);
        }
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return d2[a] < d2[b]; });
        const double bandwidth = std::max(d2[idx[neighbours - 1]], 1e-12);
        double z = 0.0;
        for (std::size_t k = 0; k < neighbours; ++k) z += std::exp(-d2[idx[k]] / bandwidth);
        for (std::size_t k = 0; k < neighbours; ++k) w[t * m + idx[k]] = std::exp(-d2[idx[k]] / bandwidth) / z;
    }
    return Tensor::from({targets.size(), m}, std::move(w));
}

std::vector<std::size_t> farthest_point_subset(const Tensor& vertices, std::size_t count) {
    const std::size_t m = vertices.dim(0);
    if (count > m) throw ContractError("farthest_point_subset: requested " + std::to_string(count) +
                                       " of " + std::to_string(m) + " vertices");
    std::vector<std::size_t> chosen;
    std::vector<double> best(m, std::numeric_limits<double>::infinity());
    std::size_t next = 0;
    while (chosen.size() < count) {
        chosen.push_back(next);
        std::size_t arg = 0;
        double far = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            double d = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double e = vertices.at(i, c) - vertices.at(next, c);
                d += e * e;
            }
            best[i] = std::min(best[i], d);
            if (best[i] > far) {
                far = best[i];
                arg = i;
            }
        }
        next = arg;
    }
    return chosen;
}

BodyModel BodyModel::create(std::size_t full_vertices) {
    if (full_vertices < 2 * kBodyParts)
        throw ContractError("body model needs at least " + std::to_string(2 * kBodyParts) + " vertices");
    BodyModel body;
    const auto counts = allocate(full_vertices);
    std::vector<double> v;
    v.reserve(full_vertices * 3);
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (std::size_t p = 0; p < kBodyParts; ++p) {
        const auto& g = kParts[p];
        const Vec3 a = kRest[g.from], b = kRest[g.to];
        const Vec3 axis = normalized(sub(b, a));
        const Vec3 helper = std::abs(axis[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
        const Vec3 u = normalized(cross(axis, helper));
        const Vec3 w = cross(axis, u);
        const double depth = p == static_cast<std::size_t>(BodyPart::torso) ? 0.6 : 1.0;
        for (std::size_t i = 0; i < counts[p]; ++i) {
            const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(counts[p]);
            const double theta = golden * static_cast<double>(i);
            const Vec3 ring = add(scaled(u, std::cos(theta) * g.radius), scaled(w, std::sin(theta) * g.radius * depth));
            const Vec3 pt = add(add(a, scaled(sub(b, a), t)), ring);
            v.insert(v.end(), pt.begin(), pt.end());
            body.part_.push_back(static_cast<BodyPart>(p));
        }
    }
    body.rest_ = Tensor::from({full_vertices, 3}, std::move(v));

    std::vector<Vec3> joint_targets;
    for (auto p : kJointPivots) joint_targets.push_back(kRest[p]);
    body.joint_reg_ = nearest_vertex_regressor(body.rest_, joint_targets, 6);
    body.keypoint_reg_ = nearest_vertex_regressor(body.rest_, keypoint_targets(), 6);
    return body;
}

BodyPose BodyModel::pose(const Articulation& art) const {
    struct Frame {
        Mat3 r;
        Vec3 t;
    };
    const Vec3 s = art.shape;
    auto shaped = [&](const Vec3& p) { return Vec3{p[0] * s[0], p[1] * s[1], p[2] * s[2]}; };

    // World frame of each bone: x ↦ R_parent·(pivot + R_b·(x − pivot)) + t_parent.
    std::array<Frame, kBones> frames{};
    for (std::size_t b = 0; b < kBones; ++b) {
        const auto& def = kBoneDefs[b];
        const Frame parent = def.parent < 0 ? Frame{kIdentity, {0, 0, 0}} : frames[static_cast<std::size_t>(def.parent)];
        const Mat3 local = euler_rotation(art.angles[b]);
        const Vec3 pivot = shaped(kRest[def.pivot]);
        const Vec3 local_t = sub(pivot, mat_vec(local, pivot));
        frames[b] = {compose(parent.r, local), add(mat_vec(parent.r, local_t), parent.t)};
    }

    const std::size_t m = vertex_count();
    std::vector<double> out(m * 3);
    for (std::size_t i = 0; i < m; ++i) {
        const Frame& f = frames[static_cast<std::size_t>(kParts[static_cast<std::size_t>(part_[i])].bone)];
        const Vec3 p = add(mat_vec(f.r, shaped({rest_.at(i, 0), rest_.at(i, 1), rest_.at(i, 2)})), f.t);
        std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    BodyPose pose;
    pose.vertices = Tensor::from({m, 3}, std::move(out));
    auto regress = [&](const Tensor& w) {
        const std::size_t k = w.dim(0);
        std::vector<double> j(k * 3, 0.0);
        for (std::size_t r = 0; r < k; ++r)
            for (std::size_t i = 0; i < m; ++i) {
                const double wi = w.at(r, i);
                if (wi == 0.0) continue;
                for (std::size_t c = 0; c < 3; ++c) j[r * 3 + c] += wi * pose.vertices.at(i, c);
            }
        return Tensor::from({k, 3}, std::move(j));
    };
    pose.joints = regress(joint_reg_);
    pose.keypoints = regress(keypoint_reg_);
    return pose;
}

}  // namespace xf
