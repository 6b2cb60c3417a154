#include "xformer/sample.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "xformer/binary_io.hpp"

namespace xf {

const char* dataset_type_name(DatasetType t) {
    switch (t) {
        case DatasetType::image_3d: return "image_3d";
        case DatasetType::image_2d_only: return "image_2d_only";
        case DatasetType::image_pseudo3d: return "image_pseudo3d";
        case DatasetType::mocap: return "mocap";
    }
    return "unknown";
}

DatasetType parse_dataset_type(const std::string& name) {
    for (auto t : kDatasetTypes)
        if (name == dataset_type_name(t)) return t;
    throw FormatError("unknown dataset type '" + name + "'");
}

void PoseSample::validate() const {
    const std::string tag = dataset_type_name(type);
    if (has_image(type) != image.has_value())
        throw ContractError(tag + " sample " + (image ? "carries" : "lacks") + " an image");
    if (!keypoints) throw ContractError(tag + " sample lacks 2D keypoints");
    if (keypoints->visible.size() != keypoints->size()) throw ContractError(tag + " sample keypoint visibility mismatch");
    if (!joints2d || joints2d_visible.size() != joints2d->dim(0))
        throw ContractError(tag + " sample lacks 2D joint targets");
    if (has_3d(type) != (joints3d.has_value() && vertices3d.has_value()))
        throw ContractError(tag + " sample 3D targets " + (has_3d(type) ? "missing" : "present"));
    if (image && (image->rank() != 3 || image->dim(2) != 3))
        throw ContractError(tag + " sample image must be H×W×3, got " + shape_str(image->shape()));
}

AugmentDraw AugmentDraw::sample(const AugmentConfig& cfg, std::mt19937_64& rng) {
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const double rad = M_PI / 180.0;
    AugmentDraw d;
    d.roll = uni(-cfg.roll, cfg.roll) * rad;
    d.pitch = uni(-cfg.pitch, cfg.pitch) * rad;
    d.yaw = uni(-cfg.yaw, cfg.yaw) * rad;
    d.shift_x = uni(-cfg.shift, cfg.shift);
    d.shift_y = uni(-cfg.shift, cfg.shift);
    d.scale = uni(cfg.scale_min, cfg.scale_max);
    return d;
}

std::array<double, 9> AugmentDraw::rotation() const { return euler_rotation({yaw, pitch, roll}); }

OrthoFrame OrthoFrame::for_image(std::size_t image_h, std::size_t image_w) {
    return {0.35 * static_cast<double>(std::min(image_h, image_w)), static_cast<double>(image_w) / 2.0,
            static_cast<double>(image_h) / 2.0};
}

namespace {

Tensor rotate(const Tensor& pts, const std::array<double, 9>& r) {
    const std::size_t n = pts.dim(0);
    std::vector<double> out(n * 3);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < 3; ++a)
            out[i * 3 + a] = r[a * 3] * pts.at(i, 0) + r[a * 3 + 1] * pts.at(i, 1) + r[a * 3 + 2] * pts.at(i, 2);
    return Tensor::from({n, 3}, std::move(out));
}

// Image-plane map applied after the rotation.
std::array<double, 2> to_pixels(double x, double y, const AugmentDraw& aug, const OrthoFrame& f) {
    return {f.center_x + aug.scale * f.pixels_per_unit * x + aug.shift_x,
            f.center_y + aug.scale * f.pixels_per_unit * y + aug.shift_y};
}

bool inside(const std::array<double, 2>& p, std::size_t h, std::size_t w) {
    return p[0] >= 0.0 && p[1] >= 0.0 && p[0] < static_cast<double>(w) && p[1] < static_cast<double>(h);
}

}  // namespace

std::vector<std::array<double, 2>> project_points(const Tensor& points, const AugmentDraw& aug, const OrthoFrame& frame) {
    const Tensor r = rotate(points, aug.rotation());
    std::vector<std::array<double, 2>> px;
    for (std::size_t i = 0; i < r.dim(0); ++i) px.push_back(to_pixels(r.at(i, 0), r.at(i, 1), aug, frame));
    return px;
}

PoseSample mocap_to_sample(const BodyPose& pose, const AugmentDraw& aug, const OrthoFrame& frame, std::size_t image_h,
                           std::size_t image_w) {
    const auto rot = aug.rotation();
    PoseSample s;
    s.type = DatasetType::mocap;
    s.vertices3d = rotate(pose.vertices, rot);
    s.joints3d = rotate(pose.joints, rot);

    const std::size_t kj = s.joints3d->dim(0);
    std::vector<double> j2(kj * 2);
    for (std::size_t i = 0; i < kj; ++i) {
        const auto p = to_pixels(s.joints3d->at(i, 0), s.joints3d->at(i, 1), aug, frame);
        j2[i * 2] = p[0];
        j2[i * 2 + 1] = p[1];
        s.joints2d_visible.push_back(inside(p, image_h, image_w));
    }
    s.joints2d = Tensor::from({kj, 2}, std::move(j2));

    Keypoints2D kp;
    for (const auto& p : project_points(pose.keypoints, aug, frame)) {
        kp.coords.push_back(p);
        kp.visible.push_back(inside(p, image_h, image_w));
    }
    s.keypoints = std::move(kp);
    return s;
}

PoseSample mocap_to_sample(const BodyPose& pose, const AugmentConfig& aug, const OrthoFrame& frame, std::size_t image_h,
                           std::size_t image_w, std::mt19937_64& rng) {
    return mocap_to_sample(pose, AugmentDraw::sample(aug, rng), frame, image_h, image_w);
}

Tensor render_synthetic_image(const std::vector<std::array<double, 2>>& vertices_px, const std::vector<BodyPart>& parts,
                              std::size_t image_h, std::size_t image_w, std::mt19937_64& rng) {
    if (parts.size() != vertices_px.size()) throw DimensionError("render_synthetic_image: part labels do not match vertices");
    static const std::array<std::array<double, 3>, kBodyParts> palette{{
        {0.9, 0.3, 0.2}, {0.95, 0.8, 0.6}, {0.2, 0.7, 0.3}, {0.1, 0.5, 0.2}, {0.2, 0.3, 0.9},
        {0.1, 0.2, 0.6}, {0.8, 0.8, 0.2}, {0.6, 0.6, 0.1}, {0.7, 0.2, 0.8}, {0.5, 0.1, 0.6},
    }};
    const std::size_t h = image_h, w = image_w;
    std::vector<double> img(h * w * 3);
    std::uniform_real_distribution<double> noise(0.0, 0.2);
    for (auto& v : img) v = noise(rng);

    constexpr double sigma = 1.0;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> alpha(h * w, 0.0), color(h * w * 3, 0.0);
    for (std::size_t i = 0; i < vertices_px.size(); ++i) {
        const auto& c = palette[static_cast<std::size_t>(parts[i])];
        const int cx = static_cast<int>(std::lround(vertices_px[i][0])), cy = static_cast<int>(std::lround(vertices_px[i][1]));
        for (int y = cy - radius; y <= cy + radius; ++y) {
            if (y < 0 || y >= static_cast<int>(h)) continue;
            for (int x = cx - radius; x <= cx + radius; ++x) {
                if (x < 0 || x >= static_cast<int>(w)) continue;
                const double dx = x - vertices_px[i][0], dy = y - vertices_px[i][1];
                const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                const std::size_t p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
                alpha[p] += g;
                for (std::size_t ch = 0; ch < 3; ++ch) color[p * 3 + ch] += g * c[ch];
            }
        }
    }
    for (std::size_t p = 0; p < h * w; ++p) {
        if (alpha[p] == 0.0) continue;
        const double a = std::min(alpha[p], 1.0);
        for (std::size_t ch = 0; ch < 3; ++ch)
            img[p * 3 + ch] = (1.0 - a) * img[p * 3 + ch] + a * color[p * 3 + ch] / alpha[p];
    }
    return Tensor::from({h, w, 3}, std::move(img));
}

std::size_t DatasetSpec::total() const {
    std::size_t n = 0;
    for (const auto& [t, c] : counts) n += c;
    return n;
}

DatasetSpec DatasetSpec::parse_json(const std::string& text) {
    DatasetSpec spec;
    try {
        const auto j = nlohmann::json::parse(text);
        spec.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("counts"))
            for (const auto& [name, n] : j.at("counts").items()) spec.counts[parse_dataset_type(name)] = n.get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset spec: ") + e.what());
    }
    return spec;
}

DatasetSpec DatasetSpec::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str());
}

PoseSample synthesize_sample(const SynthesisContext& ctx, DatasetType type, std::uint64_t seed, std::uint64_t index) {
    if (!ctx.body) throw ContractError("synthesize_sample: no body model");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    const BodyPose pose = ctx.body->pose(Articulation::random(rng));
    const AugmentDraw aug = AugmentDraw::sample(ctx.augment, rng);
    PoseSample s = mocap_to_sample(pose, aug, ctx.frame, ctx.image_h, ctx.image_w);
    s.type = type;
    s.sequence = index;
    if (has_image(type))
        s.image = render_synthetic_image(project_points(pose.vertices, aug, ctx.frame), ctx.body->vertex_parts(),
                                         ctx.image_h, ctx.image_w, rng);
    if (!has_3d(type)) {
        s.joints3d.reset();
        s.vertices3d.reset();
    }
    return s;
}

std::vector<DatasetType> interleave_types(const DatasetSpec& spec) {
    const std::size_t n = spec.total();
    std::map<DatasetType, std::size_t> produced;
    std::vector<DatasetType> order;
    for (std::size_t i = 0; i < n; ++i) {
        // Pick the type furthest behind its proportional quota; ties go to enum order.
        DatasetType best = DatasetType::image_3d;
        double best_deficit = -1e300;
        for (auto t : kDatasetTypes) {
            const auto it = spec.counts.find(t);
            const std::size_t want = it == spec.counts.end() ? 0 : it->second;
            if (produced[t] >= want) continue;
            const double deficit = static_cast<double>(want) * static_cast<double>(i + 1) / static_cast<double>(n) -
                                   static_cast<double>(produced[t]);
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = t;
            }
        }
        ++produced[best];
        order.push_back(best);
    }
    return order;
}

std::vector<PoseSample> make_dataset(const DatasetSpec& spec, const SynthesisContext& ctx) {
    std::vector<PoseSample> out;
    const auto order = interleave_types(spec);
    for (std::size_t i = 0; i < order.size(); ++i) {
        out.push_back(synthesize_sample(ctx, order[i], spec.seed, i));
        out.back().validate();
    }
    return out;
}

// Serialization ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'X', 'F', 'S', '1'};
constexpr std::uint32_t kVersion = 1;

enum Field : std::uint8_t { fImage = 1, fKeypoints = 2, fJoints2d = 4, fJoints3d = 8, fVertices = 16 };

using io::Reader;
using io::Writer;

}  // namespace

std::string serialize_samples(const std::vector<PoseSample>& samples) {
    Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    w.u64(samples.size());
    for (const auto& s : samples) {
        w.u8(static_cast<std::uint8_t>(s.type));
        w.u64(s.sequence);
        w.u64(s.frame);
        std::uint8_t flags = 0;
        if (s.image) flags |= fImage;
        if (s.keypoints) flags |= fKeypoints;
        if (s.joints2d) flags |= fJoints2d;
        if (s.joints3d) flags |= fJoints3d;
        if (s.vertices3d) flags |= fVertices;
        w.u8(flags);
        if (s.image) w.tensor(*s.image);
        if (s.keypoints) {
            w.u32(static_cast<std::uint32_t>(s.keypoints->size()));
            for (const auto& c : s.keypoints->coords) {
                w.f64(c[0]);
                w.f64(c[1]);
            }
            w.bools(s.keypoints->visible);
        }
        if (s.joints2d) {
            w.tensor(*s.joints2d);
            w.bools(s.joints2d_visible);
        }
        if (s.joints3d) w.tensor(*s.joints3d);
        if (s.vertices3d) w.tensor(*s.vertices3d);
    }
    return w.take();
}

std::vector<PoseSample> deserialize_samples(const std::string& bytes) {
    Reader r(bytes, "XFS1");
    r.expect(kMagic, 4);
    if (const auto v = r.u32(); v != kVersion) throw FormatError("XFS1: unsupported version " + std::to_string(v));
    const std::uint64_t n = r.u64();
    std::vector<PoseSample> out;
    for (std::uint64_t i = 0; i < n; ++i) {
        PoseSample s;
        const std::uint8_t type = r.u8();
        if (type > static_cast<std::uint8_t>(DatasetType::mocap)) throw FormatError("XFS1: bad dataset type");
        s.type = static_cast<DatasetType>(type);
        s.sequence = r.u64();
        s.frame = r.u64();
        const std::uint8_t flags = r.u8();
        if (flags & fImage) s.image = r.tensor();
        if (flags & fKeypoints) {
            Keypoints2D kp;
            const std::uint32_t k = r.u32();
            for (std::uint32_t j = 0; j < k; ++j) {
                const double x = r.f64();
                kp.coords.push_back({x, r.f64()});
            }
            kp.visible = r.bools();
            s.keypoints = std::move(kp);
        }
        if (flags & fJoints2d) {
            s.joints2d = r.tensor();
            s.joints2d_visible = r.bools();
        }
        if (flags & fJoints3d) s.joints3d = r.tensor();
        if (flags & fVertices) s.vertices3d = r.tensor();
        out.push_back(std::move(s));
    }
    if (!r.done()) throw FormatError("XFS1: trailing bytes after " + std::to_string(n) + " records");
    return out;
}

void save_samples(const std::string& path, const std::vector<PoseSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path + "'");
    const auto bytes = serialize_samples(samples);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<PoseSample> load_samples(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_samples(ss.str());
}

}  // namespace xf
