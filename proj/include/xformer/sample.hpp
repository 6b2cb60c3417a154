#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xformer/body.hpp"
#include "xformer/keypoints.hpp"
#include "xformer/tensor.hpp"

namespace xf {

enum class DatasetType : std::uint8_t { image_3d, image_2d_only, image_pseudo3d, mocap };
inline constexpr std::array<DatasetType, 4> kDatasetTypes{DatasetType::image_3d, DatasetType::image_2d_only,
                                                          DatasetType::image_pseudo3d, DatasetType::mocap};
const char* dataset_type_name(DatasetType t);
DatasetType parse_dataset_type(const std::string& name);
inline bool has_image(DatasetType t) { return t != DatasetType::mocap; }
inline bool has_3d(DatasetType t) { return t != DatasetType::image_2d_only; }

struct PoseSample {
    DatasetType type = DatasetType::mocap;
    std::optional<Tensor> image;         // H × W × 3 in [0, 1]
    std::optional<Keypoints2D> keypoints;  // detector layout, pixels
    std::optional<Tensor> joints2d;      // K_joint × 2, pixels (reprojection target)
    std::vector<bool> joints2d_visible;
    std::optional<Tensor> joints3d;      // K_joint × 3
    std::optional<Tensor> vertices3d;    // M_full × 3
    std::uint64_t sequence = 0;
    std::uint64_t frame = 0;

    /// Type invariants: mocap has no image but keypoints and 3D targets;
    /// 2D-only samples carry no 3D targets.
    void validate() const;
};

/// Angles in degrees, shift in pixels.
struct AugmentConfig {
    double roll = 30.0, pitch = 30.0, yaw = 60.0;
    double shift = 20.0;
    double scale_min = 0.9, scale_max = 1.1;
};

/// One concrete augmentation; angles in radians.
struct AugmentDraw {
    double yaw = 0.0, pitch = 0.0, roll = 0.0;
    double shift_x = 0.0, shift_y = 0.0;
    double scale = 1.0;

    static AugmentDraw sample(const AugmentConfig& cfg, std::mt19937_64& rng);
    /// Rz(roll)·Rx(pitch)·Ry(yaw), row-major.
    std::array<double, 9> rotation() const;
};

/// Orthographic image frame: pixel = center + scale·f·(x, y) + shift.
struct OrthoFrame {
    double pixels_per_unit = 1.0;
    double center_x = 0.0, center_y = 0.0;

    static OrthoFrame for_image(std::size_t image_h, std::size_t image_w);
};

/// Rotates the body, drops z, then applies scale and shift in the image plane.
/// Keypoints outside the image rectangle are marked invisible.
PoseSample mocap_to_sample(const BodyPose& pose, const AugmentDraw& aug, const OrthoFrame& frame,
                           std::size_t image_h, std::size_t image_w);
PoseSample mocap_to_sample(const BodyPose& pose, const AugmentConfig& aug, const OrthoFrame& frame,
                           std::size_t image_h, std::size_t image_w, std::mt19937_64& rng);

/// Pixel positions of `vertices` under `aug` and `frame`.
std::vector<std::array<double, 2>> project_points(const Tensor& points, const AugmentDraw& aug, const OrthoFrame& frame);

/// Per-part coloured Gaussian splats over a uniform-noise background.
Tensor render_synthetic_image(const std::vector<std::array<double, 2>>& vertices_px, const std::vector<BodyPart>& parts,
                              std::size_t image_h, std::size_t image_w, std::mt19937_64& rng);

struct DatasetSpec {
    std::map<DatasetType, std::size_t> counts;
    std::uint64_t seed = 0;

    std::size_t total() const;
    /// JSON: {"seed": s, "counts": {"image_3d": n, ...}}.
    static DatasetSpec parse_json(const std::string& text);
    static DatasetSpec load(const std::string& path);
};

struct SynthesisContext {
    const BodyModel* body = nullptr;
    std::size_t image_h = 128, image_w = 128;
    AugmentConfig augment;
    OrthoFrame frame;
};

/// Sample `index` of the stream; a pure function of (spec.seed, index, type).
PoseSample synthesize_sample(const SynthesisContext& ctx, DatasetType type, std::uint64_t seed, std::uint64_t index);

/// Type order of a deterministic interleave with exact per-type counts.
std::vector<DatasetType> interleave_types(const DatasetSpec& spec);

std::vector<PoseSample> make_dataset(const DatasetSpec& spec, const SynthesisContext& ctx);

/// Little-endian "XFS1" record stream.
std::string serialize_samples(const std::vector<PoseSample>& samples);
std::vector<PoseSample> deserialize_samples(const std::string& bytes);
void save_samples(const std::string& path, const std::vector<PoseSample>& samples);
std::vector<PoseSample> load_samples(const std::string& path);

}  // namespace xf
