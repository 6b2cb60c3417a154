#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "xformer/tensor.hpp"

namespace xf {

// Regressed 3D joints. The order matches the 14-joint evaluation subset of the
// 17-joint layout used by the metrics module.
inline constexpr std::size_t kBodyJoints = 14;
enum BodyJoint : std::size_t {
    kPelvis, kRightHip, kRightKnee, kRightAnkle, kLeftHip, kLeftKnee, kLeftAnkle,
    kHead, kLeftShoulder, kLeftElbow, kLeftWrist, kRightShoulder, kRightElbow, kRightWrist
};
const std::array<const char*, kBodyJoints>& body_joint_names();

// 2D detector keypoints (COCO layout).
inline constexpr std::size_t kCocoKeypoints = 17;
const std::array<const char*, kCocoKeypoints>& coco_keypoint_names();

enum class BodyPart : std::uint8_t {
    torso, head, left_upper_arm, left_forearm, right_upper_arm, right_forearm,
    left_thigh, left_shin, right_thigh, right_shin
};
inline constexpr std::size_t kBodyParts = 10;

// Articulated bones; each rotates its subtree about a pivot.
enum class Bone : std::uint8_t {
    spine, neck, left_shoulder, left_elbow, right_shoulder, right_elbow,
    left_hip, left_knee, right_hip, right_knee
};
inline constexpr std::size_t kBones = 10;

/// Per-bone Euler angles (radians, applied as Rz·Rx·Ry) and anisotropic body scale.
struct Articulation {
    std::array<std::array<double, 3>, kBones> angles{};
    std::array<double, 3> shape{1.0, 1.0, 1.0};

    /// Draws a plausible pose; elbows and knees bend about a single axis.
    static Articulation random(std::mt19937_64& rng);
};

struct BodyPose {
    Tensor vertices;   // M_full × 3
    Tensor joints;     // K_joint × 3, = W·vertices
    Tensor keypoints;  // 17 × 3, = W_kp·vertices
};

/// Procedural capsule body standing in for a parametric body model.
///
/// y points down (head at −y), x to the subject's left, unit nominal height
/// scale of about 1.8.
class BodyModel {
public:
    static BodyModel create(std::size_t full_vertices);

    std::size_t vertex_count() const { return part_.size(); }
    const Tensor& rest_vertices() const { return rest_; }
    const std::vector<BodyPart>& vertex_parts() const { return part_; }
    /// K_joint × M_full, rows sum to one.
    const Tensor& joint_regressor() const { return joint_reg_; }
    /// 17 × M_full, rows sum to one.
    const Tensor& keypoint_regressor() const { return keypoint_reg_; }

    BodyPose pose(const Articulation& articulation) const;

private:
    Tensor rest_;
    std::vector<BodyPart> part_;
    Tensor joint_reg_;
    Tensor keypoint_reg_;
};

/// Row-stochastic regressor: each target point takes Gaussian weights over its
/// nearest `neighbours` vertices.
Tensor nearest_vertex_regressor(const Tensor& vertices, const std::vector<std::array<double, 3>>& targets,
                                std::size_t neighbours);

/// Indices of `count` vertices chosen by farthest-point sampling from vertex 0.
std::vector<std::size_t> farthest_point_subset(const Tensor& vertices, std::size_t count);

/// 3×3 row-major rotation Rz(c)·Rx(b)·Ry(a) for angles {a, b, c}.
std::array<double, 9> euler_rotation(const std::array<double, 3>& angles);

}  // namespace xf
