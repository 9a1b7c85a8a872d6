#pragma once

// Hand skeleton: a rooted tree of joints carrying rotational degrees of
// freedom, Euler-angle limits and bone-length proportion limits.
//
// A joint's Euler angles rotate the bone that arrives at the joint from its
// parent (p_i = R_i o_i + p_parent), so the rotation pivots at the parent.
// Active axes by DoF count: 1 -> x, 2 -> x and z, 3 -> x, y and z.

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "handkin/errors.hpp"

namespace handkin {

struct Limit {
  double min = 0.0;
  double max = 0.0;

  bool operator==(const Limit&) const = default;
};

using AxisMask = std::array<bool, 3>;

/// Axes driven by a joint with `dof` rotational degrees of freedom.
AxisMask active_axes(int dof);

struct JointSpec {
  std::size_t id = 0;
  std::optional<std::size_t> parent;
  int dof = 0;
  /// One entry per active axis, in x, y, z order.
  std::vector<Limit> euler_limits;
  Eigen::Vector3d offset_direction = Eigen::Vector3d::UnitY();
  Limit proportion_limits{1.0, 1.0};
  std::string name;
  /// Static per-finger offset rotation (x, y, z) composed before the joint's own rotation.
  std::optional<std::array<Limit, 3>> splay_limits;
};

struct SkeletonGraph {
  std::vector<JointSpec> joints;
  /// Joint whose incoming bone is the scale reference.
  std::size_t anchor_edge = 0;
  std::vector<std::vector<std::size_t>> bfs_levels;
};

struct Violation {
  std::string kind;  // "cycle", "orphan", "root", "missing anchor", "inverted limit", "dof", "offset", "levels", "id"
  std::size_t joint = 0;
  std::string detail;
};

/// Checks every graph invariant and reports all violations found.
std::vector<Violation> validate_graph(const SkeletonGraph& g);

/// Groups joints by tree depth. Throws ValidationError if the parents do not form a tree.
std::vector<std::vector<std::size_t>> compute_bfs_levels(const std::vector<JointSpec>& joints);

/// The 21-joint right hand: wrist root, thumb CMC/MCP/IP/tip, and four fingers MCP/PIP/DIP/tip.
SkeletonGraph canonical_hand_topology();

namespace hand {
inline constexpr std::size_t kWrist = 0;
inline constexpr std::size_t kIndexMcp = 5;
inline constexpr std::size_t kJointCount = 21;
inline constexpr std::size_t kAngleCount = 41;
inline constexpr std::size_t kProportionCount = 20;
}  // namespace hand

/// A validated graph plus the packing layout of its parameter vectors.
class Skeleton {
 public:
  /// Throws ValidationError listing every violation.
  explicit Skeleton(SkeletonGraph graph);

  static const Skeleton& canonical_hand();

  const SkeletonGraph& graph() const noexcept { return graph_; }
  const std::vector<JointSpec>& joints() const noexcept { return graph_.joints; }
  const JointSpec& joint(std::size_t id) const { return graph_.joints.at(id); }
  std::size_t joint_count() const noexcept { return graph_.joints.size(); }
  std::size_t root() const noexcept { return root_; }
  std::size_t anchor_joint() const noexcept { return graph_.anchor_edge; }
  const std::vector<std::vector<std::size_t>>& levels() const noexcept { return graph_.bfs_levels; }

  /// Articulated DoF plus three splay angles per splayed joint.
  std::size_t angle_count() const noexcept { return angle_limits_.size(); }
  std::size_t articulated_dof() const noexcept { return articulated_dof_; }
  std::size_t proportion_count() const noexcept { return proportion_limits_.size(); }
  /// Length of the flat raw parameter vector: root 9 + offset 3 + angles + proportions + anchor 1.
  std::size_t raw_size() const noexcept { return 9 + 3 + angle_count() + proportion_count() + 1; }

  /// First slot of joint `id`'s articulation angles; `dof` consecutive slots follow.
  std::size_t angle_slot(std::size_t id) const { return angle_slot_.at(id); }
  /// First of three splay slots, if the joint is splayed.
  std::optional<std::size_t> splay_slot(std::size_t id) const { return splay_slot_.at(id); }
  /// Proportion slot of the bone arriving at `id`; none for the root.
  std::optional<std::size_t> proportion_slot(std::size_t id) const { return proportion_slot_.at(id); }

  const std::vector<Limit>& angle_limits() const noexcept { return angle_limits_; }
  const std::vector<Limit>& proportion_limits() const noexcept { return proportion_limits_; }
  /// True for angle slots that do not influence FK (the root's Euler slots).
  const std::vector<bool>& masked_angles() const noexcept { return masked_angles_; }

  /// Stable 64-bit FNV-1a hash of the JSON serialization.
  std::uint64_t hash() const;

 private:
  SkeletonGraph graph_;
  std::size_t root_ = 0;
  std::size_t articulated_dof_ = 0;
  std::vector<std::size_t> angle_slot_;
  std::vector<std::optional<std::size_t>> splay_slot_;
  std::vector<std::optional<std::size_t>> proportion_slot_;
  std::vector<Limit> angle_limits_;
  std::vector<Limit> proportion_limits_;
  std::vector<bool> masked_angles_;
};

/// Raw (pre-normalization) pose parameters.
struct PoseParams {
  Eigen::Matrix3d root_rotation_raw = Eigen::Matrix3d::Identity();
  Eigen::Vector3d root_offset = Eigen::Vector3d::Zero();
  Eigen::VectorXd angles;
  Eigen::VectorXd proportions_raw;
  double anchor_length = 1.0;
};

struct PoseComponents {
  Eigen::Matrix3d root_rotation_raw;
  Eigen::Vector3d root_offset;
  Eigen::VectorXd angles;
  Eigen::VectorXd proportions_raw;
  double anchor_length;
};

/// Throws ValidationError on length mismatch or non-positive anchor length.
PoseParams pack_params(const Skeleton& skeleton, const Eigen::Matrix3d& root_rotation_raw,
                       const Eigen::Vector3d& root_offset, const Eigen::VectorXd& angles,
                       const Eigen::VectorXd& proportions_raw, double anchor_length);
PoseComponents unpack_params(const PoseParams& params);

/// All-zero raw pose (every angle at the middle of its range) with identity root.
PoseParams zero_params(const Skeleton& skeleton, double anchor_length = 1.0);

/// Flat layout: root matrix row-major (9), root offset (3), angles, proportions, anchor length.
Eigen::VectorXd flatten(const PoseParams& params);
PoseParams unflatten(const Skeleton& skeleton, const Eigen::VectorXd& flat);

void check_params(const Skeleton& skeleton, const PoseParams& params);

}  // namespace handkin
