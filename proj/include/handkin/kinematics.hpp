#pragma once

// Constraint normalization, rotations and forward kinematics.
//
// Every joint i below the root satisfies R_i = R_parent * R'_i and
// p_i = R_i * o_i + p_parent, with o_i = offset_direction * proportion * anchor
// and R'_i = splay(i) * euler(i). Euler matrices use R = Rz * Ry * Rx.

#include <Eigen/Core>
#include <optional>
#include <vector>

#include "handkin/autodiff.hpp"
#include "handkin/geometry.hpp"
#include "handkin/skeleton.hpp"

namespace handkin {

/// (sin(x) + 1) / 2 * (max - min) + min.
double sine_normalize(double x, double a_min, double a_max);
/// d sine_normalize / dx.
double sine_normalize_derivative(double x, double a_min, double a_max);

/// Rz(e_z) * Ry(e_y) * Rx(e_x) with inactive axes forced to zero.
Eigen::Matrix3d euler_to_rotation(const Eigen::Vector3d& e, AxisMask active = {true, true, true});

/// Nearest rotation U diag(1, 1, det(U V^T)) V^T. Throws DegenerateInputError
/// when two or more singular values fall below 1e-12 * ||M||_F.
Eigen::Matrix3d svd_orthogonalize(const Eigen::Matrix3d& m);

/// Reverse-mode adjoint of svd_orthogonalize: maps dL/dR to dL/dM.
Eigen::Matrix3d svd_orthogonalize_pullback(const Eigen::Matrix3d& m, const Eigen::Matrix3d& grad_r);

struct RigidPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

struct FkResult {
  JointPositions positions;
  std::vector<RigidPose> poses;
};

/// Normalized angles in radians, one per angle slot. Masked slots are still normalized.
Eigen::VectorXd normalized_angles(const Skeleton& skeleton, const Eigen::VectorXd& raw);
Eigen::VectorXd normalized_proportions(const Skeleton& skeleton, const Eigen::VectorXd& raw);

/// Local rotation R'_i of joint `id` from normalized angles.
Eigen::Matrix3d local_rotation(const Skeleton& skeleton, std::size_t id, const Eigen::VectorXd& angles);

FkResult forward_kinematics(const Skeleton& skeleton, const PoseParams& params);

/// 63 x raw_size Jacobian of the flattened positions, by one reverse sweep per output row.
Eigen::MatrixXd fk_jacobian(const Skeleton& skeleton, const PoseParams& params);

/// Same Jacobian from closed-form derivatives of the kinematic chain.
Eigen::MatrixXd fk_jacobian_analytic(const Skeleton& skeleton, const PoseParams& params);

/// Constraint violations of a parameter set and of the positions it claims to produce:
/// normalized angles and proportions outside their limits, a non-rotation root, and
/// bone-length ratios measured on `positions` that leave the proportion limits.
int count_violations(const Skeleton& skeleton, const PoseParams& params, const JointPositions& positions,
                     double tol = 1e-9);

// ---- differentiable layer --------------------------------------------------

namespace fk {

/// Elementwise sine normalization of x[B, n] with per-column limits.
ad::Var sine_normalize(ad::Var x, const std::vector<Limit>& limits);
/// Rotation matrices [B, 3, 3] from angles e[B, k], k = number of active axes in `axes`.
ad::Var euler_rotation(ad::Var e, AxisMask axes);
/// Batched svd_orthogonalize of m[B, 3, 3].
ad::Var polar_rotation(ad::Var m);

/// Raw batched inputs. Missing root_offset means zero, missing anchor means one.
struct Inputs {
  ad::Var root_rotation_raw;  // [B, 3, 3]
  std::optional<ad::Var> root_offset;  // [B, 3]
  ad::Var angles;  // [B, angle_count]
  ad::Var proportions;  // [B, proportion_count]
  std::optional<ad::Var> anchor_length;  // [B, 1]
};

struct Outputs {
  ad::Var positions;  // [B, joints, 3]
  ad::Var root_rotation;  // [B, 3, 3], orthonormalized
};

Outputs forward(const Skeleton& skeleton, const Inputs& in);

/// Splits a flat raw vector batch x[B, raw_size] into FK inputs.
Inputs split_flat(const Skeleton& skeleton, ad::Var flat);

}  // namespace fk

}  // namespace handkin
