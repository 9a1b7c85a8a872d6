#pragma once

// Camera model, supervision losses and MPJPE evaluation.

#include <Eigen/Core>
#include <string>
#include <vector>

#include "handkin/errors.hpp"

namespace handkin {

/// N x 3 joint positions, one row per joint, in meters unless stated otherwise.
using JointPositions = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
/// N x 2 image points in pixels.
using ImagePoints = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// Pinhole camera P = K [R | t].
struct Camera {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  /// Throws ValidationError unless K is upper-triangular with positive diagonal and R is a rotation.
  void validate() const;
};

/// Camera looking down +z at the world origin from `distance` meters, image of size 2*cx by 2*cy.
Camera make_camera(double focal, double cx, double cy, double distance);

class ProjectionError : public NumericalError {
 public:
  ProjectionError(const std::string& what, std::vector<std::size_t> joints)
      : NumericalError(what), joints_(std::move(joints)) {}
  const std::vector<std::size_t>& joints() const noexcept { return joints_; }

 private:
  std::vector<std::size_t> joints_;
};

enum class Alignment { none, root_centered, root_centered_scale_normalized };

Alignment parse_alignment(const std::string& name);
std::string to_string(Alignment a);

/// Reference bone used for scale normalization.
struct AnchorBone {
  std::size_t root = 0;
  std::size_t tip = 5;
};

JointPositions world_to_camera(const JointPositions& world, const Camera& cam);
JointPositions camera_to_world(const JointPositions& camera_frame, const Camera& cam);

/// Perspective division of K * X. Throws ProjectionError listing joints with depth <= 0.
ImagePoints project(const JointPositions& camera_frame, const Eigen::Matrix3d& K);

/// Mean absolute error over all coordinates.
double loss_l1_3d(const JointPositions& pred, const JointPositions& gt);

/// Mean Euclidean pixel distance between projected `pred_3d` and `gt_2d`.
double loss_reprojection(const JointPositions& pred_3d, const ImagePoints& gt_2d, const Eigen::Matrix3d& K);

/// Mean per-joint position error in millimeters (inputs in meters).
double mpjpe(const JointPositions& pred, const JointPositions& gt, Alignment align = Alignment::root_centered_scale_normalized,
             AnchorBone anchor = {});

/// Per-joint errors in millimeters under the same alignment as mpjpe().
Eigen::VectorXd per_joint_error(const JointPositions& pred, const JointPositions& gt, Alignment align,
                                AnchorBone anchor = {});

/// Translates the root to the origin and rescales so the anchor bone has unit length.
JointPositions normalize_pose(const JointPositions& positions, AnchorBone anchor = {});

/// Left-hand convention: negates x of every joint.
JointPositions mirror_x(const JointPositions& positions);

/// Flattens to joint-major x0 y0 z0 x1 ...
Eigen::VectorXd flatten_positions(const JointPositions& positions);
JointPositions unflatten_positions(const Eigen::VectorXd& flat);

}  // namespace handkin
