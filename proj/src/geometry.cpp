#include "handkin/geometry.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace handkin {

namespace {

void require_same(const JointPositions& a, const JointPositions& b) {
  if (a.rows() != b.rows()) {
    throw ValidationError("pose joint counts differ: " + std::to_string(a.rows()) + " vs " + std::to_string(b.rows()));
  }
}

JointPositions align_pose(const JointPositions& p, Alignment align, AnchorBone anchor, double target_anchor) {
  if (align == Alignment::none) return p;
  if (anchor.root >= static_cast<std::size_t>(p.rows()) || anchor.tip >= static_cast<std::size_t>(p.rows())) {
    throw ValidationError("anchor bone joints outside the pose");
  }
  JointPositions out = p.rowwise() - p.row(static_cast<Eigen::Index>(anchor.root));
  if (align == Alignment::root_centered_scale_normalized) {
    const double len = out.row(static_cast<Eigen::Index>(anchor.tip)).norm();
    if (!(len > 0.0)) throw NumericalError("anchor bone has zero length; cannot normalize scale");
    out *= target_anchor / len;
  }
  return out;
}

}  // namespace

void Camera::validate() const {
  if (!(K(0, 0) > 0.0 && K(1, 1) > 0.0 && K(2, 2) > 0.0) || K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0) {
    throw ValidationError("camera K must be upper-triangular with positive diagonal");
  }
  if (!((R.transpose() * R - Eigen::Matrix3d::Identity()).norm() < 1e-9) || !(std::abs(R.determinant() - 1.0) < 1e-9)) {
    throw ValidationError("camera R is not a rotation");
  }
  if (!t.allFinite()) throw ValidationError("camera t is not finite");
}

Camera make_camera(double focal, double cx, double cy, double distance) {
  Camera cam;
  cam.K << focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0;
  cam.t = Eigen::Vector3d(0.0, 0.0, distance);
  return cam;
}

Alignment parse_alignment(const std::string& name) {
  if (name == "none") return Alignment::none;
  if (name == "root_centered") return Alignment::root_centered;
  if (name == "root_centered_scale_normalized") return Alignment::root_centered_scale_normalized;
  throw ValidationError("unknown alignment '" + name + "'");
}

std::string to_string(Alignment a) {
  switch (a) {
    case Alignment::none: return "none";
    case Alignment::root_centered: return "root_centered";
    case Alignment::root_centered_scale_normalized: return "root_centered_scale_normalized";
  }
  return "none";
}

JointPositions world_to_camera(const JointPositions& world, const Camera& cam) {
  JointPositions out = world * cam.R.transpose();
  out.rowwise() += cam.t.transpose();
  return out;
}

JointPositions camera_to_world(const JointPositions& camera_frame, const Camera& cam) {
  JointPositions out = camera_frame.rowwise() - cam.t.transpose();
  return out * cam.R;
}

ImagePoints project(const JointPositions& camera_frame, const Eigen::Matrix3d& K) {
  std::vector<std::size_t> bad;
  for (Eigen::Index i = 0; i < camera_frame.rows(); ++i) {
    if (!(camera_frame(i, 2) > 0.0)) bad.push_back(static_cast<std::size_t>(i));
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "non-positive depth for joint(s)";
    for (std::size_t j : bad) os << ' ' << j;
    throw ProjectionError(os.str(), std::move(bad));
  }
  ImagePoints out(camera_frame.rows(), 2);
  for (Eigen::Index i = 0; i < camera_frame.rows(); ++i) {
    const Eigen::Vector3d h = K * camera_frame.row(i).transpose();
    out(i, 0) = h(0) / h(2);
    out(i, 1) = h(1) / h(2);
  }
  return out;
}

double loss_l1_3d(const JointPositions& pred, const JointPositions& gt) {
  require_same(pred, gt);
  if (pred.size() == 0) throw ValidationError("empty pose");
  return (pred - gt).cwiseAbs().sum() / static_cast<double>(pred.size());
}

double loss_reprojection(const JointPositions& pred_3d, const ImagePoints& gt_2d, const Eigen::Matrix3d& K) {
  if (pred_3d.rows() != gt_2d.rows()) throw ValidationError("2D and 3D joint counts differ");
  const ImagePoints proj = project(pred_3d, K);
  return (proj - gt_2d).rowwise().norm().mean();
}

Eigen::VectorXd per_joint_error(const JointPositions& pred, const JointPositions& gt, Alignment align,
                                AnchorBone anchor) {
  require_same(pred, gt);
  double target_anchor = 1.0;
  if (align == Alignment::root_centered_scale_normalized) {
    target_anchor = (gt.row(static_cast<Eigen::Index>(anchor.tip)) - gt.row(static_cast<Eigen::Index>(anchor.root))).norm();
  }
  const JointPositions a = align_pose(pred, align, anchor, target_anchor);
  const JointPositions b = align == Alignment::root_centered_scale_normalized
                               ? align_pose(gt, Alignment::root_centered, anchor, 1.0)
                               : align_pose(gt, align, anchor, 1.0);
  return (a - b).rowwise().norm() * 1000.0;
}

double mpjpe(const JointPositions& pred, const JointPositions& gt, Alignment align, AnchorBone anchor) {
  if (pred.rows() == 0) throw ValidationError("empty pose");
  return per_joint_error(pred, gt, align, anchor).mean();
}

JointPositions normalize_pose(const JointPositions& positions, AnchorBone anchor) {
  return align_pose(positions, Alignment::root_centered_scale_normalized, anchor, 1.0);
}

JointPositions mirror_x(const JointPositions& positions) {
  JointPositions out = positions;
  out.col(0) *= -1.0;
  return out;
}

Eigen::VectorXd flatten_positions(const JointPositions& positions) {
  return Eigen::Map<const Eigen::VectorXd>(positions.data(), positions.size());
}

JointPositions unflatten_positions(const Eigen::VectorXd& flat) {
  if (flat.size() % 3 != 0) throw ValidationError("flattened pose length is not a multiple of 3");
  return Eigen::Map<const JointPositions>(flat.data(), flat.size() / 3, 3);
}

}  // namespace handkin
