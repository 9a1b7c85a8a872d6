#pragma once

// Independent reference implementations used only by tests.

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <cmath>
#include <functional>
#include <vector>

#include "handkin/geometry.hpp"
#include "handkin/skeleton.hpp"

namespace oracle {

/// Rotation maximizing trace(R^T M), from the dominant eigenvector of Horn's 4x4 quaternion matrix.
inline Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
  const Eigen::Matrix3d s = m.transpose();
  const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2);
  const double syx = s(1, 0), syy = s(1, 1), syz = s(1, 2);
  const double szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
  Eigen::Matrix4d n;
  n << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
       syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
       szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
       sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(n);
  const Eigen::Vector4d q = es.eigenvectors().col(3);
  return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).normalized().toRotationMatrix();
}

/// Depth-first recursive forward kinematics written against the joint table only.
inline handkin::JointPositions recursive_fk(const handkin::SkeletonGraph& g, const handkin::PoseParams& p) {
  const std::size_t n = g.joints.size();
  // Slot layout: articulation DoF in id order, then splay triples in id order.
  std::vector<std::size_t> art(n), splay(n, 0), prop(n, 0);
  std::vector<handkin::Limit> angle_limits, prop_limits;
  std::size_t root = 0;
  for (std::size_t i = 0; i < n; ++i) {
    art[i] = angle_limits.size();
    for (const auto& l : g.joints[i].euler_limits) angle_limits.push_back(l);
    if (!g.joints[i].parent) root = i;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!g.joints[i].splay_limits) continue;
    splay[i] = angle_limits.size();
    for (const auto& l : *g.joints[i].splay_limits) angle_limits.push_back(l);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!g.joints[i].parent) continue;
    prop[i] = prop_limits.size();
    prop_limits.push_back(g.joints[i].proportion_limits);
  }
  auto angle = [&](std::size_t slot) {
    const auto& l = angle_limits[slot];
    return l.min + (l.max - l.min) * (1.0 + std::sin(p.angles(static_cast<Eigen::Index>(slot)))) / 2.0;
  };
  auto zyx = [](double x, double y, double z) {
    return Eigen::Matrix3d(Eigen::AngleAxisd(z, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(y, Eigen::Vector3d::UnitY()) *
                           Eigen::AngleAxisd(x, Eigen::Vector3d::UnitX()));
  };

  std::vector<std::vector<std::size_t>> children(n);
  for (std::size_t i = 0; i < n; ++i)
    if (g.joints[i].parent) children[*g.joints[i].parent].push_back(i);

  handkin::JointPositions out(static_cast<Eigen::Index>(n), 3);
  std::function<void(std::size_t, const Eigen::Matrix3d&, const Eigen::Vector3d&)> visit =
      [&](std::size_t i, const Eigen::Matrix3d& r_parent, const Eigen::Vector3d& p_parent) {
        const auto& j = g.joints[i];
        double e[3] = {0.0, 0.0, 0.0};
        const int axes_for[4][3] = {{-1, -1, -1}, {0, -1, -1}, {0, 2, -1}, {0, 1, 2}};
        for (int k = 0; k < j.dof; ++k) e[axes_for[j.dof][k]] = angle(art[i] + static_cast<std::size_t>(k));
        Eigen::Matrix3d local = zyx(e[0], e[1], e[2]);
        if (j.splay_limits) local = zyx(angle(splay[i]), angle(splay[i] + 1), angle(splay[i] + 2)) * local;
        const Eigen::Matrix3d r = r_parent * local;
        const auto& pl = prop_limits[prop[i]];
        const double ratio = pl.min + (pl.max - pl.min) * (1.0 + std::sin(p.proportions_raw(static_cast<Eigen::Index>(prop[i])))) / 2.0;
        const Eigen::Vector3d pos = r * (j.offset_direction * ratio * p.anchor_length) + p_parent;
        out.row(static_cast<Eigen::Index>(i)) = pos.transpose();
        for (std::size_t c : children[i]) visit(c, r, pos);
      };
  const Eigen::Matrix3d r0 = nearest_rotation(p.root_rotation_raw);
  out.row(static_cast<Eigen::Index>(root)) = p.root_offset.transpose();
  for (std::size_t c : children[root]) visit(c, r0, p.root_offset);
  return out;
}

}  // namespace oracle
