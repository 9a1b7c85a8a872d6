#include "handkin/kinematics.hpp"

#include <Eigen/Dense>
#include <array>
#include <cmath>

namespace handkin {

namespace {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using Mat3Map = Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>;
using ConstMat3Map = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>;

Eigen::Matrix3d rot_x(double a) {
  Eigen::Matrix3d r;
  const double c = std::cos(a), s = std::sin(a);
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

Eigen::Matrix3d rot_y(double a) {
  Eigen::Matrix3d r;
  const double c = std::cos(a), s = std::sin(a);
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Eigen::Matrix3d rot_z(double a) {
  Eigen::Matrix3d r;
  const double c = std::cos(a), s = std::sin(a);
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

// Derivatives of the elementary rotations with respect to their angle.
Eigen::Matrix3d drot_x(double a) {
  Eigen::Matrix3d r;
  const double c = std::cos(a), s = std::sin(a);
  r << 0, 0, 0, 0, -s, -c, 0, c, -s;
  return r;
}

Eigen::Matrix3d drot_y(double a) {
  Eigen::Matrix3d r;
  const double c = std::cos(a), s = std::sin(a);
  r << -s, 0, c, 0, 0, 0, -c, 0, -s;
  return r;
}

Eigen::Matrix3d drot_z(double a) {
  Eigen::Matrix3d r;
  const double c = std::cos(a), s = std::sin(a);
  r << -s, -c, 0, c, -s, 0, 0, 0, 0;
  return r;
}

// d(Rz Ry Rx)/d e_axis.
Eigen::Matrix3d euler_partial(const Eigen::Vector3d& e, int axis) {
  switch (axis) {
    case 0: return rot_z(e.z()) * rot_y(e.y()) * drot_x(e.x());
    case 1: return rot_z(e.z()) * drot_y(e.y()) * rot_x(e.x());
    default: return drot_z(e.z()) * rot_y(e.y()) * rot_x(e.x());
  }
}

struct SignedSvd {
  Eigen::Matrix3d u;  // U diag(1, 1, d)
  Eigen::Matrix3d v;
  Eigen::Vector3d sigma;  // (s1, s2, d * s3)
};

SignedSvd signed_svd(const Eigen::Matrix3d& m) {
  if (!m.allFinite()) throw DegenerateInputError("svd_orthogonalize: matrix has non-finite entries");
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d s = svd.singularValues();
  const double threshold = 1e-12 * m.norm();
  if (!(s(1) > threshold)) {
    throw DegenerateInputError("svd_orthogonalize: rank-deficient matrix (singular values " + std::to_string(s(0)) +
                               ", " + std::to_string(s(1)) + ", " + std::to_string(s(2)) + ")");
  }
  SignedSvd out{svd.matrixU(), svd.matrixV(), s};
  if ((out.u * out.v.transpose()).determinant() < 0.0) {
    out.u.col(2) *= -1.0;
    out.sigma(2) *= -1.0;
  }
  return out;
}

// Skew-symmetric solve of (sigma_i + sigma_j) Y_ij = H_ij - H_ji.
Eigen::Matrix3d skew_solve(const Eigen::Matrix3d& h, const Eigen::Vector3d& sigma) {
  Eigen::Matrix3d y = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double denom = sigma(i) + sigma(j);
      if (denom != 0.0) y(i, j) = (h(i, j) - h(j, i)) / denom;
    }
  }
  return y;
}

// Forward-mode derivative of svd_orthogonalize along dm.
Eigen::Matrix3d polar_tangent(const SignedSvd& s, const Eigen::Matrix3d& dm) {
  return s.u * skew_solve(s.u.transpose() * dm * s.v, s.sigma) * s.v.transpose();
}

Eigen::Matrix3d read_mat(const double* p) { return ConstMat3Map(p); }

void write_mat(double* p, const Eigen::Matrix3d& m) { Mat3Map{p} = m; }

std::size_t batch_of(Var v, std::size_t rank, const char* what) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(what) + ": unexpected shape " + ad::to_string(v.shape()));
  }
  return v.shape()[0];
}

std::vector<std::size_t> subtree_order(const Skeleton& skeleton) {
  std::vector<std::size_t> order;
  for (const auto& level : skeleton.levels()) order.insert(order.end(), level.begin(), level.end());
  return order;
}

}  // namespace

double sine_normalize(double x, double a_min, double a_max) {
  return (std::sin(x) + 1.0) * 0.5 * (a_max - a_min) + a_min;
}

double sine_normalize_derivative(double x, double a_min, double a_max) {
  return std::cos(x) * 0.5 * (a_max - a_min);
}

Eigen::Matrix3d euler_to_rotation(const Eigen::Vector3d& e, AxisMask active) {
  const double ex = active[0] ? e.x() : 0.0;
  const double ey = active[1] ? e.y() : 0.0;
  const double ez = active[2] ? e.z() : 0.0;
  return rot_z(ez) * rot_y(ey) * rot_x(ex);
}

Eigen::Matrix3d svd_orthogonalize(const Eigen::Matrix3d& m) {
  const SignedSvd s = signed_svd(m);
  return s.u * s.v.transpose();
}

Eigen::Matrix3d svd_orthogonalize_pullback(const Eigen::Matrix3d& m, const Eigen::Matrix3d& grad_r) {
  const SignedSvd s = signed_svd(m);
  return s.u * skew_solve(s.u.transpose() * grad_r * s.v, s.sigma) * s.v.transpose();
}

Eigen::VectorXd normalized_angles(const Skeleton& skeleton, const Eigen::VectorXd& raw) {
  if (static_cast<std::size_t>(raw.size()) != skeleton.angle_count()) {
    throw ValidationError("expected " + std::to_string(skeleton.angle_count()) + " angles, got " +
                          std::to_string(raw.size()));
  }
  Eigen::VectorXd out(raw.size());
  const auto& limits = skeleton.angle_limits();
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    out(i) = sine_normalize(raw(i), limits[static_cast<std::size_t>(i)].min, limits[static_cast<std::size_t>(i)].max);
  }
  return out;
}

Eigen::VectorXd normalized_proportions(const Skeleton& skeleton, const Eigen::VectorXd& raw) {
  if (static_cast<std::size_t>(raw.size()) != skeleton.proportion_count()) {
    throw ValidationError("expected " + std::to_string(skeleton.proportion_count()) + " proportions, got " +
                          std::to_string(raw.size()));
  }
  Eigen::VectorXd out(raw.size());
  const auto& limits = skeleton.proportion_limits();
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    out(i) = sine_normalize(raw(i), limits[static_cast<std::size_t>(i)].min, limits[static_cast<std::size_t>(i)].max);
  }
  return out;
}

namespace {

Eigen::Vector3d articulation_angles(const Skeleton& skeleton, std::size_t id, const Eigen::VectorXd& angles) {
  const JointSpec& js = skeleton.joint(id);
  const AxisMask axes = active_axes(js.dof);
  Eigen::Vector3d e = Eigen::Vector3d::Zero();
  std::size_t slot = skeleton.angle_slot(id);
  for (int a = 0; a < 3; ++a) {
    if (axes[static_cast<std::size_t>(a)]) e(a) = angles(static_cast<Eigen::Index>(slot++));
  }
  return e;
}

Eigen::Vector3d splay_angles(const Skeleton& skeleton, std::size_t id, const Eigen::VectorXd& angles) {
  const std::size_t s = *skeleton.splay_slot(id);
  return angles.segment<3>(static_cast<Eigen::Index>(s));
}

}  // namespace

Eigen::Matrix3d local_rotation(const Skeleton& skeleton, std::size_t id, const Eigen::VectorXd& angles) {
  if (id == skeleton.root()) return Eigen::Matrix3d::Identity();
  const JointSpec& js = skeleton.joint(id);
  Eigen::Matrix3d r = euler_to_rotation(articulation_angles(skeleton, id, angles), active_axes(js.dof));
  if (skeleton.splay_slot(id)) r = euler_to_rotation(splay_angles(skeleton, id, angles)) * r;
  return r;
}

FkResult forward_kinematics(const Skeleton& skeleton, const PoseParams& params) {
  check_params(skeleton, params);
  const Eigen::VectorXd angles = normalized_angles(skeleton, params.angles);
  const Eigen::VectorXd props = normalized_proportions(skeleton, params.proportions_raw);
  const std::size_t n = skeleton.joint_count();
  FkResult out;
  out.positions.setZero(static_cast<Eigen::Index>(n), 3);
  out.poses.resize(n);
  const std::size_t root = skeleton.root();
  out.poses[root].rotation = svd_orthogonalize(params.root_rotation_raw);
  out.poses[root].translation = params.root_offset;
  for (std::size_t level = 1; level < skeleton.levels().size(); ++level) {
    for (std::size_t id : skeleton.levels()[level]) {
      const JointSpec& js = skeleton.joint(id);
      const RigidPose& parent = out.poses[*js.parent];
      const double length = props(static_cast<Eigen::Index>(*skeleton.proportion_slot(id))) * params.anchor_length;
      RigidPose& pose = out.poses[id];
      pose.rotation = parent.rotation * local_rotation(skeleton, id, angles);
      pose.translation = pose.rotation * (js.offset_direction * length) + parent.translation;
    }
  }
  for (std::size_t i = 0; i < n; ++i) out.positions.row(static_cast<Eigen::Index>(i)) = out.poses[i].translation.transpose();
  return out;
}

Eigen::MatrixXd fk_jacobian_analytic(const Skeleton& skeleton, const PoseParams& params) {
  const FkResult fk = forward_kinematics(skeleton, params);
  const Eigen::VectorXd angles = normalized_angles(skeleton, params.angles);
  const std::size_t n = skeleton.joint_count();
  const Eigen::Index rows = static_cast<Eigen::Index>(3 * n);
  const Eigen::Index angle_col = 12;
  const Eigen::Index prop_col = angle_col + static_cast<Eigen::Index>(skeleton.angle_count());
  const Eigen::Index anchor_col = prop_col + static_cast<Eigen::Index>(skeleton.proportion_count());
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(skeleton.raw_size()));

  // descendants[i] lists i and every joint below it, parents before children.
  std::vector<std::vector<std::size_t>> descendants(n);
  const std::vector<std::size_t> order = subtree_order(skeleton);
  for (std::size_t id : order) {
    for (std::optional<std::size_t> a = id; a; a = skeleton.joint(*a).parent) descendants[*a].push_back(id);
  }

  const std::size_t root = skeleton.root();
  const Eigen::Vector3d p0 = fk.poses[root].translation;
  const Eigen::Matrix3d r0 = fk.poses[root].rotation;

  // Root matrix entries: dp_k = dR0 R0^T (p_k - p0).
  const SignedSvd s = signed_svd(params.root_rotation_raw);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      Eigen::Matrix3d dm = Eigen::Matrix3d::Zero();
      dm(a, b) = 1.0;
      const Eigen::Matrix3d w = polar_tangent(s, dm) * r0.transpose();
      for (std::size_t k = 0; k < n; ++k) {
        jac.block<3, 1>(static_cast<Eigen::Index>(3 * k), 3 * a + b) = w * (fk.poses[k].translation - p0);
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k) jac.block<3, 3>(static_cast<Eigen::Index>(3 * k), 9).setIdentity();

  for (std::size_t id = 0; id < n; ++id) {
    if (id == root) continue;
    const JointSpec& js = skeleton.joint(id);
    const std::size_t parent = *js.parent;
    const Eigen::Matrix3d& rp = fk.poses[parent].rotation;
    const Eigen::Vector3d& pp = fk.poses[parent].translation;

    const AxisMask axes = active_axes(js.dof);
    const Eigen::Vector3d art = articulation_angles(skeleton, id, angles);
    const Eigen::Matrix3d r_art = euler_to_rotation(art, axes);
    Eigen::Matrix3d r_splay = Eigen::Matrix3d::Identity();
    if (skeleton.splay_slot(id)) r_splay = euler_to_rotation(splay_angles(skeleton, id, angles));
    const Eigen::Matrix3d r_local_t = (r_splay * r_art).transpose();

    auto emit = [&](std::size_t slot, const Eigen::Matrix3d& d_local) {
      const Limit& lim = skeleton.angle_limits()[slot];
      const double chain = sine_normalize_derivative(params.angles(static_cast<Eigen::Index>(slot)), lim.min, lim.max);
      const Eigen::Matrix3d w = rp * d_local * r_local_t * rp.transpose() * chain;
      for (std::size_t k : descendants[id]) {
        jac.block<3, 1>(static_cast<Eigen::Index>(3 * k), angle_col + static_cast<Eigen::Index>(slot)) =
            w * (fk.poses[k].translation - pp);
      }
    };

    std::size_t slot = skeleton.angle_slot(id);
    for (int a = 0; a < 3; ++a) {
      if (!axes[static_cast<std::size_t>(a)]) continue;
      emit(slot++, r_splay * euler_partial(art, a));
    }
    if (const auto splay = skeleton.splay_slot(id)) {
      const Eigen::Vector3d e = splay_angles(skeleton, id, angles);
      for (int a = 0; a < 3; ++a) emit(*splay + static_cast<std::size_t>(a), euler_partial(e, a) * r_art);
    }

    const std::size_t ps = *skeleton.proportion_slot(id);
    const Limit& pl = skeleton.proportion_limits()[ps];
    const Eigen::Vector3d dp = fk.poses[id].rotation * js.offset_direction * params.anchor_length *
                               sine_normalize_derivative(params.proportions_raw(static_cast<Eigen::Index>(ps)), pl.min, pl.max);
    for (std::size_t k : descendants[id]) {
      jac.block<3, 1>(static_cast<Eigen::Index>(3 * k), prop_col + static_cast<Eigen::Index>(ps)) = dp;
    }
  }

  for (std::size_t k = 0; k < n; ++k) {
    jac.block<3, 1>(static_cast<Eigen::Index>(3 * k), anchor_col) = (fk.poses[k].translation - p0) / params.anchor_length;
  }
  return jac;
}

Eigen::MatrixXd fk_jacobian(const Skeleton& skeleton, const PoseParams& params) {
  check_params(skeleton, params);
  const Eigen::VectorXd flat = flatten(params);
  Tape tape;
  const Var x = tape.leaf(Tensor(Shape{1, skeleton.raw_size()}, std::vector<double>(flat.data(), flat.data() + flat.size())));
  const fk::Outputs out = fk::forward(skeleton, fk::split_flat(skeleton, x));
  const std::size_t rows = 3 * skeleton.joint_count();
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(skeleton.raw_size()));
  Tensor seed(out.positions.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    tape.zero_grad();
    seed.fill(0.0);
    seed[r] = 1.0;
    tape.backward(out.positions, seed);
    const Tensor g = tape.grad(x);
    for (std::size_t c = 0; c < skeleton.raw_size(); ++c) jac(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = g[c];
  }
  return jac;
}

int count_violations(const Skeleton& skeleton, const PoseParams& p, const JointPositions& positions, double tol) {
  int bad = 0;
  const Eigen::VectorXd a = normalized_angles(skeleton, p.angles);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const Limit& l = skeleton.angle_limits()[static_cast<std::size_t>(i)];
    if (!(a(i) >= l.min - tol && a(i) <= l.max + tol)) ++bad;
  }
  const Eigen::VectorXd q = normalized_proportions(skeleton, p.proportions_raw);
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const Limit& l = skeleton.proportion_limits()[static_cast<std::size_t>(i)];
    if (!(q(i) >= l.min - tol && q(i) <= l.max + tol)) ++bad;
  }
  const Eigen::Matrix3d r = svd_orthogonalize(p.root_rotation_raw);
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() > tol || std::abs(r.determinant() - 1.0) > tol) ++bad;
  if (!positions.allFinite()) return bad + 1;
  const double anchor = (positions.row(static_cast<Eigen::Index>(skeleton.anchor_joint())) -
                         positions.row(static_cast<Eigen::Index>(skeleton.joint(skeleton.anchor_joint()).parent.value())))
                            .norm();
  for (const JointSpec& j : skeleton.joints()) {
    const auto slot = skeleton.proportion_slot(j.id);
    if (!slot) continue;
    const Limit& l = skeleton.proportion_limits()[*slot];
    const double ratio =
        (positions.row(static_cast<Eigen::Index>(j.id)) - positions.row(static_cast<Eigen::Index>(*j.parent))).norm() / anchor;
    if (!(ratio >= l.min - 1e3 * tol && ratio <= l.max + 1e3 * tol)) ++bad;
  }
  return bad;
}

// ---- differentiable layer --------------------------------------------------

namespace fk {

Var sine_normalize(Var x, const std::vector<Limit>& limits) {
  if (x.shape().empty() || x.shape().back() != limits.size()) {
    throw ShapeError("sine_normalize: input " + ad::to_string(x.shape()) + " does not match " +
                     std::to_string(limits.size()) + " limits");
  }
  const Tensor& xv = x.value();
  const std::size_t n = limits.size();
  Tensor y(xv.shape());
  Tensor dydx(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Limit& l = limits[i % n];
    y[i] = handkin::sine_normalize(xv[i], l.min, l.max);
    dydx[i] = sine_normalize_derivative(xv[i], l.min, l.max);
  }
  return x.tape->record("sine_normalize", std::move(y), {x},
                        [dydx = std::move(dydx)](const Tensor& g, std::span<Tensor* const> pg) {
                          if (!pg[0]) return;
                          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * dydx[i];
                        });
}

Var euler_rotation(Var e, AxisMask axes) {
  const std::size_t b = batch_of(e, 2, "euler_rotation");
  std::vector<int> axis_of;
  for (int a = 0; a < 3; ++a)
    if (axes[static_cast<std::size_t>(a)]) axis_of.push_back(a);
  const std::size_t k = axis_of.size();
  if (e.shape()[1] != k) throw ShapeError("euler_rotation: expected " + std::to_string(k) + " angles per row");
  const Tensor& ev = e.value();
  Tensor y(Shape{b, 3, 3});
  // Partial derivative matrices, k per batch row.
  std::vector<Eigen::Matrix3d> partials(b * k);
  for (std::size_t i = 0; i < b; ++i) {
    Eigen::Vector3d full = Eigen::Vector3d::Zero();
    for (std::size_t j = 0; j < k; ++j) full(axis_of[j]) = ev[i * k + j];
    write_mat(y.data() + 9 * i, euler_to_rotation(full));
    for (std::size_t j = 0; j < k; ++j) partials[i * k + j] = euler_partial(full, axis_of[j]);
  }
  return e.tape->record("euler_rotation", std::move(y), {e},
                        [partials = std::move(partials), b, k](const Tensor& g, std::span<Tensor* const> pg) {
                          if (!pg[0]) return;
                          for (std::size_t i = 0; i < b; ++i) {
                            const Eigen::Matrix3d gi = read_mat(g.data() + 9 * i);
                            for (std::size_t j = 0; j < k; ++j) (*pg[0])[i * k + j] += gi.cwiseProduct(partials[i * k + j]).sum();
                          }
                        });
}

Var polar_rotation(Var m) {
  const std::size_t b = batch_of(m, 3, "polar_rotation");
  if (m.shape()[1] != 3 || m.shape()[2] != 3) throw ShapeError("polar_rotation: expected [B, 3, 3]");
  const Tensor& mv = m.value();
  Tensor y(Shape{b, 3, 3});
  std::vector<SignedSvd> svds;
  svds.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    svds.push_back(signed_svd(read_mat(mv.data() + 9 * i)));
    write_mat(y.data() + 9 * i, svds.back().u * svds.back().v.transpose());
  }
  return m.tape->record("polar_rotation", std::move(y), {m},
                        [svds = std::move(svds)](const Tensor& g, std::span<Tensor* const> pg) {
                          if (!pg[0]) return;
                          for (std::size_t i = 0; i < svds.size(); ++i) {
                            const Eigen::Matrix3d gm = polar_tangent(svds[i], read_mat(g.data() + 9 * i));
                            Mat3Map(pg[0]->data() + 9 * i) += gm;
                          }
                        });
}

Outputs forward(const Skeleton& skeleton, const Inputs& in) {
  Tape& tape = *in.angles.tape;
  const std::size_t b = batch_of(in.angles, 2, "fk angles");
  if (in.angles.shape()[1] != skeleton.angle_count()) throw ShapeError("fk: angle count mismatch");
  if (in.proportions.shape() != Shape{b, skeleton.proportion_count()}) throw ShapeError("fk: proportion shape mismatch");
  if (in.root_rotation_raw.shape() != Shape{b, 3, 3}) throw ShapeError("fk: root rotation must be [B, 3, 3]");

  const Var angles = sine_normalize(in.angles, skeleton.angle_limits());
  const Var props = sine_normalize(in.proportions, skeleton.proportion_limits());
  const Var anchor = in.anchor_length ? *in.anchor_length : tape.constant(Tensor(Shape{b, 1}, 1.0));
  const Var offset = in.root_offset ? *in.root_offset : tape.constant(Tensor(Shape{b, 3}, 0.0));
  if (anchor.shape() != Shape{b, 1} || offset.shape() != Shape{b, 3}) throw ShapeError("fk: anchor or offset shape mismatch");

  const std::size_t n = skeleton.joint_count();
  std::vector<Var> rot(n), pos(n);
  const std::size_t root = skeleton.root();
  const Var r0 = polar_rotation(in.root_rotation_raw);
  rot[root] = r0;
  pos[root] = ad::reshape(offset, Shape{b, 3, 1});

  for (std::size_t level = 1; level < skeleton.levels().size(); ++level) {
    for (std::size_t id : skeleton.levels()[level]) {
      const JointSpec& js = skeleton.joint(id);
      const std::size_t parent = *js.parent;
      std::optional<Var> local;
      if (js.dof > 0) {
        const std::size_t s = skeleton.angle_slot(id);
        local = euler_rotation(ad::slice(angles, 1, s, s + static_cast<std::size_t>(js.dof)), active_axes(js.dof));
      }
      if (const auto sp = skeleton.splay_slot(id)) {
        const Var splay = euler_rotation(ad::slice(angles, 1, *sp, *sp + 3), {true, true, true});
        local = local ? ad::bmm(splay, *local) : splay;
      }
      rot[id] = local ? ad::bmm(rot[parent], *local) : rot[parent];

      const std::size_t ps = *skeleton.proportion_slot(id);
      const Var length = ad::mul(ad::slice(props, 1, ps, ps + 1), anchor);  // [B, 1]
      const Eigen::Vector3d& d = js.offset_direction;
      const Var dir = tape.constant(Tensor(Shape{1, 3}, std::vector<double>{d.x(), d.y(), d.z()}));
      const Var bone = ad::mul(ad::broadcast_to(length, Shape{b, 3}), ad::broadcast_to(dir, Shape{b, 3}));
      pos[id] = ad::add(ad::bmm(rot[id], ad::reshape(bone, Shape{b, 3, 1})), pos[parent]);
    }
  }

  std::vector<Var> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(ad::reshape(pos[i], Shape{b, 1, 3}));
  return Outputs{ad::concat(rows, 1), r0};
}

Inputs split_flat(const Skeleton& skeleton, Var flat) {
  const std::size_t b = batch_of(flat, 2, "fk flat input");
  if (flat.shape()[1] != skeleton.raw_size()) throw ShapeError("fk: flat input must have raw_size columns");
  const std::size_t a0 = 12;
  const std::size_t p0 = a0 + skeleton.angle_count();
  const std::size_t s0 = p0 + skeleton.proportion_count();
  Inputs in;
  in.root_rotation_raw = ad::reshape(ad::slice(flat, 1, 0, 9), Shape{b, 3, 3});
  in.root_offset = ad::slice(flat, 1, 9, 12);
  in.angles = ad::slice(flat, 1, a0, p0);
  in.proportions = ad::slice(flat, 1, p0, s0);
  in.anchor_length = ad::slice(flat, 1, s0, s0 + 1);
  return in;
}

}  // namespace fk

}  // namespace handkin
