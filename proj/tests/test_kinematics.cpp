#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <numbers>
#include <random>

#include "handkin/kinematics.hpp"
#include "handkin/serialization.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace handkin;
using testing_support::random_params;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Skeleton chain_along_x() {
  SkeletonGraph g;
  for (std::size_t i = 0; i < 3; ++i) {
    JointSpec j;
    j.id = i;
    if (i > 0) j.parent = i - 1;
    j.offset_direction = Eigen::Vector3d::UnitX();
    j.proportion_limits = {1.0, 1.0};
    j.name = "j" + std::to_string(i);
    g.joints.push_back(j);
  }
  g.anchor_edge = 1;
  return Skeleton(g);
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  const Eigen::Vector4d q = testing_support::gaussian(rng, 4);
  return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).normalized().toRotationMatrix();
}

double column_rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

}  // namespace

TEST_CASE("sine_normalize maps to the documented points") {
  CHECK(sine_normalize(0.0, 0.0, 100.0 * kDeg) == doctest::Approx(50.0 * kDeg).epsilon(1e-15));
  CHECK(sine_normalize(std::numbers::pi / 2, -0.3, 1.1) == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(sine_normalize(-std::numbers::pi / 2, -20.0 * kDeg, 100.0 * kDeg) == doctest::Approx(-20.0 * kDeg).epsilon(1e-15));
}

TEST_CASE("normalized angles and proportions stay inside their limits") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> mag(-1e6, 1e6);
  for (int trial = 0; trial < 2000; ++trial) {
    Eigen::VectorXd a(41), p(20);
    for (auto& v : a) v = mag(rng);
    for (auto& v : p) v = mag(rng);
    const Eigen::VectorXd na = normalized_angles(sk, a);
    const Eigen::VectorXd np = normalized_proportions(sk, p);
    for (Eigen::Index i = 0; i < 41; ++i) {
      CHECK(na(i) >= sk.angle_limits()[static_cast<std::size_t>(i)].min);
      CHECK(na(i) <= sk.angle_limits()[static_cast<std::size_t>(i)].max);
    }
    for (Eigen::Index i = 0; i < 20; ++i) {
      CHECK(np(i) >= sk.proportion_limits()[static_cast<std::size_t>(i)].min);
      CHECK(np(i) <= sk.proportion_limits()[static_cast<std::size_t>(i)].max);
    }
  }
}

TEST_CASE("euler_to_rotation") {
  CHECK(euler_to_rotation(Eigen::Vector3d::Zero()).isApprox(Eigen::Matrix3d::Identity(), 0.0));
  const Eigen::Vector3d y = euler_to_rotation({std::numbers::pi / 2, 0.0, 0.0}) * Eigen::Vector3d::UnitY();
  CHECK((y - Eigen::Vector3d::UnitZ()).norm() < 1e-15);

  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Matrix3d r = euler_to_rotation(testing_support::gaussian(rng, 3, 2.0));
    CHECK((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Inactive axes are ignored.
  CHECK(euler_to_rotation({0.3, 0.7, 0.2}, active_axes(2)).isApprox(euler_to_rotation({0.3, 0.0, 0.2}), 1e-15));
}

TEST_CASE("svd_orthogonalize fixed points and scale removal") {
  std::mt19937_64 rng(8);
  const Eigen::Matrix3d r = random_rotation(rng);
  CHECK((svd_orthogonalize(r) - r).norm() < 1e-14);
  CHECK((svd_orthogonalize(2.0 * Eigen::Matrix3d::Identity()) - Eigen::Matrix3d::Identity()).norm() < 1e-15);
}

TEST_CASE("svd_orthogonalize matches the quaternion eigen-solver oracle") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 500; ++i) {
    Eigen::Matrix3d m;
    for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = testing_support::gaussian(rng, 1)(0);
    const Eigen::Matrix3d r = svd_orthogonalize(m);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((r - oracle::nearest_rotation(m)).norm() < 1e-8);
  }
}

TEST_CASE("svd_orthogonalize maximizes trace(R^T M) over sampled rotations") {
  std::mt19937_64 rng(10);
  for (int i = 0; i < 20; ++i) {
    Eigen::Matrix3d m;
    for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = testing_support::gaussian(rng, 1)(0);
    const double best = (svd_orthogonalize(m).transpose() * m).trace();
    for (int s = 0; s < 2000; ++s) CHECK((random_rotation(rng).transpose() * m).trace() <= best + 1e-12);
  }
}

TEST_CASE("svd_orthogonalize rejects rank-deficient input") {
  CHECK_THROWS_AS(svd_orthogonalize(Eigen::Vector3d(1.0, 0.0, 0.0).asDiagonal()), DegenerateInputError);
  CHECK_THROWS_AS(svd_orthogonalize(Eigen::Matrix3d::Zero()), DegenerateInputError);
  const Eigen::Matrix3d r = svd_orthogonalize(Eigen::Vector3d(1.0, 1.0, 0.0).asDiagonal());
  CHECK((r - Eigen::Matrix3d::Identity()).norm() < 1e-15);
}

TEST_CASE("svd_orthogonalize pullback matches finite differences") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Matrix3d m, g;
    for (int k = 0; k < 9; ++k) {
      m(k / 3, k % 3) = testing_support::gaussian(rng, 1)(0);
      g(k / 3, k % 3) = testing_support::gaussian(rng, 1)(0);
    }
    const Eigen::Matrix3d analytic = svd_orthogonalize_pullback(m, g);
    for (int k = 0; k < 9; ++k) {
      Eigen::Matrix3d d = Eigen::Matrix3d::Zero();
      d(k / 3, k % 3) = 1e-6;
      const double num = ((svd_orthogonalize(m + d) - svd_orthogonalize(m - d)).cwiseProduct(g).sum()) / 2e-6;
      CHECK(std::abs(num - analytic(k / 3, k % 3)) < 1e-6 * std::max(1.0, std::abs(num)));
    }
  }
}

TEST_CASE("two-bone chain along x") {
  const Skeleton sk = chain_along_x();
  PoseParams p = zero_params(sk);
  JointPositions pos = forward_kinematics(sk, p).positions;
  CHECK((pos.row(0) - Eigen::RowVector3d(0, 0, 0)).norm() < 1e-15);
  CHECK((pos.row(1) - Eigen::RowVector3d(1, 0, 0)).norm() < 1e-15);
  CHECK((pos.row(2) - Eigen::RowVector3d(2, 0, 0)).norm() < 1e-15);

  p.root_rotation_raw = Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  pos = forward_kinematics(sk, p).positions;
  CHECK((pos.row(1) - Eigen::RowVector3d(0, 1, 0)).norm() < 1e-15);
  CHECK((pos.row(2) - Eigen::RowVector3d(0, 2, 0)).norm() < 1e-15);
}

TEST_CASE("canonical FK matches the recursive reference") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const PoseParams zero = zero_params(sk);
  CHECK((forward_kinematics(sk, zero).positions - oracle::recursive_fk(sk.graph(), zero)).cwiseAbs().maxCoeff() < 1e-12);

  std::mt19937_64 rng(21);
  for (int i = 0; i < 200; ++i) {
    const PoseParams p = random_params(sk, rng, 2.0);
    const JointPositions a = forward_kinematics(sk, p).positions;
    const JointPositions b = oracle::recursive_fk(sk.graph(), p);
    CHECK((a - b).cwiseAbs().maxCoeff() / p.anchor_length < 1e-9);
  }
}

TEST_CASE("FK returns proper rigid poses") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(22);
  const FkResult fk = forward_kinematics(sk, random_params(sk, rng));
  for (const RigidPose& rp : fk.poses) {
    CHECK((rp.rotation.transpose() * rp.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(std::abs(rp.rotation.determinant() - 1.0) < 1e-9);
  }
}

TEST_CASE("rigid invariance of the root transform") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(23);
  for (int i = 0; i < 50; ++i) {
    PoseParams a = random_params(sk, rng);
    a.root_rotation_raw = random_rotation(rng);
    PoseParams b = a;
    b.root_rotation_raw = random_rotation(rng);
    b.root_offset = testing_support::gaussian(rng, 3);
    const Eigen::Matrix3d rd = b.root_rotation_raw * a.root_rotation_raw.transpose();
    const Eigen::Vector3d td = b.root_offset - rd * a.root_offset;
    JointPositions expected = forward_kinematics(sk, a).positions * rd.transpose();
    expected.rowwise() += td.transpose();
    CHECK((forward_kinematics(sk, b).positions - expected).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("doubling the anchor doubles root-relative positions") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(24);
  PoseParams p = random_params(sk, rng);
  p.root_offset.setZero();
  PoseParams q = p;
  q.anchor_length *= 2.0;
  CHECK(forward_kinematics(sk, q).positions == 2.0 * forward_kinematics(sk, p).positions);

  p.root_offset = Eigen::Vector3d(0.1, -0.2, 0.5);
  q.root_offset = p.root_offset;
  const JointPositions a = forward_kinematics(sk, p).positions.rowwise() - p.root_offset.transpose();
  const JointPositions b = forward_kinematics(sk, q).positions.rowwise() - q.root_offset.transpose();
  CHECK((b - 2.0 * a).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("order within a BFS level does not change the output") {
  SkeletonGraph g = canonical_hand_topology();
  std::mt19937_64 rng(25);
  for (auto& level : g.bfs_levels) std::shuffle(level.begin(), level.end(), rng);
  const Skeleton shuffled(g);
  const PoseParams p = random_params(Skeleton::canonical_hand(), rng);
  CHECK(forward_kinematics(shuffled, p).positions == forward_kinematics(Skeleton::canonical_hand(), p).positions);
}

TEST_CASE("differentiable FK agrees with the scalar FK in a batch") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(26);
  const PoseParams p1 = random_params(sk, rng);
  const PoseParams p2 = random_params(sk, rng);
  std::vector<double> flat;
  for (const PoseParams* p : {&p1, &p2}) {
    const Eigen::VectorXd f = flatten(*p);
    flat.insert(flat.end(), f.data(), f.data() + f.size());
  }
  ad::Tape tape(false);
  const ad::Var x = tape.leaf(ad::Tensor({2, sk.raw_size()}, flat));
  const ad::Tensor pos = fk::forward(sk, fk::split_flat(sk, x)).positions.value();
  REQUIRE(pos.shape() == ad::Shape{2, 21, 3});
  const JointPositions a = forward_kinematics(sk, p1).positions;
  const JointPositions b = forward_kinematics(sk, p2).positions;
  for (std::size_t i = 0; i < 63; ++i) {
    CHECK(std::abs(pos[i] - a.data()[i]) < 1e-14);
    CHECK(std::abs(pos[63 + i] - b.data()[i]) < 1e-14);
  }
}

TEST_CASE("fk_jacobian: DIP column matches central differences") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const PoseParams p = zero_params(sk);
  const Eigen::MatrixXd jac = fk_jacobian(sk, p);
  const std::size_t dip = 7;  // index finger DIP
  REQUIRE(sk.joint(dip).name == "index_dip");
  const Eigen::Index col = 12 + static_cast<Eigen::Index>(sk.angle_slot(dip));
  const double h = 1e-5;
  Eigen::VectorXd plus = flatten(p), minus = flatten(p);
  plus(col) += h;
  minus(col) -= h;
  const Eigen::VectorXd fd = (flatten_positions(forward_kinematics(sk, unflatten(sk, plus)).positions) -
                              flatten_positions(forward_kinematics(sk, unflatten(sk, minus)).positions)) /
                             (2.0 * h);
  CHECK(jac.col(col).norm() > 0.0);
  CHECK(column_rel_error(jac.col(col), fd) < 1e-5);
}

TEST_CASE("fk_jacobian: every column matches central differences at random poses") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(27);
  for (int trial = 0; trial < 3; ++trial) {
    const PoseParams p = random_params(sk, rng);
    const Eigen::MatrixXd jac = fk_jacobian(sk, p);
    const Eigen::VectorXd x = flatten(p);
    for (Eigen::Index c = 0; c < x.size(); ++c) {
      const double h = 1e-6;
      Eigen::VectorXd plus = x, minus = x;
      plus(c) += h;
      minus(c) -= h;
      const Eigen::VectorXd fd = (flatten_positions(forward_kinematics(sk, unflatten(sk, plus)).positions) -
                                  flatten_positions(forward_kinematics(sk, unflatten(sk, minus)).positions)) /
                                 (2.0 * h);
      CAPTURE(c);
      CHECK((jac.col(c) - fd).norm() <= 1e-6 * std::max(1.0, fd.norm()));
    }
  }
}

TEST_CASE("analytic and reverse-mode Jacobians agree") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(28);
  for (int trial = 0; trial < 20; ++trial) {
    const PoseParams p = random_params(sk, rng, 2.0);
    const Eigen::MatrixXd a = fk_jacobian(sk, p);
    const Eigen::MatrixXd b = fk_jacobian_analytic(sk, p);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fk_jacobian: masked columns are zero and the anchor column is linear") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(29);
  const PoseParams p = random_params(sk, rng);
  const Eigen::MatrixXd jac = fk_jacobian(sk, p);
  for (std::size_t s = 0; s < sk.angle_count(); ++s) {
    if (sk.masked_angles()[s]) CHECK(jac.col(12 + static_cast<Eigen::Index>(s)).cwiseAbs().maxCoeff() == 0.0);
  }
  const JointPositions pos = forward_kinematics(sk, p).positions;
  const JointPositions rel = pos.rowwise() - pos.row(0);
  const Eigen::VectorXd expected = flatten_positions(rel) / p.anchor_length;
  CHECK((jac.col(jac.cols() - 1) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("FK composed with an L1 loss passes grad_check in raw angles") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(30);
  const PoseParams base = random_params(sk, rng);
  const JointPositions target = forward_kinematics(sk, random_params(sk, rng)).positions;
  const ad::Tensor tgt({1, 21, 3}, std::vector<double>(target.data(), target.data() + 63));
  const Eigen::VectorXd flat = flatten(base);
  auto f = [&](ad::Tape& tape, ad::Var angles) {
    const Eigen::VectorXd& v = flat;
    fk::Inputs in;
    in.root_rotation_raw = tape.constant(ad::Tensor({1, 3, 3}, std::vector<double>(v.data(), v.data() + 9)));
    in.root_offset = tape.constant(ad::Tensor({1, 3}, std::vector<double>(v.data() + 9, v.data() + 12)));
    in.angles = angles;
    in.proportions = tape.constant(ad::Tensor({1, 20}, std::vector<double>(v.data() + 53, v.data() + 73)));
    in.anchor_length = tape.constant(ad::Tensor({1, 1}, base.anchor_length));
    const ad::Var pos = fk::forward(sk, in).positions;
    return ad::mean(ad::abs(pos - tape.constant(tgt)));
  };
  const ad::Tensor x({1, 41}, std::vector<double>(base.angles.data(), base.angles.data() + 41));
  const ad::GradCheckReport r = ad::grad_check(f, x, {.tol = 1e-4});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("pose JSON round trip is exact") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(31);
  const PoseParams p = random_params(sk, rng);
  const PoseParams q = pose_from_json(sk, Json::parse(pose_to_json(p).dump()));
  CHECK(flatten(q) == flatten(p));
}
