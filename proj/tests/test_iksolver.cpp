#include <doctest.h>

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "handkin/iksolver.hpp"
#include "handkin/kinematics.hpp"
#include "handkin/models.hpp"
#include "handkin/serialization.hpp"
#include "support.hpp"

using namespace handkin;
using testing_support::random_params;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

JointPositions positions_of(const PoseParams& p) { return forward_kinematics(Skeleton::canonical_hand(), p).positions; }

FitResult fit_with_angle(const Skeleton& sk, std::size_t slot, double value) {
  FitResult f;
  f.params = zero_params(sk);
  f.params.angles(static_cast<Eigen::Index>(slot)) = inverse_sine_normalize(value, sk.angle_limits()[slot]);
  f.converged = true;
  return f;
}

}  // namespace

TEST_CASE("fits without an init recover FK targets") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(1);
  const int trials = 200;
  int good = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < trials; ++i) {
    const JointPositions target = positions_of(random_params(sk, rng));
    const FitResult r = fit_pose(target, sk);
    good += r.residual_mpjpe < 1e-6;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("self-consistency: " << good << " / " << trials << " below 1e-6 in " << secs << " s");
  CHECK(good >= 190);
}

TEST_CASE("fit from the optimum stops immediately") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const PoseParams truth = random_params(sk, rng);
    const FitResult r = fit_pose(positions_of(truth), sk, truth);
    CHECK(r.iterations <= 2);
    CHECK(r.residual_mpjpe < 1e-10);
    CHECK(r.converged);
  }
}

TEST_CASE("infeasible target does not crash") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const JointPositions origin = JointPositions::Zero(21, 3);
  const IkConfig cfg;
  const FitResult r = fit_pose(origin, sk, std::nullopt, cfg);
  CHECK((!r.converged || r.residual_mpjpe > cfg.residual_tol));
  CHECK(r.params.anchor_length > 0.0);
  CHECK(std::isfinite(r.residual_mpjpe));

  CHECK_THROWS_AS(fit_pose(JointPositions::Zero(20, 3), sk), ValidationError);
  JointPositions nan_target = JointPositions::Zero(21, 3);
  nan_target(3, 1) = std::nan("");
  CHECK_THROWS_AS(fit_pose(nan_target, sk), ValidationError);
}

TEST_CASE("accepted steps never increase the residual and stay inside the limits") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const JointPositions target = positions_of(random_params(sk, rng, 1.5));
    const FitResult r = fit_pose(target, sk, random_init(sk, target, 100 + i, 1.0));
    for (std::size_t k = 1; k < r.history.size(); ++k) CHECK(r.history[k] <= r.history[k - 1]);
    CHECK(count_violations(sk, r.params, positions_of(r.params)) == 0);
  }
}

TEST_CASE("refitting a fit does not lose accuracy") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    const JointPositions target = positions_of(random_params(sk, rng));
    const FitResult first = fit_pose(target, sk);
    const FitResult second = fit_pose(positions_of(first.params), sk);
    CHECK(second.residual_mpjpe <= first.residual_mpjpe + 1e-9);
  }
}

TEST_CASE("restarts") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(5);
  // Strongly flexed fingers.
  PoseParams hard = random_params(sk, rng);
  for (Eigen::Index i = 0; i < hard.angles.size(); ++i) hard.angles(i) = 1.4 + 0.1 * std::sin(static_cast<double>(i));
  const JointPositions target = positions_of(hard);

  const FitResult one = fit_pose_restarts(target, sk, 1, 42);
  const FitResult single = fit_pose(target, sk, random_init(sk, target, 42, IkConfig{}.init_sigma));
  CHECK(one.residual_mpjpe == single.residual_mpjpe);
  CHECK(flatten(one.params) == flatten(single.params));

  const FitResult eight = fit_pose_restarts(target, sk, 8, 42);
  CHECK(eight.residual_mpjpe <= one.residual_mpjpe);
  const FitResult again = fit_pose_restarts(target, sk, 8, 42);
  CHECK(flatten(eight.params) == flatten(again.params));
  CHECK_THROWS_AS(fit_pose_restarts(target, sk, 0, 1), ValidationError);
}

TEST_CASE("percentile matches its definition") {
  CHECK(percentile({3.0, 1.0, 2.0}, 50.0) == 2.0);
  CHECK(percentile({0.0, 10.0}, 25.0) == 2.5);
  CHECK(percentile({4.0}, 99.0) == 4.0);
  CHECK_THROWS_AS(percentile({}, 50.0), ValidationError);
}

TEST_CASE("limits from uniform samples sit at the 1st and 99th percentiles") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const std::size_t slot = sk.angle_slot(7);  // index DIP flexion, limits [0, 100] deg
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ud(0.0, 90.0 * kDeg);
  std::vector<FitResult> fits;
  for (int i = 0; i < 10000; ++i) fits.push_back(fit_with_angle(sk, slot, ud(rng)));
  const LimitStats stats = extract_limits(fits, sk, {.percentile = 1.0, .pad = 0.0});
  const Limit l = stats.angles[slot].chosen;
  MESSAGE("limits [" << l.min / kDeg << ", " << l.max / kDeg << "] deg");
  CHECK(std::abs(l.min / kDeg - 0.9) < 0.3);
  CHECK(std::abs(l.max / kDeg - 89.1) < 0.3);
  CHECK(stats.skeleton.joints[7].euler_limits[0] == l);
  CHECK(stats.angles[slot].min >= 0.0);
  CHECK(stats.angles[slot].max <= 90.0 * kDeg + 1e-12);
}

TEST_CASE("identical fits fall back to a fixed half-width") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const std::size_t slot = sk.angle_slot(7);
  const double v = 30.0 * kDeg;
  const std::vector<FitResult> fits = {fit_with_angle(sk, slot, v), fit_with_angle(sk, slot, v), fit_with_angle(sk, slot, v)};
  const LimitConfig cfg{.percentile = 1.0, .pad = 0.05, .zero_spread = 0.02};
  const LimitStats stats = extract_limits(fits, sk, cfg);
  CHECK(stats.angles[slot].chosen.min == doctest::Approx(v - 0.02).epsilon(1e-12));
  CHECK(stats.angles[slot].chosen.max == doctest::Approx(v + 0.02).epsilon(1e-12));
  for (const ParamStats& s : stats.angles) CHECK(s.chosen.min < s.chosen.max);
  for (const ParamStats& s : stats.proportions) CHECK(s.chosen.min <= s.chosen.max);

  // The emitted skeleton is valid and survives a JSON round trip.
  const Skeleton updated(stats.skeleton);
  const Skeleton reloaded(skeleton_from_json(skeleton_to_json(stats.skeleton)));
  CHECK(updated.hash() == reloaded.hash());
  CHECK(stats.angles[0].fixed);
  CHECK(stats.proportions[*sk.proportion_slot(sk.anchor_joint())].fixed);
}

TEST_CASE("extract_limits needs two converged fits") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const std::vector<FitResult> one = {fit_with_angle(sk, 5, 0.1)};
  try {
    (void)extract_limits(one, sk);
    FAIL("expected a ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("insufficient data") != std::string::npos);
  }
  std::vector<FitResult> unconverged = {fit_with_angle(sk, 5, 0.1), fit_with_angle(sk, 5, 0.2)};
  unconverged[1].converged = false;
  CHECK_THROWS_AS(extract_limits(unconverged, sk), ValidationError);
}
