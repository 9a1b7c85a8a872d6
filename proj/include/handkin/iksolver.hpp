#pragma once

// Levenberg-Marquardt fitting of raw pose parameters to 3D joint targets, and
// percentile-based limit extraction from a corpus of fits.

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "handkin/geometry.hpp"
#include "handkin/skeleton.hpp"

namespace handkin {

struct IkConfig {
  int max_iterations = 200;
  /// Stop once residual_mpjpe (anchor units) drops below this.
  double residual_tol = 1e-8;
  double gradient_tol = 1e-10;
  double lambda_init = 1e-3;
  double lambda_factor = 10.0;
  /// Beyond this damping the solver tries a backtracking gradient step instead.
  double lambda_max = 1e10;
  /// Iterations per tree depth of the coarse-to-fine start used when no init is given.
  int warm_start_iterations = 30;
  /// Without an init, extra seeded starts tried when the first one does not converge.
  int fallback_starts = 3;
  /// Sigma of the raw angle and proportion draws used by random initializations.
  double init_sigma = 1.0;
};

struct FitResult {
  PoseParams params;
  /// Mean joint distance to the target divided by the target's anchor bone length.
  double residual_mpjpe = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Root-mean-square joint error (anchor units) at the start and after every accepted step.
  std::vector<double> history;
};

/// Mean joint distance of FK(params) to `target`, in units of the target anchor bone.
double residual_mpjpe(const Skeleton& skeleton, const PoseParams& params, const JointPositions& target);

/// Rest pose (raw zeros) rotated onto the target by Procrustes, offset at the target wrist,
/// anchor length taken from the target.
PoseParams default_init(const Skeleton& skeleton, const JointPositions& target);

/// default_init with raw angles and proportions drawn from N(0, sigma^2).
PoseParams random_init(const Skeleton& skeleton, const JointPositions& target, std::uint64_t seed, double sigma);

/// Without `init`, starts from default_init refined depth by depth, then from up to
/// config.fallback_starts seeded random_init draws while the residual stays above tolerance.
/// Throws ValidationError when `target` does not have one row per joint or is not finite,
/// NumericalError when the Jacobian turns non-finite.
FitResult fit_pose(const JointPositions& target, const Skeleton& skeleton, const std::optional<PoseParams>& init = std::nullopt,
                   const IkConfig& config = {});

/// Best of `n` fits started from random_init(seed + i).
FitResult fit_pose_restarts(const JointPositions& target, const Skeleton& skeleton, int n, std::uint64_t seed,
                            const IkConfig& config = {});

struct ParamStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double std = 0.0;
  Limit chosen;
  /// Slots with no effect on FK, or pinned by construction, keep their old limits.
  bool fixed = false;
};

struct LimitStats {
  std::vector<ParamStats> angles;
  std::vector<ParamStats> proportions;
  SkeletonGraph skeleton;
};

struct LimitConfig {
  /// Limits start from the [p, 100 - p] percentiles of the normalized fitted values.
  double percentile = 1.0;
  /// Each side is widened by pad times the percentile range.
  double pad = 0.05;
  /// Half-width used when every fit agrees on a value.
  double zero_spread = 0.01;
};

/// Linear-interpolation percentile, p in [0, 100].
double percentile(std::vector<double> values, double p);

/// Uses only converged fits; throws ValidationError with "insufficient data" when fewer than two remain.
LimitStats extract_limits(const std::vector<FitResult>& fits, const Skeleton& skeleton, const LimitConfig& config = {});

}  // namespace handkin
