#include "handkin/iksolver.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "handkin/errors.hpp"
#include "handkin/kinematics.hpp"

namespace handkin {

namespace {

double anchor_of(const Skeleton& sk, const JointPositions& p) {
  const std::size_t a = sk.anchor_joint();
  return (p.row(static_cast<Eigen::Index>(a)) - p.row(static_cast<Eigen::Index>(*sk.joint(a).parent))).norm();
}

/// Length unit for residuals: the target anchor bone, or a spread-based fallback when it collapses.
double residual_scale(const Skeleton& sk, const JointPositions& target) {
  const double anchor = anchor_of(sk, target);
  if (anchor > 1e-9) return anchor;
  const Eigen::RowVector3d wrist = target.row(static_cast<Eigen::Index>(sk.root()));
  const double spread = std::sqrt((target.rowwise() - wrist).rowwise().squaredNorm().mean());
  return std::max(spread, 1e-3);
}

void check_target(const Skeleton& sk, const JointPositions& target) {
  if (static_cast<std::size_t>(target.rows()) != sk.joint_count()) {
    throw ValidationError("IK target has " + std::to_string(target.rows()) + " joints, skeleton has " +
                          std::to_string(sk.joint_count()));
  }
  if (!target.allFinite()) throw ValidationError("IK target contains non-finite coordinates");
}

struct Eval {
  Eigen::VectorXd r;  // flattened weights * (FK - target) / scale
  double cost = 0.0;  // 0.5 |r|^2
};

double rms(const Eval& e, std::size_t joints) { return std::sqrt(2.0 * e.cost / static_cast<double>(joints)); }

double mean_distance(const Eval& e, std::size_t joints) {
  double total = 0.0;
  for (std::size_t j = 0; j < joints; ++j) total += e.r.segment<3>(static_cast<Eigen::Index>(3 * j)).norm();
  return total / static_cast<double>(joints);
}

/// Damped least squares over the flat raw vector. `weights` holds one factor per joint.
class Solver {
 public:
  Solver(const Skeleton& sk, const JointPositions& target, const IkConfig& config)
      : sk_(sk), target_(target), config_(config), scale_(residual_scale(sk, target)),
        anchor_col_(static_cast<Eigen::Index>(sk.raw_size()) - 1) {}

  double scale() const { return scale_; }

  std::optional<Eval> evaluate(const PoseParams& p, const Eigen::VectorXd& weights) const {
    JointPositions pos;
    try {
      pos = forward_kinematics(sk_, p).positions;
    } catch (const DegenerateInputError&) {
      return std::nullopt;
    }
    Eval e;
    e.r.resize(pos.size());
    for (Eigen::Index j = 0; j < pos.rows(); ++j) {
      e.r.segment<3>(3 * j) = weights(j) * (pos.row(j) - target_.row(j)).transpose() / scale_;
    }
    if (!e.r.allFinite()) return std::nullopt;
    e.cost = 0.5 * e.r.squaredNorm();
    return e;
  }

  struct Run {
    PoseParams params;
    Eval eval;
    int iterations = 0;
    bool converged = false;
    std::vector<double> history;
  };

  Run run(PoseParams start, const Eigen::VectorXd& weights, int max_iterations) const {
    const std::size_t joints = sk_.joint_count();
    const double min_anchor = 1e-6 * scale_;
    Run res;
    res.params = std::move(start);
    Eigen::VectorXd x = flatten(res.params);
    std::optional<Eval> cur = evaluate(res.params, weights);
    if (!cur) throw NumericalError("IK start produces a degenerate root rotation or non-finite positions");
    res.history.push_back(rms(*cur, joints));

    auto try_step = [&](const Eigen::VectorXd& step) -> bool {
      const Eigen::VectorXd x_new = x + step;
      if (!(x_new(anchor_col_) > min_anchor)) return false;
      PoseParams p_new = unflatten(sk_, x_new);
      std::optional<Eval> e = evaluate(p_new, weights);
      if (!e || !(e->cost < cur->cost)) return false;
      x = x_new;
      res.params = std::move(p_new);
      cur = std::move(e);
      res.history.push_back(rms(*cur, joints));
      return true;
    };

    double lambda = config_.lambda_init;
    for (res.iterations = 0; res.iterations < max_iterations; ++res.iterations) {
      if (mean_distance(*cur, joints) < config_.residual_tol) {
        res.converged = true;
        break;
      }
      Eigen::MatrixXd jac = fk_jacobian_analytic(sk_, res.params) / scale_;
      if (!jac.allFinite()) {
        std::ostringstream os;
        os << "non-finite IK Jacobian at iteration " << res.iterations << " (anchor " << res.params.anchor_length
           << ", residual " << mean_distance(*cur, joints) << ")";
        throw NumericalError(os.str());
      }
      for (Eigen::Index j = 0; j < weights.size(); ++j) jac.middleRows<3>(3 * j) *= weights(j);
      const Eigen::VectorXd g = jac.transpose() * cur->r;
      if (g.lpNorm<Eigen::Infinity>() < config_.gradient_tol) {
        res.converged = true;
        break;
      }
      const Eigen::MatrixXd a = jac.transpose() * jac;
      bool accepted = false;
      while (lambda <= config_.lambda_max) {
        Eigen::MatrixXd damped = a;
        damped.diagonal().array() += lambda;
        const Eigen::VectorXd step = damped.ldlt().solve(-g);
        if (step.allFinite() && try_step(step)) {
          lambda = std::max(lambda / config_.lambda_factor, 1e-15);
          accepted = true;
          break;
        }
        lambda *= config_.lambda_factor;
      }
      if (!accepted) {
        // Gradient-descent fallback with backtracking from the Cauchy step length.
        double alpha = cur->cost / std::max(g.squaredNorm(), 1e-300);
        for (int k = 0; k < 40 && !accepted; ++k, alpha *= 0.5) accepted = try_step(-alpha * g);
        if (!accepted) break;
        lambda = config_.lambda_init;
      }
    }
    res.eval = *cur;
    return res;
  }

 private:
  const Skeleton& sk_;
  const JointPositions& target_;
  const IkConfig& config_;
  double scale_;
  Eigen::Index anchor_col_;
};

}  // namespace

double residual_mpjpe(const Skeleton& skeleton, const PoseParams& params, const JointPositions& target) {
  check_target(skeleton, target);
  const JointPositions pos = forward_kinematics(skeleton, params).positions;
  return (pos - target).rowwise().norm().mean() / residual_scale(skeleton, target);
}

PoseParams default_init(const Skeleton& skeleton, const JointPositions& target) {
  check_target(skeleton, target);
  const double anchor = std::max(anchor_of(skeleton, target), 1e-6);
  PoseParams p = zero_params(skeleton, anchor);
  const JointPositions rest = forward_kinematics(skeleton, p).positions;
  const Eigen::Index root = static_cast<Eigen::Index>(skeleton.root());
  // Kabsch: rotation taking wrist-relative rest positions onto the target's.
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (Eigen::Index j = 0; j < rest.rows(); ++j) {
    h += (rest.row(j) - rest.row(root)).transpose() * (target.row(j) - target.row(root));
  }
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  p.root_rotation_raw = svd.matrixV() * d * svd.matrixU().transpose();
  p.root_offset = target.row(root).transpose();
  return p;
}

PoseParams random_init(const Skeleton& skeleton, const JointPositions& target, std::uint64_t seed, double sigma) {
  PoseParams p = default_init(skeleton, target);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  for (Eigen::Index i = 0; i < p.angles.size(); ++i) p.angles(i) = nd(rng);
  for (Eigen::Index i = 0; i < p.proportions_raw.size(); ++i) p.proportions_raw(i) = nd(rng);
  return p;
}

namespace {

/// Coarse to fine: match the joints up to each tree depth before adding the next level,
/// so distal bones do not pull proximal ones into a wrongly bent configuration.
PoseParams warm_start(const Solver& solver, const Skeleton& skeleton, PoseParams start, int iterations) {
  const std::size_t depths = skeleton.levels().size();
  for (std::size_t d = 1; d + 1 < depths; ++d) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(skeleton.joint_count()));
    for (std::size_t level = 0; level <= d; ++level)
      for (std::size_t id : skeleton.levels()[level]) w(static_cast<Eigen::Index>(id)) = 1.0;
    start = solver.run(std::move(start), w, iterations).params;
  }
  return start;
}

FitResult to_result(Solver::Run run, const Skeleton& skeleton, const IkConfig& config) {
  FitResult res;
  res.params = std::move(run.params);
  res.iterations = run.iterations;
  res.history = std::move(run.history);
  res.residual_mpjpe = mean_distance(run.eval, skeleton.joint_count());
  res.converged = run.converged || res.residual_mpjpe < config.residual_tol;
  return res;
}

}  // namespace

FitResult fit_pose(const JointPositions& target, const Skeleton& skeleton, const std::optional<PoseParams>& init,
                   const IkConfig& config) {
  check_target(skeleton, target);
  const Solver solver(skeleton, target, config);
  const Eigen::VectorXd all = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(skeleton.joint_count()));
  if (init) {
    check_params(skeleton, *init);
    return to_result(solver.run(*init, all, config.max_iterations), skeleton, config);
  }
  const PoseParams base = default_init(skeleton, target);
  FitResult best = to_result(
      solver.run(warm_start(solver, skeleton, base, config.warm_start_iterations), all, config.max_iterations), skeleton, config);
  for (int k = 0; k < config.fallback_starts && best.residual_mpjpe >= config.residual_tol; ++k) {
    PoseParams start = random_init(skeleton, target, static_cast<std::uint64_t>(k), config.init_sigma);
    start = warm_start(solver, skeleton, std::move(start), config.warm_start_iterations);
    FitResult r = to_result(solver.run(std::move(start), all, config.max_iterations), skeleton, config);
    if (r.residual_mpjpe < best.residual_mpjpe) best = std::move(r);
  }
  return best;
}

FitResult fit_pose_restarts(const JointPositions& target, const Skeleton& skeleton, int n, std::uint64_t seed,
                            const IkConfig& config) {
  if (n < 1) throw ValidationError("restart count must be at least 1");
  std::optional<FitResult> best;
  for (int i = 0; i < n; ++i) {
    FitResult r = fit_pose(target, skeleton, random_init(skeleton, target, seed + static_cast<std::uint64_t>(i), config.init_sigma),
                           config);
    if (!best || r.residual_mpjpe < best->residual_mpjpe) best = std::move(r);
  }
  return *best;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  if (!(p >= 0.0 && p <= 100.0)) throw ValidationError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

ParamStats summarize(const std::vector<double>& v, const LimitConfig& cfg) {
  ParamStats s;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(v.size()));
  const double lo = percentile(v, cfg.percentile);
  const double hi = percentile(v, 100.0 - cfg.percentile);
  const double range = hi - lo;
  if (range > 1e-12) {
    s.chosen = {lo - cfg.pad * range, hi + cfg.pad * range};
  } else {
    s.chosen = {lo - cfg.zero_spread, hi + cfg.zero_spread};
  }
  return s;
}

}  // namespace

LimitStats extract_limits(const std::vector<FitResult>& fits, const Skeleton& skeleton, const LimitConfig& config) {
  if (!(config.percentile >= 0.0 && config.percentile < 50.0)) throw ValidationError("percentile must lie in [0, 50)");
  if (!(config.pad >= 0.0)) throw ValidationError("pad must be non-negative");
  if (!(config.zero_spread > 0.0)) throw ValidationError("zero-spread half-width must be positive");
  std::vector<const FitResult*> used;
  for (const FitResult& f : fits)
    if (f.converged) used.push_back(&f);
  if (used.size() < 2) {
    throw ValidationError("insufficient data: extract_limits needs at least 2 converged fits, got " +
                          std::to_string(used.size()));
  }
  const std::size_t na = skeleton.angle_count(), np = skeleton.proportion_count();
  std::vector<std::vector<double>> angles(na), props(np);
  for (const FitResult* f : used) {
    const Eigen::VectorXd a = normalized_angles(skeleton, f->params.angles);
    const Eigen::VectorXd q = normalized_proportions(skeleton, f->params.proportions_raw);
    for (std::size_t i = 0; i < na; ++i) angles[i].push_back(a(static_cast<Eigen::Index>(i)));
    for (std::size_t i = 0; i < np; ++i) props[i].push_back(q(static_cast<Eigen::Index>(i)));
  }

  LimitStats out;
  out.skeleton = skeleton.graph();
  for (std::size_t i = 0; i < na; ++i) {
    out.angles.push_back(summarize(angles[i], config));
    if (skeleton.masked_angles()[i]) {
      out.angles.back().fixed = true;
      out.angles.back().chosen = skeleton.angle_limits()[i];
    }
  }
  for (std::size_t i = 0; i < np; ++i) {
    ParamStats s = summarize(props[i], config);
    s.chosen.min = std::max(s.chosen.min, 1e-3);
    s.chosen.max = std::max(s.chosen.max, s.chosen.min + 1e-3);
    out.proportions.push_back(s);
  }

  for (JointSpec& j : out.skeleton.joints) {
    if (j.id != skeleton.root()) {
      for (std::size_t k = 0; k < j.euler_limits.size(); ++k) j.euler_limits[k] = out.angles[skeleton.angle_slot(j.id) + k].chosen;
    }
    if (const auto s = skeleton.splay_slot(j.id)) {
      for (std::size_t k = 0; k < 3; ++k) (*j.splay_limits)[k] = out.angles[*s + k].chosen;
    }
    if (const auto s = skeleton.proportion_slot(j.id)) {
      if (j.id == skeleton.anchor_joint()) {
        out.proportions[*s].fixed = true;
        out.proportions[*s].chosen = j.proportion_limits;
      } else {
        j.proportion_limits = out.proportions[*s].chosen;
      }
    }
  }
  return out;
}

}  // namespace handkin
