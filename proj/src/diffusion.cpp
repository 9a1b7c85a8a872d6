#include "handkin/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace handkin {

namespace {

constexpr double kMaxBeta = 0.999;
constexpr double kCosineOffset = 0.008;

void check_step(const Schedule& s, int t) {
  if (t < 1 || t > s.T) {
    throw ValidationError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(s.T));
  }
}

Schedule from_betas(Eigen::VectorXd betas, std::vector<int> model_t) {
  Schedule s;
  s.T = static_cast<int>(betas.size());
  s.betas = std::move(betas);
  s.alphas = 1.0 - s.betas.array();
  s.alpha_bars.resize(s.T);
  double running = 1.0;
  for (int i = 0; i < s.T; ++i) {
    running *= s.alphas(i);
    s.alpha_bars(i) = running;
  }
  s.sigmas = s.betas.array().sqrt();
  s.model_t = std::move(model_t);
  return s;
}

std::vector<int> identity_steps(int T) {
  std::vector<int> v(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) v[static_cast<std::size_t>(i)] = i + 1;
  return v;
}

ad::Tensor standard_normal(ad::Shape shape, std::mt19937_64& rng) {
  ad::Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = nd(rng);
  return t;
}

std::size_t rows_of(const ad::Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " must be [B, D], got " + ad::to_string(t.shape()));
  return t.shape()[0];
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ValidationError("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

Schedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
  if (T < 1) throw ValidationError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  Eigen::VectorXd betas(T);
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < T; ++i) {
      betas(i) = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
    }
  } else {
    auto f = [T](int t) {
      const double x = (static_cast<double>(t) / T + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0;
      return std::cos(x) * std::cos(x);
    };
    for (int t = 1; t <= T; ++t) betas(t - 1) = std::min(1.0 - f(t) / f(t - 1), kMaxBeta);
  }
  return from_betas(std::move(betas), identity_steps(T));
}

Schedule respace(const Schedule& base, int steps) {
  if (steps < 1 || steps > base.T) {
    throw ValidationError("respaced step count must lie in 1.." + std::to_string(base.T));
  }
  Eigen::VectorXd betas(steps);
  std::vector<int> model_t(static_cast<std::size_t>(steps));
  double prev_bar = 1.0;
  for (int i = 1; i <= steps; ++i) {
    const int tau = static_cast<int>((static_cast<long long>(i) * base.T) / steps);
    const double bar = base.alpha_bar(tau);
    betas(i - 1) = 1.0 - bar / prev_bar;
    model_t[static_cast<std::size_t>(i - 1)] = base.model_t[static_cast<std::size_t>(tau - 1)];
    prev_bar = bar;
  }
  return from_betas(std::move(betas), std::move(model_t));
}

Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int t, const Eigen::VectorXd& eps, const Schedule& schedule) {
  check_step(schedule, t);
  if (x0.size() != eps.size()) throw ShapeError("forward_noise: eps and x0 sizes differ");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Eigen::VectorXd forward_step(const Eigen::VectorXd& x_prev, int t, const Eigen::VectorXd& eps, const Schedule& schedule) {
  check_step(schedule, t);
  if (x_prev.size() != eps.size()) throw ShapeError("forward_step: eps and x sizes differ");
  return std::sqrt(schedule.alpha(t)) * x_prev + std::sqrt(schedule.beta(t)) * eps;
}

NoisedBatch noise_batch(const ad::Tensor& x0, const Schedule& schedule, std::mt19937_64& rng) {
  const std::size_t b = rows_of(x0, "x0");
  const std::size_t d = x0.shape()[1];
  NoisedBatch out;
  std::uniform_int_distribution<int> pick(1, schedule.T);
  out.t.resize(b);
  for (int& t : out.t) t = pick(rng);
  out.eps = standard_normal({b, d}, rng);
  out.x_t = ad::Tensor({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    const double ab = schedule.alpha_bar(out.t[i]);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t j = 0; j < d; ++j) out.x_t[i * d + j] = a * x0[i * d + j] + s * out.eps[i * d + j];
  }
  return out;
}

ad::Var noise_loss(ad::Tape& tape, const NoisePredictor& model, const NoisedBatch& batch, ad::Var f,
                   const Schedule& schedule) {
  std::vector<int> model_t(batch.t.size());
  for (std::size_t i = 0; i < batch.t.size(); ++i) {
    check_step(schedule, batch.t[i]);
    model_t[i] = schedule.model_t[static_cast<std::size_t>(batch.t[i] - 1)];
  }
  const ad::Var eps_hat = model.predict(tape, tape.constant(batch.x_t), model_t, f);
  const ad::Var diff = ad::sub(tape.constant(batch.eps), eps_hat);
  const double rows = static_cast<double>(batch.t.size());
  return ad::scale(ad::sum(ad::square(diff)), 1.0 / rows);
}

TrainingStepResult training_step(NoisePredictor& model, const ad::Tensor& x0, const ad::Tensor& f, std::mt19937_64& rng,
                                 const Schedule& schedule) {
  const NoisedBatch batch = noise_batch(x0, schedule, rng);
  ad::Tape tape;
  TrainingStepResult out;
  try {
    const ad::Var loss = noise_loss(tape, model, batch, tape.constant(f), schedule);
    out.loss = loss.value().item();
    tape.backward(loss);
  } catch (const NumericalError& e) {
    std::ostringstream os;
    os << "non-finite training loss (" << e.what() << "); t =";
    for (int t : batch.t) os << ' ' << t;
    double norm = 0.0;
    for (double v : batch.x_t.values()) norm += v * v;
    os << ", ||x_t|| = " << std::sqrt(norm);
    throw NumericalError(os.str());
  }
  if (ad::ParamStore* store = model.params()) out.grads = tape.param_grads(*store);
  return out;
}

ad::Tensor sample(const NoisePredictor& model, const ad::Tensor& f, const Schedule& schedule, std::mt19937_64& rng,
                  SampleOptions options) {
  const std::size_t b = rows_of(f, "features");
  ad::Tensor x = standard_normal({b, model.data_dim()}, rng);
  return sample_from(model, std::move(x), f, schedule, rng, options);
}

ad::Tensor sample_from(const NoisePredictor& model, ad::Tensor x, const ad::Tensor& f, const Schedule& schedule,
                       std::mt19937_64& rng, SampleOptions options) {
  const std::size_t b = rows_of(x, "x_T");
  if (rows_of(f, "features") != b) throw ShapeError("sample: feature and state batch sizes differ");
  const std::size_t d = x.shape()[1];
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int t = schedule.T; t >= 1; --t) {
    ad::Tape tape(false);
    const std::vector<int> steps(b, schedule.model_t[static_cast<std::size_t>(t - 1)]);
    ad::Tensor eps;
    try {
      eps = model.predict(tape, tape.constant(x), steps, tape.constant(f)).value();
    } catch (const NumericalError& e) {
      throw NumericalError("sampler diverged at step " + std::to_string(t) + ": " + e.what());
    }
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const bool add_noise = t > 1 || options.final_noise;
    for (std::size_t i = 0; i < b * d; ++i) {
      x[i] = inv_sqrt_alpha * (x[i] - coef * eps[i]);
      if (add_noise) x[i] += schedule.sigma(t) * nd(rng);
    }
    if (!x.all_finite()) throw NumericalError("sampler produced a non-finite state at step " + std::to_string(t));
  }
  return x;
}

}  // namespace handkin
