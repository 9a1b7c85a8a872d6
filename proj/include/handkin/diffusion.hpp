#pragma once

// DDPM noise schedule, forward noising, noise-prediction objective and
// ancestral sampler.

#include <Eigen/Core>
#include <random>
#include <string>
#include <vector>

#include "handkin/autodiff.hpp"

namespace handkin {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Step t = 1..T is stored at index t - 1.
struct Schedule {
  int T = 0;
  Eigen::VectorXd betas;
  Eigen::VectorXd alphas;
  Eigen::VectorXd alpha_bars;
  Eigen::VectorXd sigmas;
  /// Timestep handed to the noise predictor at each step; differs from t after respacing.
  std::vector<int> model_t;

  double beta(int t) const { return betas(t - 1); }
  double alpha(int t) const { return alphas(t - 1); }
  double alpha_bar(int t) const { return alpha_bars(t - 1); }
  double sigma(int t) const { return sigmas(t - 1); }
};

/// Throws ValidationError unless 0 < beta_start <= beta_end < 1 and T >= 1.
Schedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::linear);

/// Sub-schedule over `steps` evenly strided timesteps of `base`, keeping the alpha_bar values at those steps.
Schedule respace(const Schedule& base, int steps);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int t, const Eigen::VectorXd& eps, const Schedule& schedule);

/// One step of the Markov chain: sqrt(alpha_t) x + sqrt(beta_t) eps.
Eigen::VectorXd forward_step(const Eigen::VectorXd& x_prev, int t, const Eigen::VectorXd& eps, const Schedule& schedule);

/// Conditional noise predictor eps(x_t, t, f).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  /// x_t[B, D], one timestep per row, f[B, F] -> [B, D].
  virtual ad::Var predict(ad::Tape& tape, ad::Var x_t, const std::vector<int>& t, ad::Var f) const = 0;
  virtual std::size_t data_dim() const = 0;
  /// Learnable parameters, or null for fixed predictors.
  virtual ad::ParamStore* params() { return nullptr; }
};

/// Noised batch for the training objective.
struct NoisedBatch {
  std::vector<int> t;
  ad::Tensor eps;  // [B, D]
  ad::Tensor x_t;  // [B, D]
};

/// Draws t uniform in {1..T} and eps ~ N(0, I) for every row of x0[B, D].
NoisedBatch noise_batch(const ad::Tensor& x0, const Schedule& schedule, std::mt19937_64& rng);

/// Batch mean of ||eps - eps_hat||^2 on the tape.
ad::Var noise_loss(ad::Tape& tape, const NoisePredictor& model, const NoisedBatch& batch, ad::Var f,
                   const Schedule& schedule);

struct TrainingStepResult {
  double loss = 0.0;
  std::vector<ad::Tensor> grads;  // one per parameter of model.params(), empty for fixed predictors
};

/// Throws NumericalError carrying t and ||x_t|| when the loss is not finite.
TrainingStepResult training_step(NoisePredictor& model, const ad::Tensor& x0, const ad::Tensor& f,
                                 std::mt19937_64& rng, const Schedule& schedule);

struct SampleOptions {
  /// Adds sigma_1 z at the last step too; off by default.
  bool final_noise = false;
};

/// Ancestral sampling from x_T ~ N(0, I); returns x_0 estimates [B, D] for f[B, F].
ad::Tensor sample(const NoisePredictor& model, const ad::Tensor& f, const Schedule& schedule, std::mt19937_64& rng,
                  SampleOptions options = {});

/// Same recursion from a given x_T.
ad::Tensor sample_from(const NoisePredictor& model, ad::Tensor x_T, const ad::Tensor& f, const Schedule& schedule,
                       std::mt19937_64& rng, SampleOptions options = {});

}  // namespace handkin
