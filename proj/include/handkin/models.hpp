#pragma once

// Learnable components: conditional noise predictor, IK projection head,
// temporal encoder, optimizers and the synthetic conditioning features.

#include <Eigen/Core>
#include <random>
#include <string>
#include <vector>

#include "handkin/autodiff.hpp"
#include "handkin/diffusion.hpp"
#include "handkin/geometry.hpp"
#include "handkin/kinematics.hpp"
#include "handkin/skeleton.hpp"

namespace handkin {

/// Sinusoidal embedding: [sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})],
/// w_k = exp(-ln(10000) k / h), h = dim / 2. Throws ValidationError for odd dim.
Eigen::VectorXd time_embedding(int t, int dim);

enum class Activation { silu, relu, tanh };

/// Plain fully connected stack with the activation between layers and a linear output.
class Mlp {
 public:
  Mlp() = default;
  /// Registers weights "<prefix>w<i>" and biases "<prefix>b<i>" in `store`.
  /// Weights are Xavier-normal from `rng`, or zero when `rng` is null; biases start at zero.
  Mlp(ad::ParamStore& store, const std::string& prefix, std::vector<std::size_t> widths, Activation act,
      std::mt19937_64* rng);
  /// Rebinds to parameters already present in `store`.
  static Mlp bind(const ad::ParamStore& store, const std::string& prefix, std::vector<std::size_t> widths,
                  Activation act);

  ad::Var forward(ad::Tape& tape, const ad::ParamStore& store, ad::Var x) const;
  const std::vector<std::size_t>& widths() const noexcept { return widths_; }

 private:
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> weight_ids_;
  std::vector<std::size_t> bias_ids_;
  Activation act_ = Activation::silu;
};

struct DenoiserConfig {
  std::size_t data_dim = 63;
  std::size_t time_dim = 32;
  std::size_t feature_dim = 42;
  std::size_t width = 256;
  std::size_t layers = 4;
};

/// eps_theta(x_t, t, f) as an MLP over [x_t | time_embedding(t) | f].
class DenoiserNet : public NoisePredictor {
 public:
  /// `rng` null gives an all-zero network.
  DenoiserNet(ad::ParamStore& store, DenoiserConfig config, std::mt19937_64* rng);
  static DenoiserNet bind(ad::ParamStore& store, DenoiserConfig config);

  ad::Var predict(ad::Tape& tape, ad::Var x_t, const std::vector<int>& t, ad::Var f) const override;
  std::size_t data_dim() const override { return config_.data_dim; }
  ad::ParamStore* params() override { return store_; }
  const DenoiserConfig& config() const noexcept { return config_; }

 private:
  DenoiserNet(ad::ParamStore& store, DenoiserConfig config, Mlp mlp) : store_(&store), config_(config), mlp_(std::move(mlp)) {}
  ad::ParamStore* store_;
  DenoiserConfig config_;
  Mlp mlp_;
};

/// Plain-function form of DenoiserNet::predict for a single x_t.
Eigen::VectorXd denoise_eps(const DenoiserNet& net, const Eigen::VectorXd& x_t, int t, const Eigen::VectorXd& f);

struct IkHeadConfig {
  std::size_t width = 128;
  std::size_t layers = 3;
};

/// Maps a normalized 63-vector to raw root matrix (9), angles and proportions.
class IkHead {
 public:
  IkHead(ad::ParamStore& store, const Skeleton& skeleton, IkHeadConfig config, std::mt19937_64* rng);
  static IkHead bind(ad::ParamStore& store, const Skeleton& skeleton, IkHeadConfig config);

  std::size_t output_dim() const noexcept { return 9 + skeleton_->angle_count() + skeleton_->proportion_count(); }
  const Skeleton& skeleton() const noexcept { return *skeleton_; }
  ad::ParamStore& store() const noexcept { return *store_; }

  struct Output {
    ad::Var raw;  // [B, output_dim]
    fk::Inputs inputs;  // root offset zero, anchor one
    fk::Outputs fk;
  };
  /// x[B, 3 * joints] in normalized pose space.
  Output forward(ad::Tape& tape, ad::Var x) const;

 private:
  IkHead(ad::ParamStore& store, const Skeleton& skeleton, IkHeadConfig config, Mlp mlp)
      : store_(&store), skeleton_(&skeleton), config_(config), mlp_(std::move(mlp)) {}
  ad::ParamStore* store_;
  const Skeleton* skeleton_;
  IkHeadConfig config_;
  Mlp mlp_;
};

struct IkProjection {
  std::vector<PoseParams> params;  // root offset zero, anchor length one
  std::vector<JointPositions> positions;
};

/// Projects arbitrary normalized 63-vectors (rows of x0_hat) onto the constrained pose manifold.
IkProjection ik_project(const IkHead& head, const ad::Tensor& x0_hat);

struct TemporalConfig {
  std::size_t window = 5;
  std::size_t width = 64;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ffn = 128;
  double dropout = 0.1;
  /// Multiplier on the sinusoidal position table; 0 removes positional information.
  double position_scale = 1.0;
};

/// Post-norm self-attention encoder producing raw angles for every frame.
class TemporalEncoder {
 public:
  TemporalEncoder(ad::ParamStore& store, const Skeleton& skeleton, TemporalConfig config, std::mt19937_64* rng);
  static TemporalEncoder bind(ad::ParamStore& store, const Skeleton& skeleton, TemporalConfig config);

  const TemporalConfig& config() const noexcept { return config_; }
  ad::ParamStore& store() const noexcept { return *store_; }

  /// frames[B, L, 3 * joints] -> raw angles [B, L, angle_count]. `hidden` has B * L entries;
  /// a hidden frame's input is replaced by a learned mask token and it gets zero attention weight as a
  /// key, so its output is reconstructed from the other frames. Dropout applies when `rng` is set.
  ad::Var forward(ad::Tape& tape, ad::Var frames, const std::vector<bool>& hidden, std::mt19937_64* rng) const;

 private:
  TemporalEncoder(ad::ParamStore& store, const Skeleton& skeleton, TemporalConfig config)
      : store_(&store), skeleton_(&skeleton), config_(config) {}
  void register_params(std::mt19937_64* rng);
  std::size_t id(const std::string& name) const;

  ad::ParamStore* store_;
  const Skeleton* skeleton_;
  TemporalConfig config_;
  ad::Tensor positions_;  // [window, width]
};

/// Convenience form for one sequence: frames [L, 3 * joints] -> raw angles [L, angle_count].
Eigen::MatrixXd temporal_forward(const TemporalEncoder& enc, const Eigen::MatrixXd& frames, const std::vector<bool>& mask);

/// Hides k positions, k uniform in {0..floor(len / 2)}, chosen without replacement.
std::vector<bool> make_training_mask(std::size_t len, std::mt19937_64& rng);

/// Mean of per-frame normalized proportions, clamped to the limits.
Eigen::VectorXd bone_length_average(const std::vector<Eigen::VectorXd>& frames, const std::vector<Limit>& limits);

/// Raw value whose sine normalization gives `value` (clamped into the limit).
double inverse_sine_normalize(double value, const Limit& limit);

/// Normalized image coordinates (u - cx) / cx, (v - cy) / cy of the projected joints, with Gaussian pixel noise.
Eigen::VectorXd synth_features(const JointPositions& world, const Camera& cam, double noise_sigma, std::mt19937_64& rng);

// ---- optimizers ------------------------------------------------------------

struct OptimizerConfig {
  std::string kind = "momentum";  // "momentum" or "adam"
  double lr = 1e-3;
  double momentum = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip, disabled when <= 0.
  double clip = 1.0;
};

class Optimizer {
 public:
  Optimizer(const ad::ParamStore& store, OptimizerConfig config);
  void step(ad::ParamStore& store, const std::vector<ad::Tensor>& grads);
  std::size_t steps() const noexcept { return steps_; }
  void set_lr(double lr);
  double lr() const noexcept { return config_.lr; }

  /// Optimizer state as named tensors, for checkpoints.
  void export_state(ad::ParamStore& out, const std::string& prefix) const;
  void import_state(const ad::ParamStore& in, const std::string& prefix);

 private:
  OptimizerConfig config_;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
  std::size_t steps_ = 0;
};

}  // namespace handkin
