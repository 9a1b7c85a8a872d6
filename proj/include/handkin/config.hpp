#pragma once

// RunConfig: every tunable of the command-line pipeline in one validated
// JSON document. Unknown keys are rejected and omitted keys take defaults.

#include <cstdint>
#include <string>

#include "handkin/diffusion.hpp"
#include "handkin/geometry.hpp"
#include "handkin/iksolver.hpp"
#include "handkin/models.hpp"
#include "handkin/serialization.hpp"
#include "handkin/skeleton.hpp"

namespace handkin {

struct CameraConfig {
  double focal = 500.0;
  double cx = 128.0;
  double cy = 128.0;
  double distance = 0.6;
};

struct DataConfig {
  std::size_t n_train = 5000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::size_t n_train_sequences = 5000;
  std::size_t n_val_sequences = 100;
  std::size_t n_test_sequences = 50;
  std::size_t seq_len = 5;
  /// Pixel noise of the conditioning features.
  double feature_noise_px = 0.5;
  double root_sigma = 0.5;
  double angle_sigma = 1.0;
  double proportion_sigma = 0.5;
  double offset_sigma = 0.02;
  double anchor_length = 0.09;
  double anchor_sigma = 0.005;
  /// Sequences: raw-space velocity v_t = smoothing v_{t-1} + (1 - smoothing) N(0, walk_step^2).
  double walk_step = 0.1;
  double walk_smoothing = 0.8;
  /// Per-coordinate noise (anchor units) standing in for per-frame pose estimates of sequences.
  double estimate_noise = 0.05;
  /// Mirror every record into a left hand; loaders mirror back.
  bool left_hand = false;
};

struct DiffusionConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string schedule = "linear";
  /// Respaced steps used when sampling.
  int sample_steps = 50;
};

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 64;
  double ik_weight = 1.0;
  /// Std of the noise added to ground-truth poses fed to the IK head.
  double ik_input_noise = 0.02;
  bool temporal = true;
  double temporal_weight = 1.0;
  /// Weight of the mean absolute second difference of the temporal encoder's poses along each sequence.
  double temporal_smoothness = 1.0;
  std::size_t temporal_batch = 16;
  /// "none" or "cosine": lr scaled by lr_floor + (1 - lr_floor) (1 + cos(pi (epoch - 1) / epochs)) / 2.
  std::string lr_schedule = "cosine";
  double lr_floor = 0.05;
  OptimizerConfig optimizer{.kind = "adam", .lr = 1e-3, .momentum = 0.9, .beta2 = 0.999, .eps = 1e-8, .clip = 1.0};
};

struct EvalConfig {
  std::string alignment = "root_centered_scale_normalized";
  /// Records per sampling chunk; each chunk has its own seeded stream.
  std::size_t chunk = 50;
  /// Conditional samples drawn per record; their mean goes to ik_project.
  std::size_t samples = 16;
};

struct RunConfig {
  std::uint64_t seed = 0;
  /// Skeleton JSON file; empty selects the canonical hand.
  std::string skeleton;
  CameraConfig camera;
  DataConfig data;
  DiffusionConfig diffusion;
  DenoiserConfig denoiser;
  IkHeadConfig ik_head;
  TemporalConfig temporal;
  TrainConfig train;
  IkConfig ik;
  int ik_restarts = 8;
  LimitConfig limits;
  EvalConfig eval;
};

/// Throws ValidationError naming the first unknown key, wrongly typed value or invalid setting.
RunConfig config_from_json(const Json& j);
/// Every field, in a fixed order.
Json config_to_json(const RunConfig& config);
RunConfig load_config(const std::string& path);
void validate(const RunConfig& config);
/// fnv1a64 of the canonical JSON form, as hex.
std::string config_hash(const RunConfig& config);

Camera make_camera(const CameraConfig& c);
Schedule make_schedule(const DiffusionConfig& c);
/// The configured skeleton file, or the canonical hand.
Skeleton load_skeleton(const RunConfig& config);

}  // namespace handkin
