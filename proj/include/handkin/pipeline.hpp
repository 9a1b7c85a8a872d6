#pragma once

// Training, sampling, evaluation, temporal smoothing and batch IK over
// dataset records.

#include <Eigen/Core>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "handkin/config.hpp"
#include "handkin/dataset.hpp"

namespace handkin {

/// Denoiser ("den."), IK head ("ik.") and temporal encoder ("tmp.") over one parameter store.
struct Models {
  /// Fresh parameters; `rng` null gives all-zero networks.
  Models(const Skeleton& skeleton, const RunConfig& config, std::mt19937_64* rng);
  /// Binds to existing parameters, throwing ShapeError when they do not fit `config`.
  Models(const Skeleton& skeleton, const RunConfig& config, ad::ParamStore params);
  Models(const Models&) = delete;
  Models& operator=(const Models&) = delete;

  ad::ParamStore store;
  DenoiserNet denoiser;
  IkHead ik_head;
  TemporalEncoder temporal;
};

/// Network conditioning: features re-centered on the first joint's projection and divided by the RMS
/// distance of the projections from it, so translation and depth of the hand drop out.
Eigen::VectorXd condition_features(const Eigen::VectorXd& features);

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Skeleton> skeleton;
  std::unique_ptr<Models> models;
  /// Checkpoint meta document.
  Json meta;
  /// Mean normalized training pose, for the mean-pose baseline.
  Eigen::VectorXd mean_pose;
};

/// Loads a checkpoint written by train(). The skeleton comes from the checkpoint itself.
LoadedModel load_model(const std::string& checkpoint_path);

struct TrainData {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> val;
  std::vector<std::vector<DatasetRecord>> train_sequences;
  std::vector<std::vector<DatasetRecord>> val_sequences;
};

/// Loads train/val records and sequences from a gen_data directory; sequence files are optional.
TrainData load_train_data(const std::string& data_dir, const Skeleton& skeleton);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_denoise = 0.0;
  double train_ik = 0.0;
  double train_temporal = 0.0;
  /// Total loss of the first mini-batch of the epoch.
  double first_batch_loss = 0.0;
  double val_loss = 0.0;
  double val_denoise = 0.0;
  double val_ik = 0.0;
  double val_temporal = 0.0;
};

Json epoch_to_json(const EpochLog& e);

struct TrainResult {
  /// Epoch 0 holds the losses of the initial parameters.
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

/// Trains for config.train.epochs epochs, writing last.ckpt, best.ckpt, train_log.jsonl and config.json
/// into `out_dir`. With `resume`, continues from a last.ckpt written by an earlier call.
TrainResult train(const RunConfig& config, const Skeleton& skeleton, const TrainData& data, const std::string& out_dir,
                  const std::optional<std::string>& resume = std::nullopt, std::ostream* progress = nullptr);

struct Prediction {
  /// Raw parameters in normalized space: root offset zero, anchor length one.
  PoseParams params;
  /// FK of params, root at the origin, unit anchor bone.
  JointPositions positions;
};

/// Mean of config.eval.samples conditional samples for every record's features, followed by ik_project. Records are split into
/// config.eval.chunk sized chunks, each with its own stream, so the result does not depend on `threads`.
std::vector<Prediction> sample_predictions(const Models& models, const RunConfig& config, const Schedule& schedule,
                                           const std::vector<DatasetRecord>& records, std::uint64_t seed, int threads);

/// Places a normalized pose at the record's ground-truth root and scale.
JointPositions denormalize(const JointPositions& normalized, const DatasetRecord& record);

struct EvalReport {
  Alignment alignment = Alignment::root_centered_scale_normalized;
  std::size_t count = 0;
  double mpjpe_mean = 0.0;
  double mpjpe_median = 0.0;
  Eigen::VectorXd per_joint;
  std::vector<double> per_record;
  int violations = 0;
  /// Same metrics for the mean training pose, when one is given.
  std::optional<double> baseline_mean;
  std::optional<double> baseline_median;
  std::vector<double> baseline_per_record;
};

/// MPJPE in millimeters of normalized predictions against the records' right-hand ground truth.
EvalReport evaluate(const Skeleton& skeleton, const std::vector<Prediction>& predictions,
                    const std::vector<DatasetRecord>& records, Alignment alignment,
                    const std::optional<Eigen::VectorXd>& mean_pose = std::nullopt);

Json eval_report_to_json(const EvalReport& report);
/// id,mpjpe_mm,baseline_mm per record.
std::string eval_records_csv(const EvalReport& report, const std::vector<DatasetRecord>& records);
/// joint,mpjpe_mm per joint.
std::string eval_joints_csv(const EvalReport& report);

/// Mean over interior frames and joints of |p[t+1] - 2 p[t] + p[t-1]|; zero below three frames.
double jitter(const std::vector<JointPositions>& frames);

struct SequenceSmoothing {
  std::size_t sequence_id = 0;
  /// Normalized per-frame estimates fed to both paths.
  std::vector<Eigen::VectorXd> estimates;
  std::vector<Prediction> raw;
  std::vector<Prediction> smoothed;
  Eigen::VectorXd proportions;  // normalized, shared by every smoothed frame
  std::vector<double> raw_mpjpe;
  std::vector<double> smoothed_mpjpe;
  /// Millimeters per frame squared, after scaling to the ground-truth anchor.
  double raw_jitter = 0.0;
  double smoothed_jitter = 0.0;
  /// Largest per-bone variance across frames of the smoothed normalized proportions.
  double proportion_variance = 0.0;
};

struct SmoothReport {
  std::vector<SequenceSmoothing> sequences;
  double raw_jitter = 0.0;
  double smoothed_jitter = 0.0;
  double raw_mpjpe = 0.0;
  double smoothed_mpjpe = 0.0;
  double max_proportion_variance = 0.0;
  int violations = 0;
};

/// Per-frame estimates are ground truth plus N(0, data.estimate_noise^2) per coordinate. The raw path
/// projects each estimate with the IK head; the smoothed path takes angles from the temporal encoder,
/// proportions from bone_length_average over the frames and the root from the IK head.
SmoothReport smooth_sequences(const Models& models, const RunConfig& config,
                              const std::vector<std::vector<DatasetRecord>>& sequences, std::uint64_t seed, int threads);

Json smooth_report_to_json(const SmoothReport& report);
/// sequence_id,frame,raw_mpjpe_mm,smoothed_mpjpe_mm per frame.
std::string smooth_frames_csv(const SmoothReport& report);

/// fit_pose_restarts on every target with seed mix_seed(seed, i).
std::vector<FitResult> fit_targets(const std::vector<JointPositions>& targets, const Skeleton& skeleton,
                                   const RunConfig& config, std::uint64_t seed, int threads);

Json fit_to_json(const FitResult& fit, std::size_t id);
FitResult fit_from_json(const Json& j, const Skeleton& skeleton);

Json limit_stats_to_json(const LimitStats& stats);

/// Meta block embedded in every artifact: config hash, skeleton hash, tool name.
Json artifact_meta(const RunConfig& config, const Skeleton& skeleton, const std::string& tool);

}  // namespace handkin
