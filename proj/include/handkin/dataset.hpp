#pragma once

// Synthetic records: raw pose parameters drawn from a Gaussian prior, their FK
// joints and projected 2D features. Stored as JSON lines, one record per line.

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "handkin/config.hpp"

namespace handkin {

struct DatasetRecord {
  std::size_t id = 0;
  std::string split;
  std::optional<std::size_t> sequence_id;
  std::size_t frame_index = 0;
  PoseParams params;
  /// World joints in meters as observed: FK(params), mirrored in x for left hands.
  JointPositions positions;
  /// synth_features(positions, camera, noise, feature_seed).
  Eigen::VectorXd features;
  std::uint64_t feature_seed = 0;
  Camera camera;
  bool left_hand = false;
};

/// splitmix64 of a combined with b; used to give every record and chunk its own stream.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// One draw from the raw-space prior of `data`.
PoseParams sample_pose(const DataConfig& data, const Skeleton& skeleton, std::mt19937_64& rng);

/// `n` independent records of one split.
std::vector<DatasetRecord> generate_poses(const RunConfig& config, const Skeleton& skeleton, const std::string& split,
                                          std::size_t n);

/// `n` sequences of data.seq_len frames from low-pass filtered random walks in raw space.
/// Proportions and anchor length stay fixed within a sequence.
std::vector<DatasetRecord> generate_sequences(const RunConfig& config, const Skeleton& skeleton, const std::string& split,
                                              std::size_t n);

/// Mirrors a left-hand record into the right-hand frame (x of joints and features negated).
DatasetRecord to_right_hand(const DatasetRecord& record);

/// Ground-truth right-hand joints, root at the origin, anchor bone of unit length, flattened to 63.
Eigen::VectorXd normalized_target(const DatasetRecord& record);

/// Record lines carry the config and skeleton hashes of the run that wrote them.
Json record_to_json(const DatasetRecord& record, const std::string& config_hash, std::uint64_t skeleton_hash);
DatasetRecord record_from_json(const Json& j, const Skeleton& skeleton);

std::vector<Json> read_jsonl(const std::string& path);
/// Atomic: written to a temporary sibling, then renamed.
void write_jsonl(const std::string& path, const std::vector<Json>& lines);

/// Reads records, refusing lines written for another skeleton.
std::vector<DatasetRecord> load_records(const std::string& path, const Skeleton& skeleton);

/// Records grouped by sequence_id, frames ordered by frame_index.
std::vector<std::vector<DatasetRecord>> group_sequences(const std::vector<DatasetRecord>& records);

struct GenDataSummary {
  std::vector<std::string> files;
  /// Mean per-frame joint displacement of the sequences divided by the anchor length.
  double mean_frame_displacement = 0.0;
};

/// Writes train/val/test record files, train/val/test sequence files and dataset.json into `out_dir`.
GenDataSummary gen_data(const RunConfig& config, const std::string& out_dir);

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first exception.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Threads to use: 1 when HANDKIN_DETERMINISTIC=1, otherwise `requested` (at least 1).
int effective_threads(int requested);

}  // namespace handkin
