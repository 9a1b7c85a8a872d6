#include "handkin/dataset.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "handkin/kinematics.hpp"

namespace handkin {

namespace {

Eigen::VectorXd normal_vector(std::mt19937_64& rng, Eigen::Index n, double sigma) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = sigma * nd(rng);
  return v;
}

std::uint64_t split_stream(std::uint64_t seed, const std::string& name) { return mix_seed(seed, fnv1a64(name)); }

DatasetRecord make_record(const RunConfig& config, const Skeleton& skeleton, const Camera& cam, PoseParams params,
                          std::uint64_t stream, std::size_t id) {
  DatasetRecord r;
  r.id = id;
  r.params = std::move(params);
  r.positions = forward_kinematics(skeleton, r.params).positions;
  r.left_hand = config.data.left_hand;
  if (r.left_hand) r.positions = mirror_x(r.positions);
  r.camera = cam;
  r.feature_seed = mix_seed(stream, id);
  std::mt19937_64 rng(r.feature_seed);
  r.features = synth_features(r.positions, cam, config.data.feature_noise_px, rng);
  return r;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

PoseParams sample_pose(const DataConfig& data, const Skeleton& skeleton, std::mt19937_64& rng) {
  PoseParams p = zero_params(skeleton);
  const Eigen::VectorXd r = normal_vector(rng, 9, data.root_sigma);
  for (int i = 0; i < 9; ++i) p.root_rotation_raw(i / 3, i % 3) += r(i);
  p.root_offset = normal_vector(rng, 3, data.offset_sigma);
  p.angles = normal_vector(rng, static_cast<Eigen::Index>(skeleton.angle_count()), data.angle_sigma);
  for (std::size_t i = 0; i < skeleton.angle_count(); ++i) {
    if (skeleton.masked_angles()[i]) p.angles(static_cast<Eigen::Index>(i)) = 0.0;
  }
  p.proportions_raw = normal_vector(rng, static_cast<Eigen::Index>(skeleton.proportion_count()), data.proportion_sigma);
  if (const auto slot = skeleton.proportion_slot(skeleton.anchor_joint())) p.proportions_raw(static_cast<Eigen::Index>(*slot)) = 0.0;
  std::normal_distribution<double> nd(data.anchor_length, data.anchor_sigma);
  p.anchor_length = std::max(0.5 * data.anchor_length, nd(rng));
  return p;
}

std::vector<DatasetRecord> generate_poses(const RunConfig& config, const Skeleton& skeleton, const std::string& split,
                                          std::size_t n) {
  const Camera cam = make_camera(config.camera);
  const std::uint64_t stream = split_stream(config.seed, split);
  std::vector<DatasetRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix_seed(stream, i));
    DatasetRecord r = make_record(config, skeleton, cam, sample_pose(config.data, skeleton, rng), stream, i);
    r.split = split;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<DatasetRecord> generate_sequences(const RunConfig& config, const Skeleton& skeleton, const std::string& split,
                                              std::size_t n) {
  const DataConfig& d = config.data;
  const Camera cam = make_camera(config.camera);
  const std::uint64_t stream = split_stream(config.seed, "sequences/" + split);
  const auto na = static_cast<Eigen::Index>(skeleton.angle_count());
  const double rho = d.walk_smoothing;
  std::vector<DatasetRecord> out;
  out.reserve(n * d.seq_len);
  for (std::size_t s = 0; s < n; ++s) {
    std::mt19937_64 rng(mix_seed(stream, s));
    PoseParams p = sample_pose(d, skeleton, rng);
    Eigen::VectorXd v_angles = Eigen::VectorXd::Zero(na);
    Eigen::VectorXd v_root = Eigen::VectorXd::Zero(9);
    Eigen::Vector3d v_offset = Eigen::Vector3d::Zero();
    for (std::size_t f = 0; f < d.seq_len; ++f) {
      if (f > 0) {
        v_angles = rho * v_angles + (1.0 - rho) * normal_vector(rng, na, d.walk_step * d.angle_sigma);
        v_root = rho * v_root + (1.0 - rho) * normal_vector(rng, 9, d.walk_step * d.root_sigma);
        v_offset = rho * v_offset + (1.0 - rho) * normal_vector(rng, 3, d.walk_step * d.offset_sigma);
        p.angles += v_angles;
        for (std::size_t i = 0; i < skeleton.angle_count(); ++i) {
          if (skeleton.masked_angles()[i]) p.angles(static_cast<Eigen::Index>(i)) = 0.0;
        }
        for (int i = 0; i < 9; ++i) p.root_rotation_raw(i / 3, i % 3) += v_root(i);
        p.root_offset += v_offset;
      }
      const std::size_t id = s * d.seq_len + f;
      DatasetRecord r = make_record(config, skeleton, cam, p, stream, id);
      r.split = split;
      r.sequence_id = s;
      r.frame_index = f;
      out.push_back(std::move(r));
    }
  }
  return out;
}

DatasetRecord to_right_hand(const DatasetRecord& record) {
  if (!record.left_hand) return record;
  DatasetRecord r = record;
  r.positions = mirror_x(r.positions);
  for (Eigen::Index i = 0; i < r.features.size(); i += 2) r.features(i) = -r.features(i);
  r.left_hand = false;
  return r;
}

Eigen::VectorXd normalized_target(const DatasetRecord& record) {
  const DatasetRecord right = to_right_hand(record);
  return flatten_positions(normalize_pose(right.positions));
}

Json record_to_json(const DatasetRecord& r, const std::string& config_hash, std::uint64_t skeleton_hash) {
  Json j;
  j["id"] = r.id;
  j["split"] = r.split;
  j["sequence_id"] = r.sequence_id ? Json(*r.sequence_id) : Json(nullptr);
  j["frame_index"] = r.frame_index;
  j["hand"] = r.left_hand ? "left" : "right";
  j["params"] = pose_to_json(r.params);
  j["positions"] = positions_to_json(r.positions);
  j["features"] = std::vector<double>(r.features.data(), r.features.data() + r.features.size());
  j["feature_seed"] = r.feature_seed;
  j["camera"] = camera_to_json(r.camera);
  j["config_hash"] = config_hash;
  j["skeleton_hash"] = hex64(skeleton_hash);
  return j;
}

DatasetRecord record_from_json(const Json& j, const Skeleton& skeleton) {
  try {
    DatasetRecord r;
    r.id = j.at("id").get<std::size_t>();
    r.split = j.value("split", std::string());
    if (j.contains("sequence_id") && !j.at("sequence_id").is_null()) r.sequence_id = j.at("sequence_id").get<std::size_t>();
    r.frame_index = j.value("frame_index", std::size_t{0});
    const std::string hand = j.value("hand", std::string("right"));
    if (hand != "left" && hand != "right") throw ValidationError("record " + std::to_string(r.id) + ": hand must be left or right");
    r.left_hand = hand == "left";
    r.params = pose_from_json(skeleton, j.at("params"));
    r.positions = positions_from_json(j.at("positions"));
    const auto f = j.at("features").get<std::vector<double>>();
    r.features = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    r.feature_seed = j.value("feature_seed", std::uint64_t{0});
    if (j.contains("camera")) r.camera = camera_from_json(j.at("camera"));
    if (static_cast<std::size_t>(r.positions.rows()) != skeleton.joint_count() ||
        static_cast<std::size_t>(r.features.size()) != 2 * skeleton.joint_count()) {
      throw ValidationError("record " + std::to_string(r.id) + ": joint count does not match the skeleton");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed record: ") + e.what());
  }
}

std::vector<Json> read_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path);
  std::vector<Json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Json>& lines) {
  std::string text;
  for (const Json& j : lines) {
    text += j.dump();
    text += '\n';
  }
  write_text_atomic(path, text);
}

std::vector<DatasetRecord> load_records(const std::string& path, const Skeleton& skeleton) {
  const std::string expected = hex64(skeleton.hash());
  std::vector<DatasetRecord> out;
  for (const Json& j : read_jsonl(path)) {
    if (j.contains("skeleton_hash") && j.at("skeleton_hash") != expected) {
      throw ValidationError(path + ": skeleton hash " + j.at("skeleton_hash").get<std::string>() +
                            " does not match " + expected);
    }
    out.push_back(record_from_json(j, skeleton));
  }
  return out;
}

std::vector<std::vector<DatasetRecord>> group_sequences(const std::vector<DatasetRecord>& records) {
  std::map<std::size_t, std::vector<DatasetRecord>> by_id;
  for (const DatasetRecord& r : records) {
    if (!r.sequence_id) throw ValidationError("record " + std::to_string(r.id) + " has no sequence_id");
    by_id[*r.sequence_id].push_back(r);
  }
  std::vector<std::vector<DatasetRecord>> out;
  for (auto& [id, frames] : by_id) {
    std::sort(frames.begin(), frames.end(),
              [](const DatasetRecord& a, const DatasetRecord& b) { return a.frame_index < b.frame_index; });
    out.push_back(std::move(frames));
  }
  return out;
}

GenDataSummary gen_data(const RunConfig& config, const std::string& out_dir) {
  const Skeleton skeleton = load_skeleton(config);
  const std::string hash = config_hash(config);
  const std::uint64_t sk_hash = skeleton.hash();
  std::filesystem::create_directories(out_dir);
  GenDataSummary summary;

  auto write = [&](const std::string& name, const std::vector<DatasetRecord>& records) {
    std::vector<Json> lines;
    lines.reserve(records.size());
    for (const DatasetRecord& r : records) lines.push_back(record_to_json(r, hash, sk_hash));
    const std::string path = (std::filesystem::path(out_dir) / name).string();
    write_jsonl(path, lines);
    summary.files.push_back(path);
  };
  const DataConfig& d = config.data;
  write("train.jsonl", generate_poses(config, skeleton, "train", d.n_train));
  write("val.jsonl", generate_poses(config, skeleton, "val", d.n_val));
  write("test.jsonl", generate_poses(config, skeleton, "test", d.n_test));
  write("sequences_train.jsonl", generate_sequences(config, skeleton, "train", d.n_train_sequences));
  write("sequences_val.jsonl", generate_sequences(config, skeleton, "val", d.n_val_sequences));
  const std::vector<DatasetRecord> test_seq = generate_sequences(config, skeleton, "test", d.n_test_sequences);
  write("sequences_test.jsonl", test_seq);

  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : group_sequences(test_seq)) {
    for (std::size_t f = 1; f < seq.size(); ++f) {
      total += (seq[f].positions - seq[f - 1].positions).rowwise().norm().mean() / seq[f].params.anchor_length;
      ++count;
    }
  }
  summary.mean_frame_displacement = count ? total / static_cast<double>(count) : 0.0;

  Json meta;
  meta["config_hash"] = hash;
  meta["skeleton_hash"] = hex64(sk_hash);
  meta["config"] = config_to_json(config);
  meta["camera"] = camera_to_json(make_camera(config.camera));
  meta["skeleton"] = skeleton_to_json(skeleton.graph());
  meta["mean_frame_displacement"] = summary.mean_frame_displacement;
  meta["files"] = Json::array();
  for (const std::string& f : summary.files) meta["files"].push_back(std::filesystem::path(f).filename().string());
  const std::string meta_path = (std::filesystem::path(out_dir) / "dataset.json").string();
  write_text_atomic(meta_path, meta.dump(2) + "\n");
  summary.files.push_back(meta_path);
  return summary;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex m;
  std::size_t next = 0;
  std::exception_ptr error;
  auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(m);
        if (error || next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(m);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

int effective_threads(int requested) {
  const char* det = std::getenv("HANDKIN_DETERMINISTIC");
  if (det && std::string(det) == "1") return 1;
  return std::max(1, requested);
}

}  // namespace handkin
