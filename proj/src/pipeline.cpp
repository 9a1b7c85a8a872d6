#include "handkin/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "handkin/kinematics.hpp"

namespace handkin {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

constexpr const char* kOptPrefix = "opt.";

DenoiserConfig denoiser_config(const RunConfig& c, const Skeleton& sk) {
  DenoiserConfig d = c.denoiser;
  d.data_dim = 3 * sk.joint_count();
  d.feature_dim = 2 * sk.joint_count();
  return d;
}

std::string path_in(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

Tensor rows_tensor(const std::vector<Eigen::VectorXd>& rows) {
  const std::size_t n = rows.size(), d = rows.empty() ? 0 : static_cast<std::size_t>(rows[0].size());
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) std::copy(rows[i].data(), rows[i].data() + d, t.data() + i * d);
  return t;
}

Eigen::VectorXd gaussian(std::mt19937_64& rng, Eigen::Index n, double sigma) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = sigma * nd(rng);
  return v;
}

/// Ground-truth pieces of one record in the right-hand normalized frame.
struct Sample {
  Eigen::VectorXd x0;        // 63
  Eigen::VectorXd features;  // 42
  Eigen::Matrix3d root;
  Eigen::VectorXd proportions_raw;
};

Sample make_sample(const DatasetRecord& r) {
  const DatasetRecord right = to_right_hand(r);
  return {normalized_target(r), condition_features(right.features), r.params.root_rotation_raw, r.params.proportions_raw};
}

/// A batch of sequences for the temporal loss.
struct SequenceBatch {
  Tensor frames;  // [S, L, 63] noisy estimates
  Tensor target;  // [S * L, 21, 3]
  Tensor root;    // [S * L, 3, 3]
  Tensor proportions;  // [S * L, P]
  std::vector<bool> hidden;
};

SequenceBatch make_sequence_batch(const std::vector<const std::vector<Sample>*>& seqs, double noise, bool mask,
                                  std::mt19937_64& rng) {
  const std::size_t s = seqs.size(), len = seqs[0]->size();
  const std::size_t d = static_cast<std::size_t>((*seqs[0])[0].x0.size());
  const std::size_t np = static_cast<std::size_t>((*seqs[0])[0].proportions_raw.size());
  SequenceBatch b;
  b.frames = Tensor({s, len, d});
  b.target = Tensor({s * len, d / 3, 3});
  b.root = Tensor({s * len, 3, 3});
  b.proportions = Tensor({s * len, np});
  for (std::size_t i = 0; i < s; ++i) {
    if (seqs[i]->size() != len) throw ValidationError("sequences in one batch must have equal length");
    for (std::size_t f = 0; f < len; ++f) {
      const Sample& smp = (*seqs[i])[f];
      const std::size_t row = i * len + f;
      const Eigen::VectorXd noisy = smp.x0 + gaussian(rng, smp.x0.size(), noise);
      std::copy(noisy.data(), noisy.data() + d, b.frames.data() + row * d);
      std::copy(smp.x0.data(), smp.x0.data() + d, b.target.data() + row * d);
      for (int k = 0; k < 9; ++k) b.root[row * 9 + static_cast<std::size_t>(k)] = smp.root(k / 3, k % 3);
      std::copy(smp.proportions_raw.data(), smp.proportions_raw.data() + np, b.proportions.data() + row * np);
    }
    std::vector<bool> m = mask ? make_training_mask(len, rng) : std::vector<bool>(len, false);
    b.hidden.insert(b.hidden.end(), m.begin(), m.end());
  }
  return b;
}

struct LossParts {
  Var total;
  double denoise = 0.0;
  double ik = 0.0;
  double temporal = 0.0;
};

/// L1 of FK(ground-truth root, encoder angles, ground-truth proportions) against the targets, plus
/// train.temporal_smoothness times the mean absolute second difference of those positions along each sequence.
Var temporal_loss(Tape& tape, const Models& m, const RunConfig& cfg, const SequenceBatch& seq, std::mt19937_64* rng) {
  const Skeleton& sk = m.ik_head.skeleton();
  const std::size_t n_seq = seq.frames.shape()[0], len = seq.frames.shape()[1];
  const Var angles = m.temporal.forward(tape, tape.constant(seq.frames), seq.hidden, rng);
  fk::Inputs in;
  in.root_rotation_raw = tape.constant(seq.root);
  in.angles = ad::reshape(angles, {n_seq * len, sk.angle_count()});
  in.proportions = tape.constant(seq.proportions);
  const Var pos = fk::forward(sk, in).positions;
  Var loss = ad::mean(ad::abs(pos - tape.constant(seq.target)));
  if (cfg.train.temporal_smoothness > 0.0 && len >= 3) {
    const Var p = ad::reshape(pos, {n_seq, len, 3 * sk.joint_count()});
    const Var accel = ad::slice(p, 1, 2, len) - ad::scale(ad::slice(p, 1, 1, len - 1), 2.0) + ad::slice(p, 1, 0, len - 2);
    loss = loss + cfg.train.temporal_smoothness * ad::mean(ad::abs(accel));
  }
  return loss;
}

/// Sum of the noise-prediction loss, the IK head L1 and (with `seq`) the temporal L1.
LossParts batch_loss(Tape& tape, const Models& m, const RunConfig& cfg, const Schedule& schedule, const Tensor& x0,
                     const Tensor& f, const SequenceBatch* seq, bool training, std::mt19937_64& rng) {
  LossParts out;
  const NoisedBatch nb = noise_batch(x0, schedule, rng);
  out.total = noise_loss(tape, m.denoiser, nb, tape.constant(f), schedule);
  out.denoise = out.total.value().item();
  if (cfg.train.ik_weight > 0.0) {
    Tensor x_in = x0;
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& v : x_in.values()) v += cfg.train.ik_input_noise * nd(rng);
    const IkHead::Output ik = m.ik_head.forward(tape, tape.constant(std::move(x_in)));
    const Var pos = ad::reshape(ik.fk.positions, x0.shape());
    const Var l1 = ad::mean(ad::abs(pos - tape.constant(x0)));
    out.ik = l1.value().item();
    out.total = out.total + cfg.train.ik_weight * l1;
  }
  if (seq) {
    const Var l = temporal_loss(tape, m, cfg, *seq, training ? &rng : nullptr);
    out.temporal = l.value().item();
    out.total = out.total + cfg.train.temporal_weight * l;
  }
  return out;
}

struct Accum {
  double total = 0.0, denoise = 0.0, ik = 0.0, temporal = 0.0;
  double weight = 0.0, seq_weight = 0.0;
};

Json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

EpochLog epoch_from_json(const Json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.train_loss = j.at("train_loss").get<double>();
  e.train_denoise = j.at("train_denoise").get<double>();
  e.train_ik = j.at("train_ik").get<double>();
  e.train_temporal = j.at("train_temporal").get<double>();
  e.first_batch_loss = j.at("first_batch_loss").get<double>();
  e.val_loss = j.at("val_loss").get<double>();
  e.val_denoise = j.at("val_denoise").get<double>();
  e.val_ik = j.at("val_ik").get<double>();
  e.val_temporal = j.at("val_temporal").get<double>();
  return e;
}

/// Config with the epoch budget removed, so a resumed run may extend training.
Json resumable_config(const RunConfig& c) {
  Json j = config_to_json(c);
  j["train"].erase("epochs");
  return j;
}

/// Anchor bone length measured on positions.
double anchor_of(const JointPositions& p, const AnchorBone& a = {}) {
  return (p.row(static_cast<Eigen::Index>(a.tip)) - p.row(static_cast<Eigen::Index>(a.root))).norm();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

// ---- models and checkpoints ------------------------------------------------

Models::Models(const Skeleton& skeleton, const RunConfig& config, std::mt19937_64* rng)
    : denoiser(store, denoiser_config(config, skeleton), rng),
      ik_head(store, skeleton, config.ik_head, rng),
      temporal(store, skeleton, config.temporal, rng) {}

Models::Models(const Skeleton& skeleton, const RunConfig& config, ad::ParamStore params)
    : store(std::move(params)),
      denoiser(DenoiserNet::bind(store, denoiser_config(config, skeleton))),
      ik_head(IkHead::bind(store, skeleton, config.ik_head)),
      temporal(TemporalEncoder::bind(store, skeleton, config.temporal)) {}

namespace {

struct SplitStore {
  ad::ParamStore model;
  ad::ParamStore optimizer;
};

SplitStore split_store(const ad::ParamStore& all) {
  SplitStore s;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const std::string& name = all.name(i);
    if (name.rfind(kOptPrefix, 0) == 0) {
      s.optimizer.add(name, all.at(i));
    } else {
      s.model.add(name, all.at(i));
    }
  }
  return s;
}

void save_model(const std::string& path, const Models& m, const Optimizer& opt, const Json& meta) {
  ad::ParamStore all = m.store;
  opt.export_state(all, kOptPrefix);
  ad::save_checkpoint(path, all, meta.dump());
}

Json parse_meta(const std::string& text, const std::string& path) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": malformed checkpoint meta: " + e.what());
  }
}

}  // namespace

Eigen::VectorXd condition_features(const Eigen::VectorXd& features) {
  if (features.size() % 2 != 0 || features.size() < 2) throw ShapeError("condition_features: expected interleaved (x, y) pairs");
  Eigen::VectorXd out = features;
  const Eigen::Index n = features.size() / 2;
  double sq = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    out(2 * j) -= features(0);
    out(2 * j + 1) -= features(1);
    sq += out(2 * j) * out(2 * j) + out(2 * j + 1) * out(2 * j + 1);
  }
  const double rms = std::sqrt(sq / static_cast<double>(n));
  if (rms > 0.0) out /= rms;
  return out;
}

LoadedModel load_model(const std::string& checkpoint_path) {
  ad::Checkpoint ckpt = ad::load_checkpoint(checkpoint_path);
  LoadedModel out;
  out.meta = parse_meta(ckpt.meta_json, checkpoint_path);
  if (!out.meta.contains("config") || !out.meta.contains("skeleton")) {
    throw ValidationError(checkpoint_path + ": not a model checkpoint");
  }
  out.config = config_from_json(out.meta.at("config"));
  out.skeleton = std::make_unique<Skeleton>(skeleton_from_json(out.meta.at("skeleton")));
  if (out.meta.value("skeleton_hash", std::string()) != hex64(out.skeleton->hash())) {
    throw ValidationError(checkpoint_path + ": skeleton hash does not match the embedded skeleton");
  }
  SplitStore parts = split_store(ckpt.params);
  out.models = std::make_unique<Models>(*out.skeleton, out.config, std::move(parts.model));
  if (out.meta.contains("mean_pose")) out.mean_pose = vector_from_json(out.meta.at("mean_pose"));
  return out;
}

TrainData load_train_data(const std::string& data_dir, const Skeleton& skeleton) {
  TrainData d;
  d.train = load_records(path_in(data_dir, "train.jsonl"), skeleton);
  d.val = load_records(path_in(data_dir, "val.jsonl"), skeleton);
  const std::string st = path_in(data_dir, "sequences_train.jsonl");
  const std::string sv = path_in(data_dir, "sequences_val.jsonl");
  if (std::filesystem::exists(st)) d.train_sequences = group_sequences(load_records(st, skeleton));
  if (std::filesystem::exists(sv)) d.val_sequences = group_sequences(load_records(sv, skeleton));
  return d;
}

Json epoch_to_json(const EpochLog& e) {
  return Json{{"epoch", e.epoch},
              {"train_loss", e.train_loss},
              {"train_denoise", e.train_denoise},
              {"train_ik", e.train_ik},
              {"train_temporal", e.train_temporal},
              {"first_batch_loss", e.first_batch_loss},
              {"val_loss", e.val_loss},
              {"val_denoise", e.val_denoise},
              {"val_ik", e.val_ik},
              {"val_temporal", e.val_temporal}};
}

// ---- training --------------------------------------------------------------

TrainResult train(const RunConfig& cfg, const Skeleton& sk, const TrainData& data, const std::string& out_dir,
                  const std::optional<std::string>& resume, std::ostream* progress) {
  validate(cfg);
  if (data.train.empty()) throw ValidationError("train: no training records");
  const bool use_temporal = cfg.train.temporal && !data.train_sequences.empty();
  const Schedule schedule = make_schedule(cfg.diffusion);
  const std::string hash = config_hash(cfg);

  std::vector<Sample> train_set, val_set;
  for (const DatasetRecord& r : data.train) train_set.push_back(make_sample(r));
  for (const DatasetRecord& r : data.val) val_set.push_back(make_sample(r));
  auto to_samples = [](const std::vector<std::vector<DatasetRecord>>& seqs) {
    std::vector<std::vector<Sample>> out;
    for (const auto& s : seqs) {
      std::vector<Sample> v;
      for (const DatasetRecord& r : s) v.push_back(make_sample(r));
      out.push_back(std::move(v));
    }
    return out;
  };
  const std::vector<std::vector<Sample>> train_seqs = use_temporal ? to_samples(data.train_sequences) : std::vector<std::vector<Sample>>{};
  const std::vector<std::vector<Sample>> val_seqs = use_temporal ? to_samples(data.val_sequences) : std::vector<std::vector<Sample>>{};

  Eigen::VectorXd mean_pose = Eigen::VectorXd::Zero(train_set[0].x0.size());
  for (const Sample& s : train_set) mean_pose += s.x0;
  mean_pose /= static_cast<double>(train_set.size());

  std::mt19937_64 rng(mix_seed(cfg.seed, fnv1a64("train")));
  std::unique_ptr<Models> models;
  std::optional<Optimizer> opt;
  TrainResult result;
  std::filesystem::create_directories(out_dir);
  result.best_checkpoint = path_in(out_dir, "best.ckpt");
  result.last_checkpoint = path_in(out_dir, "last.ckpt");

  const std::size_t bs = cfg.train.batch_size;
  const std::size_t tb = cfg.train.temporal_batch;

  // Mean losses of the current parameters over a record set and a sequence set, from a fixed stream.
  auto evaluate_losses = [&](const std::vector<Sample>& set, const std::vector<std::vector<Sample>>& seqs, std::uint64_t stream) {
    std::mt19937_64 erng(mix_seed(cfg.seed, stream));
    Accum a;
    const std::size_t batches = (set.size() + bs - 1) / bs;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * bs, hi = std::min(set.size(), lo + bs);
      std::vector<Eigen::VectorXd> xs, fs;
      for (std::size_t i = lo; i < hi; ++i) {
        xs.push_back(set[i].x0);
        fs.push_back(set[i].features);
      }
      Tape tape(false);
      const LossParts lp = batch_loss(tape, *models, cfg, schedule, rows_tensor(xs), rows_tensor(fs), nullptr, false, erng);
      const double w = static_cast<double>(hi - lo);
      a.denoise += w * lp.denoise;
      a.ik += w * lp.ik;
      a.weight += w;
    }
    for (std::size_t lo = 0; lo < seqs.size(); lo += tb) {
      std::vector<const std::vector<Sample>*> ptrs;
      for (std::size_t i = lo; i < std::min(seqs.size(), lo + tb); ++i) ptrs.push_back(&seqs[i]);
      const SequenceBatch sb = make_sequence_batch(ptrs, cfg.data.estimate_noise, false, erng);
      Tape tape(false);
      const double l = temporal_loss(tape, *models, cfg, sb, nullptr).value().item();
      a.temporal += static_cast<double>(ptrs.size()) * l;
      a.seq_weight += static_cast<double>(ptrs.size());
    }
    EpochLog e;
    if (a.weight > 0) {
      e.val_denoise = a.denoise / a.weight;
      e.val_ik = a.ik / a.weight;
    }
    if (a.seq_weight > 0) e.val_temporal = a.temporal / a.seq_weight;
    e.val_loss = e.val_denoise + cfg.train.ik_weight * e.val_ik + (use_temporal ? cfg.train.temporal_weight * e.val_temporal : 0.0);
    return e;
  };

  auto meta_for = [&](std::size_t epoch) {
    Json meta;
    meta["format"] = "handkin-model";
    meta["config"] = config_to_json(cfg);
    meta["config_hash"] = hash;
    meta["skeleton_hash"] = hex64(sk.hash());
    meta["skeleton"] = skeleton_to_json(sk.graph());
    meta["epoch"] = epoch;
    meta["best_epoch"] = result.best_epoch;
    meta["best_val"] = result.best_val;
    std::ostringstream rs;
    rs << rng;
    meta["rng"] = rs.str();
    meta["mean_pose"] = vector_json(mean_pose);
    meta["log"] = Json::array();
    for (const EpochLog& e : result.log) meta["log"].push_back(epoch_to_json(e));
    return meta;
  };

  auto write_log = [&] {
    std::vector<Json> lines;
    for (const EpochLog& e : result.log) {
      Json j = epoch_to_json(e);
      j["config_hash"] = hash;
      lines.push_back(std::move(j));
    }
    write_jsonl(path_in(out_dir, "train_log.jsonl"), lines);
  };

  std::size_t start_epoch = 0;
  if (resume) {
    ad::Checkpoint ckpt = ad::load_checkpoint(*resume);
    const Json meta = parse_meta(ckpt.meta_json, *resume);
    if (meta.value("skeleton_hash", std::string()) != hex64(sk.hash())) {
      throw ValidationError(*resume + ": checkpoint skeleton hash does not match");
    }
    RunConfig saved = config_from_json(meta.at("config"));
    if (resumable_config(saved) != resumable_config(cfg)) throw ValidationError(*resume + ": checkpoint config differs from the run config");
    SplitStore parts = split_store(ckpt.params);
    models = std::make_unique<Models>(sk, cfg, std::move(parts.model));
    opt.emplace(models->store, cfg.train.optimizer);
    opt->import_state(parts.optimizer, kOptPrefix);
    std::istringstream rs(meta.at("rng").get<std::string>());
    rs >> rng;
    for (const Json& j : meta.at("log")) result.log.push_back(epoch_from_json(j));
    start_epoch = meta.at("epoch").get<std::size_t>();
    result.best_epoch = meta.at("best_epoch").get<std::size_t>();
    result.best_val = meta.at("best_val").get<double>();
  } else {
    std::mt19937_64 init_rng(mix_seed(cfg.seed, fnv1a64("init")));
    models = std::make_unique<Models>(sk, cfg, &init_rng);
    opt.emplace(models->store, cfg.train.optimizer);
    EpochLog e0 = evaluate_losses(val_set, val_seqs, fnv1a64("val"));
    const EpochLog t0 = evaluate_losses(train_set, {}, fnv1a64("train0"));
    e0.train_denoise = t0.val_denoise;
    e0.train_ik = t0.val_ik;
    e0.train_temporal = e0.val_temporal;
    e0.train_loss = e0.train_denoise + cfg.train.ik_weight * e0.train_ik +
                    (use_temporal ? cfg.train.temporal_weight * e0.train_temporal : 0.0);
    e0.first_batch_loss = e0.train_loss;
    result.log.push_back(e0);
    result.best_epoch = 0;
    result.best_val = e0.val_loss;
    const Json meta = meta_for(0);
    save_model(result.best_checkpoint, *models, *opt, meta);
    save_model(result.last_checkpoint, *models, *opt, meta);
    write_log();
    if (progress) *progress << "epoch 0 train " << e0.train_loss << " val " << e0.val_loss << std::endl;
  }

  write_text_atomic(path_in(out_dir, "config.json"), config_to_json(cfg).dump(2) + "\n");

  std::vector<std::size_t> order(train_set.size());
  std::vector<std::size_t> seq_order(train_seqs.size());
  for (std::size_t epoch = start_epoch + 1; epoch <= cfg.train.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::iota(seq_order.begin(), seq_order.end(), std::size_t{0});
    std::shuffle(seq_order.begin(), seq_order.end(), rng);
    std::size_t seq_cursor = 0;
    if (cfg.train.lr_schedule == "cosine") {
      const double phase = std::numbers::pi * static_cast<double>(epoch - 1) / static_cast<double>(cfg.train.epochs);
      const double f = cfg.train.lr_floor;
      opt->set_lr(cfg.train.optimizer.lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(phase))));
    }
    Accum a;
    EpochLog e;
    e.epoch = epoch;
    const std::size_t batches = (order.size() + bs - 1) / bs;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * bs, hi = std::min(order.size(), lo + bs);
      std::vector<Eigen::VectorXd> xs, fs;
      for (std::size_t i = lo; i < hi; ++i) {
        xs.push_back(train_set[order[i]].x0);
        fs.push_back(train_set[order[i]].features);
      }
      std::optional<SequenceBatch> sb;
      if (use_temporal) {
        std::vector<const std::vector<Sample>*> ptrs;
        for (std::size_t k = 0; k < std::min(tb, train_seqs.size()); ++k) {
          ptrs.push_back(&train_seqs[seq_order[seq_cursor]]);
          seq_cursor = (seq_cursor + 1) % train_seqs.size();
        }
        sb = make_sequence_batch(ptrs, cfg.data.estimate_noise, true, rng);
      }
      Tape tape;
      LossParts lp;
      try {
        lp = batch_loss(tape, *models, cfg, schedule, rows_tensor(xs), rows_tensor(fs), sb ? &*sb : nullptr, true, rng);
      } catch (const NumericalError& err) {
        throw NumericalError("train: epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + err.what());
      }
      const double total = lp.total.value().item();
      if (b == 0) e.first_batch_loss = total;
      tape.backward(lp.total);
      opt->step(models->store, tape.param_grads(models->store));
      const double w = static_cast<double>(hi - lo);
      a.total += w * total;
      a.denoise += w * lp.denoise;
      a.ik += w * lp.ik;
      a.temporal += w * lp.temporal;
      a.weight += w;
    }
    e.train_loss = a.total / a.weight;
    e.train_denoise = a.denoise / a.weight;
    e.train_ik = a.ik / a.weight;
    e.train_temporal = a.temporal / a.weight;
    const EpochLog v = evaluate_losses(val_set, val_seqs, fnv1a64("val"));
    e.val_loss = v.val_loss;
    e.val_denoise = v.val_denoise;
    e.val_ik = v.val_ik;
    e.val_temporal = v.val_temporal;
    result.log.push_back(e);
    if (e.val_loss < result.best_val) {
      result.best_val = e.val_loss;
      result.best_epoch = epoch;
      save_model(result.best_checkpoint, *models, *opt, meta_for(epoch));
    }
    save_model(result.last_checkpoint, *models, *opt, meta_for(epoch));
    write_log();
    if (progress) {
      *progress << "epoch " << epoch << " train " << e.train_loss << " (den " << e.train_denoise << " ik " << e.train_ik
                << " tmp " << e.train_temporal << ") val " << e.val_loss << std::endl;
    }
  }
  if (resume) write_log();
  return result;
}

// ---- sampling and evaluation -----------------------------------------------

std::vector<Prediction> sample_predictions(const Models& models, const RunConfig& config, const Schedule& schedule,
                                           const std::vector<DatasetRecord>& records, std::uint64_t seed, int threads) {
  const std::size_t chunk = config.eval.chunk;
  const std::size_t chunks = (records.size() + chunk - 1) / chunk;
  std::vector<Prediction> out(records.size());
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(records.size(), lo + chunk);
    std::vector<Eigen::VectorXd> fs;
    for (std::size_t i = lo; i < hi; ++i) fs.push_back(condition_features(to_right_hand(records[i]).features));
    std::mt19937_64 rng(mix_seed(seed, c));
    const Tensor f = rows_tensor(fs);
    Tensor x0 = sample(models.denoiser, f, schedule, rng);
    for (std::size_t k = 1; k < config.eval.samples; ++k) {
      const Tensor more = sample(models.denoiser, f, schedule, rng);
      for (std::size_t i = 0; i < x0.size(); ++i) x0[i] += more[i];
    }
    for (double& v : x0.values()) v /= static_cast<double>(config.eval.samples);
    IkProjection proj = ik_project(models.ik_head, x0);
    for (std::size_t i = lo; i < hi; ++i) {
      out[i].params = std::move(proj.params[i - lo]);
      out[i].positions = std::move(proj.positions[i - lo]);
    }
  });
  return out;
}

JointPositions denormalize(const JointPositions& normalized, const DatasetRecord& record) {
  const JointPositions gt = to_right_hand(record).positions;
  JointPositions out = normalized * anchor_of(gt);
  out.rowwise() += gt.row(0);
  return out;
}

EvalReport evaluate(const Skeleton& skeleton, const std::vector<Prediction>& predictions,
                    const std::vector<DatasetRecord>& records, Alignment alignment,
                    const std::optional<Eigen::VectorXd>& mean_pose) {
  if (predictions.size() != records.size()) throw ValidationError("evaluate: prediction and record counts differ");
  EvalReport rep;
  rep.alignment = alignment;
  rep.count = records.size();
  rep.per_joint = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(skeleton.joint_count()));
  const std::optional<JointPositions> mean =
      mean_pose ? std::optional<JointPositions>(unflatten_positions(*mean_pose)) : std::nullopt;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const JointPositions gt = to_right_hand(records[i]).positions;
    const JointPositions pred = denormalize(predictions[i].positions, records[i]);
    rep.per_record.push_back(mpjpe(pred, gt, alignment));
    rep.per_joint += per_joint_error(pred, gt, alignment);
    rep.violations += count_violations(skeleton, predictions[i].params, predictions[i].positions);
    if (mean) rep.baseline_per_record.push_back(mpjpe(denormalize(*mean, records[i]), gt, alignment));
  }
  if (!records.empty()) rep.per_joint /= static_cast<double>(records.size());
  rep.mpjpe_mean = mean_of(rep.per_record);
  rep.mpjpe_median = median(rep.per_record);
  if (mean) {
    rep.baseline_mean = mean_of(rep.baseline_per_record);
    rep.baseline_median = median(rep.baseline_per_record);
  }
  return rep;
}

Json eval_report_to_json(const EvalReport& r) {
  Json j;
  j["alignment"] = to_string(r.alignment);
  j["count"] = r.count;
  j["mpjpe_mean_mm"] = r.mpjpe_mean;
  j["mpjpe_median_mm"] = r.mpjpe_median;
  j["per_joint_mm"] = vector_json(r.per_joint);
  j["violations"] = r.violations;
  if (r.baseline_mean) {
    j["baseline_mpjpe_mean_mm"] = *r.baseline_mean;
    j["baseline_mpjpe_median_mm"] = *r.baseline_median;
    j["ratio_to_baseline"] = *r.baseline_mean > 0.0 ? r.mpjpe_mean / *r.baseline_mean : 0.0;
  }
  return j;
}

std::string eval_records_csv(const EvalReport& r, const std::vector<DatasetRecord>& records) {
  std::ostringstream os;
  os.precision(17);
  os << "id,mpjpe_mm,baseline_mm\n";
  for (std::size_t i = 0; i < r.per_record.size(); ++i) {
    os << records[i].id << ',' << r.per_record[i] << ',';
    if (i < r.baseline_per_record.size()) os << r.baseline_per_record[i];
    os << '\n';
  }
  return os.str();
}

std::string eval_joints_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "joint,mpjpe_mm\n";
  for (Eigen::Index i = 0; i < r.per_joint.size(); ++i) os << i << ',' << r.per_joint(i) << '\n';
  return os.str();
}

// ---- temporal smoothing ----------------------------------------------------

double jitter(const std::vector<JointPositions>& frames) {
  if (frames.size() < 3) return 0.0;
  double total = 0.0;
  for (std::size_t t = 1; t + 1 < frames.size(); ++t) {
    total += (frames[t + 1] - 2.0 * frames[t] + frames[t - 1]).rowwise().norm().mean();
  }
  return total / static_cast<double>(frames.size() - 2);
}

SmoothReport smooth_sequences(const Models& models, const RunConfig& config,
                              const std::vector<std::vector<DatasetRecord>>& sequences, std::uint64_t seed, int threads) {
  const Skeleton& sk = models.ik_head.skeleton();
  SmoothReport rep;
  rep.sequences.resize(sequences.size());
  parallel_for(sequences.size(), threads, [&](std::size_t s) {
    const std::vector<DatasetRecord>& seq = sequences[s];
    if (seq.empty()) throw ValidationError("smooth: empty sequence");
    if (seq.size() > config.temporal.window) throw ValidationError("smooth: sequence longer than the temporal window");
    SequenceSmoothing& out = rep.sequences[s];
    out.sequence_id = seq[0].sequence_id.value_or(s);
    std::mt19937_64 rng(mix_seed(seed, out.sequence_id));
    const std::size_t len = seq.size();
    for (const DatasetRecord& r : seq) {
      const Eigen::VectorXd x = normalized_target(r);
      out.estimates.push_back(x + gaussian(rng, x.size(), config.data.estimate_noise));
    }
    IkProjection proj = ik_project(models.ik_head, rows_tensor(out.estimates));
    Eigen::MatrixXd frames(static_cast<Eigen::Index>(len), out.estimates[0].size());
    for (std::size_t f = 0; f < len; ++f) frames.row(static_cast<Eigen::Index>(f)) = out.estimates[f].transpose();
    const Eigen::MatrixXd angles = temporal_forward(models.temporal, frames, std::vector<bool>(len, false));

    std::vector<Eigen::VectorXd> props;
    for (const PoseParams& p : proj.params) props.push_back(normalized_proportions(sk, p.proportions_raw));
    out.proportions = bone_length_average(props, sk.proportion_limits());
    Eigen::VectorXd raw_props(out.proportions.size());
    for (Eigen::Index k = 0; k < raw_props.size(); ++k) {
      const Limit& l = sk.proportion_limits()[static_cast<std::size_t>(k)];
      raw_props(k) = l.max > l.min ? inverse_sine_normalize(out.proportions(k), l) : 0.0;
    }

    std::vector<JointPositions> raw_mm, smooth_mm;
    std::vector<Eigen::VectorXd> used_props;
    for (std::size_t f = 0; f < len; ++f) {
      Prediction raw{proj.params[f], proj.positions[f]};
      Prediction sm;
      sm.params = proj.params[f];
      sm.params.angles = angles.row(static_cast<Eigen::Index>(f)).transpose();
      sm.params.proportions_raw = raw_props;
      sm.positions = forward_kinematics(sk, sm.params).positions;
      used_props.push_back(normalized_proportions(sk, sm.params.proportions_raw));

      const JointPositions gt = to_right_hand(seq[f]).positions;
      const double scale_mm = 1000.0 * anchor_of(gt);
      out.raw_mpjpe.push_back(mpjpe(denormalize(raw.positions, seq[f]), gt, Alignment::root_centered_scale_normalized));
      out.smoothed_mpjpe.push_back(mpjpe(denormalize(sm.positions, seq[f]), gt, Alignment::root_centered_scale_normalized));
      raw_mm.push_back(raw.positions * scale_mm);
      smooth_mm.push_back(sm.positions * scale_mm);
      out.raw.push_back(std::move(raw));
      out.smoothed.push_back(std::move(sm));
    }
    out.raw_jitter = jitter(raw_mm);
    out.smoothed_jitter = jitter(smooth_mm);
    // Shifted by the first frame so identical frames give exactly zero.
    for (Eigen::Index k = 0; k < out.proportions.size(); ++k) {
      double s1 = 0.0, s2 = 0.0;
      for (const Eigen::VectorXd& p : used_props) {
        const double d = p(k) - used_props[0](k);
        s1 += d;
        s2 += d * d;
      }
      const double n = static_cast<double>(len);
      out.proportion_variance = std::max(out.proportion_variance, s2 / n - (s1 / n) * (s1 / n));
    }
  });
  std::vector<double> rj, sj, rm, smm;
  for (const SequenceSmoothing& s : rep.sequences) {
    rj.push_back(s.raw_jitter);
    sj.push_back(s.smoothed_jitter);
    rm.insert(rm.end(), s.raw_mpjpe.begin(), s.raw_mpjpe.end());
    smm.insert(smm.end(), s.smoothed_mpjpe.begin(), s.smoothed_mpjpe.end());
    rep.max_proportion_variance = std::max(rep.max_proportion_variance, s.proportion_variance);
    for (const Prediction& p : s.smoothed) rep.violations += count_violations(sk, p.params, p.positions);
  }
  rep.raw_jitter = mean_of(rj);
  rep.smoothed_jitter = mean_of(sj);
  rep.raw_mpjpe = mean_of(rm);
  rep.smoothed_mpjpe = mean_of(smm);
  return rep;
}

Json smooth_report_to_json(const SmoothReport& r) {
  Json j;
  j["sequences"] = r.sequences.size();
  j["raw_jitter_mm"] = r.raw_jitter;
  j["smoothed_jitter_mm"] = r.smoothed_jitter;
  j["jitter_reduction"] = r.raw_jitter > 0.0 ? 1.0 - r.smoothed_jitter / r.raw_jitter : 0.0;
  j["raw_mpjpe_mm"] = r.raw_mpjpe;
  j["smoothed_mpjpe_mm"] = r.smoothed_mpjpe;
  j["max_proportion_variance"] = r.max_proportion_variance;
  j["violations"] = r.violations;
  Json per = Json::array();
  for (const SequenceSmoothing& s : r.sequences) {
    per.push_back(Json{{"sequence_id", s.sequence_id},
                       {"raw_jitter_mm", s.raw_jitter},
                       {"smoothed_jitter_mm", s.smoothed_jitter},
                       {"proportion_variance", s.proportion_variance},
                       {"proportions", vector_json(s.proportions)}});
  }
  j["per_sequence"] = std::move(per);
  return j;
}

std::string smooth_frames_csv(const SmoothReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "sequence_id,frame,raw_mpjpe_mm,smoothed_mpjpe_mm\n";
  for (const SequenceSmoothing& s : r.sequences) {
    for (std::size_t f = 0; f < s.raw_mpjpe.size(); ++f) {
      os << s.sequence_id << ',' << f << ',' << s.raw_mpjpe[f] << ',' << s.smoothed_mpjpe[f] << '\n';
    }
  }
  return os.str();
}

// ---- batch IK --------------------------------------------------------------

std::vector<FitResult> fit_targets(const std::vector<JointPositions>& targets, const Skeleton& skeleton,
                                   const RunConfig& config, std::uint64_t seed, int threads) {
  std::vector<FitResult> out(targets.size());
  parallel_for(targets.size(), threads, [&](std::size_t i) {
    out[i] = fit_pose_restarts(targets[i], skeleton, config.ik_restarts, mix_seed(seed, i), config.ik);
  });
  return out;
}

Json fit_to_json(const FitResult& fit, std::size_t id) {
  return Json{{"id", id},
              {"params", pose_to_json(fit.params)},
              {"residual_mpjpe", fit.residual_mpjpe},
              {"iterations", fit.iterations},
              {"converged", fit.converged}};
}

FitResult fit_from_json(const Json& j, const Skeleton& skeleton) {
  try {
    FitResult f;
    f.params = pose_from_json(skeleton, j.at("params"));
    f.residual_mpjpe = j.at("residual_mpjpe").get<double>();
    f.iterations = j.value("iterations", 0);
    f.converged = j.at("converged").get<bool>();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed fit record: ") + e.what());
  }
}

Json limit_stats_to_json(const LimitStats& stats) {
  auto list = [](const std::vector<ParamStats>& v) {
    Json a = Json::array();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const ParamStats& s = v[i];
      a.push_back(Json{{"slot", i},
                       {"min", s.min},
                       {"max", s.max},
                       {"mean", s.mean},
                       {"std", s.std},
                       {"chosen", {s.chosen.min, s.chosen.max}},
                       {"fixed", s.fixed}});
    }
    return a;
  };
  return Json{{"angles", list(stats.angles)}, {"proportions", list(stats.proportions)}};
}

Json artifact_meta(const RunConfig& config, const Skeleton& skeleton, const std::string& tool) {
  return Json{{"tool", tool}, {"config_hash", config_hash(config)}, {"skeleton_hash", hex64(skeleton.hash())}};
}

}  // namespace handkin
