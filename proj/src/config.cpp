#include "handkin/config.hpp"

#include <set>

namespace handkin {

namespace {

/// Reads known keys of one JSON object and rejects the rest.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: " + (path_.empty() ? std::string("document") : path_) + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config: " + path_ + key + " has the wrong type");
    }
  }

  /// Nested object, or null when absent.
  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + key + "."; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ValidationError("config: unknown key " + path_ + item.key());
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
void read_section(Section& parent, const char* key, Fn&& fn) {
  if (const Json* j = parent.child(key)) {
    Section s(*j, parent.path(key));
    fn(s);
    s.finish();
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError("config: " + what);
}

}  // namespace

RunConfig config_from_json(const Json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("skeleton", c.skeleton);
  read_section(root, "camera", [&](Section& s) {
    s.get("focal", c.camera.focal);
    s.get("cx", c.camera.cx);
    s.get("cy", c.camera.cy);
    s.get("distance", c.camera.distance);
  });
  read_section(root, "data", [&](Section& s) {
    DataConfig& d = c.data;
    s.get("n_train", d.n_train);
    s.get("n_val", d.n_val);
    s.get("n_test", d.n_test);
    s.get("n_train_sequences", d.n_train_sequences);
    s.get("n_val_sequences", d.n_val_sequences);
    s.get("n_test_sequences", d.n_test_sequences);
    s.get("seq_len", d.seq_len);
    s.get("feature_noise_px", d.feature_noise_px);
    s.get("root_sigma", d.root_sigma);
    s.get("angle_sigma", d.angle_sigma);
    s.get("proportion_sigma", d.proportion_sigma);
    s.get("offset_sigma", d.offset_sigma);
    s.get("anchor_length", d.anchor_length);
    s.get("anchor_sigma", d.anchor_sigma);
    s.get("walk_step", d.walk_step);
    s.get("walk_smoothing", d.walk_smoothing);
    s.get("estimate_noise", d.estimate_noise);
    s.get("left_hand", d.left_hand);
  });
  read_section(root, "diffusion", [&](Section& s) {
    s.get("steps", c.diffusion.steps);
    s.get("beta_start", c.diffusion.beta_start);
    s.get("beta_end", c.diffusion.beta_end);
    s.get("schedule", c.diffusion.schedule);
    s.get("sample_steps", c.diffusion.sample_steps);
  });
  read_section(root, "denoiser", [&](Section& s) {
    s.get("time_dim", c.denoiser.time_dim);
    s.get("width", c.denoiser.width);
    s.get("layers", c.denoiser.layers);
  });
  read_section(root, "ik_head", [&](Section& s) {
    s.get("width", c.ik_head.width);
    s.get("layers", c.ik_head.layers);
  });
  read_section(root, "temporal", [&](Section& s) {
    s.get("window", c.temporal.window);
    s.get("width", c.temporal.width);
    s.get("heads", c.temporal.heads);
    s.get("layers", c.temporal.layers);
    s.get("ffn", c.temporal.ffn);
    s.get("dropout", c.temporal.dropout);
    s.get("position_scale", c.temporal.position_scale);
  });
  read_section(root, "train", [&](Section& s) {
    TrainConfig& t = c.train;
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("ik_weight", t.ik_weight);
    s.get("ik_input_noise", t.ik_input_noise);
    s.get("temporal", t.temporal);
    s.get("temporal_weight", t.temporal_weight);
    s.get("temporal_smoothness", t.temporal_smoothness);
    s.get("temporal_batch", t.temporal_batch);
    s.get("lr_schedule", t.lr_schedule);
    s.get("lr_floor", t.lr_floor);
    read_section(s, "optimizer", [&](Section& o) {
      o.get("kind", t.optimizer.kind);
      o.get("lr", t.optimizer.lr);
      o.get("momentum", t.optimizer.momentum);
      o.get("beta2", t.optimizer.beta2);
      o.get("eps", t.optimizer.eps);
      o.get("clip", t.optimizer.clip);
    });
  });
  read_section(root, "ik", [&](Section& s) {
    IkConfig& k = c.ik;
    s.get("max_iterations", k.max_iterations);
    s.get("residual_tol", k.residual_tol);
    s.get("gradient_tol", k.gradient_tol);
    s.get("lambda_init", k.lambda_init);
    s.get("lambda_factor", k.lambda_factor);
    s.get("lambda_max", k.lambda_max);
    s.get("warm_start_iterations", k.warm_start_iterations);
    s.get("fallback_starts", k.fallback_starts);
    s.get("init_sigma", k.init_sigma);
    s.get("restarts", c.ik_restarts);
  });
  read_section(root, "limits", [&](Section& s) {
    s.get("percentile", c.limits.percentile);
    s.get("pad", c.limits.pad);
    s.get("zero_spread", c.limits.zero_spread);
  });
  read_section(root, "eval", [&](Section& s) {
    s.get("alignment", c.eval.alignment);
    s.get("chunk", c.eval.chunk);
    s.get("samples", c.eval.samples);
  });
  root.finish();
  validate(c);
  return c;
}

Json config_to_json(const RunConfig& c) {
  const DataConfig& d = c.data;
  const TrainConfig& t = c.train;
  const IkConfig& k = c.ik;
  return Json{
      {"seed", c.seed},
      {"skeleton", c.skeleton},
      {"camera", {{"focal", c.camera.focal}, {"cx", c.camera.cx}, {"cy", c.camera.cy}, {"distance", c.camera.distance}}},
      {"data",
       {{"n_train", d.n_train},
        {"n_val", d.n_val},
        {"n_test", d.n_test},
        {"n_train_sequences", d.n_train_sequences},
        {"n_val_sequences", d.n_val_sequences},
        {"n_test_sequences", d.n_test_sequences},
        {"seq_len", d.seq_len},
        {"feature_noise_px", d.feature_noise_px},
        {"root_sigma", d.root_sigma},
        {"angle_sigma", d.angle_sigma},
        {"proportion_sigma", d.proportion_sigma},
        {"offset_sigma", d.offset_sigma},
        {"anchor_length", d.anchor_length},
        {"anchor_sigma", d.anchor_sigma},
        {"walk_step", d.walk_step},
        {"walk_smoothing", d.walk_smoothing},
        {"estimate_noise", d.estimate_noise},
        {"left_hand", d.left_hand}}},
      {"diffusion",
       {{"steps", c.diffusion.steps},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"schedule", c.diffusion.schedule},
        {"sample_steps", c.diffusion.sample_steps}}},
      {"denoiser", {{"time_dim", c.denoiser.time_dim}, {"width", c.denoiser.width}, {"layers", c.denoiser.layers}}},
      {"ik_head", {{"width", c.ik_head.width}, {"layers", c.ik_head.layers}}},
      {"temporal",
       {{"window", c.temporal.window},
        {"width", c.temporal.width},
        {"heads", c.temporal.heads},
        {"layers", c.temporal.layers},
        {"ffn", c.temporal.ffn},
        {"dropout", c.temporal.dropout},
        {"position_scale", c.temporal.position_scale}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"ik_weight", t.ik_weight},
        {"ik_input_noise", t.ik_input_noise},
        {"temporal", t.temporal},
        {"temporal_weight", t.temporal_weight},
        {"temporal_smoothness", t.temporal_smoothness},
        {"temporal_batch", t.temporal_batch},
        {"lr_schedule", t.lr_schedule},
        {"lr_floor", t.lr_floor},
        {"optimizer",
         {{"kind", t.optimizer.kind},
          {"lr", t.optimizer.lr},
          {"momentum", t.optimizer.momentum},
          {"beta2", t.optimizer.beta2},
          {"eps", t.optimizer.eps},
          {"clip", t.optimizer.clip}}}}},
      {"ik",
       {{"max_iterations", k.max_iterations},
        {"residual_tol", k.residual_tol},
        {"gradient_tol", k.gradient_tol},
        {"lambda_init", k.lambda_init},
        {"lambda_factor", k.lambda_factor},
        {"lambda_max", k.lambda_max},
        {"warm_start_iterations", k.warm_start_iterations},
        {"fallback_starts", k.fallback_starts},
        {"init_sigma", k.init_sigma},
        {"restarts", c.ik_restarts}}},
      {"limits", {{"percentile", c.limits.percentile}, {"pad", c.limits.pad}, {"zero_spread", c.limits.zero_spread}}},
      {"eval", {{"alignment", c.eval.alignment}, {"chunk", c.eval.chunk}, {"samples", c.eval.samples}}},
  };
}

RunConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

void validate(const RunConfig& c) {
  require(c.camera.focal > 0.0 && c.camera.cx > 0.0 && c.camera.cy > 0.0, "camera focal and center must be positive");
  require(c.camera.distance > 0.0, "camera.distance must be positive");
  const DataConfig& d = c.data;
  require(d.seq_len >= 1, "data.seq_len must be at least 1");
  require(d.feature_noise_px >= 0.0 && d.root_sigma >= 0.0 && d.angle_sigma >= 0.0 && d.proportion_sigma >= 0.0 &&
              d.offset_sigma >= 0.0 && d.anchor_sigma >= 0.0 && d.walk_step >= 0.0 && d.estimate_noise >= 0.0,
          "data noise levels must be non-negative");
  require(d.anchor_length > 0.0, "data.anchor_length must be positive");
  require(d.walk_smoothing >= 0.0 && d.walk_smoothing < 1.0, "data.walk_smoothing must lie in [0, 1)");
  (void)make_schedule(c.diffusion);
  require(c.diffusion.sample_steps >= 1 && c.diffusion.sample_steps <= c.diffusion.steps,
          "diffusion.sample_steps must lie in [1, steps]");
  require(c.denoiser.time_dim >= 2 && c.denoiser.time_dim % 2 == 0, "denoiser.time_dim must be even");
  require(c.denoiser.width >= 1 && c.denoiser.layers >= 1, "denoiser width and layers must be positive");
  require(c.ik_head.width >= 1 && c.ik_head.layers >= 1, "ik_head width and layers must be positive");
  const TemporalConfig& tc = c.temporal;
  require(tc.window >= 1 && tc.width >= 1 && tc.heads >= 1 && tc.layers >= 1 && tc.ffn >= 1,
          "temporal sizes must be positive");
  require(tc.width % tc.heads == 0, "temporal.width must be divisible by temporal.heads");
  require(tc.dropout >= 0.0 && tc.dropout < 1.0, "temporal.dropout must lie in [0, 1)");
  require(d.seq_len <= tc.window, "data.seq_len must not exceed temporal.window");
  const TrainConfig& t = c.train;
  require(t.batch_size >= 1 && t.temporal_batch >= 1, "train batch sizes must be positive");
  require(t.ik_weight >= 0.0 && t.temporal_weight >= 0.0 && t.temporal_smoothness >= 0.0 &&
              t.ik_input_noise >= 0.0, "train weights must be non-negative");
  require(t.optimizer.kind == "momentum" || t.optimizer.kind == "adam", "train.optimizer.kind must be momentum or adam");
  require(t.optimizer.lr > 0.0, "train.optimizer.lr must be positive");
  require(t.lr_schedule == "none" || t.lr_schedule == "cosine", "train.lr_schedule must be none or cosine");
  require(t.lr_floor > 0.0 && t.lr_floor <= 1.0, "train.lr_floor must lie in (0, 1]");
  require(c.ik.max_iterations >= 1 && c.ik.lambda_init > 0.0 && c.ik.lambda_factor > 1.0, "invalid ik settings");
  require(c.ik_restarts >= 1, "ik.restarts must be at least 1");
  require(c.limits.percentile >= 0.0 && c.limits.percentile < 50.0, "limits.percentile must lie in [0, 50)");
  require(c.limits.pad >= 0.0 && c.limits.zero_spread > 0.0, "limits.pad must be >= 0 and zero_spread > 0");
  (void)parse_alignment(c.eval.alignment);
  require(c.eval.chunk >= 1, "eval.chunk must be positive");
  require(c.eval.samples >= 1, "eval.samples must be positive");
}

std::string config_hash(const RunConfig& config) { return hex64(fnv1a64(config_to_json(config).dump())); }

Camera make_camera(const CameraConfig& c) { return make_camera(c.focal, c.cx, c.cy, c.distance); }

Schedule make_schedule(const DiffusionConfig& c) {
  return make_schedule(c.steps, c.beta_start, c.beta_end, parse_schedule_kind(c.schedule));
}

Skeleton load_skeleton(const RunConfig& config) {
  if (config.skeleton.empty()) return Skeleton::canonical_hand();
  return Skeleton(skeleton_from_json(read_json_file(config.skeleton)));
}

}  // namespace handkin
