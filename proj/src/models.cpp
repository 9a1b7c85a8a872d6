#include "handkin/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace handkin {

namespace {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

Tensor xavier(Shape shape, std::mt19937_64* rng) {
  Tensor t(shape, 0.0);
  if (!rng) return t;
  const double stddev = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
  std::normal_distribution<double> nd(0.0, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = nd(*rng);
  return t;
}

std::size_t require_param(const ad::ParamStore& store, const std::string& name, const Shape& shape) {
  const auto id = store.find(name);
  if (!id) throw ValidationError("missing parameter '" + name + "'");
  if (store.at(*id).shape() != shape) {
    throw ShapeError("parameter '" + name + "' has shape " + ad::to_string(store.at(*id).shape()) + ", expected " +
                     ad::to_string(shape));
  }
  return *id;
}

Var activate(Var x, Activation act) {
  switch (act) {
    case Activation::silu: return ad::silu(x);
    case Activation::relu: return ad::relu(x);
    case Activation::tanh: return ad::tanh(x);
  }
  return x;
}

std::vector<std::size_t> mlp_widths(std::size_t in, std::size_t width, std::size_t layers, std::size_t out) {
  if (layers < 1) throw ValidationError("an MLP needs at least one layer");
  std::vector<std::size_t> w{in};
  for (std::size_t i = 0; i + 1 < layers; ++i) w.push_back(width);
  w.push_back(out);
  return w;
}

Tensor position_table(std::size_t window, std::size_t width) {
  Tensor t({window, width});
  const std::size_t half = width / 2;
  for (std::size_t p = 0; p < window; ++p) {
    const Eigen::VectorXd e = time_embedding(static_cast<int>(p), static_cast<int>(2 * half));
    for (std::size_t k = 0; k < 2 * half; ++k) t[p * width + k] = e(static_cast<Eigen::Index>(k));
  }
  return t;
}

Var affine_norm(Tape& tape, const ad::ParamStore& store, Var x, std::size_t gain, std::size_t bias) {
  const Var n = ad::layer_norm(x);
  return ad::add(ad::mul(n, ad::broadcast_to(tape.param(store, gain), n.shape())),
                 ad::broadcast_to(tape.param(store, bias), n.shape()));
}

}  // namespace

Eigen::VectorXd time_embedding(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ValidationError("time embedding dimension must be positive and even");
  const int half = dim / 2;
  Eigen::VectorXd out(dim);
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / half);
    out(k) = std::sin(t * w);
    out(half + k) = std::cos(t * w);
  }
  return out;
}

// ---- Mlp -------------------------------------------------------------------

Mlp::Mlp(ad::ParamStore& store, const std::string& prefix, std::vector<std::size_t> widths, Activation act,
         std::mt19937_64* rng)
    : widths_(std::move(widths)), act_(act) {
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    weight_ids_.push_back(store.add(prefix + "w" + std::to_string(l), xavier({widths_[l], widths_[l + 1]}, rng)));
    bias_ids_.push_back(store.add(prefix + "b" + std::to_string(l), Tensor({widths_[l + 1]}, 0.0)));
  }
}

Mlp Mlp::bind(const ad::ParamStore& store, const std::string& prefix, std::vector<std::size_t> widths, Activation act) {
  Mlp m;
  m.widths_ = std::move(widths);
  m.act_ = act;
  for (std::size_t l = 0; l + 1 < m.widths_.size(); ++l) {
    m.weight_ids_.push_back(require_param(store, prefix + "w" + std::to_string(l), {m.widths_[l], m.widths_[l + 1]}));
    m.bias_ids_.push_back(require_param(store, prefix + "b" + std::to_string(l), {m.widths_[l + 1]}));
  }
  return m;
}

Var Mlp::forward(Tape& tape, const ad::ParamStore& store, Var x) const {
  for (std::size_t l = 0; l < weight_ids_.size(); ++l) {
    x = ad::linear(x, tape.param(store, weight_ids_[l]), tape.param(store, bias_ids_[l]));
    if (l + 1 < weight_ids_.size()) x = activate(x, act_);
  }
  return x;
}

// ---- DenoiserNet -----------------------------------------------------------

DenoiserNet::DenoiserNet(ad::ParamStore& store, DenoiserConfig config, std::mt19937_64* rng)
    : store_(&store),
      config_(config),
      mlp_(store, "den.",
           mlp_widths(config.data_dim + config.time_dim + config.feature_dim, config.width, config.layers, config.data_dim),
           Activation::silu, rng) {}

DenoiserNet DenoiserNet::bind(ad::ParamStore& store, DenoiserConfig config) {
  return DenoiserNet(store, config,
                     Mlp::bind(store, "den.",
                               mlp_widths(config.data_dim + config.time_dim + config.feature_dim, config.width,
                                          config.layers, config.data_dim),
                               Activation::silu));
}

Var DenoiserNet::predict(Tape& tape, Var x_t, const std::vector<int>& t, Var f) const {
  const std::size_t b = x_t.shape().at(0);
  if (x_t.shape() != Shape{b, config_.data_dim} || f.shape() != Shape{b, config_.feature_dim} || t.size() != b) {
    throw ShapeError("denoiser input shapes " + ad::to_string(x_t.shape()) + ", " + ad::to_string(f.shape()) +
                     " do not match its configuration");
  }
  Tensor emb({b, config_.time_dim});
  for (std::size_t i = 0; i < b; ++i) {
    const Eigen::VectorXd e = time_embedding(t[i], static_cast<int>(config_.time_dim));
    std::copy(e.data(), e.data() + e.size(), emb.data() + i * config_.time_dim);
  }
  const Var in = ad::concat({x_t, tape.constant(std::move(emb)), f}, 1);
  return mlp_.forward(tape, *store_, in);
}

Eigen::VectorXd denoise_eps(const DenoiserNet& net, const Eigen::VectorXd& x_t, int t, const Eigen::VectorXd& f) {
  Tape tape(false);
  const std::size_t d = net.config().data_dim, fd = net.config().feature_dim;
  if (static_cast<std::size_t>(x_t.size()) != d || static_cast<std::size_t>(f.size()) != fd) {
    throw ShapeError("denoise_eps: input sizes do not match the network");
  }
  const Var x = tape.constant(Tensor({1, d}, std::vector<double>(x_t.data(), x_t.data() + d)));
  const Var fv = tape.constant(Tensor({1, fd}, std::vector<double>(f.data(), f.data() + fd)));
  const Tensor out = net.predict(tape, x, {t}, fv).value();
  return Eigen::Map<const Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(d));
}

// ---- IkHead ----------------------------------------------------------------

IkHead::IkHead(ad::ParamStore& store, const Skeleton& skeleton, IkHeadConfig config, std::mt19937_64* rng)
    : store_(&store),
      skeleton_(&skeleton),
      config_(config),
      mlp_(store, "ik.",
           mlp_widths(3 * skeleton.joint_count(), config.width, config.layers,
                      9 + skeleton.angle_count() + skeleton.proportion_count()),
           Activation::silu, rng) {}

IkHead IkHead::bind(ad::ParamStore& store, const Skeleton& skeleton, IkHeadConfig config) {
  return IkHead(store, skeleton, config,
                Mlp::bind(store, "ik.",
                          mlp_widths(3 * skeleton.joint_count(), config.width, config.layers,
                                     9 + skeleton.angle_count() + skeleton.proportion_count()),
                          Activation::silu));
}

IkHead::Output IkHead::forward(Tape& tape, Var x) const {
  const std::size_t b = x.shape().at(0);
  if (x.shape() != Shape{b, 3 * skeleton_->joint_count()}) throw ShapeError("IkHead input must be [B, 3 * joints]");
  Output out;
  out.raw = mlp_.forward(tape, *store_, x);
  const std::size_t a0 = 9, p0 = a0 + skeleton_->angle_count(), end = p0 + skeleton_->proportion_count();
  // The identity offset keeps the untrained root matrix far from rank deficiency.
  Tensor eye({1, 3, 3}, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  out.inputs.root_rotation_raw =
      ad::add(ad::reshape(ad::slice(out.raw, 1, 0, 9), {b, 3, 3}), ad::broadcast_to(tape.constant(eye), {b, 3, 3}));
  out.inputs.angles = ad::slice(out.raw, 1, a0, p0);
  out.inputs.proportions = ad::slice(out.raw, 1, p0, end);
  out.fk = fk::forward(*skeleton_, out.inputs);
  return out;
}

IkProjection ik_project(const IkHead& head, const Tensor& x0_hat) {
  const Skeleton& sk = head.skeleton();
  Tape tape(false);
  const IkHead::Output out = head.forward(tape, tape.constant(x0_hat));
  const Tensor& root = out.inputs.root_rotation_raw.value();
  const Tensor& angles = out.inputs.angles.value();
  const Tensor& props = out.inputs.proportions.value();
  const Tensor& pos = out.fk.positions.value();
  const std::size_t b = x0_hat.shape()[0], na = sk.angle_count(), np = sk.proportion_count(), nj = sk.joint_count();
  IkProjection res;
  for (std::size_t i = 0; i < b; ++i) {
    PoseParams p = zero_params(sk);
    p.root_rotation_raw = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(root.data() + 9 * i);
    p.angles = Eigen::Map<const Eigen::VectorXd>(angles.data() + na * i, static_cast<Eigen::Index>(na));
    p.proportions_raw = Eigen::Map<const Eigen::VectorXd>(props.data() + np * i, static_cast<Eigen::Index>(np));
    res.params.push_back(std::move(p));
    res.positions.push_back(Eigen::Map<const JointPositions>(pos.data() + 3 * nj * i, static_cast<Eigen::Index>(nj), 3));
  }
  return res;
}

// ---- TemporalEncoder -------------------------------------------------------

TemporalEncoder::TemporalEncoder(ad::ParamStore& store, const Skeleton& skeleton, TemporalConfig config,
                                 std::mt19937_64* rng)
    : TemporalEncoder(store, skeleton, config) {
  register_params(rng);
}

TemporalEncoder TemporalEncoder::bind(ad::ParamStore& store, const Skeleton& skeleton, TemporalConfig config) {
  TemporalEncoder enc(store, skeleton, config);
  enc.positions_ = position_table(config.window, config.width);
  // Validates presence and shapes of every parameter.
  const std::size_t in = 3 * skeleton.joint_count(), w = config.width;
  require_param(store, "tmp.embed.w", {in, w});
  require_param(store, "tmp.mask", {w});
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "tmp.l" + std::to_string(l) + ".";
    for (const char* n : {"q", "k", "v", "o"}) require_param(store, p + n + ".w", {w, w});
    require_param(store, p + "ff1.w", {w, config.ffn});
    require_param(store, p + "ff2.w", {config.ffn, w});
  }
  require_param(store, "tmp.out.w", {w, skeleton.angle_count()});
  return enc;
}

void TemporalEncoder::register_params(std::mt19937_64* rng) {
  if (config_.width % config_.heads != 0) throw ValidationError("temporal width must be divisible by the head count");
  if (config_.dropout < 0.0 || config_.dropout >= 1.0) throw ValidationError("dropout must lie in [0, 1)");
  positions_ = position_table(config_.window, config_.width);
  ad::ParamStore& s = *store_;
  const std::size_t in = 3 * skeleton_->joint_count(), w = config_.width;
  s.add("tmp.embed.w", xavier({in, w}, rng));
  s.add("tmp.embed.b", Tensor({w}, 0.0));
  s.add("tmp.mask", Tensor({w}, 0.0));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "tmp.l" + std::to_string(l) + ".";
    for (const char* n : {"q", "k", "v", "o"}) {
      s.add(p + n + ".w", xavier({w, w}, rng));
      s.add(p + n + ".b", Tensor({w}, 0.0));
    }
    s.add(p + "ln1.g", Tensor({w}, 1.0));
    s.add(p + "ln1.b", Tensor({w}, 0.0));
    s.add(p + "ff1.w", xavier({w, config_.ffn}, rng));
    s.add(p + "ff1.b", Tensor({config_.ffn}, 0.0));
    s.add(p + "ff2.w", xavier({config_.ffn, w}, rng));
    s.add(p + "ff2.b", Tensor({w}, 0.0));
    s.add(p + "ln2.g", Tensor({w}, 1.0));
    s.add(p + "ln2.b", Tensor({w}, 0.0));
  }
  s.add("tmp.out.w", xavier({w, skeleton_->angle_count()}, rng));
  s.add("tmp.out.b", Tensor({skeleton_->angle_count()}, 0.0));
}

std::size_t TemporalEncoder::id(const std::string& name) const {
  const auto i = store_->find(name);
  if (!i) throw ValidationError("missing parameter '" + name + "'");
  return *i;
}

Var TemporalEncoder::forward(Tape& tape, Var frames, const std::vector<bool>& hidden, std::mt19937_64* rng) const {
  const ad::ParamStore& s = *store_;
  if (frames.shape().size() != 3 || frames.shape()[2] != 3 * skeleton_->joint_count()) {
    throw ShapeError("temporal input must be [B, L, 3 * joints], got " + ad::to_string(frames.shape()));
  }
  const std::size_t b = frames.shape()[0], len = frames.shape()[1], w = config_.width;
  if (len < 1 || len > config_.window) {
    throw ValidationError("sequence length " + std::to_string(len) + " outside 1.." + std::to_string(config_.window));
  }
  if (hidden.size() != b * len) throw ShapeError("temporal mask must have B * L entries");
  const double p_drop = rng ? config_.dropout : 0.0;
  auto lin = [&](Var x, const std::string& name) {
    return ad::linear(x, tape.param(s, id(name + ".w")), tape.param(s, id(name + ".b")));
  };

  Var h = lin(frames, "tmp.embed");
  if (std::find(hidden.begin(), hidden.end(), true) != hidden.end()) {
    // Hidden frames lose their input: their embedding becomes the learned mask token.
    Tensor keep({b, len, 1}), drop({b, len, 1});
    for (std::size_t i = 0; i < b * len; ++i) {
      keep[i] = hidden[i] ? 0.0 : 1.0;
      drop[i] = 1.0 - keep[i];
    }
    const Var token = ad::broadcast_to(tape.param(s, id("tmp.mask")), {b, len, w});
    h = ad::add(ad::mul(h, ad::broadcast_to(tape.constant(std::move(keep)), {b, len, w})),
                ad::mul(token, ad::broadcast_to(tape.constant(std::move(drop)), {b, len, w})));
  }
  if (config_.position_scale != 0.0) {
    Tensor pos({1, len, w});
    for (std::size_t i = 0; i < len * w; ++i) pos[i] = config_.position_scale * positions_[i];
    h = ad::add(h, ad::broadcast_to(tape.constant(std::move(pos)), {b, len, w}));
  }

  const std::size_t dh = w / config_.heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "tmp.l" + std::to_string(l) + ".";
    const Var q = lin(h, p + "q"), k = lin(h, p + "k"), v = lin(h, p + "v");
    std::vector<Var> heads;
    for (std::size_t hd = 0; hd < config_.heads; ++hd) {
      const Var qh = ad::slice(q, 2, hd * dh, (hd + 1) * dh);
      const Var kh = ad::slice(k, 2, hd * dh, (hd + 1) * dh);
      const Var vh = ad::slice(v, 2, hd * dh, (hd + 1) * dh);
      const Var weights = ad::masked_softmax(ad::scale(ad::bmm(qh, ad::transpose(kh)), inv_scale), hidden);
      heads.push_back(ad::bmm(weights, vh));
    }
    Var att = lin(heads.size() == 1 ? heads[0] : ad::concat(heads, 2), p + "o");
    if (p_drop > 0.0) att = ad::dropout(att, p_drop, *rng);
    h = affine_norm(tape, s, ad::add(h, att), id(p + "ln1.g"), id(p + "ln1.b"));
    Var ff = lin(ad::silu(lin(h, p + "ff1")), p + "ff2");
    if (p_drop > 0.0) ff = ad::dropout(ff, p_drop, *rng);
    h = affine_norm(tape, s, ad::add(h, ff), id(p + "ln2.g"), id(p + "ln2.b"));
  }
  return lin(h, "tmp.out");
}

Eigen::MatrixXd temporal_forward(const TemporalEncoder& enc, const Eigen::MatrixXd& frames, const std::vector<bool>& mask) {
  Tape tape(false);
  const std::size_t len = static_cast<std::size_t>(frames.rows()), d = static_cast<std::size_t>(frames.cols());
  Tensor x({1, len, d});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = frames(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  const Tensor out = enc.forward(tape, tape.constant(std::move(x)), mask, nullptr).value();
  const std::size_t na = out.shape()[2];
  Eigen::MatrixXd res(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(na));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < na; ++j) res(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = out[i * na + j];
  return res;
}

std::vector<bool> make_training_mask(std::size_t len, std::mt19937_64& rng) {
  if (len < 1) throw ValidationError("mask length must be at least 1");
  std::uniform_int_distribution<std::size_t> count(0, len / 2);
  const std::size_t k = count(rng);
  std::vector<std::size_t> idx(len);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<bool> mask(len, false);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, len - 1);
    std::swap(idx[i], idx[pick(rng)]);
    mask[idx[i]] = true;
  }
  return mask;
}

Eigen::VectorXd bone_length_average(const std::vector<Eigen::VectorXd>& frames, const std::vector<Limit>& limits) {
  if (frames.empty()) throw ValidationError("bone_length_average needs at least one frame");
  // Running mean, exact when all frames agree.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(frames.front().size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (frames[k].size() != mean.size()) throw ShapeError("per-frame proportion vectors differ in length");
    mean += (frames[k] - mean) / static_cast<double>(k + 1);
  }
  if (static_cast<std::size_t>(mean.size()) != limits.size()) throw ShapeError("proportion count does not match limits");
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    mean(i) = std::clamp(mean(i), limits[static_cast<std::size_t>(i)].min, limits[static_cast<std::size_t>(i)].max);
  }
  return mean;
}

double inverse_sine_normalize(double value, const Limit& limit) {
  const double range = limit.max - limit.min;
  if (range <= 0.0) return 0.0;
  const double s = std::clamp(2.0 * (value - limit.min) / range - 1.0, -1.0, 1.0);
  return std::asin(s);
}

Eigen::VectorXd synth_features(const JointPositions& world, const Camera& cam, double noise_sigma, std::mt19937_64& rng) {
  if (noise_sigma < 0.0) throw ValidationError("feature noise must be non-negative");
  const ImagePoints uv = project(world_to_camera(world, cam), cam.K);
  const double cx = cam.K(0, 2), cy = cam.K(1, 2);
  if (!(cx > 0.0 && cy > 0.0)) throw ValidationError("camera principal point must be positive to normalize features");
  std::normal_distribution<double> nd(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
  Eigen::VectorXd f(2 * uv.rows());
  for (Eigen::Index i = 0; i < uv.rows(); ++i) {
    const double du = noise_sigma > 0.0 ? nd(rng) : 0.0;
    const double dv = noise_sigma > 0.0 ? nd(rng) : 0.0;
    f(2 * i) = (uv(i, 0) + du - cx) / cx;
    f(2 * i + 1) = (uv(i, 1) + dv - cy) / cy;
  }
  return f;
}

// ---- optimizers ------------------------------------------------------------

Optimizer::Optimizer(const ad::ParamStore& store, OptimizerConfig config) : config_(std::move(config)) {
  if (config_.kind != "momentum" && config_.kind != "adam") throw ValidationError("unknown optimizer '" + config_.kind + "'");
  if (!(config_.lr > 0.0)) throw ValidationError("learning rate must be positive");
  for (const Tensor& t : store.tensors()) {
    m_.emplace_back(t.shape(), 0.0);
    v_.emplace_back(t.shape(), 0.0);
  }
}

void Optimizer::set_lr(double lr) {
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  config_.lr = lr;
}

void Optimizer::step(ad::ParamStore& store, const std::vector<Tensor>& grads) {
  if (grads.size() != store.size() || m_.size() != store.size()) throw ShapeError("optimizer: gradient count mismatch");
  double scale = 1.0;
  if (config_.clip > 0.0) {
    double sq = 0.0;
    for (const Tensor& g : grads)
      for (double v : g.values()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip) scale = config_.clip / norm;
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.momentum, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& w = store.at(p);
    const Tensor& g = grads[p];
    Tensor& m = m_[p];
    Tensor& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * scale;
      if (config_.kind == "momentum") {
        m[i] = config_.momentum * m[i] + gi;
        w[i] -= config_.lr * m[i];
      } else {
        m[i] = config_.momentum * m[i] + (1.0 - config_.momentum) * gi;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
        w[i] -= config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      }
    }
  }
}

void Optimizer::export_state(ad::ParamStore& out, const std::string& prefix) const {
  for (std::size_t p = 0; p < m_.size(); ++p) {
    out.add(prefix + "m." + std::to_string(p), m_[p]);
    out.add(prefix + "v." + std::to_string(p), v_[p]);
  }
  out.add(prefix + "steps", Tensor::scalar(static_cast<double>(steps_)));
}

void Optimizer::import_state(const ad::ParamStore& in, const std::string& prefix) {
  for (std::size_t p = 0; p < m_.size(); ++p) {
    const auto mi = in.find(prefix + "m." + std::to_string(p));
    const auto vi = in.find(prefix + "v." + std::to_string(p));
    if (!mi || !vi) throw ValidationError("checkpoint lacks optimizer state for parameter " + std::to_string(p));
    if (in.at(*mi).shape() != m_[p].shape() || in.at(*vi).shape() != v_[p].shape()) {
      throw ShapeError("optimizer state shape mismatch for parameter " + std::to_string(p));
    }
    m_[p] = in.at(*mi);
    v_[p] = in.at(*vi);
  }
  const auto si = in.find(prefix + "steps");
  if (!si) throw ValidationError("checkpoint lacks optimizer step count");
  steps_ = static_cast<std::size_t>(in.at(*si).item());
}

}  // namespace handkin
