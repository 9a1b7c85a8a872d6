#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "handkin/diffusion.hpp"
#include "handkin/models.hpp"
#include "handkin/serialization.hpp"
#include "support.hpp"

using namespace handkin;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor to_tensor(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return t;
}

/// Returns the exact noise that maps the known x0 to x_t.
class OracleDenoiser : public NoisePredictor {
 public:
  OracleDenoiser(Tensor x0, const Schedule& s) : x0_(std::move(x0)), s_(s) {}
  Var predict(Tape& tape, Var x_t, const std::vector<int>& t, Var) const override {
    const Tensor& x = x_t.value();
    const std::size_t d = x0_.shape()[1];
    Tensor eps(x.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double ab = s_.alpha_bar(t[i]);
      for (std::size_t j = 0; j < d; ++j) eps[i * d + j] = (x[i * d + j] - std::sqrt(ab) * x0_[i * d + j]) / std::sqrt(1.0 - ab);
    }
    return tape.constant(std::move(eps));
  }
  std::size_t data_dim() const override { return x0_.shape()[1]; }

 private:
  Tensor x0_;
  const Schedule& s_;
};

class ZeroDenoiser : public NoisePredictor {
 public:
  explicit ZeroDenoiser(std::size_t d) : d_(d) {}
  Var predict(Tape& tape, Var x_t, const std::vector<int>&, Var) const override {
    return tape.constant(Tensor(x_t.shape(), 0.0));
  }
  std::size_t data_dim() const override { return d_; }

 private:
  std::size_t d_;
};

/// eps = -gain * x_t, which blows the state up geometrically.
class ExplodingDenoiser : public NoisePredictor {
 public:
  Var predict(Tape&, Var x_t, const std::vector<int>&, Var) const override { return ad::scale(x_t, -1e300); }
  std::size_t data_dim() const override { return 2; }
};

class LogDenoiser : public NoisePredictor {
 public:
  Var predict(Tape&, Var x_t, const std::vector<int>&, Var) const override { return ad::log(x_t); }
  std::size_t data_dim() const override { return 3; }
};

}  // namespace

TEST_CASE("schedule examples") {
  const Schedule s = make_schedule(2, 0.1, 0.2);
  CHECK(s.betas(0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(s.betas(1) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(std::abs(s.alpha_bar(1) - 0.9) < 1e-12);
  CHECK(std::abs(s.alpha_bar(2) - 0.72) < 1e-12);

  const Schedule one = make_schedule(1, 0.5, 0.5);
  CHECK(one.alpha_bar(1) == 0.5);
  CHECK(one.sigma(1) == std::sqrt(0.5));

  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), ValidationError);
  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ValidationError);
}

TEST_CASE("schedule invariants hold for both kinds") {
  for (const ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (const int T : {1, 7, 50, 1000}) {
      CAPTURE(T);
      const Schedule s = make_schedule(T, 1e-4, 0.02, kind);
      REQUIRE(s.betas.size() == T);
      double prev = 1.0;
      for (int t = 1; t <= T; ++t) {
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) <= 0.999);
        CHECK(s.alpha_bar(t) < prev);
        CHECK(std::abs(s.alpha_bar(t) - s.alpha(t) * prev) < 1e-12);
        CHECK(std::abs(s.sigma(t) * s.sigma(t) - s.beta(t)) <= 4e-16 * s.beta(t));
        prev = s.alpha_bar(t);
      }
    }
  }
  CHECK(parse_schedule_kind("cosine") == ScheduleKind::cosine);
  CHECK_THROWS_AS(parse_schedule_kind("quadratic"), ValidationError);
}

TEST_CASE("respacing keeps alpha_bar at the strided steps") {
  const Schedule base = make_schedule(1000, 1e-4, 0.02);
  const Schedule s = respace(base, 50);
  REQUIRE(s.T == 50);
  for (int i = 1; i <= 50; ++i) {
    CHECK(s.model_t[static_cast<std::size_t>(i - 1)] == 20 * i);
    CHECK(std::abs(s.alpha_bar(i) - base.alpha_bar(20 * i)) < 1e-12);
  }
  const Schedule same = respace(base, 1000);
  CHECK((same.betas - base.betas).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(respace(base, 1001), ValidationError);

  const Json j = schedule_to_json(s);
  CHECK(j["T"] == 50);
  CHECK(j["model_t"].size() == 50);
}

TEST_CASE("forward_noise examples") {
  const Schedule s = make_schedule(2, 0.1, 0.2);
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
  CHECK(forward_noise(one, 2, one, s)(0) == doctest::Approx(std::sqrt(0.72) + std::sqrt(0.28)).epsilon(1e-14));
  CHECK(std::abs(forward_noise(one, 2, one, s)(0) - 1.3777) < 1e-4);

  const Eigen::VectorXd x0 = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  CHECK((forward_noise(x0, 1, Eigen::VectorXd::Zero(5), s) - std::sqrt(0.9) * x0).norm() < 1e-15);

  const Schedule tiny = make_schedule(3, 1e-20, 1e-20);
  CHECK((forward_noise(x0, 3, Eigen::VectorXd::Ones(5), tiny) - x0).norm() < 1e-15);

  CHECK_THROWS_AS(forward_noise(x0, 0, x0, s), ValidationError);
  CHECK_THROWS_AS(forward_noise(x0, 3, x0, s), ValidationError);
  CHECK_THROWS_AS(forward_noise(x0, 1, one, s), ShapeError);
}

TEST_CASE("training loss of the oracle denoiser is zero") {
  std::mt19937_64 rng(21);
  const Schedule s = make_schedule(100, 1e-4, 0.02);
  const Tensor x0 = to_tensor(Eigen::MatrixXd::Random(8, 63));
  const NoisedBatch batch = noise_batch(x0, s, rng);
  const OracleDenoiser oracle(x0, s);
  Tape tape;
  const Var loss = noise_loss(tape, oracle, batch, tape.constant(Tensor({8, 1}, 0.0)), s);
  CHECK(loss.value().item() < 1e-20);
}

TEST_CASE("training loss of the zero denoiser averages the dimension") {
  std::mt19937_64 rng(22);
  const Schedule s = make_schedule(100, 1e-4, 0.02);
  ZeroDenoiser zero(63);
  const Tensor x0({1, 63}, 0.3);
  const Tensor f({1, 4}, 0.0);
  const int draws = 4000;
  double total = 0.0;
  for (int i = 0; i < draws; ++i) {
    const TrainingStepResult r = training_step(zero, x0, f, rng, s);
    CHECK(r.grads.empty());
    total += r.loss;
  }
  // Chi-square with 63 dof: standard error sqrt(126 / 4000) ~ 0.18.
  CHECK(std::abs(total / draws - 63.0) < 0.9);
}

TEST_CASE("denoiser loss gradients match finite differences on a 4-unit toy net") {
  std::mt19937_64 rng(23);
  ad::ParamStore store;
  const DenoiserConfig cfg{.data_dim = 3, .time_dim = 4, .feature_dim = 2, .width = 4, .layers = 2};
  DenoiserNet net(store, cfg, &rng);
  for (std::size_t p = 0; p < store.size(); ++p)
    for (double& v : store.at(p).values()) v += 0.1 * testing_support::gaussian(rng, 1)(0);
  const Schedule s = make_schedule(20, 1e-3, 0.05);
  const Tensor x0 = to_tensor(Eigen::MatrixXd::Random(5, 3));
  const Tensor f = to_tensor(Eigen::MatrixXd::Random(5, 2));
  const NoisedBatch batch = noise_batch(x0, s, rng);
  const ad::GradCheckReport r = ad::grad_check_params(
      [&](Tape& tape) { return noise_loss(tape, net, batch, tape.constant(f), s); }, store, {.tol = 1e-5});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("non-finite training loss reports t and the norm of x_t") {
  std::mt19937_64 rng(24);
  const Schedule s = make_schedule(10, 1e-4, 0.02);
  LogDenoiser bad;
  const Tensor x0({4, 3}, -5.0);
  try {
    (void)training_step(bad, x0, Tensor({4, 1}, 0.0), rng, s);
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("t =") != std::string::npos);
    CHECK(msg.find("||x_t||") != std::string::npos);
  }
}

TEST_CASE("sampler with the oracle denoiser recovers x0") {
  std::mt19937_64 rng(25);
  const Tensor x0 = to_tensor(Eigen::MatrixXd::Random(16, 63));
  const Tensor f({16, 1}, 0.0);

  const Schedule one = make_schedule(1, 0.3, 0.3);
  const Tensor out1 = sample(OracleDenoiser(x0, one), f, one, rng);
  double worst = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(out1[i] - x0[i]));
  CHECK(worst < 1e-12);

  const Schedule ten = make_schedule(10, 1e-2, 0.2);
  const Tensor out10 = sample(OracleDenoiser(x0, ten), f, ten, rng);
  double mean_err = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) mean_err += std::abs(out10[i] - x0[i]);
  CHECK(mean_err / static_cast<double>(x0.size()) < 1e-6);
}

TEST_CASE("zero denoiser at T = 1 rescales x_1") {
  std::mt19937_64 rng(26);
  const Schedule s = make_schedule(1, 0.5, 0.5);
  const Tensor x1 = to_tensor(Eigen::MatrixXd::Random(3, 5));
  const Tensor out = sample_from(ZeroDenoiser(5), x1, Tensor({3, 1}, 0.0), s, rng);
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(out[i] == doctest::Approx(x1[i] / std::sqrt(0.5)).epsilon(1e-15));
}

TEST_CASE("sampler aborts with the step index on overflow") {
  std::mt19937_64 rng(27);
  const Schedule s = make_schedule(5, 0.1, 0.2);
  try {
    (void)sample(ExplodingDenoiser(), Tensor({1, 1}, 0.0), s, rng);
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 4") != std::string::npos);
  }
}

TEST_CASE("sampling is deterministic given the seed") {
  const Schedule s = make_schedule(30, 1e-3, 0.1);
  ad::ParamStore store;
  std::mt19937_64 init(3);
  DenoiserNet net(store, {.data_dim = 6, .time_dim = 8, .feature_dim = 2, .width = 16, .layers = 3}, &init);
  const Tensor f = to_tensor(Eigen::MatrixXd::Random(4, 2));
  std::mt19937_64 a(99), b(99), c(100);
  const Tensor ra = sample(net, f, s, a), rb = sample(net, f, s, b), rc = sample(net, f, s, c);
  CHECK(ra.vec() == rb.vec());
  CHECK(ra.vec() != rc.vec());
}

TEST_CASE("forward marginal variance matches alpha_bar mixing") {
  std::mt19937_64 rng(28);
  const Schedule s = make_schedule(100, 1e-4, 0.02);
  const int n = 100000;
  // Uniform on [-sqrt 3, sqrt 3] has unit variance and is far from Gaussian.
  std::uniform_real_distribution<double> ud(-std::sqrt(3.0), std::sqrt(3.0));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x0(n);
  for (double& v : x0) v = ud(rng);
  Eigen::VectorXd x(1), e(1);
  for (const int t : {1, 10, 50, 100}) {
    double m = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
      x(0) = x0[static_cast<std::size_t>(i)];
      e(0) = nd(rng);
      const double v = forward_noise(x, t, e, s)(0);
      m += v;
      m2 += v * v;
    }
    m /= n;
    const double var = m2 / n - m * m;
    const double expected = s.alpha_bar(t) * 1.0 + (1.0 - s.alpha_bar(t));
    CAPTURE(t);
    CHECK(std::abs(var - expected) / expected < 0.05);
  }
}

TEST_CASE("one-shot noising matches t chained steps in distribution") {
  std::mt19937_64 rng(29);
  const Schedule s = make_schedule(20, 0.01, 0.2);
  const int n = 100000, t = 12;
  Eigen::Matrix2d chol;
  chol << 1.0, 0.0, 0.6, 0.8;
  const Eigen::Vector2d mu(1.0, -2.0);
  Eigen::MatrixXd direct(n, 2), chained(n, 2);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x0 = mu + chol * testing_support::gaussian(rng, 2);
    direct.row(i) = forward_noise(x0, t, testing_support::gaussian(rng, 2), s).transpose();
    Eigen::VectorXd x = x0;
    for (int k = 1; k <= t; ++k) x = forward_step(x, k, testing_support::gaussian(rng, 2), s);
    chained.row(i) = x.transpose();
  }
  auto moments = [](const Eigen::MatrixXd& m) {
    const Eigen::RowVector2d mean = m.colwise().mean();
    const Eigen::MatrixXd c = m.rowwise() - mean;
    return std::pair<Eigen::RowVector2d, Eigen::Matrix2d>{mean, c.transpose() * c / static_cast<double>(m.rows() - 1)};
  };
  const auto [md, cd] = moments(direct);
  const auto [mc, cc] = moments(chained);
  for (int k = 0; k < 2; ++k) CHECK(std::abs(md(k) - mc(k)) < 0.02 * std::max(1.0, std::abs(md(k))));
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) CHECK(std::abs(cd(a, b) - cc(a, b)) < 0.02 * std::max(1.0, std::abs(cd(a, b))));
}
