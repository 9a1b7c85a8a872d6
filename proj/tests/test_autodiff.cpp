#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "handkin/autodiff.hpp"

using namespace handkin;
using namespace handkin::ad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sigma = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, sigma);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = nd(rng);
  return t;
}

ParamStore mlp_store(std::mt19937_64& rng, std::vector<std::size_t> widths) {
  ParamStore store;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    store.add("w" + std::to_string(l), random_tensor({widths[l], widths[l + 1]}, rng, 0.5));
    store.add("b" + std::to_string(l), random_tensor({widths[l + 1]}, rng, 0.1));
  }
  return store;
}

Var mlp(Tape& tape, const ParamStore& store, Var x) {
  const std::size_t layers = store.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    x = linear(x, tape.param(store, 2 * l), tape.param(store, 2 * l + 1));
    if (l + 1 < layers) x = tanh(x);
  }
  return x;
}

}  // namespace

TEST_CASE("derivative of x*x at 3 is 6") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  Var y = x * x;
  tape.backward(y);
  CHECK(tape.grad(x).item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("gradient of sum(sin(x)) at zero is all ones") {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{5}, 0.0));
  tape.backward(sum(sin(x)));
  const Tensor g = tape.grad(x);
  for (double v : g.values()) CHECK(v == 1.0);
}

TEST_CASE("shape mismatch is reported") {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2, 3}));
  Var b = tape.leaf(Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("non-finite values name the producing node") {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{2}, -1.0));
  try {
    (void)log(x);
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("log") != std::string::npos);
  }
}

TEST_CASE("random 3-layer MLP gradients match central differences") {
  std::mt19937_64 rng(7);
  ParamStore store = mlp_store(rng, {4, 6, 5, 3});
  const Tensor x = random_tensor({2, 4}, rng);
  const Tensor target = random_tensor({2, 3}, rng);
  auto loss = [&](Tape& tape) {
    Var y = mlp(tape, store, tape.constant(x));
    return mean(square(y - tape.constant(target)));
  };
  const GradCheckReport report = grad_check_params(loss, store, {.tol = 1e-5});
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("every primitive passes grad_check") {
  std::mt19937_64 rng(11);
  struct Case {
    std::string name;
    Shape shape;
    ScalarFn f;
  };
  const Tensor other = random_tensor({3, 4}, rng);
  const Tensor mat = random_tensor({4, 2}, rng);
  const Tensor batch = random_tensor({2, 4, 3}, rng);
  const std::vector<Case> cases = {
      {"add/mul/div", {3, 4}, [&](Tape& t, Var x) { Var o = t.constant(other); return sum((x + o) * x / (square(o) + t.constant(Tensor({3, 4}, 1.0)))); }},
      {"exp/log/sqrt", {3, 4}, [](Tape&, Var x) { return sum(log(sqrt(exp(x) + exp(x)))); }},
      {"sin/cos/sigmoid/silu", {3, 4}, [](Tape&, Var x) { return sum(sin(x) * cos(x) + sigmoid(x) + silu(x)); }},
      {"matmul", {3, 4}, [&](Tape& t, Var x) { return sum(square(matmul(x, t.constant(mat)))); }},
      {"bmm/transpose", {2, 3, 4}, [&](Tape& t, Var x) { return sum(square(bmm(x, t.constant(batch)) + transpose(bmm(transpose(t.constant(batch)), transpose(x))))); }},
      {"softmax", {3, 4}, [&](Tape& t, Var x) { return sum(softmax(x) * t.constant(other)); }},
      {"layer_norm", {3, 4}, [&](Tape& t, Var x) { return sum(layer_norm(x) * t.constant(other)); }},
      {"concat/slice", {3, 4}, [](Tape&, Var x) { return sum(square(concat({slice(x, 1, 1, 3), slice(x, 1, 0, 2) * 2.0}, 1))); }},
      {"broadcast/sum axis", {1, 4}, [](Tape&, Var x) { return sum(square(sum(broadcast_to(x, {3, 4}), 0))) + sum(mean(x, 1)); }},
      {"reshape/mean", {3, 4}, [](Tape&, Var x) { return mean(square(reshape(x, {4, 3}))); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    const GradCheckReport r = grad_check(c.f, random_tensor(c.shape, rng), {.tol = 1e-6});
    CHECK(r.passed);
  }
}

TEST_CASE("masked_softmax gives hidden keys exactly zero weight and zero gradient") {
  std::mt19937_64 rng(3);
  Tape tape;
  Var a = tape.leaf(random_tensor({2, 3, 4}, rng));
  const std::vector<bool> hidden = {false, true, false, true, true, false, false, false};
  Var w = masked_softmax(a, hidden);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t q = 0; q < 3; ++q) {
      double total = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        const double v = w.value()[(b * 3 + q) * 4 + k];
        if (hidden[b * 4 + k]) CHECK(v == 0.0);
        total += v;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
  const Tensor weights = random_tensor({2, 3, 4}, rng);
  tape.backward(sum(w * tape.constant(weights)));
  const Tensor g = tape.grad(a);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t q = 0; q < 3; ++q)
      for (std::size_t k = 0; k < 4; ++k)
        if (hidden[b * 4 + k]) CHECK(g[(b * 3 + q) * 4 + k] == 0.0);

  Tape t2;
  Var all = t2.leaf(Tensor({1, 1, 2}));
  CHECK_THROWS_AS(masked_softmax(all, {true, true}), ValidationError);
}

TEST_CASE("gradients are linear in the objective") {
  std::mt19937_64 rng(5);
  const Tensor x0 = random_tensor({6}, rng);
  auto grad_of = [&](auto build) {
    Tape tape;
    Var x = tape.leaf(x0);
    tape.backward(build(x));
    return tape.grad(x);
  };
  auto f = [](Var x) { return sum(sin(x) * exp(x)); };
  auto g = [](Var x) { return sum(square(cos(x))); };
  const double a = 1.7, b = -0.3;
  const Tensor gf = grad_of(f);
  const Tensor gg = grad_of(g);
  const Tensor gc = grad_of([&](Var x) { return f(x) * a + g(x) * b; });
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(gc[i] - (a * gf[i] + b * gg[i])) < 1e-12);
}

TEST_CASE("gradients are bitwise deterministic") {
  std::mt19937_64 rng(9);
  ParamStore store = mlp_store(rng, {5, 8, 2});
  const Tensor x = random_tensor({3, 5}, rng);
  auto run = [&] {
    Tape tape;
    tape.backward(sum(square(mlp(tape, store, tape.constant(x)))));
    return tape.param_grads(store);
  };
  const auto g1 = run();
  const auto g2 = run();
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i].vec() == g2[i].vec());
}

TEST_CASE("grad_check accepts sum of squares and flags a corrupted pullback") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({5}, rng);
  CHECK(grad_check([](Tape&, Var v) { return sum(square(v)); }, x, {.tol = 1e-6}).passed);

  auto corrupted = [](Tape& tape, Var v) {
    Tensor y = v.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * y[i];
    Var sq = tape.record("bad_square", std::move(y), {v}, [xs = v.value()](const Tensor& g, std::span<Tensor* const> pg) {
      if (!pg[0]) return;
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * (i == 2 ? 3.0 : 2.0) * xs[i];
    });
    return sum(sq);
  };
  const GradCheckReport r = grad_check(corrupted, x, {.tol = 1e-6});
  CHECK_FALSE(r.passed);
  CHECK(r.worst_index == 2);
  REQUIRE(r.failures.size() == 1);
  CHECK(r.failures[0].index == 2);
}

TEST_CASE("dropout with p = 0 is identity and is seeded") {
  std::mt19937_64 rng(4);
  Tape tape;
  Var x = tape.leaf(random_tensor({4, 8}, rng));
  std::mt19937_64 r0(1);
  CHECK(dropout(x, 0.0, r0).value().vec() == x.value().vec());
  std::mt19937_64 r1(2), r2(2);
  CHECK(dropout(x, 0.5, r1).value().vec() == dropout(x, 0.5, r2).value().vec());
}

TEST_CASE("checkpoint round trip is exact") {
  std::mt19937_64 rng(2);
  ParamStore store = mlp_store(rng, {3, 4, 2});
  const auto path = (std::filesystem::temp_directory_path() / "handkin_ckpt_test.bin").string();
  save_checkpoint(path, store, R"({"kind":"test"})");
  const Checkpoint loaded = load_checkpoint(path);
  REQUIRE(loaded.params.size() == store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(loaded.params.name(i) == store.name(i));
    CHECK(loaded.params.at(i).shape() == store.at(i).shape());
    CHECK(loaded.params.at(i).vec() == store.at(i).vec());
  }
  CHECK(loaded.meta_json.find("\"kind\"") != std::string::npos);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
}
