#include <algorithm>
#include <cmath>

#include "handkin/autodiff.hpp"

namespace handkin::ad {

namespace {

double scalar_of(const Tape& tape, Var y) {
  const Tensor& v = tape.value(y);
  if (v.size() != 1) throw ShapeError("grad_check: function output must be scalar, got " + to_string(v.shape()));
  return v[0];
}

void compare(std::size_t index, double analytic, double numeric, const GradCheckOptions& options,
             GradCheckReport& report) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
  const double rel = std::abs(analytic - numeric) / denom;
  if (rel > report.max_rel_error) {
    report.max_rel_error = rel;
    report.worst_index = index;
  }
  if (!(rel <= options.tol)) {
    report.passed = false;
    report.failures.push_back({index, analytic, numeric, rel});
  }
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options) {
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var y = f(tape, xv);
  scalar_of(tape, y);
  tape.backward(y);
  const Tensor analytic = tape.grad(xv);

  GradCheckReport report;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + options.step;
    Tape tp(false);
    const double fp = scalar_of(tp, f(tp, tp.leaf(probe, false)));
    probe[i] = x0 - options.step;
    Tape tm(false);
    const double fm = scalar_of(tm, f(tm, tm.leaf(probe, false)));
    probe[i] = x0;
    compare(i, analytic[i], (fp - fm) / (2.0 * options.step), options, report);
  }
  return report;
}

GradCheckReport grad_check_params(const std::function<Var(Tape&)>& f, ParamStore& store,
                                  const GradCheckOptions& options) {
  Tape tape;
  Var y = f(tape);
  scalar_of(tape, y);
  tape.backward(y);
  const std::vector<Tensor> grads = tape.param_grads(store);

  GradCheckReport report;
  std::size_t flat = 0;
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& value = store.at(p);
    for (std::size_t i = 0; i < value.size(); ++i, ++flat) {
      const double x0 = value[i];
      value[i] = x0 + options.step;
      Tape tp;
      const double fp = scalar_of(tp, f(tp));
      value[i] = x0 - options.step;
      Tape tm;
      const double fm = scalar_of(tm, f(tm));
      value[i] = x0;
      compare(flat, grads[p][i], (fp - fm) / (2.0 * options.step), options, report);
    }
  }
  return report;
}

}  // namespace handkin::ad
