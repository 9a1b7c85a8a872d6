#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "handkin/autodiff.hpp"

namespace handkin::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tape& tape_of(Var a) {
  if (!a.tape) throw ValidationError("operation on a default-constructed Var");
  return *a.tape;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class F, class D>
Var unary(const char* op, Var a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  Tensor xs = x;
  Tensor ys = y;
  return tape_of(a).record(op, std::move(y), {a},
                           [xs = std::move(xs), ys = std::move(ys), dfdx](const Tensor& g, std::span<Tensor* const> pg) {
                             if (!pg[0]) return;
                             Tensor& ga = *pg[0];
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xs[i], ys[i]);
                           });
}

// Splits `shape` around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t last_dim(const char* op, const Shape& shape) {
  if (shape.empty()) throw ShapeError(std::string(op) + " needs rank >= 1");
  return shape.back();
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape_of(a).record("add", std::move(y), {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
    for (Tensor* p : pg) {
      if (!p) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*p)[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return tape_of(a).record("sub", std::move(y), {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return tape_of(a).record("mul", std::move(y), {a, b},
                           [av, bv](const Tensor& g, std::span<Tensor* const> pg) {
                             if (pg[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bv[i];
                             if (pg[1])
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * av[i];
                           });
}

Var div(Var a, Var b) {
  require_same_shape("div", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] / bv[i];
  Tensor ys = y;
  return tape_of(a).record("div", std::move(y), {a, b},
                           [bv, ys = std::move(ys)](const Tensor& g, std::span<Tensor* const> pg) {
                             if (pg[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / bv[i];
                             if (pg[1])
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i] * ys[i] / bv[i];
                           });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c;
  return tape_of(a).record("scale", std::move(y), {a}, [c](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
  });
}

Var add_scalar(Var a, double c) {
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += c;
  return tape_of(a).record("add_scalar", std::move(y), {a}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

Var sin(Var a) {
  return unary("sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}
Var cos(Var a) {
  return unary("cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}
Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Var sqrt(Var a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
Var abs(Var a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
Var square(Var a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
Var sigmoid(Var a) {
  return unary("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}
Var silu(Var a) {
  return unary("silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 const double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               });
}
Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// ---- broadcasting and reductions ---------------------------------------------

Var broadcast_to(Var a, const Shape& shape) {
  const Shape& in = a.shape();
  if (in.size() > shape.size()) {
    throw ShapeError("broadcast_to: cannot broadcast " + to_string(in) + " to " + to_string(shape));
  }
  const std::size_t rank = shape.size();
  const std::size_t lead = rank - in.size();
  // Source stride per output axis, zero on broadcast axes.
  std::vector<std::size_t> src_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t axis = k + lead;
    if (in[k] == shape[axis]) {
      src_stride[axis] = stride;
    } else if (in[k] != 1) {
      throw ShapeError("broadcast_to: cannot broadcast " + to_string(in) + " to " + to_string(shape));
    }
    stride *= in[k];
  }
  const std::size_t total = numel(shape);
  std::vector<std::size_t> index_map(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    index_map[i] = src;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      src += src_stride[axis];
      if (counter[axis] < shape[axis]) break;
      src -= src_stride[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  const Tensor& x = a.value();
  Tensor y(shape);
  for (std::size_t i = 0; i < total; ++i) y[i] = x[index_map[i]];
  return tape_of(a).record("broadcast", std::move(y), {a},
                           [index_map = std::move(index_map)](const Tensor& g, std::span<Tensor* const> pg) {
                             if (!pg[0]) return;
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[index_map[i]] += g[i];
                           });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return tape_of(a).record("sum", Tensor::scalar(s), {a}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const double g0 = g[0];
    for (double& v : pg[0]->values()) v += g0;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum(Var a, std::size_t axis) {
  const Shape& in = a.shape();
  const AxisSplit s = split_axis(in, axis);
  Shape out_shape = in;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const Tensor& x = a.value();
  Tensor y(out_shape, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += x[(o * s.n + k) * s.inner + i];
  return tape_of(a).record("sum_axis", std::move(y), {a}, [s](const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    Tensor& ga = *pg[0];
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + k) * s.inner + i] += g[o * s.inner + i];
  });
}

Var mean(Var a, std::size_t axis) {
  const std::size_t n = split_axis(a.shape(), axis).n;
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() != 2 || as.back() != bs[0]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(as) + " x " + to_string(bs));
  }
  const std::size_t k = bs[0];
  const std::size_t n = bs[1];
  const std::size_t m = a.value().size() / k;
  Shape out_shape = as;
  out_shape.back() = n;
  Tensor y(out_shape);
  MapMat(y.data(), m, n).noalias() = ConstMapMat(a.value().data(), m, k) * ConstMapMat(b.value().data(), k, n);
  const Tensor av = a.value();
  const Tensor bv = b.value();
  return tape_of(a).record("matmul", std::move(y), {a, b},
                           [av, bv, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
                             ConstMapMat G(g.data(), m, n);
                             if (pg[0]) MapMat(pg[0]->data(), m, k).noalias() += G * ConstMapMat(bv.data(), k, n).transpose();
                             if (pg[1]) MapMat(pg[1]->data(), k, n).noalias() += ConstMapMat(av.data(), m, k).transpose() * G;
                           });
}

Var bmm(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    throw ShapeError("bmm: incompatible shapes " + to_string(as) + " x " + to_string(bs));
  }
  const std::size_t batch = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor y(Shape{batch, m, n});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < batch; ++i) {
    MapMat(y.data() + i * m * n, m, n).noalias() =
        ConstMapMat(av.data() + i * m * k, m, k) * ConstMapMat(bv.data() + i * k * n, k, n);
  }
  return tape_of(a).record("bmm", std::move(y), {a, b},
                           [av, bv, batch, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
                             for (std::size_t i = 0; i < batch; ++i) {
                               ConstMapMat G(g.data() + i * m * n, m, n);
                               if (pg[0])
                                 MapMat(pg[0]->data() + i * m * k, m, k).noalias() +=
                                     G * ConstMapMat(bv.data() + i * k * n, k, n).transpose();
                               if (pg[1])
                                 MapMat(pg[1]->data() + i * k * n, k, n).noalias() +=
                                     ConstMapMat(av.data() + i * m * k, m, k).transpose() * G;
                             }
                           });
}

Var transpose(Var a) {
  const Shape& in = a.shape();
  if (in.size() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(in));
  const std::size_t r = in[in.size() - 2], c = in.back();
  const std::size_t batch = a.value().size() / (r * c);
  Shape out_shape = in;
  std::swap(out_shape[in.size() - 2], out_shape.back());
  const Tensor& x = a.value();
  Tensor y(out_shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) y[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  return tape_of(a).record("transpose", std::move(y), {a},
                           [batch, r, c](const Tensor& g, std::span<Tensor* const> pg) {
                             if (!pg[0]) return;
                             for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   (*pg[0])[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                           });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return tape_of(a).record("reshape", std::move(y), {a}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: shape mismatch " + to_string(first) + " vs " + to_string(s));
      }
    }
    widths.push_back(split_axis(s, axis).n);
    total += widths.back();
  }
  out_shape[axis] = total;
  const AxisSplit s = split_axis(out_shape, axis);
  Tensor y(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    const std::size_t w = widths[p];
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(x.data() + o * w * s.inner, w * s.inner, y.data() + (o * s.n + offset) * s.inner);
    offset += w;
  }
  return tape_of(parts[0]).record("concat", std::move(y), parts,
                                  [s, widths](const Tensor& g, std::span<Tensor* const> pg) {
                                    std::size_t off = 0;
                                    for (std::size_t p = 0; p < pg.size(); ++p) {
                                      const std::size_t w = widths[p];
                                      if (pg[p]) {
                                        for (std::size_t o = 0; o < s.outer; ++o)
                                          for (std::size_t i = 0; i < w * s.inner; ++i)
                                            (*pg[p])[o * w * s.inner + i] += g[(o * s.n + off) * s.inner + i];
                                      }
                                      off += w;
                                    }
                                  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(a.shape(), axis);
  if (begin > end || end > s.n) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for axis of " +
                     std::to_string(s.n));
  }
  const std::size_t w = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = w;
  const Tensor& x = a.value();
  Tensor y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data() + (o * s.n + begin) * s.inner, w * s.inner, y.data() + o * w * s.inner);
  return tape_of(a).record("slice", std::move(y), {a}, [s, begin, w](const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < w * s.inner; ++i) (*pg[0])[(o * s.n + begin) * s.inner + i] += g[o * w * s.inner + i];
  });
}

// ---- normalization -------------------------------------------------------------

namespace {

// Shared softmax pullback over rows of length n: dx = y * (g - <g, y>).
void softmax_pullback(const Tensor& ys, std::size_t n, const Tensor& g, Tensor& ga) {
  const std::size_t rows = ys.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* y = ys.data() + r * n;
    const double* gr = g.data() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
    for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[j] * (gr[j] - dot);
  }
}

}  // namespace

Var softmax(Var a) {
  const std::size_t n = last_dim("softmax", a.shape());
  const Tensor& x = a.value();
  Tensor y(x.shape());
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[r * n + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= z;
  }
  Tensor ys = y;
  return tape_of(a).record("softmax", std::move(y), {a},
                           [ys = std::move(ys), n](const Tensor& g, std::span<Tensor* const> pg) {
                             if (pg[0]) softmax_pullback(ys, n, g, *pg[0]);
                           });
}

Var masked_softmax(Var a, const std::vector<bool>& hidden) {
  const Shape& in = a.shape();
  if (in.size() != 3) throw ShapeError("masked_softmax expects [B, Lq, Lk], got " + to_string(in));
  const std::size_t batch = in[0], lq = in[1], lk = in[2];
  if (hidden.size() != batch * lk) {
    throw ShapeError("masked_softmax: mask length " + std::to_string(hidden.size()) + " != B*Lk " +
                     std::to_string(batch * lk));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    bool any_visible = false;
    for (std::size_t k = 0; k < lk; ++k) any_visible = any_visible || !hidden[b * lk + k];
    if (!any_visible) throw ValidationError("masked_softmax: every key of sequence " + std::to_string(b) + " is hidden");
  }
  const Tensor& x = a.value();
  Tensor y(in, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < lq; ++q) {
      const std::size_t row = (b * lq + q) * lk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < lk; ++k)
        if (!hidden[b * lk + k]) mx = std::max(mx, x[row + k]);
      double z = 0.0;
      for (std::size_t k = 0; k < lk; ++k)
        if (!hidden[b * lk + k]) z += (y[row + k] = std::exp(x[row + k] - mx));
      for (std::size_t k = 0; k < lk; ++k) y[row + k] /= z;
    }
  }
  Tensor ys = y;
  return tape_of(a).record("masked_softmax", std::move(y), {a},
                           [ys = std::move(ys), lk](const Tensor& g, std::span<Tensor* const> pg) {
                             // Hidden entries have y = 0, so their gradient vanishes exactly.
                             if (pg[0]) softmax_pullback(ys, lk, g, *pg[0]);
                           });
}

Var layer_norm(Var a, double eps) {
  const std::size_t n = last_dim("layer_norm", a.shape());
  const Tensor& x = a.value();
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (xr[j] - mu) * inv_std[r];
  }
  Tensor ys = y;
  return tape_of(a).record(
      "layer_norm", std::move(y), {a},
      [ys = std::move(ys), inv_std = std::move(inv_std), n](const Tensor& g, std::span<Tensor* const> pg) {
        if (!pg[0]) return;
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < inv_std.size(); ++r) {
          const double* yr = ys.data() + r * n;
          const double* gr = g.data() + r * n;
          double g_mean = 0.0, gy_mean = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            g_mean += gr[j];
            gy_mean += gr[j] * yr[j];
          }
          g_mean *= inv_n;
          gy_mean *= inv_n;
          for (std::size_t j = 0; j < n; ++j) (*pg[0])[r * n + j] += inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
        }
      });
}

Var dropout(Var a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ValidationError("dropout probability must lie in [0, 1)");
  if (p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask(a.shape());
  const double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? inv_keep : 0.0;
  return mul(a, tape_of(a).constant(std::move(mask)));
}

Var linear(Var x, Var weight, Var bias) {
  Var y = matmul(x, weight);
  return add(y, broadcast_to(bias, y.shape()));
}

}  // namespace handkin::ad
