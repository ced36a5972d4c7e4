#include "thzsim/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "thzsim/geometry.hpp"
#include "thzsim/kernels.hpp"
#include "thzsim/scenario.hpp"

namespace thz::ad {

namespace kn = thz::kernels;

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

std::size_t shape_product(const Shape& s) {
  std::size_t p = 1;
  for (auto d : s) p *= d;
  return p;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw Error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Tape* same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw Error("operands recorded on different tapes");
  return a.tape;
}

}  // namespace

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), values(shape_product(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) { validate(); }

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

std::size_t Tensor::rows() const { return shape.size() < 2 ? 1 : shape[0]; }

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  return shape[0] == 0 ? 0 : values.size() / shape[0];
}

void Tensor::validate() const {
  if (values.size() != shape_product(shape)) {
    throw Error("tensor of shape " + shape_str(shape) + " holds " + std::to_string(values.size()) + " values");
  }
}

// ----- ParameterSet ---------------------------------------------------------

Parameter& ParameterSet::add(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double r = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (auto& v : t.values) v = rng.uniform(-r, r);
  return add(name, std::move(t));
}

Parameter& ParameterSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw Error("duplicate parameter " + name);
  value.validate();
  Parameter p;
  p.name = name;
  p.grad.assign(value.size(), 0.0);
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterSet::get(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error("unknown parameter " + name);
}

const Parameter& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error("unknown parameter " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterSet::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.assign(p.value.size(), 0.0);
}

std::vector<double> ParameterSet::flat_values() const {
  std::vector<double> out;
  out.reserve(num_values());
  for (const auto& p : params_) out.insert(out.end(), p.value.values.begin(), p.value.values.end());
  return out;
}

std::vector<double> ParameterSet::flat_grads() const {
  std::vector<double> out;
  out.reserve(num_values());
  for (const auto& p : params_) {
    if (p.grad.size() == p.value.size()) {
      out.insert(out.end(), p.grad.begin(), p.grad.end());
    } else {
      out.insert(out.end(), p.value.size(), 0.0);
    }
  }
  return out;
}

void ParameterSet::set_flat_values(const std::vector<double>& v) {
  if (v.size() != num_values()) throw Error("set_flat_values: expected " + std::to_string(num_values()) + " values");
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy(v.begin() + off, v.begin() + off + p.value.size(), p.value.values.begin());
    off += p.value.size();
  }
}

// ----- Tape -----------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::push(Tensor value, bool needs_grad, Backward bw) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor t) {
  t.validate();
  return push(std::move(t), false, nullptr);
}

Var Tape::leaf(Tensor t, bool requires_grad) {
  t.validate();
  t.requires_grad = requires_grad;
  return push(std::move(t), requires_grad, nullptr);
}

Var Tape::param(Parameter& p) {
  Var v = leaf(p.value, p.trainable);
  nodes_[v.id].param = p.trainable ? &p : nullptr;
  return v;
}

std::vector<double>& Tape::grad_ref(int id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

std::vector<double> Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.tape != this) throw Error("backward: variable belongs to another tape");
  if (nodes_[out.id].value.size() != 1) {
    throw Error("backward: output must hold one value, got shape " + shape_str(nodes_[out.id].value.shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad_ref(out.id)[0] = 1.0;
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      auto& g = n.param->grad;
      if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }
}

// ----- primitives -----------------------------------------------------------

namespace {

bool any_grad(Tape* t, std::initializer_list<int> ids) {
  for (int id : ids) {
    if (t->needs_grad(id)) return true;
  }
  return false;
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape* t = a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.values[i] = f(x.values[i]);
  const int ia = a.id;
  return t->push(std::move(y), t->needs_grad(ia), [ia, df](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& xv = tp.value(Var{&tp, ia}).values;
    const auto& yv = tp.value(Var{&tp, self}).values;
    auto& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

}  // namespace

Var matmul_nt(Var X, Var W) {
  Tape* t = same_tape(X, W);
  const Tensor& x = X.value();
  const Tensor& w = W.value();
  if (w.shape.size() != 2 || x.cols() != w.cols()) shape_error("matmul_nt", x.shape, w.shape);
  const std::size_t n = x.rows(), k = x.cols(), m = w.rows();
  Tensor y(Shape{n, m});
  kn::gemm_nt(n, m, k, x.values.data(), w.values.data(), y.values.data(), false);
  const int ix = X.id, iw = W.id;
  return t->push(std::move(y), any_grad(t, {ix, iw}), [ix, iw, n, m, k](Tape& tp, int self) {
    const double* g = tp.out_grad(self).data();
    if (tp.needs_grad(ix)) {
      kn::gemm_nn(n, k, m, g, tp.value(Var{&tp, iw}).values.data(), tp.grad_ref(ix).data(), true);
    }
    if (tp.needs_grad(iw)) {
      kn::gemm_tn(n, m, k, g, tp.value(Var{&tp, ix}).values.data(), tp.grad_ref(iw).data(), true);
    }
  });
}

Var matvec(Var W, Var x) {
  const Tensor& xv = x.value();
  if (xv.shape.size() != 1) throw Error("matvec: expected a 1-D input, got " + shape_str(xv.shape));
  Var y = matmul_nt(x, W);
  return reshape(y, Shape{W.value().rows()});
}

Var add_bias(Var Y, Var b) {
  Tape* t = same_tape(Y, b);
  const Tensor& y = Y.value();
  const Tensor& bv = b.value();
  if (bv.size() != y.cols()) shape_error("add_bias", y.shape, bv.shape);
  Tensor out = y;
  const std::size_t n = y.rows(), m = y.cols();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out.values[i * m + j] += bv.values[j];
  }
  const int iy = Y.id, ib = b.id;
  return t->push(std::move(out), any_grad(t, {iy, ib}), [iy, ib, n, m](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (tp.needs_grad(iy)) {
      auto& gy = tp.grad_ref(iy);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gb = tp.grad_ref(ib);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
      }
    }
  });
}

Var linear(Var X, Var W, Var b) { return add_bias(matmul_nt(X, W), b); }

Var add(Var a, Var b) {
  Tape* t = same_tape(a, b);
  require_same_shape("add", a, b);
  Tensor y = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += bv[i];
  const int ia = a.id, ib = b.id;
  return t->push(std::move(y), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    for (int id : {ia, ib}) {
      if (!tp.needs_grad(id)) continue;
      auto& gx = tp.grad_ref(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape* t = same_tape(a, b);
  require_same_shape("sub", a, b);
  Tensor y = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return t->push(std::move(y), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    if (tp.needs_grad(ia)) {
      auto& gx = tp.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gx = tp.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape* t = same_tape(a, b);
  require_same_shape("mul", a, b);
  Tensor y = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return t->push(std::move(y), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& av = tp.value(Var{&tp, ia}).values;
    const auto& bv2 = tp.value(Var{&tp, ib}).values;
    if (tp.needs_grad(ia)) {
      auto& gx = tp.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bv2[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gx = tp.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("concat: no inputs");
  Tape* t = xs[0].tape;
  const bool one_d = xs[0].shape().size() <= 1;
  const std::size_t n = xs[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool needs = false;
  for (const Var& x : xs) {
    same_tape(xs[0], x);
    if (x.rows() != n || (x.shape().size() <= 1) != one_d) shape_error("concat", xs[0].shape(), x.shape());
    widths.push_back(x.cols());
    total += x.cols();
    needs = needs || t->needs_grad(x.id);
  }
  Tensor y(one_d ? Shape{total} : Shape{n, total});
  std::size_t off = 0;
  for (std::size_t q = 0; q < xs.size(); ++q) {
    const auto& v = xs[q].value().values;
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(v.begin() + i * widths[q], v.begin() + (i + 1) * widths[q], y.values.begin() + i * total + off);
    }
    off += widths[q];
  }
  std::vector<int> ids;
  for (const Var& x : xs) ids.push_back(x.id);
  return t->push(std::move(y), needs, [ids, widths, n, total](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    std::size_t off2 = 0;
    for (std::size_t q = 0; q < ids.size(); ++q) {
      if (tp.needs_grad(ids[q])) {
        auto& gx = tp.grad_ref(ids[q]);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < widths[q]; ++j) gx[i * widths[q] + j] += g[i * total + off2 + j];
        }
      }
      off2 += widths[q];
    }
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sum(Var a) {
  Tape* t = a.tape;
  const auto& v = a.value().values;
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  const int ia = a.id;
  return t->push(Tensor::scalar(s), t->needs_grad(ia), [ia](Tape& tp, int self) {
    const double g = tp.out_grad(self)[0];
    auto& gx = tp.grad_ref(ia);
    for (auto& x : gx) x += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw Error("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var max(Var a, Var b) {
  Tape* t = same_tape(a, b);
  require_same_shape("max", a, b);
  Tensor y = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = std::max(y.values[i], bv[i]);
  const int ia = a.id, ib = b.id;
  return t->push(std::move(y), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& av = tp.value(Var{&tp, ia}).values;
    const auto& bv2 = tp.value(Var{&tp, ib}).values;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const int dst = av[i] >= bv2[i] ? ia : ib;
      if (tp.needs_grad(dst)) tp.grad_ref(dst)[i] += g[i];
    }
  });
}

namespace {

// Softmax over `len` entries at `x`, honoring an optional mask.
void softmax_span(const double* x, double* y, std::size_t len, const std::uint8_t* mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < len; ++j) {
    if (!mask || mask[j]) mx = std::max(mx, x[j]);
  }
  if (!std::isfinite(mx)) {
    std::fill(y, y + len, 0.0);
    return;
  }
  double s = 0.0;
  for (std::size_t j = 0; j < len; ++j) {
    y[j] = (!mask || mask[j]) ? std::exp(x[j] - mx) : 0.0;
    s += y[j];
  }
  for (std::size_t j = 0; j < len; ++j) y[j] /= s;
}

void softmax_span_backward(const double* y, const double* g, double* gx, std::size_t len) {
  double dotp = 0.0;
  for (std::size_t j = 0; j < len; ++j) dotp += g[j] * y[j];
  for (std::size_t j = 0; j < len; ++j) gx[j] += y[j] * (g[j] - dotp);
}

}  // namespace

Var softmax(Var a) {
  Tape* t = a.tape;
  const Tensor& x = a.value();
  if (x.shape.size() != 1) throw Error("softmax: expected a 1-D tensor, got " + shape_str(x.shape));
  Tensor y(x.shape);
  softmax_span(x.values.data(), y.values.data(), x.size(), nullptr);
  const int ia = a.id;
  return t->push(std::move(y), t->needs_grad(ia), [ia](Tape& tp, int self) {
    const auto& yv = tp.value(Var{&tp, self}).values;
    softmax_span_backward(yv.data(), tp.out_grad(self).data(), tp.grad_ref(ia).data(), yv.size());
  });
}

Var row_softmax(Var X, const std::vector<std::uint8_t>* mask) {
  Tape* t = X.tape;
  const Tensor& x = X.value();
  const std::size_t n = x.rows(), m = x.cols();
  if (mask && mask->size() != x.size()) {
    throw Error("row_softmax: mask has " + std::to_string(mask->size()) + " entries for shape " + shape_str(x.shape));
  }
  Tensor y(x.shape);
  for (std::size_t i = 0; i < n; ++i) {
    softmax_span(x.values.data() + i * m, y.values.data() + i * m, m, mask ? mask->data() + i * m : nullptr);
  }
  const int ix = X.id;
  return t->push(std::move(y), t->needs_grad(ix), [ix, n, m](Tape& tp, int self) {
    const auto& yv = tp.value(Var{&tp, self}).values;
    const auto& g = tp.out_grad(self);
    auto& gx = tp.grad_ref(ix);
    for (std::size_t i = 0; i < n; ++i) {
      softmax_span_backward(yv.data() + i * m, g.data() + i * m, gx.data() + i * m, m);
    }
  });
}

Var pick(Var a, std::size_t i) {
  Tape* t = a.tape;
  if (i >= a.value().size()) throw Error("pick: index " + std::to_string(i) + " outside " + shape_str(a.shape()));
  const int ia = a.id;
  return t->push(Tensor::scalar(a.value().values[i]), t->needs_grad(ia),
                 [ia, i](Tape& tp, int self) { tp.grad_ref(ia)[i] += tp.out_grad(self)[0]; });
}

Var reshape(Var a, Shape s) {
  Tape* t = a.tape;
  if (shape_product(s) != a.value().size()) shape_error("reshape", a.shape(), s);
  Tensor y(std::move(s), a.value().values);
  const int ia = a.id;
  return t->push(std::move(y), t->needs_grad(ia), [ia](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gx = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var gather_rows(Var H, const std::vector<int>& idx) {
  Tape* t = H.tape;
  const Tensor& h = H.value();
  const std::size_t n = h.rows(), d = h.cols();
  Tensor y(Shape{idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0) continue;
    if (static_cast<std::size_t>(idx[r]) >= n) {
      throw Error("gather_rows: index " + std::to_string(idx[r]) + " outside " + shape_str(h.shape));
    }
    std::copy(h.values.begin() + idx[r] * d, h.values.begin() + (idx[r] + 1) * d, y.values.begin() + r * d);
  }
  const int ih = H.id;
  return t->push(std::move(y), t->needs_grad(ih), [ih, idx, d](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gh = tp.grad_ref(ih);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      kn::axpy(d, 1.0, g.data() + r * d, gh.data() + idx[r] * d);
    }
  });
}

Var repeat_rows(Var X, std::size_t S) {
  Tape* t = X.tape;
  const Tensor& x = X.value();
  const std::size_t n = x.rows(), d = x.cols();
  Tensor y(Shape{n * S, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      std::copy(x.values.begin() + i * d, x.values.begin() + (i + 1) * d, y.values.begin() + (i * S + s) * d);
    }
  }
  const int ix = X.id;
  return t->push(std::move(y), t->needs_grad(ix), [ix, n, d, S](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gx = tp.grad_ref(ix);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < S; ++s) kn::axpy(d, 1.0, g.data() + (i * S + s) * d, gx.data() + i * d);
    }
  });
}

namespace {

void check_groups(const char* op, const Tensor& x, std::size_t S) {
  if (S == 0 || x.rows() % S != 0) {
    throw Error(std::string(op) + ": " + std::to_string(x.rows()) + " rows do not split into groups of " +
                std::to_string(S));
  }
}

}  // namespace

Var segment_sum(Var X, std::size_t S) {
  Tape* t = X.tape;
  const Tensor& x = X.value();
  check_groups("segment_sum", x, S);
  const std::size_t n = x.rows() / S, d = x.cols();
  Tensor y(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) kn::axpy(d, 1.0, x.values.data() + (i * S + s) * d, y.values.data() + i * d);
  }
  const int ix = X.id;
  return t->push(std::move(y), t->needs_grad(ix), [ix, n, d, S](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gx = tp.grad_ref(ix);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < S; ++s) kn::axpy(d, 1.0, g.data() + i * d, gx.data() + (i * S + s) * d);
    }
  });
}

Var segment_mean(Var X, std::size_t S) { return scale(segment_sum(X, S), 1.0 / static_cast<double>(S)); }

Var segment_max(Var X, std::size_t S) {
  Tape* t = X.tape;
  const Tensor& x = X.value();
  check_groups("segment_max", x, S);
  const std::size_t n = x.rows() / S, d = x.cols();
  Tensor y(Shape{n, d});
  std::vector<std::uint32_t> arg(n * d, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = 0;
      double bv = x.values[(i * S) * d + j];
      for (std::size_t s = 1; s < S; ++s) {
        const double v = x.values[(i * S + s) * d + j];
        if (v > bv) bv = v, best = s;
      }
      y.values[i * d + j] = bv;
      arg[i * d + j] = static_cast<std::uint32_t>(best);
    }
  }
  const int ix = X.id;
  return t->push(std::move(y), t->needs_grad(ix), [ix, n, d, S, arg = std::move(arg)](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gx = tp.grad_ref(ix);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) gx[(i * S + arg[i * d + j]) * d + j] += g[i * d + j];
    }
  });
}

Var weighted_segment_sum(Var W, Var Z) {
  Tape* t = same_tape(W, Z);
  const Tensor& w = W.value();
  const Tensor& z = Z.value();
  const std::size_t n = w.rows(), S = w.cols(), d = z.cols();
  if (z.rows() != n * S) shape_error("weighted_segment_sum", w.shape, z.shape);
  Tensor y(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      kn::axpy(d, w.values[i * S + s], z.values.data() + (i * S + s) * d, y.values.data() + i * d);
    }
  }
  const int iw = W.id, iz = Z.id;
  return t->push(std::move(y), any_grad(t, {iw, iz}), [iw, iz, n, S, d](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& wv = tp.value(Var{&tp, iw}).values;
    const auto& zv = tp.value(Var{&tp, iz}).values;
    if (tp.needs_grad(iw)) {
      auto& gw = tp.grad_ref(iw);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < S; ++s) gw[i * S + s] += kn::dot(d, g.data() + i * d, zv.data() + (i * S + s) * d);
      }
    }
    if (tp.needs_grad(iz)) {
      auto& gz = tp.grad_ref(iz);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < S; ++s) kn::axpy(d, wv[i * S + s], g.data() + i * d, gz.data() + (i * S + s) * d);
      }
    }
  });
}

Var row_scale(Var X, Var s) {
  Tape* t = same_tape(X, s);
  const Tensor& x = X.value();
  const Tensor& sv = s.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (sv.size() != n) shape_error("row_scale", x.shape, sv.shape);
  Tensor y = x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) y.values[i * d + j] *= sv.values[i];
  }
  const int ix = X.id, is = s.id;
  return t->push(std::move(y), any_grad(t, {ix, is}), [ix, is, n, d](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& xv = tp.value(Var{&tp, ix}).values;
    const auto& sv2 = tp.value(Var{&tp, is}).values;
    if (tp.needs_grad(ix)) {
      auto& gx = tp.grad_ref(ix);
      for (std::size_t i = 0; i < n; ++i) kn::axpy(d, sv2[i], g.data() + i * d, gx.data() + i * d);
    }
    if (tp.needs_grad(is)) {
      auto& gs = tp.grad_ref(is);
      for (std::size_t i = 0; i < n; ++i) gs[i] += kn::dot(d, g.data() + i * d, xv.data() + i * d);
    }
  });
}

Var row_dot(Var A, Var B) {
  Tape* t = same_tape(A, B);
  require_same_shape("row_dot", A, B);
  const Tensor& a = A.value();
  const auto& b = B.value().values;
  const std::size_t n = a.rows(), d = a.cols();
  Tensor y(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) y.values[i] = kn::dot(d, a.values.data() + i * d, b.data() + i * d);
  const int ia = A.id, ib = B.id;
  return t->push(std::move(y), any_grad(t, {ia, ib}), [ia, ib, n, d](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& av = tp.value(Var{&tp, ia}).values;
    const auto& bv = tp.value(Var{&tp, ib}).values;
    if (tp.needs_grad(ia)) {
      auto& ga = tp.grad_ref(ia);
      for (std::size_t i = 0; i < n; ++i) kn::axpy(d, g[i], bv.data() + i * d, ga.data() + i * d);
    }
    if (tp.needs_grad(ib)) {
      auto& gb = tp.grad_ref(ib);
      for (std::size_t i = 0; i < n; ++i) kn::axpy(d, g[i], av.data() + i * d, gb.data() + i * d);
    }
  });
}

Var row_normalize(Var A, double eps) {
  Tape* t = A.tape;
  const Tensor& a = A.value();
  const std::size_t n = a.rows(), d = a.cols();
  Tensor y = a;
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double nr = std::sqrt(kn::dot(d, a.values.data() + i * d, a.values.data() + i * d));
    norms[i] = nr;
    const double den = std::max(nr, eps);
    for (std::size_t j = 0; j < d; ++j) y.values[i * d + j] /= den;
  }
  const int ia = A.id;
  return t->push(std::move(y), t->needs_grad(ia), [ia, n, d, eps, norms = std::move(norms)](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& yv = tp.value(Var{&tp, self}).values;
    auto& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < n; ++i) {
      const double* gi = g.data() + i * d;
      double* gai = ga.data() + i * d;
      if (norms[i] > eps) {
        const double* yi = yv.data() + i * d;
        const double gy = kn::dot(d, gi, yi);
        for (std::size_t j = 0; j < d; ++j) gai[j] += (gi[j] - yi[j] * gy) / norms[i];
      } else {
        for (std::size_t j = 0; j < d; ++j) gai[j] += gi[j] / eps;
      }
    }
  });
}

namespace {

void check_table(const char* op, const std::vector<int>& idx, std::size_t S, std::size_t rows) {
  if (S == 0 || idx.size() % S != 0) {
    throw Error(std::string(op) + ": index table of " + std::to_string(idx.size()) + " entries is not a multiple of " +
                std::to_string(S));
  }
  for (int j : idx) {
    if (j >= 0 && static_cast<std::size_t>(j) >= rows) {
      throw Error(std::string(op) + ": index " + std::to_string(j) + " outside " + std::to_string(rows) + " rows");
    }
  }
}

}  // namespace

Var neighbor_sum(Var H, const std::vector<int>& idx, std::size_t S, const std::vector<double>* coef) {
  Tape* t = H.tape;
  const Tensor& h = H.value();
  check_table("neighbor_sum", idx, S, h.rows());
  if (coef && coef->size() != idx.size()) throw Error("neighbor_sum: coefficient count differs from the table size");
  const std::size_t n = idx.size() / S, d = h.cols();
  Tensor y(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      const int j = idx[i * S + s];
      if (j < 0) continue;
      kn::axpy(d, coef ? (*coef)[i * S + s] : 1.0, h.values.data() + j * d, y.values.data() + i * d);
    }
  }
  const int ih = H.id;
  std::vector<double> c = coef ? *coef : std::vector<double>{};
  return t->push(std::move(y), t->needs_grad(ih), [ih, idx, S, n, d, c = std::move(c)](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gh = tp.grad_ref(ih);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < S; ++s) {
        const int j = idx[i * S + s];
        if (j < 0) continue;
        kn::axpy(d, c.empty() ? 1.0 : c[i * S + s], g.data() + i * d, gh.data() + j * d);
      }
    }
  });
}

Var neighbor_max(Var H, const std::vector<int>& idx, std::size_t S) {
  Tape* t = H.tape;
  const Tensor& h = H.value();
  check_table("neighbor_max", idx, S, h.rows());
  const std::size_t n = idx.size() / S, d = h.cols();
  Tensor y(Shape{n, d});
  std::vector<int> arg(n * d, -1);
  for (std::size_t i = 0; i < n; ++i) {
    double* yi = y.values.data() + i * d;
    int* ai = arg.data() + i * d;
    bool first = true;
    for (std::size_t s = 0; s < S; ++s) {
      const int j = idx[i * S + s];
      const double* hj = j >= 0 ? h.values.data() + j * d : nullptr;
      for (std::size_t c = 0; c < d; ++c) {
        const double v = hj ? hj[c] : 0.0;
        if (first || v > yi[c]) yi[c] = v, ai[c] = j;
      }
      first = false;
    }
  }
  const int ih = H.id;
  return t->push(std::move(y), t->needs_grad(ih), [ih, n, d, arg = std::move(arg)](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    auto& gh = tp.grad_ref(ih);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        const int j = arg[i * d + c];
        if (j >= 0) gh[j * d + c] += g[i * d + c];
      }
    }
  });
}

Var neighbor_weighted_sum(Var W, Var H, const std::vector<int>& idx) {
  Tape* t = same_tape(W, H);
  const Tensor& w = W.value();
  const Tensor& h = H.value();
  const std::size_t n = w.rows(), S = w.cols(), d = h.cols();
  if (idx.size() != n * S) shape_error("neighbor_weighted_sum", w.shape, Shape{idx.size()});
  check_table("neighbor_weighted_sum", idx, S, h.rows());
  Tensor y(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      const int j = idx[i * S + s];
      if (j >= 0) kn::axpy(d, w.values[i * S + s], h.values.data() + j * d, y.values.data() + i * d);
    }
  }
  const int iw = W.id, ih = H.id;
  return t->push(std::move(y), any_grad(t, {iw, ih}), [iw, ih, idx, n, S, d](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& wv = tp.value(Var{&tp, iw}).values;
    const auto& hv = tp.value(Var{&tp, ih}).values;
    const bool gw_needed = tp.needs_grad(iw), gh_needed = tp.needs_grad(ih);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < S; ++s) {
        const int j = idx[i * S + s];
        if (j < 0) continue;
        if (gw_needed) tp.grad_ref(iw)[i * S + s] += kn::dot(d, g.data() + i * d, hv.data() + j * d);
        if (gh_needed) kn::axpy(d, wv[i * S + s], g.data() + i * d, tp.grad_ref(ih).data() + j * d);
      }
    }
  });
}

Var neighbor_dot(Var A, Var B, const std::vector<int>& idx, std::size_t S) {
  Tape* t = same_tape(A, B);
  const Tensor& a = A.value();
  const Tensor& b = B.value();
  if (a.cols() != b.cols()) shape_error("neighbor_dot", a.shape, b.shape);
  check_table("neighbor_dot", idx, S, b.rows());
  const std::size_t n = idx.size() / S, d = a.cols();
  if (a.rows() != n) shape_error("neighbor_dot", a.shape, Shape{idx.size()});
  Tensor y(Shape{n, S});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      const int j = idx[i * S + s];
      if (j >= 0) y.values[i * S + s] = kn::dot(d, a.values.data() + i * d, b.values.data() + j * d);
    }
  }
  const int ia = A.id, ib = B.id;
  return t->push(std::move(y), any_grad(t, {ia, ib}), [ia, ib, idx, n, S, d](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& av = tp.value(Var{&tp, ia}).values;
    const auto& bv = tp.value(Var{&tp, ib}).values;
    const bool ga_needed = tp.needs_grad(ia), gb_needed = tp.needs_grad(ib);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < S; ++s) {
        const int j = idx[i * S + s];
        if (j < 0) continue;
        const double gi = g[i * S + s];
        if (ga_needed) kn::axpy(d, gi, bv.data() + j * d, tp.grad_ref(ia).data() + i * d);
        if (gb_needed) kn::axpy(d, gi, av.data() + i * d, tp.grad_ref(ib).data() + j * d);
      }
    }
  });
}

Var mix(Var w, const std::vector<Var>& xs) {
  Tape* t = w.tape;
  const Tensor& wv = w.value();
  if (xs.size() != wv.size()) {
    throw Error("mix: " + std::to_string(wv.size()) + " weights for " + std::to_string(xs.size()) + " inputs");
  }
  if (xs.empty()) throw Error("mix: no inputs");
  bool needs = t->needs_grad(w.id);
  Tensor y(xs[0].shape());
  for (std::size_t a = 0; a < xs.size(); ++a) {
    same_tape(w, xs[a]);
    if (xs[a].shape() != xs[0].shape()) shape_error("mix", xs[0].shape(), xs[a].shape());
    kn::axpy(y.size(), wv.values[a], xs[a].value().values.data(), y.values.data());
    needs = needs || t->needs_grad(xs[a].id);
  }
  std::vector<int> ids;
  for (const Var& x : xs) ids.push_back(x.id);
  const int iw = w.id;
  return t->push(std::move(y), needs, [iw, ids](Tape& tp, int self) {
    const auto& g = tp.out_grad(self);
    const auto& wv2 = tp.value(Var{&tp, iw}).values;
    for (std::size_t a = 0; a < ids.size(); ++a) {
      if (tp.needs_grad(iw)) tp.grad_ref(iw)[a] += kn::dot(g.size(), g.data(), tp.value(Var{&tp, ids[a]}).values.data());
      if (tp.needs_grad(ids[a])) kn::axpy(g.size(), wv2[a], g.data(), tp.grad_ref(ids[a]).data());
    }
  });
}

Var bce_loss(Var y, const Tensor& z) {
  Tape* t = y.tape;
  const auto& yv = y.value().values;
  if (z.size() != yv.size()) shape_error("bce_loss", y.shape(), z.shape);
  double loss = 0.0;
  for (std::size_t i = 0; i < yv.size(); ++i) {
    const double s = std::clamp(stable_sigmoid(yv[i]), kProbClamp, 1.0 - kProbClamp);
    loss += -z.values[i] * std::log(s) - (1.0 - z.values[i]) * std::log(1.0 - s);
  }
  const int iy = y.id;
  return t->push(Tensor::scalar(loss), t->needs_grad(iy), [iy, zv = z.values](Tape& tp, int self) {
    const double g = tp.out_grad(self)[0];
    const auto& yv2 = tp.value(Var{&tp, iy}).values;
    auto& gy = tp.grad_ref(iy);
    for (std::size_t i = 0; i < yv2.size(); ++i) {
      const double s = stable_sigmoid(yv2[i]);
      if (s < kProbClamp || s > 1.0 - kProbClamp) continue;
      gy[i] += g * (s - zv[i]);
    }
  });
}

GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps, double floor) {
  std::vector<double> analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var out = f(tape, xv);
    tape.backward(out);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const Tensor& xp) {
    Tape tape;
    Var xv = tape.leaf(xp, false);
    return f(tape, xv).value().values[0];
  };
  GradCheckResult r;
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x.values[i];
    xp.values[i] = x0 + eps;
    const double fp = eval(xp);
    xp.values[i] = x0 - eps;
    const double fm = eval(xp);
    xp.values[i] = x0;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
    }
  }
  return r;
}

void sgd_step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
  if (params.size() != grads.size()) {
    throw Error("sgd_step: " + std::to_string(params.size()) + " parameters vs " + std::to_string(grads.size()) +
                " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

void sgd_step(ParameterSet& params, double lr) {
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    if (p.grad.size() != p.value.size()) continue;
    sgd_step(p.value.values, p.grad, lr);
  }
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.all()) {
    if (!p.trainable) continue;
    for (double g : p.grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params.all()) {
      if (!p.trainable) continue;
      for (double& g : p.grad) g *= s;
    }
  }
  return norm;
}

nlohmann::json checkpoint_to_json(const ParameterSet& params, const nlohmann::json& meta) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : params.all()) {
    arr.push_back({{"name", p.name}, {"shape", p.value.shape}, {"trainable", p.trainable}, {"values", p.value.values}});
  }
  return {{"format", "thz-checkpoint"}, {"version", kCheckpointVersion}, {"meta", meta}, {"params", arr}};
}

ParameterSet checkpoint_from_json(const nlohmann::json& j, nlohmann::json* meta) {
  if (!j.is_object() || j.value("format", "") != "thz-checkpoint") throw Error("not a checkpoint document");
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  ParameterSet ps;
  for (const auto& e : j.at("params")) {
    Tensor t(e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>());
    Parameter& p = ps.add(e.at("name").get<std::string>(), std::move(t));
    p.trainable = e.value("trainable", true);
  }
  if (meta) *meta = j.value("meta", nlohmann::json::object());
  return ps;
}

void save_checkpoint(const ParameterSet& params, const nlohmann::json& meta, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << checkpoint_to_json(params, meta).dump() << '\n';
}

ParameterSet load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j, meta);
}

}  // namespace thz::ad
