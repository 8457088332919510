#include "unifier/nd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <stdexcept>

#include <Eigen/Core>

#include "binary_io.hpp"

namespace unifier::nd {

// ---------------------------------------------------------------- Tensor

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill, bool requires_grad)
    : shape_(std::move(shape)), data_(product(shape_), fill), requires_grad_(requires_grad) {
  if (shape_.empty() || shape_.size() > 2) throw std::invalid_argument("Tensor must be 1-D or 2-D");
  if (requires_grad_) grad_.assign(data_.size(), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  if (shape_.empty() || shape_.size() > 2) throw std::invalid_argument("Tensor must be 1-D or 2-D");
  if (product(shape_) != data_.size()) throw std::invalid_argument("Tensor data/shape mismatch");
  if (requires_grad_) grad_.assign(data_.size(), 0.0);
}

std::size_t Tensor::rows() const { return shape_.size() == 1 ? 1 : shape_[0]; }
std::size_t Tensor::cols() const { return shape_.back(); }

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_.assign(data_.size(), 0.0);
  } else {
    grad_.clear();
  }
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

// ---------------------------------------------------------------- Var

std::size_t Var::rows() const { return tape_->rows(id_); }
std::size_t Var::cols() const { return tape_->cols(id_); }
std::span<const double> Var::values() const { return tape_->value(id_); }
double Var::at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }
bool Var::needs_grad() const { return tape_->needs_grad(id_); }

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on a non-scalar node");
  return values()[0];
}

// ---------------------------------------------------------------- Tape

Var Tape::param(Tensor& t) {
  if (!record_ || !t.requires_grad()) return frozen(t);
  if (auto it = tracked_.find(&t); it != tracked_.end()) return Var(this, it->second);
  Node n;
  n.rows = t.rows();
  n.cols = t.cols();
  n.external = t.data().data();
  n.leaf = &t;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  tracked_.emplace(&t, id);
  return Var(this, id);
}

Var Tape::frozen(const Tensor& t) {
  if (auto it = frozen_.find(&t); it != frozen_.end()) return Var(this, it->second);
  Node n;
  n.rows = t.rows();
  n.cols = t.cols();
  n.external = t.data().data();
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  frozen_.emplace(&t, id);
  return Var(this, id);
}

Var Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) throw std::invalid_argument("constant: data/shape mismatch");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.owned = std::move(values);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::push(std::size_t rows, std::size_t cols, std::vector<double> value,
               std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
  for (double v : value) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("non-finite output in ") + op);
  }
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.owned = std::move(value);
  if (record_) {
    for (const Var& in : inputs) n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::span<const double> Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  if (n.external != nullptr) return {n.external, n.rows * n.cols};
  return n.owned;
}

std::span<double> Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.rows * n.cols, 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.valid() && &loss.tape() != this) throw std::logic_error("loss belongs to another tape");
  if (backward_done_) throw std::logic_error("backward called twice without reset");
  if (rows(loss.id()) != 1 || cols(loss.id()) != 1) {
    throw std::logic_error("backward requires a scalar loss");
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].needs_grad) return;
  grad(loss.id())[0] = 1.0;
  for (std::int64_t i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.leaf != nullptr) {
      auto g = n.leaf->mutable_grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    } else if (n.backward) {
      n.backward(*this, static_cast<std::uint32_t>(i));
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  tracked_.clear();
  frozen_.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------- kernels

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// c[n x m] += a[n x k] * b[k x m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k),
             M = static_cast<Eigen::Index>(m);
  MMap(c, N, M).noalias() += CMap(a, N, K) * CMap(b, K, M);
}

// c[n x m] += a[n x k] * b[m x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k),
             M = static_cast<Eigen::Index>(m);
  MMap(c, N, M).noalias() += CMap(a, N, K) * CMap(b, M, K).transpose();
}

// c[k x m] += a[n x k]^T * b[n x m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k),
             M = static_cast<Eigen::Index>(m);
  MMap(c, K, M).noalias() += CMap(a, N, K).transpose() * CMap(b, N, M);
}

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string shape_str(Var v) {
  return "(" + std::to_string(v.rows()) + " x " + std::to_string(v.cols()) + ")";
}

void same_tape(Var a, Var b, const char* op) {
  require(&a.tape() == &b.tape(), op, "inputs live on different tapes");
}

void same_shape(Var a, Var b, const char* op) {
  same_tape(a, b, op);
  require(a.rows() == b.rows() && a.cols() == b.cols(), op,
          "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename F, typename D>
Var unary(Var a, const char* op, F f, D dfdx) {
  auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const auto ida = a.id();
  return a.tape().push(a.rows(), a.cols(), std::move(y), {a},
                       [ida, dfdx](Tape& t, std::uint32_t self) {
                         if (!t.needs_grad(ida)) return;
                         auto x = t.value(ida);
                         auto yv = t.value(self);
                         auto gy = t.grad(self);
                         auto gx = t.grad(ida);
                         for (std::size_t i = 0; i < gx.size(); ++i) {
                           gx[i] += gy[i] * dfdx(x[i], yv[i]);
                         }
                       },
                       op);
}

void softmax_row(const double* x, double* y, std::size_t m) {
  const double mx = *std::max_element(x, x + m);
  double z = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  for (std::size_t j = 0; j < m; ++j) y[j] /= z;
}

void log_softmax_row(const double* x, double* y, std::size_t m) {
  const double mx = *std::max_element(x, x + m);
  double z = 0.0;
  for (std::size_t j = 0; j < m; ++j) z += std::exp(x[j] - mx);
  const double lse = mx + std::log(z);
  for (std::size_t j = 0; j < m; ++j) y[j] = x[j] - lse;
}

}  // namespace

// ---------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  require(a.cols() == b.rows(), "matmul", "inner dims " + shape_str(a) + " x " + shape_str(b));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> c(n * m, 0.0);
  gemm_nn(a.values().data(), b.values().data(), c.data(), n, k, m);
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(n, m, std::move(c), {a, b},
                       [ia, ib, n, k, m](Tape& t, std::uint32_t self) {
                         const double* gc = t.grad(self).data();
                         if (t.needs_grad(ia)) {
                           gemm_nt(gc, t.value(ib).data(), t.grad(ia).data(), n, m, k);
                         }
                         if (t.needs_grad(ib)) {
                           gemm_tn(t.value(ia).data(), gc, t.grad(ib).data(), n, k, m);
                         }
                       },
                       "matmul");
}

Var matmul_nt(Var a, Var b) {
  same_tape(a, b, "matmul_nt");
  require(a.cols() == b.cols(), "matmul_nt", "inner dims " + shape_str(a) + " x " + shape_str(b) + "^T");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  std::vector<double> c(n * m, 0.0);
  gemm_nt(a.values().data(), b.values().data(), c.data(), n, k, m);
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(n, m, std::move(c), {a, b},
                       [ia, ib, n, k, m](Tape& t, std::uint32_t self) {
                         const double* gc = t.grad(self).data();
                         if (t.needs_grad(ia)) {
                           gemm_nn(gc, t.value(ib).data(), t.grad(ia).data(), n, m, k);
                         }
                         if (t.needs_grad(ib)) {
                           gemm_tn(gc, t.value(ia).data(), t.grad(ib).data(), n, m, k);
                         }
                       },
                       "matmul_nt");
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(a.rows(), a.cols(), std::move(out), {a, b},
                       [ia, ib](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         for (auto id : {ia, ib}) {
                           if (!t.needs_grad(id)) continue;
                           auto gi = t.grad(id);
                           for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                         }
                       },
                       "add");
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(a.rows(), a.cols(), std::move(out), {a, b},
                       [ia, ib](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         if (t.needs_grad(ia)) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         }
                         if (t.needs_grad(ib)) {
                           auto gb = t.grad(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                         }
                       },
                       "sub");
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(a.rows(), a.cols(), std::move(out), {a, b},
                       [ia, ib](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         auto xa = t.value(ia);
                         auto xb = t.value(ib);
                         if (t.needs_grad(ia)) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
                         }
                         if (t.needs_grad(ib)) {
                           auto gb = t.grad(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
                         }
                       },
                       "mul");
}

Var add_row(Var a, Var bias) {
  same_tape(a, bias, "add_row");
  require(bias.rows() == 1 && bias.cols() == a.cols(), "add_row",
          "bias " + shape_str(bias) + " does not match " + shape_str(a));
  const std::size_t n = a.rows(), m = a.cols();
  auto x = a.values();
  auto b = bias.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[i * m + j] + b[j];
  }
  const auto ia = a.id(), ib = bias.id();
  return a.tape().push(n, m, std::move(out), {a, bias},
                       [ia, ib, n, m](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         if (t.needs_grad(ia)) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         }
                         if (t.needs_grad(ib)) {
                           auto gb = t.grad(ib);
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
                           }
                         }
                       },
                       "add_row");
}

Var scale(Var a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; },
               [](double, double) { return 1.0; });
}

Var scale_by(Var a, Var s) {
  same_tape(a, s, "scale_by");
  require(s.rows() == 1 && s.cols() == 1, "scale_by", "scale must be 1 x 1");
  const double c = s.item();
  auto x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
  const auto ia = a.id(), is = s.id();
  return a.tape().push(a.rows(), a.cols(), std::move(out), {a, s},
                       [ia, is](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         auto x = t.value(ia);
                         const double c = t.value(is)[0];
                         if (t.needs_grad(ia)) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                         }
                         if (t.needs_grad(is)) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
                           t.grad(is)[0] += acc;
                         }
                       },
                       "scale_by");
}

Var relu(Var a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  static const double kInvSqrt2 = 1.0 / std::numbers::sqrt2;
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var log1p(Var a) {
  return unary(a, "log1p", [](double x) { return std::log1p(x); },
               [](double x, double) { return 1.0 / (1.0 + x); });
}

Var softmax_rows(Var a) {
  const std::size_t n = a.rows(), m = a.cols();
  require(m > 0, "softmax_rows", "empty rows");
  std::vector<double> out(n * m);
  auto x = a.values();
  for (std::size_t i = 0; i < n; ++i) softmax_row(x.data() + i * m, out.data() + i * m, m);
  const auto ia = a.id();
  return a.tape().push(n, m, std::move(out), {a},
                       [ia, n, m](Tape& t, std::uint32_t self) {
                         auto p = t.value(self);
                         auto g = t.grad(self);
                         auto gx = t.grad(ia);
                         for (std::size_t i = 0; i < n; ++i) {
                           double dot = 0.0;
                           for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * p[i * m + j];
                           for (std::size_t j = 0; j < m; ++j) {
                             gx[i * m + j] += p[i * m + j] * (g[i * m + j] - dot);
                           }
                         }
                       },
                       "softmax_rows");
}

Var log_softmax_rows(Var a) {
  const std::size_t n = a.rows(), m = a.cols();
  require(m > 0, "log_softmax_rows", "empty rows");
  std::vector<double> out(n * m);
  auto x = a.values();
  for (std::size_t i = 0; i < n; ++i) log_softmax_row(x.data() + i * m, out.data() + i * m, m);
  const auto ia = a.id();
  return a.tape().push(n, m, std::move(out), {a},
                       [ia, n, m](Tape& t, std::uint32_t self) {
                         auto ly = t.value(self);
                         auto g = t.grad(self);
                         auto gx = t.grad(ia);
                         for (std::size_t i = 0; i < n; ++i) {
                           double gsum = 0.0;
                           for (std::size_t j = 0; j < m; ++j) gsum += g[i * m + j];
                           for (std::size_t j = 0; j < m; ++j) {
                             gx[i * m + j] += g[i * m + j] - std::exp(ly[i * m + j]) * gsum;
                           }
                         }
                       },
                       "log_softmax_rows");
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape(x, gamma, "layer_norm");
  same_tape(x, beta, "layer_norm");
  const std::size_t n = x.rows(), m = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == m && beta.rows() == 1 && beta.cols() == m,
          "layer_norm", "affine parameters must be 1 x " + std::to_string(m));
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(n * m);
  // normalised rows and inverse std are kept for the backward pass
  auto xhat = std::make_shared<std::vector<double>>(n * m);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * m;
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += row[j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < m; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[i * m + j] = h;
      out[i * m + j] = gv[j] * h + bv[j];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().push(
      n, m, std::move(out), {x, gamma, beta},
      [ix, ig, ib, n, m, xhat, inv_std](Tape& t, std::uint32_t self) {
        auto g = t.grad(self);
        auto gv = t.value(ig);
        if (t.needs_grad(ig)) {
          auto gg = t.grad(ig);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) gg[j] += g[i * m + j] * (*xhat)[i * m + j];
          }
        }
        if (t.needs_grad(ib)) {
          auto gb = t.grad(ib);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
          }
        }
        if (t.needs_grad(ix)) {
          auto gx = t.grad(ix);
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0;
            double mean_dh = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = g[i * m + j] * gv[j];
              mean_d += d;
              mean_dh += d * (*xhat)[i * m + j];
            }
            mean_d *= inv_m;
            mean_dh *= inv_m;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = g[i * m + j] * gv[j];
              gx[i * m + j] += (*inv_std)[i] * (d - mean_d - (*xhat)[i * m + j] * mean_dh);
            }
          }
        }
      },
      "layer_norm");
}

Var self_attention(Var q, Var k, Var v, std::size_t heads) {
  same_shape(q, k, "self_attention");
  same_shape(q, v, "self_attention");
  const std::size_t n = q.rows(), e = q.cols();
  require(heads > 0 && e % heads == 0, "self_attention",
          "width " + std::to_string(e) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t d = e / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  auto probs = std::make_shared<std::vector<double>>(heads * n * n);
  std::vector<double> out(n * e, 0.0);
  std::vector<double> scores(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * d;
    double* ph = probs->data() + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += qv[i * e + off + c] * kv[j * e + off + c];
        scores[j] = acc * inv_sqrt_d;
      }
      softmax_row(scores.data(), ph + i * n, n);
      for (std::size_t j = 0; j < n; ++j) {
        const double p = ph[i * n + j];
        for (std::size_t c = 0; c < d; ++c) out[i * e + off + c] += p * vv[j * e + off + c];
      }
    }
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().push(
      n, e, std::move(out), {q, k, v},
      [iq, ik, iv, n, e, d, heads, inv_sqrt_d, probs](Tape& t, std::uint32_t self) {
        auto go = t.grad(self);
        auto qv = t.value(iq);
        auto kv = t.value(ik);
        auto vv = t.value(iv);
        const bool need_q = t.needs_grad(iq), need_k = t.needs_grad(ik), need_v = t.needs_grad(iv);
        std::span<double> gq, gk, gv;
        if (need_q) gq = t.grad(iq);
        if (need_k) gk = t.grad(ik);
        if (need_v) gv = t.grad(iv);
        std::vector<double> dp(n * n);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * d;
          const double* ph = probs->data() + h * n * n;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t c = 0; c < d; ++c) acc += go[i * e + off + c] * vv[j * e + off + c];
              dp[i * n + j] = acc;
            }
          }
          if (need_v) {
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t j = 0; j < n; ++j) {
                const double p = ph[i * n + j];
                for (std::size_t c = 0; c < d; ++c) gv[j * e + off + c] += p * go[i * e + off + c];
              }
            }
          }
          // dp becomes the score gradient in place
          for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * ph[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
              dp[i * n + j] = ph[i * n + j] * (dp[i * n + j] - dot) * inv_sqrt_d;
            }
          }
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double s = dp[i * n + j];
              if (s == 0.0) continue;
              for (std::size_t c = 0; c < d; ++c) {
                if (need_q) gq[i * e + off + c] += s * kv[j * e + off + c];
                if (need_k) gk[j * e + off + c] += s * qv[i * e + off + c];
              }
            }
          }
        }
      },
      "self_attention");
}

Var max_pool_over_positions(Var a) {
  const std::size_t n = a.rows(), m = a.cols();
  require(n > 0, "max_pool_over_positions", "no positions");
  auto x = a.values();
  std::vector<double> out(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(m));
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(m, 0);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (x[i * m + j] > out[j]) {
        out[j] = x[i * m + j];
        (*argmax)[j] = static_cast<std::uint32_t>(i);
      }
    }
  }
  const auto ia = a.id();
  return a.tape().push(1, m, std::move(out), {a},
                       [ia, m, argmax](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         auto gx = t.grad(ia);
                         for (std::size_t j = 0; j < m; ++j) gx[(*argmax)[j] * m + j] += g[j];
                       },
                       "max_pool_over_positions");
}

Var kl_div_rows(Var target_logits, Var input_logits) {
  same_shape(target_logits, input_logits, "kl_div_rows");
  const std::size_t n = target_logits.rows(), m = target_logits.cols();
  auto tv = target_logits.values();
  auto sv = input_logits.values();
  auto log_pt = std::make_shared<std::vector<double>>(n * m);
  auto log_ps = std::make_shared<std::vector<double>>(n * m);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(tv.data() + i * m, log_pt->data() + i * m, m);
    log_softmax_row(sv.data() + i * m, log_ps->data() + i * m, m);
    double kl = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double lt = (*log_pt)[i * m + j];
      kl += std::exp(lt) * (lt - (*log_ps)[i * m + j]);
    }
    out[i] = kl;
  }
  const auto it = target_logits.id(), is = input_logits.id();
  return target_logits.tape().push(
      n, 1, std::move(out), {target_logits, input_logits},
      [it, is, n, m, log_pt, log_ps](Tape& t, std::uint32_t self) {
        auto g = t.grad(self);
        auto kl = t.value(self);
        const bool need_t = t.needs_grad(it), need_s = t.needs_grad(is);
        std::span<double> gt, gs;
        if (need_t) gt = t.grad(it);
        if (need_s) gs = t.grad(is);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            const double lt = (*log_pt)[i * m + j];
            const double ls = (*log_ps)[i * m + j];
            const double pt = std::exp(lt);
            if (need_t) gt[i * m + j] += g[i] * pt * ((lt - ls) - kl[i]);
            if (need_s) gs[i * m + j] += g[i] * (std::exp(ls) - pt);
          }
        }
      },
      "kl_div_rows");
}

Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
  const std::size_t m = table.cols();
  auto x = table.values();
  std::vector<double> out(ids.size() * m);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < table.rows(), "gather_rows", "row id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(ids[i] * m), m, out.begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  const auto ia = table.id();
  auto rows = std::make_shared<std::vector<std::uint32_t>>(ids.begin(), ids.end());
  return table.tape().push(ids.size(), m, std::move(out), {table},
                           [ia, m, rows](Tape& t, std::uint32_t self) {
                             auto g = t.grad(self);
                             auto gt = t.grad(ia);
                             for (std::size_t i = 0; i < rows->size(); ++i) {
                               const std::size_t r = (*rows)[i];
                               for (std::size_t j = 0; j < m; ++j) gt[r * m + j] += g[i * m + j];
                             }
                           },
                           "gather_rows");
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "nothing to concatenate");
  Tape& tape = parts[0].tape();
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  for (const Var& p : parts) {
    require(&p.tape() == &tape, "concat_rows", "inputs live on different tapes");
    require(p.cols() == m, "concat_rows", "column mismatch");
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * m);
  auto ids = std::make_shared<std::vector<std::uint32_t>>();
  bool any_grad = false;
  for (const Var& p : parts) {
    auto v = p.values();
    out.insert(out.end(), v.begin(), v.end());
    ids->push_back(p.id());
    any_grad = any_grad || p.needs_grad();
  }
  // push() derives needs_grad from the listed inputs; route through the
  // first input that needs a gradient, if any.
  Var gate = parts[0];
  if (any_grad) {
    for (const Var& p : parts) {
      if (p.needs_grad()) {
        gate = p;
        break;
      }
    }
  }
  return tape.push(n, m, std::move(out), {gate},
                   [ids, m](Tape& t, std::uint32_t self) {
                     auto g = t.grad(self);
                     std::size_t offset = 0;
                     for (auto id : *ids) {
                       const std::size_t len = t.rows(id) * m;
                       if (t.needs_grad(id)) {
                         auto gi = t.grad(id);
                         for (std::size_t j = 0; j < len; ++j) gi[j] += g[offset + j];
                       }
                       offset += len;
                     }
                   },
                   "concat_rows");
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  require(start + count <= a.rows(), "slice_rows", "range beyond " + shape_str(a));
  const std::size_t m = a.cols();
  auto x = a.values();
  std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(start * m),
                          x.begin() + static_cast<std::ptrdiff_t>((start + count) * m));
  const auto ia = a.id();
  return a.tape().push(count, m, std::move(out), {a},
                       [ia, start, m](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         auto ga = t.grad(ia);
                         for (std::size_t j = 0; j < g.size(); ++j) ga[start * m + j] += g[j];
                       },
                       "slice_rows");
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  const auto ia = a.id();
  return a.tape().push(1, 1, {acc}, {a},
                       [ia](Tape& t, std::uint32_t self) {
                         const double g = t.grad(self)[0];
                         for (double& x : t.grad(ia)) x += g;
                       },
                       "sum");
}

Var mean_rows(Var a) {
  const std::size_t n = a.rows(), m = a.cols();
  require(n > 0, "mean_rows", "no rows");
  auto x = a.values();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[j] += x[i * m + j];
  }
  for (double& v : out) v /= static_cast<double>(n);
  const auto ia = a.id();
  return a.tape().push(1, m, std::move(out), {a},
                       [ia, n, m](Tape& t, std::uint32_t self) {
                         auto g = t.grad(self);
                         auto ga = t.grad(ia);
                         const double inv = 1.0 / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j] * inv;
                         }
                       },
                       "mean_rows");
}

Var element(Var a, std::size_t r, std::size_t c) {
  require(r < a.rows() && c < a.cols(), "element", "index outside " + shape_str(a));
  const std::size_t pos = r * a.cols() + c;
  const auto ia = a.id();
  return a.tape().push(1, 1, {a.values()[pos]}, {a},
                       [ia, pos](Tape& t, std::uint32_t self) { t.grad(ia)[pos] += t.grad(self)[0]; },
                       "element");
}

// ---------------------------------------------------------------- checkpoint IO

namespace {
constexpr char kTensorMagic[9] = "UNFRTENS";
}

void write_tensors(std::ostream& out, const nlohmann::json& meta, const NamedTensors& tensors) {
  detail::write_magic(out, kTensorMagic, kTensorFileVersion);
  detail::write_string(out, meta.dump());
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_string(out, name);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->shape().size()));
    for (auto dim : t->shape()) detail::write_le<std::uint64_t>(out, dim);
    out.write(reinterpret_cast<const char*>(t->data().data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
}

TensorFile read_tensors(std::istream& in, const std::string& what) {
  const auto version = detail::read_magic(in, kTensorMagic, what);
  if (version != kTensorFileVersion) {
    throw std::runtime_error(what + ": unsupported tensor file version " + std::to_string(version));
  }
  TensorFile file;
  file.meta = nlohmann::json::parse(detail::read_string(in));
  const auto count = detail::read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = detail::read_string(in);
    const auto ndim = detail::read_le<std::uint32_t>(in);
    if (ndim == 0 || ndim > 2) throw std::runtime_error(what + ": bad rank for tensor " + name);
    std::vector<std::size_t> shape(ndim);
    for (auto& dim : shape) dim = static_cast<std::size_t>(detail::read_le<std::uint64_t>(in));
    std::vector<double> data(product(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw std::runtime_error(what + ": truncated tensor " + name);
    }
    file.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return file;
}

void save_tensors(const std::filesystem::path& path, const nlohmann::json& meta,
                  const NamedTensors& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    write_tensors(out, meta, tensors);
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorFile load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_tensors(in, path.string());
}

}  // namespace unifier::nd
