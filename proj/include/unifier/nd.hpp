#pragma once

// Small reverse-mode differentiation kernel over row-major f64 matrices.
//
// Values live on a Tape. Every op appends a node holding its output and, when
// any input needs a gradient, a closure that pushes the output gradient back
// to the inputs. Parameters are Tensors owned outside the tape; a tracked
// parameter node reads the tensor in place and accumulates into its grad.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace unifier::nd {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0, bool requires_grad = true);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = true);

  [[nodiscard]] const std::vector<std::size_t>& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  /// Matrix view: a 1-D tensor of length n is a 1 x n row.
  [[nodiscard]] std::size_t rows() const;
  [[nodiscard]] std::size_t cols() const;

  [[nodiscard]] std::span<const double> data() const { return data_; }
  [[nodiscard]] std::span<double> mutable_data() { return data_; }
  [[nodiscard]] std::span<const double> grad() const { return grad_; }
  [[nodiscard]] std::span<double> mutable_grad() { return grad_; }
  [[nodiscard]] bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  void zero_grad();

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = true;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives and
/// has not been reset.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::uint32_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] std::size_t rows() const;
  [[nodiscard]] std::size_t cols() const;
  [[nodiscard]] std::span<const double> values() const;
  [[nodiscard]] double at(std::size_t r, std::size_t c) const;
  /// Value of a 1 x 1 node.
  [[nodiscard]] double item() const;
  [[nodiscard]] bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  /// A non-recording tape evaluates ops without storing backward rules.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool recording() const { return record_; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Gradient-tracked view of a parameter (tracked only when the tape records
  /// and the tensor requires grad). Repeated calls return the same node.
  Var param(Tensor& t);
  /// The same values with no gradient path to the tensor.
  Var frozen(const Tensor& t);
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> values);

  /// Reverse sweep from a 1 x 1 loss; gradients accumulate into the grad
  /// buffers of tracked parameters. Throws std::logic_error when called a
  /// second time before reset() or on a non-scalar loss.
  void backward(Var loss);
  void reset();

  // Op plumbing.
  Var push(std::size_t rows, std::size_t cols, std::vector<double> value,
           std::initializer_list<Var> inputs, BackwardFn fn, const char* op);
  [[nodiscard]] std::span<const double> value(std::uint32_t id) const;
  [[nodiscard]] std::size_t rows(std::uint32_t id) const { return nodes_[id].rows; }
  [[nodiscard]] std::size_t cols(std::uint32_t id) const { return nodes_[id].cols; }
  [[nodiscard]] bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
  /// Output gradient of a node (allocated on first use).
  std::span<double> grad(std::uint32_t id);

 private:
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> owned;
    const double* external = nullptr;
    Tensor* leaf = nullptr;
    std::vector<double> grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::map<const Tensor*, std::uint32_t> tracked_;
  std::map<const Tensor*, std::uint32_t> frozen_;
};

// Ops. Shapes are (rows, cols); shape errors throw std::invalid_argument and
// non-finite outputs throw std::domain_error.

Var matmul(Var a, Var b);     // (n x k)(k x m)
Var matmul_nt(Var a, Var b);  // (n x k)(m x k)^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);          // elementwise
Var add_row(Var a, Var bias);   // bias is 1 x cols, broadcast over rows
Var scale(Var a, double c);
Var scale_by(Var a, Var s);     // s is 1 x 1
Var add_scalar(Var a, double c);
Var relu(Var a);
Var gelu(Var a);                // exact erf form
Var tanh(Var a);
Var sigmoid(Var a);
Var log1p(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Per-row normalisation to zero mean and unit variance, then gamma * x + beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-12);
/// Scaled dot-product attention over all positions with `heads` heads.
Var self_attention(Var q, Var k, Var v, std::size_t heads);
/// Column maxima of an n x m matrix. On ties the gradient goes to the first
/// maximal row.
Var max_pool_over_positions(Var a);
/// rows x 1 column of KL(softmax(target_i) || softmax(input_i)) per row.
Var kl_div_rows(Var target_logits, Var input_logits);
Var gather_rows(Var table, std::span<const std::uint32_t> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var sum(Var a);
Var mean_rows(Var a);           // 1 x cols
Var element(Var a, std::size_t r, std::size_t c);

// Checkpoints: named tensors plus a JSON metadata blob, little-endian binary
// behind a versioned magic header.

struct TensorFile {
  nlohmann::json meta;
  std::map<std::string, Tensor> tensors;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

void write_tensors(std::ostream& out, const nlohmann::json& meta, const NamedTensors& tensors);
TensorFile read_tensors(std::istream& in, const std::string& what);
void save_tensors(const std::filesystem::path& path, const nlohmann::json& meta,
                  const NamedTensors& tensors);
TensorFile load_tensors(const std::filesystem::path& path);

}  // namespace unifier::nd
