#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace thz {
class Rng;
}

namespace thz::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major array. A 1-D tensor of length n behaves as a 1 x n row,
/// a 0-D tensor holds one value.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> v);
  static Tensor scalar(double x) { return Tensor(Shape{}, std::vector<double>{x}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  /// Throws when the value count differs from the shape product.
  void validate() const;
};

struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;
  bool trainable = true;
};

/// Named parameters in insertion order.
class ParameterSet {
 public:
  /// Adds a tensor initialized uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  Parameter& add(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
  Parameter& add(const std::string& name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::size_t num_values() const;
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  void zero_grad();
  /// All values (or gradients) concatenated in insertion order.
  std::vector<double> flat_values() const;
  std::vector<double> flat_grads() const;
  void set_flat_values(const std::vector<double>& v);

 private:
  std::vector<Parameter> params_;
};

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Records primitive operations in creation order. Inputs always precede
/// their consumers, so a reverse sweep visits each node after all of them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t);
  Var leaf(Tensor t, bool requires_grad = true);
  /// Gradients reaching this node are added to p.grad by backward().
  Var param(Parameter& p);

  /// Seeds d(out)/d(out) = 1 for a one-element `out` and sweeps backwards.
  void backward(Var out);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient of the last backward() target with respect to v (zeros if none reached it).
  std::vector<double> grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Used by the primitives.
  using Backward = std::function<void(Tape&, int self)>;
  Var push(Tensor value, bool needs_grad, Backward bw);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  const std::vector<double>& out_grad(int id) const { return nodes_[id].grad; }
  std::vector<double>& grad_ref(int id);

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

// ----- primitives ----------------------------------------------------------

/// X[n x k] * W[m x k]^T -> [n x m]
Var matmul_nt(Var X, Var W);
/// W[m x k] * x[k] -> [m]
Var matvec(Var W, Var x);
/// Adds b[m] to every row of Y[n x m].
Var add_bias(Var Y, Var b);
/// matmul_nt followed by add_bias.
Var linear(Var X, Var W, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
/// Column-wise concatenation of tensors with equal row counts.
Var concat(const std::vector<Var>& xs);
Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var sigmoid(Var a);
Var log(Var a);
Var exp(Var a);
Var tanh(Var a);
/// Sum or mean of every element, as a 0-D tensor.
Var sum(Var a);
Var mean(Var a);
/// Elementwise maximum; ties send the gradient to `a`.
Var max(Var a, Var b);
/// Softmax over all elements of a 1-D tensor.
Var softmax(Var a);
/// Softmax within each row. Entries with mask 0 get probability 0 (a fully
/// masked row yields zeros).
Var row_softmax(Var X, const std::vector<std::uint8_t>* mask = nullptr);
/// Element i of a tensor as a 0-D tensor.
Var pick(Var a, std::size_t i);
/// Same values, new shape with the same element count.
Var reshape(Var a, Shape s);

// Graph helpers. Row groups are S consecutive rows per node.
/// Rows of H selected by idx; idx < 0 selects a zero row.
Var gather_rows(Var H, const std::vector<int>& idx);
/// Each row of X repeated S times.
Var repeat_rows(Var X, std::size_t S);
Var segment_sum(Var X, std::size_t S);
Var segment_mean(Var X, std::size_t S);
/// Per-group elementwise max; ties send the gradient to the first row.
Var segment_max(Var X, std::size_t S);
/// out_i = sum_s W[i, s] * Z[i*S + s], W is [n x S], Z is [n*S x d].
Var weighted_segment_sum(Var W, Var Z);
/// Multiplies row i of X by s[i]; s has one element per row.
Var row_scale(Var X, Var s);
/// Row-wise dot products as an [n x 1] column.
Var row_dot(Var A, Var B);
/// Rows scaled to unit L2 norm; rows with norm below eps are divided by eps.
Var row_normalize(Var A, double eps = 1e-12);
// Fused neighbor reductions over an index table with S entries per output
// row (idx < 0 is an absent neighbor).
/// out_i = sum_s c[i*S+s] * H[idx[i*S+s]]; c defaults to 1.
Var neighbor_sum(Var H, const std::vector<int>& idx, std::size_t S, const std::vector<double>* coef = nullptr);
/// out_i = elementwise max over s of H[idx[i*S+s]], absent neighbors count as zero rows.
Var neighbor_max(Var H, const std::vector<int>& idx, std::size_t S);
/// out_i = sum_s W[i, s] * H[idx[i*S+s]] with W of shape [n x S].
Var neighbor_weighted_sum(Var W, Var H, const std::vector<int>& idx);
/// out[i, s] = A_i . B[idx[i*S+s]] (0 when absent), shape [n x S].
Var neighbor_dot(Var A, Var B, const std::vector<int>& idx, std::size_t S);

/// sum_a w[a] * xs[a] for a 1-D weight tensor and equally shaped xs.
Var mix(Var w, const std::vector<Var>& xs);

inline constexpr double kProbClamp = 1e-12;

/// sum_i -z_i log s_i - (1 - z_i) log(1 - s_i) with s = sigmoid(y) clamped to
/// [1e-12, 1 - 1e-12]. `z` must have as many entries as `y`.
Var bce_loss(Var y, const Tensor& z);

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares the tape gradient of a scalar function with central differences
/// (f(x + eps) - f(x - eps)) / (2 eps). Relative errors use
/// max(|analytic|, |numeric|, floor) as the denominator.
GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-6,
                           double floor = 1e-8);

/// p <- p - lr * g, elementwise.
void sgd_step(std::vector<double>& params, const std::vector<double>& grads, double lr);
void sgd_step(ParameterSet& params, double lr);
/// Rescales the trainable gradients so their joint L2 norm is at most
/// `max_norm` (no-op when max_norm <= 0). Returns the norm before scaling.
double clip_grad_norm(ParameterSet& params, double max_norm);

inline constexpr int kCheckpointVersion = 1;

nlohmann::json checkpoint_to_json(const ParameterSet& params, const nlohmann::json& meta);
/// Restores parameters and returns the metadata block.
ParameterSet checkpoint_from_json(const nlohmann::json& j, nlohmann::json* meta = nullptr);
void save_checkpoint(const ParameterSet& params, const nlohmann::json& meta, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace thz::ad
