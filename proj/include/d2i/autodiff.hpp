#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace d2i::ad {

/// All tensors in the engine are row-major double matrices; a batch of sets
/// is stored as (batch * set_size) rows so every dense op stays a GEMM.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A trainable tensor. Gradients accumulate into `grad` on backward.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Tape for one forward/backward pass. Not thread-safe; build one per thread.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  Var constant(Matrix value, const char* op = "constant");
  Var param(Parameter& p);

  /// Records an op result. `backward` reads this node's grad and accumulates
  /// into its inputs via accumulate().
  Var record(Matrix value, bool requires_grad, BackwardFn backward, const char* op);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and runs the tape in reverse.
  void backward(Var out);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return graph->value(*this); }
inline const Matrix& Var::grad() const { return graph->grad(*this); }

// Core ops. Each throws std::invalid_argument on shape mismatch and
// NonFiniteError (naming the op) if the forward result is not finite.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// a (n x c) + broadcast row vector bias (1 x c).
Var add_row(Var a, Var bias);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
/// Softmax along the last axis (per row).
Var softmax(Var a);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
/// Row-major reinterpretation to rows x cols.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
/// Stacks `times` copies of a vertically.
Var tile_rows(Var a, Eigen::Index times);
/// Per-row layer normalization with learned gain and bias (both 1 x c).
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
/// Multi-head scaled dot-product attention over consecutive blocks of
/// `set_size` rows. q, k, v are (batch * set_size) x c with c divisible by
/// `heads`; each block attends only within itself.
Var scaled_dot_attention(Var q, Var k, Var v, Eigen::Index heads, Eigen::Index set_size);
Var sum(Var a);
/// 0.5 * ||a - target||^2
Var mse_loss(Var a, const Matrix& target);

/// Cross-entropy options: the weight on disagreeing positions and the
/// probability clamp.
struct LossSpec {
  double lambda = 2.0;
  double epsilon = 1e-7;
  void validate() const;
};

/// Negative log-likelihood summed over all entries, probabilities clamped to
/// [eps, 1 - eps].
Var ce_loss(Var probs, const Matrix& target, double epsilon = 1e-7);
/// Entries where noisy != target are weighted by spec.lambda, the rest by 1.
Var weighted_ce_loss(Var probs, const Matrix& target, const Matrix& noisy, const LossSpec& spec);

/// Value-only versions sharing the same summation order as the graph ops.
double ce_loss_value(const Matrix& probs, const Matrix& target, double epsilon = 1e-7);
double weighted_ce_loss_value(const Matrix& probs, const Matrix& target, const Matrix& noisy,
                              const LossSpec& spec);
/// d(loss)/d(prob) for a single clamped CE term.
double ce_term_grad(double prob, double target, double epsilon);
double ce_term(double prob, double target, double epsilon);

struct AdamWConfig {
  double lr = 3e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
 public:
  explicit AdamW(std::vector<Parameter*> params, AdamWConfig cfg = {});

  /// Applies one update from the parameters' accumulated gradients.
  void step();
  void zero_grad();
  std::int64_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t step_ = 0;
};

using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probed = 0;
  std::string worst;  // "<param>[index]"
};

/// Compares backprop gradients to central differences on up to `max_probes`
/// coordinates (sampled uniformly without replacement when there are more).
/// Error per coordinate: |a - n| / max(s, |a| + |n|) with s = max(1e-8, 1e-5 * max(1, |loss|)).
GradCheckResult grad_check(std::span<Parameter* const> params, const LossBuilder& loss,
                           double h = 1e-5, std::size_t max_probes = 200, std::uint64_t seed = 0);

}  // namespace d2i::ad
