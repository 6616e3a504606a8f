#include "d2i/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "d2i/rng.hpp"

namespace d2i::ad {
namespace {

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

bool needs(Var v) { return v.graph->requires_grad(v); }

/// Grad of `out`, or nullptr if nothing flowed into it.
const Matrix* upstream(Graph& g, Var out) {
  const Matrix& gr = g.grad(out);
  return gr.size() == 0 ? nullptr : &gr;
}

}  // namespace

Var Graph::constant(Matrix value, const char* op) {
  return record(std::move(value), false, nullptr, op);
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::record(Matrix value, bool requires_grad, BackwardFn backward, const char* op) {
  if (!value.allFinite()) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Graph::backward(Var out) {
  Node& root = nodes_[out.id];
  if (root.value.size() != 1) throw std::invalid_argument("backward: output must be a 1x1 scalar");
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this);
    if (n.param) {
      if (!n.grad.allFinite()) throw NonFiniteError("non-finite gradient for parameter " + n.param->name);
      if (n.param->grad.size() == 0) n.param->grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.param->grad += n.grad;
    }
  }
}

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul", shape(a.value()) + " * " + shape(b.value()));
  Graph& g = *a.graph;
  Matrix out = a.value() * b.value();
  return g.record(std::move(out), needs(a) || needs(b),
                  [a, b, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    if (gr.requires_grad(a)) gr.accumulate(a, (*up) * b.value().transpose());
                    if (gr.requires_grad(b)) gr.accumulate(b, a.value().transpose() * (*up));
                  },
                  "matmul");
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add", shape(a.value()) + " + " + shape(b.value()));
  Graph& g = *a.graph;
  return g.record(a.value() + b.value(), needs(a) || needs(b),
                  [a, b, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    gr.accumulate(a, *up);
                    gr.accumulate(b, *up);
                  },
                  "add");
}

Var add_row(Var a, Var bias) {
  require(bias.rows() == 1 && bias.cols() == a.cols(), "add_row",
          shape(a.value()) + " + bias " + shape(bias.value()));
  Graph& g = *a.graph;
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return g.record(std::move(out), needs(a) || needs(bias),
                  [a, bias, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    gr.accumulate(a, *up);
                    if (gr.requires_grad(bias)) gr.accumulate(bias, up->colwise().sum());
                  },
                  "add_row");
}

Var mul(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", shape(a.value()) + " .* " + shape(b.value()));
  Graph& g = *a.graph;
  return g.record(a.value().cwiseProduct(b.value()), needs(a) || needs(b),
                  [a, b, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    if (gr.requires_grad(a)) gr.accumulate(a, up->cwiseProduct(b.value()));
                    if (gr.requires_grad(b)) gr.accumulate(b, up->cwiseProduct(a.value()));
                  },
                  "mul");
}

Var scale(Var a, double s) {
  Graph& g = *a.graph;
  return g.record(a.value() * s, needs(a),
                  [a, s, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (up) gr.accumulate(a, (*up) * s);
                  },
                  "scale");
}

Var relu(Var a) {
  Graph& g = *a.graph;
  return g.record(a.value().cwiseMax(0.0), needs(a),
                  [a, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    gr.accumulate(a, (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(*up));
                  },
                  "relu");
}

Var tanh(Var a) {
  Graph& g = *a.graph;
  const std::size_t id = g.size();
  return g.record(a.value().array().tanh().matrix(), needs(a),
                  [a, id](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    const auto& y = gr.value(Var{&gr, id}).array();
                    gr.accumulate(a, (up->array() * (1.0 - y * y)).matrix());
                  },
                  "tanh");
}

Var sigmoid(Var a) {
  Graph& g = *a.graph;
  const std::size_t id = g.size();
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return g.record(std::move(out), needs(a),
                  [a, id](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    const auto& y = gr.value(Var{&gr, id}).array();
                    gr.accumulate(a, (up->array() * y * (1.0 - y)).matrix());
                  },
                  "sigmoid");
}

namespace {
Matrix softmax_rows(const Matrix& x) {
  Matrix out = x.colwise() - x.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  out = out.array().colwise() / out.rowwise().sum().array();
  return out;
}

/// Given softmax output y and upstream dy, returns dx row-wise.
Matrix softmax_backward(const Matrix& y, const Matrix& dy) {
  const Eigen::VectorXd dot = y.cwiseProduct(dy).rowwise().sum();
  return y.cwiseProduct(dy.colwise() - dot);
}
}  // namespace

Var softmax(Var a) {
  Graph& g = *a.graph;
  const std::size_t id = g.size();
  return g.record(softmax_rows(a.value()), needs(a),
                  [a, id](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (up) gr.accumulate(a, softmax_backward(gr.value(Var{&gr, id}), *up));
                  },
                  "softmax");
}

Var concat_cols(Var a, Var b) {
  require(a.rows() == b.rows(), "concat_cols", shape(a.value()) + " | " + shape(b.value()));
  Graph& g = *a.graph;
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  const Eigen::Index cb = b.cols();
  return g.record(std::move(out), needs(a) || needs(b),
                  [a, b, ca, cb, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    if (gr.requires_grad(a)) gr.accumulate(a, up->leftCols(ca));
                    if (gr.requires_grad(b)) gr.accumulate(b, up->rightCols(cb));
                  },
                  "concat_cols");
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols", "column range out of bounds");
  Graph& g = *a.graph;
  return g.record(a.value().middleCols(begin, count), needs(a),
                  [a, begin, count, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    Matrix full = Matrix::Zero(a.rows(), a.cols());
                    full.middleCols(begin, count) = *up;
                    gr.accumulate(a, full);
                  },
                  "slice_cols");
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), "reshape", shape(a.value()) + " -> " + std::to_string(rows) + "x" + std::to_string(cols));
  Graph& g = *a.graph;
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return g.record(std::move(out), needs(a),
                  [a, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    gr.accumulate(a, Eigen::Map<const Matrix>(up->data(), a.rows(), a.cols()));
                  },
                  "reshape");
}

Var tile_rows(Var a, Eigen::Index times) {
  require(times >= 1, "tile_rows", "times must be >= 1");
  Graph& g = *a.graph;
  const Eigen::Index r = a.rows();
  Matrix out = a.value().replicate(times, 1);
  return g.record(std::move(out), needs(a),
                  [a, r, times, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    Matrix acc = Matrix::Zero(r, a.cols());
                    for (Eigen::Index t = 0; t < times; ++t) acc += up->middleRows(t * r, r);
                    gr.accumulate(a, acc);
                  },
                  "tile_rows");
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  require(gain.rows() == 1 && gain.cols() == a.cols() && bias.rows() == 1 && bias.cols() == a.cols(),
          "layer_norm", "gain/bias must be 1 x " + std::to_string(a.cols()));
  Graph& g = *a.graph;
  const auto c = static_cast<double>(a.cols());
  const Eigen::VectorXd mean = a.value().rowwise().mean();
  Matrix centered = a.value().colwise() - mean;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / c) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return g.record(std::move(out), needs(a) || needs(gain) || needs(bias),
                  [a, gain, bias, xhat = std::move(xhat), inv_std, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    if (gr.requires_grad(gain)) gr.accumulate(gain, up->cwiseProduct(xhat).colwise().sum());
                    if (gr.requires_grad(bias)) gr.accumulate(bias, up->colwise().sum());
                    if (!gr.requires_grad(a)) return;
                    const Matrix dxhat = up->array().rowwise() * gain.value().row(0).array();
                    const Eigen::VectorXd m1 = dxhat.rowwise().mean();
                    const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                    Matrix dx = dxhat;
                    dx.colwise() -= m1;
                    dx -= (xhat.array().colwise() * m2.array()).matrix();
                    dx = dx.array().colwise() * inv_std.array();
                    gr.accumulate(a, dx);
                  },
                  "layer_norm");
}

Var scaled_dot_attention(Var q, Var k, Var v, Eigen::Index heads, Eigen::Index set_size) {
  const char* op = "scaled_dot_attention";
  require(q.rows() == k.rows() && q.rows() == v.rows(), op, "q, k, v row counts differ");
  require(q.cols() == k.cols() && q.cols() == v.cols(), op, "q, k, v widths differ");
  require(heads >= 1 && q.cols() % heads == 0, op, "width " + std::to_string(q.cols()) + " not divisible by heads");
  require(set_size >= 1 && q.rows() % set_size == 0, op, "rows not a multiple of set_size");
  Graph& g = *q.graph;
  const Eigen::Index blocks = q.rows() / set_size;
  const Eigen::Index dh = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Matrix> attn(static_cast<std::size_t>(blocks * heads));
  Matrix out(q.rows(), q.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto Q = q.value().block(b * set_size, h * dh, set_size, dh);
      const auto K = k.value().block(b * set_size, h * dh, set_size, dh);
      const auto V = v.value().block(b * set_size, h * dh, set_size, dh);
      Matrix& A = attn[static_cast<std::size_t>(b * heads + h)];
      A = softmax_rows((Q * K.transpose()) * inv_sqrt);
      out.block(b * set_size, h * dh, set_size, dh).noalias() = A * V;
    }
  }
  return g.record(std::move(out), needs(q) || needs(k) || needs(v),
                  [q, k, v, heads, set_size, blocks, dh, inv_sqrt, attn = std::move(attn), id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    Matrix dq = Matrix::Zero(q.rows(), q.cols());
                    Matrix dk = Matrix::Zero(k.rows(), k.cols());
                    Matrix dv = Matrix::Zero(v.rows(), v.cols());
                    for (Eigen::Index b = 0; b < blocks; ++b) {
                      for (Eigen::Index h = 0; h < heads; ++h) {
                        const Matrix& A = attn[static_cast<std::size_t>(b * heads + h)];
                        const auto Q = q.value().block(b * set_size, h * dh, set_size, dh);
                        const auto K = k.value().block(b * set_size, h * dh, set_size, dh);
                        const auto V = v.value().block(b * set_size, h * dh, set_size, dh);
                        const auto dO = up->block(b * set_size, h * dh, set_size, dh);
                        dv.block(b * set_size, h * dh, set_size, dh).noalias() = A.transpose() * dO;
                        const Matrix dA = dO * V.transpose();
                        const Matrix dS = softmax_backward(A, dA) * inv_sqrt;
                        dq.block(b * set_size, h * dh, set_size, dh).noalias() = dS * K;
                        dk.block(b * set_size, h * dh, set_size, dh).noalias() = dS.transpose() * Q;
                      }
                    }
                    gr.accumulate(q, dq);
                    gr.accumulate(k, dk);
                    gr.accumulate(v, dv);
                  },
                  op);
}

Var sum(Var a) {
  Graph& g = *a.graph;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), needs(a),
                  [a, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (up) gr.accumulate(a, Matrix::Constant(a.rows(), a.cols(), (*up)(0, 0)));
                  },
                  "sum");
}

Var mse_loss(Var a, const Matrix& target) {
  require(a.rows() == target.rows() && a.cols() == target.cols(), "mse_loss", "shape mismatch");
  Graph& g = *a.graph;
  Matrix diff = a.value() - target;
  Matrix out(1, 1);
  out(0, 0) = 0.5 * diff.squaredNorm();
  return g.record(std::move(out), needs(a),
                  [a, diff = std::move(diff), id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (up) gr.accumulate(a, diff * (*up)(0, 0));
                  },
                  "mse_loss");
}

// ---------------------------------------------------------------------------
// Losses

void LossSpec::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("LossSpec: lambda must be > 0");
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw std::invalid_argument("LossSpec: epsilon must lie in (0, 0.5)");
}

double ce_term(double prob, double target, double epsilon) {
  const double p = std::clamp(prob, epsilon, 1.0 - epsilon);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

double ce_term_grad(double prob, double target, double epsilon) {
  if (prob < epsilon || prob > 1.0 - epsilon) return 0.0;
  return -target / prob + (1.0 - target) / (1.0 - prob);
}

namespace {

void check_loss_shapes(const Matrix& probs, const Matrix& target, const char* op) {
  require(probs.rows() == target.rows() && probs.cols() == target.cols(), op,
          "probs " + shape(probs) + " vs target " + shape(target));
}

Matrix ce_weights(const Matrix& target, const Matrix& noisy, double lambda) {
  return (noisy.array() != target.array()).select(Matrix::Constant(target.rows(), target.cols(), lambda),
                                                  Matrix::Ones(target.rows(), target.cols()));
}

/// Shared kernel: sum_ij w_ij * ce(p_ij, t_ij) in row-major order.
double weighted_sum(const Matrix& probs, const Matrix& target, const Matrix* weights, double eps) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const double w = weights ? (*weights)(i, j) : 1.0;
      total += w * ce_term(probs(i, j), target(i, j), eps);
    }
  return total;
}

Var ce_node(Var probs, const Matrix& target, Matrix weights, double eps, const char* op) {
  Graph& g = *probs.graph;
  Matrix out(1, 1);
  out(0, 0) = weighted_sum(probs.value(), target, &weights, eps);
  return g.record(std::move(out), needs(probs),
                  [probs, target, weights = std::move(weights), eps, id = g.size()](Graph& gr) {
                    const Matrix* up = upstream(gr, Var{&gr, id});
                    if (!up) return;
                    Matrix d(probs.rows(), probs.cols());
                    for (Eigen::Index i = 0; i < d.rows(); ++i)
                      for (Eigen::Index j = 0; j < d.cols(); ++j)
                        d(i, j) = weights(i, j) * ce_term_grad(probs.value()(i, j), target(i, j), eps);
                    gr.accumulate(probs, d * (*up)(0, 0));
                  },
                  op);
}

}  // namespace

double ce_loss_value(const Matrix& probs, const Matrix& target, double epsilon) {
  check_loss_shapes(probs, target, "ce_loss");
  const Matrix ones = Matrix::Ones(target.rows(), target.cols());
  return weighted_sum(probs, target, &ones, epsilon);
}

double weighted_ce_loss_value(const Matrix& probs, const Matrix& target, const Matrix& noisy,
                              const LossSpec& spec) {
  spec.validate();
  check_loss_shapes(probs, target, "weighted_ce_loss");
  check_loss_shapes(noisy, target, "weighted_ce_loss");
  const Matrix w = ce_weights(target, noisy, spec.lambda);
  return weighted_sum(probs, target, &w, spec.epsilon);
}

Var ce_loss(Var probs, const Matrix& target, double epsilon) {
  check_loss_shapes(probs.value(), target, "ce_loss");
  return ce_node(probs, target, Matrix::Ones(target.rows(), target.cols()), epsilon, "ce_loss");
}

Var weighted_ce_loss(Var probs, const Matrix& target, const Matrix& noisy, const LossSpec& spec) {
  spec.validate();
  check_loss_shapes(probs.value(), target, "weighted_ce_loss");
  check_loss_shapes(noisy, target, "weighted_ce_loss");
  return ce_node(probs, target, ce_weights(target, noisy, spec.lambda), spec.epsilon, "weighted_ce_loss");
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void AdamW::step() {
  for (Parameter* p : params_)
    if (p->grad.size() != 0 && !p->grad.allFinite())
      throw NonFiniteError("AdamW: non-finite gradient for " + p->name);
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.size() == 0) p.zero_grad();
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    const Matrix update = (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.eps);
    p.value -= cfg_.lr * (update + cfg_.weight_decay * p.value);
  }
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(std::span<Parameter* const> params, const LossBuilder& loss, double h,
                           std::size_t max_probes, std::uint64_t seed) {
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    Var out = loss(g);
    g.backward(out);
  }

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    for (Eigen::Index j = 0; j < params[pi]->size(); ++j) coords.emplace_back(pi, j);
  if (coords.size() > max_probes) {
    CounterRng rng(seed, 0x9c);
    // Partial Fisher-Yates: first max_probes entries become the sample.
    for (std::size_t i = 0; i < max_probes; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_probes);
  }

  auto eval = [&] {
    Graph g;
    return loss(g).value()(0, 0);
  };
  // Coordinates whose gradient is tiny next to the loss (e.g. attention key
  // biases, which softmax ignores) are compared on an absolute scale: the
  // central difference there is pure rounding noise.
  const double abs_floor = std::max(1e-8, 1e-5 * std::max(1.0, std::abs(eval())));

  GradCheckResult result;
  for (const auto& [pi, j] : coords) {
    Parameter& p = *params[pi];
    double* slot = p.value.data() + j;
    const double saved = *slot;
    *slot = saved + h;
    const double up = eval();
    *slot = saved - h;
    const double down = eval();
    *slot = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p.grad.data()[j];
    const double err = std::abs(analytic - numeric) / std::max(abs_floor, std::abs(analytic) + std::abs(numeric));
    if (result.worst.empty() || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = p.name + "[" + std::to_string(j) + "]";
    }
    ++result.probed;
  }
  return result;
}

}  // namespace d2i::ad
