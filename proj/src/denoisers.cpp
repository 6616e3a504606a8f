#include "d2i/denoisers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "d2i/data.hpp"

namespace d2i {

using ad::Graph;
using ad::Matrix;
using ad::Parameter;
using ad::Var;

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::MLP: return "mlp";
    case Arch::DAE: return "dae";
    case Arch::SetAttention: return "set_attention";
  }
  return "unknown";
}

Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::MLP;
  if (s == "dae") return Arch::DAE;
  if (s == "set_attention" || s == "set") return Arch::SetAttention;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected mlp, dae or set_attention)");
}

void Hyper::validate() const {
  if (dims == 0) throw std::invalid_argument("Hyper: dims must be >= 1");
  if (depth == 0) throw std::invalid_argument("Hyper: depth must be >= 1");
  if (arch == Arch::SetAttention) {
    if (heads == 0 || model_dim % heads != 0)
      throw std::invalid_argument("Hyper: model_dim must be divisible by heads");
  } else if (width == 0 || (arch == Arch::DAE && latent == 0)) {
    throw std::invalid_argument("Hyper: width and latent must be >= 1");
  }
}

void TrainConfig::validate() const {
  if (!(mask_prob >= 0.0 && mask_prob < 1.0)) throw std::invalid_argument("TrainConfig: mask_prob must lie in [0,1)");
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lambda > 0.0)) throw std::invalid_argument("TrainConfig: lambda must be > 0");
  if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("TrainConfig: bad optimizer settings");
}

// ---------------------------------------------------------------------------
// Construction

void DenoiserModel::add(std::string name, Matrix value) {
  index_[name] = params_.size();
  params_.emplace_back(std::move(name), std::move(value));
}

void DenoiserModel::add_linear(const std::string& name, std::size_t in, std::size_t out, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = (2.0 * rng.uniform() - 1.0) * bound;
  add(name + ".w", std::move(w));
  Matrix b(1, static_cast<Eigen::Index>(out));
  for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = (2.0 * rng.uniform() - 1.0) * bound;
  add(name + ".b", std::move(b));
}

void DenoiserModel::add_layer_norm(const std::string& name, std::size_t width) {
  add(name + ".g", Matrix::Ones(1, static_cast<Eigen::Index>(width)));
  add(name + ".b", Matrix::Zero(1, static_cast<Eigen::Index>(width)));
}

DenoiserModel DenoiserModel::create(const Hyper& hyper, std::uint64_t seed) {
  hyper.validate();
  DenoiserModel m;
  m.hyper_ = hyper;
  CounterRng rng(seed, 0x1417);
  const std::size_t T = hyper.dims;
  switch (hyper.arch) {
    case Arch::MLP: {
      m.add_linear("in", T, hyper.width, rng);
      for (std::size_t l = 1; l < hyper.depth; ++l) m.add_linear("hidden" + std::to_string(l), hyper.width, hyper.width, rng);
      m.add_linear("out", hyper.width, T, rng);
      m.head_ = "out";
      break;
    }
    case Arch::DAE: {
      m.add_linear("enc0", T, hyper.width, rng);
      for (std::size_t l = 1; l < hyper.depth; ++l) {
        m.add_linear("enc" + std::to_string(l) + ".a", hyper.width, hyper.width, rng);
        m.add_linear("enc" + std::to_string(l) + ".b", hyper.width, hyper.width, rng);
      }
      m.add_linear("to_latent", hyper.width, hyper.latent, rng);
      m.add_linear("from_latent", hyper.latent, hyper.width, rng);
      for (std::size_t l = 1; l < hyper.depth; ++l) {
        m.add_linear("dec" + std::to_string(l) + ".a", hyper.width, hyper.width, rng);
        m.add_linear("dec" + std::to_string(l) + ".b", hyper.width, hyper.width, rng);
      }
      m.add_linear("out", hyper.width, T, rng);
      m.head_ = "out";
      break;
    }
    case Arch::SetAttention: {
      Matrix emb(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(hyper.embed_dim));
      for (Eigen::Index k = 0; k < emb.size(); ++k) emb.data()[k] = rng.normal(0.0, 0.02);
      m.add("embedding", std::move(emb));
      std::size_t in = hyper.embed_dim + 1;
      for (std::size_t l = 0; l < hyper.depth; ++l) {
        const std::string b = "sab" + std::to_string(l);
        m.add_linear(b + ".q", in, hyper.model_dim, rng);
        m.add_linear(b + ".k", in, hyper.model_dim, rng);
        m.add_linear(b + ".v", in, hyper.model_dim, rng);
        m.add_layer_norm(b + ".ln0", hyper.model_dim);
        m.add_linear(b + ".ff", hyper.model_dim, hyper.model_dim, rng);
        m.add_layer_norm(b + ".ln1", hyper.model_dim);
        in = hyper.model_dim;
      }
      m.add_linear("head", in, 1, rng);
      m.head_ = "head";
      break;
    }
  }
  return m;
}

std::vector<Parameter*> DenoiserModel::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

Parameter& DenoiserModel::parameter(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

const Parameter& DenoiserModel::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

std::size_t DenoiserModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

void DenoiserModel::zero_output_head() {
  parameter(head_ + ".w").value.setZero();
  parameter(head_ + ".b").value.setZero();
}

void DenoiserModel::permute_embeddings(const std::vector<std::size_t>& perm) {
  if (hyper_.arch != Arch::SetAttention) throw std::logic_error("permute_embeddings: set model only");
  Parameter& e = parameter("embedding");
  if (perm.size() != static_cast<std::size_t>(e.value.rows())) throw std::invalid_argument("permute_embeddings: bad length");
  Matrix out(e.value.rows(), e.value.cols());
  for (std::size_t k = 0; k < perm.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = e.value.row(static_cast<Eigen::Index>(perm[k]));
  e.value = std::move(out);
}

bool operator==(const DenoiserModel& a, const DenoiserModel& b) {
  if (a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    const auto& pa = a.params_[i];
    const auto& pb = b.params_[i];
    if (pa.name != pb.name || pa.value.rows() != pb.value.rows() || pa.value.cols() != pb.value.cols()) return false;
    if (std::memcmp(pa.value.data(), pb.value.data(), sizeof(double) * static_cast<std::size_t>(pa.value.size())) != 0)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Forward passes

Var DenoiserModel::p(Graph& g, const std::string& name) { return g.param(parameter(name)); }

Var DenoiserModel::linear(Graph& g, Var x, const std::string& name) {
  return ad::add_row(ad::matmul(x, p(g, name + ".w")), p(g, name + ".b"));
}

Var DenoiserModel::forward_mlp(Graph& g, Var x) {
  Var h = ad::relu(linear(g, x, "in"));
  for (std::size_t l = 1; l < hyper_.depth; ++l)
    h = ad::add(h, ad::relu(linear(g, h, "hidden" + std::to_string(l))));
  return ad::sigmoid(linear(g, h, "out"));
}

Var DenoiserModel::forward_dae(Graph& g, Var x) {
  auto residual = [&](Var h, const std::string& name) {
    Var inner = linear(g, ad::relu(linear(g, h, name + ".a")), name + ".b");
    return ad::relu(ad::add(h, inner));
  };
  Var h = ad::relu(linear(g, x, "enc0"));
  for (std::size_t l = 1; l < hyper_.depth; ++l) h = residual(h, "enc" + std::to_string(l));
  Var z = ad::relu(linear(g, h, "to_latent"));
  h = ad::relu(linear(g, z, "from_latent"));
  for (std::size_t l = 1; l < hyper_.depth; ++l) h = residual(h, "dec" + std::to_string(l));
  return ad::sigmoid(linear(g, h, "out"));
}

Var DenoiserModel::attention_block(Graph& g, Var x, const std::string& name, Eigen::Index set_size) {
  Var q = linear(g, x, name + ".q");
  Var k = linear(g, x, name + ".k");
  Var v = linear(g, x, name + ".v");
  Var att = ad::scaled_dot_attention(q, k, v, static_cast<Eigen::Index>(hyper_.heads), set_size);
  Var h = ad::layer_norm(ad::add(q, att), p(g, name + ".ln0.g"), p(g, name + ".ln0.b"));
  Var ff = ad::relu(linear(g, h, name + ".ff"));
  return ad::layer_norm(ad::add(h, ff), p(g, name + ".ln1.g"), p(g, name + ".ln1.b"));
}

Var DenoiserModel::forward_set(Graph& g, Var x) {
  const Eigen::Index n = x.rows();
  const auto T = static_cast<Eigen::Index>(hyper_.dims);
  // (n*T) x (D+1): embedding of dimension t next to the scalar x[i, t].
  Var tokens = ad::concat_cols(ad::tile_rows(p(g, "embedding"), n), ad::reshape(x, n * T, 1));
  for (std::size_t l = 0; l < hyper_.depth; ++l) tokens = attention_block(g, tokens, "sab" + std::to_string(l), T);
  Var logits = linear(g, tokens, "head");
  return ad::sigmoid(ad::reshape(logits, n, T));
}

Var DenoiserModel::forward(Graph& g, const Matrix& x_noisy) {
  if (static_cast<std::size_t>(x_noisy.cols()) != hyper_.dims)
    throw std::invalid_argument("forward: input has " + std::to_string(x_noisy.cols()) + " columns, model expects " +
                                std::to_string(hyper_.dims));
  Var x = g.constant(x_noisy, "input");
  switch (hyper_.arch) {
    case Arch::MLP: return forward_mlp(g, x);
    case Arch::DAE: return forward_dae(g, x);
    case Arch::SetAttention: return forward_set(g, x);
  }
  throw std::logic_error("unreachable");
}

namespace {

Matrix dense_rows(const BinaryMatrix& m, std::size_t begin, std::size_t end) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(end - begin), static_cast<Eigen::Index>(m.cols()));
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m(i, j)) out(static_cast<Eigen::Index>(i - begin), static_cast<Eigen::Index>(j)) = 1.0;
  return out;
}

Matrix dense_select(const BinaryMatrix& m, std::span<const std::size_t> rows) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.cols()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m(rows[r], j)) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = 1.0;
  return out;
}

constexpr std::uint32_t kLaneTrainMask = 30;

}  // namespace

Matrix DenoiserModel::predict(const BinaryMatrix& x_noisy, std::size_t batch) {
  if (x_noisy.cols() != hyper_.dims)
    throw std::invalid_argument("predict: input has " + std::to_string(x_noisy.cols()) + " columns, model expects " +
                                std::to_string(hyper_.dims));
  Matrix out(static_cast<Eigen::Index>(x_noisy.rows()), static_cast<Eigen::Index>(hyper_.dims));
  batch = std::max<std::size_t>(batch, 1);
  for (std::size_t begin = 0; begin < x_noisy.rows(); begin += batch) {
    const std::size_t end = std::min(begin + batch, x_noisy.rows());
    Graph g;
    Var y = forward(g, dense_rows(x_noisy, begin, end));
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = y.value();
  }
  return out;
}

Matrix denoise(DenoiserModel& model, const BinaryMatrix& x_noisy) {
  Matrix out = model.predict(x_noisy);
  for (std::size_t i = 0; i < x_noisy.rows(); ++i)
    for (std::size_t j = 0; j < x_noisy.cols(); ++j)
      if (x_noisy(i, j)) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
  return out;
}

Var denoiser_loss(Graph& g, DenoiserModel& model, const Matrix& noisy, const Matrix& clean, const ad::LossSpec& spec) {
  return ad::weighted_ce_loss(model.forward(g, noisy), clean, noisy, spec);
}

TrainResult train_denoiser(DenoiserModel& model, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (noisy.rows() != clean.rows() || noisy.cols() != clean.cols())
    throw std::invalid_argument("train_denoiser: noisy and clean matrices differ in shape");
  if (noisy.cols() != model.dims()) throw std::invalid_argument("train_denoiser: column count does not match model");
  TrainResult result;
  if (cfg.epochs == 0) return result;
  if (noisy.rows() == 0) throw std::invalid_argument("train_denoiser: need at least one batch");

  ad::AdamW opt(model.parameters(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  const ad::LossSpec spec{.lambda = cfg.lambda, .epsilon = 1e-7};
  std::vector<std::size_t> order(noisy.rows());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffler(cfg.seed, 0x7e000000ull + epoch);
    shuffle_in_place(order, shuffler);
    double total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());
      std::span<const std::size_t> rows(order.data() + begin, end - begin);
      Matrix x = dense_select(noisy, rows);
      const Matrix y = dense_select(clean, rows);
      if (cfg.mask_prob > 0.0) {
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const std::uint64_t stream = (std::uint64_t{epoch} << 32) | rows[r];
          for (Eigen::Index d = 0; d < x.cols(); ++d)
            if (x(static_cast<Eigen::Index>(r), d) != 0.0 &&
                counter_uniform(cfg.seed, stream, static_cast<std::uint32_t>(d), kLaneTrainMask) < cfg.mask_prob)
              x(static_cast<Eigen::Index>(r), d) = 0.0;
        }
      }
      opt.zero_grad();
      Graph g;
      Var loss = ad::scale(denoiser_loss(g, model, x, y, spec), 1.0 / static_cast<double>(rows.size()));
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value))
        throw ad::NonFiniteError("train_denoiser: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                 std::to_string(begin / cfg.batch_size + 1));
      g.backward(loss);
      opt.step();
      total += value * static_cast<double>(rows.size());
    }
    result.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const DenoiserModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const Hyper& h = model.hyper();
  out << "ckpt v1 arch=" << arch_name(h.arch) << " T=" << h.dims << " width=" << h.width << " depth=" << h.depth
      << " latent=" << h.latent << " embed=" << h.embed_dim << " model_dim=" << h.model_dim << " heads=" << h.heads
      << " tensors=" << model.parameter_list().size() << '\n';
  out << std::setprecision(17);
  for (const auto& p : model.parameter_list()) {
    out << p.name << ' ' << p.value.rows() << ' ' << p.value.cols();
    for (Eigen::Index k = 0; k < p.value.size(); ++k) out << ' ' << p.value.data()[k];
    out << '\n';
  }
}

DenoiserModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  static const std::regex header(
      R"(ckpt v1 arch=(\w+) T=(\d+) width=(\d+) depth=(\d+) latent=(\d+) embed=(\d+) model_dim=(\d+) heads=(\d+) tensors=(\d+))");
  std::smatch m;
  if (!std::getline(in, line) || !std::regex_match(line, m, header))
    throw ParseError(path.string() + ": malformed ckpt header", 1);
  Hyper h;
  h.arch = parse_arch(m[1].str());
  h.dims = std::stoul(m[2].str());
  h.width = std::stoul(m[3].str());
  h.depth = std::stoul(m[4].str());
  h.latent = std::stoul(m[5].str());
  h.embed_dim = std::stoul(m[6].str());
  h.model_dim = std::stoul(m[7].str());
  h.heads = std::stoul(m[8].str());
  const std::size_t tensors = std::stoul(m[9].str());
  DenoiserModel model = DenoiserModel::create(h, 0);
  if (tensors != model.parameter_list().size())
    throw ParseError(path.string() + ": tensor count does not match architecture", 1);
  for (std::size_t t = 0; t < tensors; ++t) {
    const std::size_t lineno = t + 2;
    if (!std::getline(in, line)) throw ParseError(path.string() + ": missing tensor record", lineno);
    std::istringstream rec(line);
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    if (!(rec >> name >> rows >> cols)) throw ParseError(path.string() + ": malformed tensor record", lineno);
    Parameter& p = model.parameter(name);
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw ParseError(path.string() + ": shape mismatch for " + name, lineno);
    std::string tok;
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      if (!(rec >> tok)) throw ParseError(path.string() + ": too few values for " + name, lineno);
      p.value.data()[k] = std::strtod(tok.c_str(), nullptr);
    }
    if (rec >> tok) throw ParseError(path.string() + ": too many values for " + name, lineno);
  }
  return model;
}

void save_loss_curve(const TrainResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "epoch,mean_loss\n" << std::setprecision(17);
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) out << e + 1 << ',' << result.epoch_loss[e] << '\n';
}

}  // namespace d2i
