#include "d2i/thresholding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "d2i/data.hpp"
#include "d2i/rng.hpp"

namespace d2i {

using ad::Matrix;

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_shapes(const Matrix& outputs, const BinaryMatrix& noisy, const char* op) {
  if (static_cast<std::size_t>(outputs.rows()) != noisy.rows() || static_cast<std::size_t>(outputs.cols()) != noisy.cols())
    throw std::invalid_argument(std::string(op) + ": outputs and noisy matrix differ in shape");
}

}  // namespace

ThresholdVector ThresholdVector::zeros(const Eigen::VectorXd& cap, const std::vector<bool>& constrained, double alpha) {
  if (static_cast<std::size_t>(cap.size()) != constrained.size())
    throw std::invalid_argument("ThresholdVector: cap and constraint mask differ in length");
  return {Eigen::VectorXd::Zero(cap.size()), cap, alpha, constrained};
}

void ThresholdVector::project() { phi = phi.cwiseMax(0.0).cwiseMin(cap); }

bool ThresholdVector::satisfies_caps() const {
  for (Eigen::Index j = 0; j < phi.size(); ++j) {
    if (!constrained[static_cast<std::size_t>(j)]) continue;
    if (!(phi[j] >= 0.0 && phi[j] <= cap[j])) return false;
  }
  return true;
}

Caps compute_caps(const Matrix& outputs, const BinaryMatrix& noisy, const BinaryMatrix& clean) {
  check_shapes(outputs, noisy, "compute_caps");
  if (clean.rows() != noisy.rows() || clean.cols() != noisy.cols())
    throw std::invalid_argument("compute_caps: noisy and clean matrices differ in shape");
  const auto T = static_cast<Eigen::Index>(noisy.cols());
  Eigen::VectorXd s00 = Eigen::VectorXd::Zero(T), s01 = Eigen::VectorXd::Zero(T);
  Eigen::VectorXd n00 = Eigen::VectorXd::Zero(T), n01 = Eigen::VectorXd::Zero(T);
  for (std::size_t i = 0; i < noisy.rows(); ++i)
    for (std::size_t j = 0; j < noisy.cols(); ++j) {
      if (noisy(i, j)) continue;
      const double g = outputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      const auto jj = static_cast<Eigen::Index>(j);
      if (clean(i, j)) {
        s01[jj] += g;
        n01[jj] += 1.0;
      } else {
        s00[jj] += g;
        n00[jj] += 1.0;
      }
    }
  Caps caps{Eigen::VectorXd::Ones(T), Eigen::VectorXd::Constant(T, std::numeric_limits<double>::quiet_NaN()),
            std::vector<bool>(static_cast<std::size_t>(T), false), std::vector<bool>(static_cast<std::size_t>(T), false)};
  for (Eigen::Index j = 0; j < T; ++j) {
    if (n00[j] > 0.0) {
      caps.m00[j] = s00[j] / n00[j];
      caps.has00[static_cast<std::size_t>(j)] = true;
    }
    if (n01[j] > 0.0) {
      caps.m01[j] = s01[j] / n01[j];
      caps.has01[static_cast<std::size_t>(j)] = true;
    }
  }
  return caps;
}

Caps compute_caps(DenoiserModel& model, const BinaryMatrix& noisy, const BinaryMatrix& clean) {
  return compute_caps(model.predict(noisy), noisy, clean);
}

Matrix apply_thresholded(const Matrix& outputs, const ThresholdVector& thr, const BinaryMatrix& noisy, bool hard) {
  check_shapes(outputs, noisy, "apply_thresholded");
  if (thr.dims() != noisy.cols() || static_cast<std::size_t>(thr.cap.size()) != noisy.cols())
    throw std::invalid_argument("apply_thresholded: threshold length does not match column count");
  Matrix out(outputs.rows(), outputs.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      if (noisy(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) {
        out(i, j) = 1.0;
        continue;
      }
      const double g = outputs(i, j);
      if (hard)
        out(i, j) = g < thr.phi[j] ? 0.0 : g;
      else
        out(i, j) = sigmoid(thr.alpha * (g - thr.phi[j])) * g;
    }
  return out;
}

Matrix apply_thresholded(DenoiserModel& model, const ThresholdVector& thr, const BinaryMatrix& noisy, bool hard) {
  return apply_thresholded(model.predict(noisy), thr, noisy, hard);
}

double soft_threshold_loss(const Matrix& outputs, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                           const Eigen::VectorXd& phi, double alpha, const ad::LossSpec& spec, Eigen::VectorXd* grad) {
  spec.validate();
  check_shapes(outputs, noisy, "soft_threshold_loss");
  if (static_cast<std::size_t>(phi.size()) != noisy.cols())
    throw std::invalid_argument("soft_threshold_loss: phi length does not match column count");
  if (grad) grad->setZero(phi.size());
  double total = 0.0;
  const double n = std::max<double>(1.0, static_cast<double>(noisy.rows()));
  for (Eigen::Index i = 0; i < outputs.rows(); ++i)
    for (Eigen::Index j = 0; j < outputs.cols(); ++j) {
      const bool xt = noisy(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      const double x = clean(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) ? 1.0 : 0.0;
      const double w = (xt != (x == 1.0)) ? spec.lambda : 1.0;
      if (xt) {
        total += w * ad::ce_term(1.0, x, spec.epsilon);
        continue;
      }
      const double g = outputs(i, j);
      const double s = sigmoid(alpha * (g - phi[j]));
      const double f = s * g;
      total += w * ad::ce_term(f, x, spec.epsilon);
      if (grad) (*grad)[j] += w * ad::ce_term_grad(f, x, spec.epsilon) * (-alpha * s * (1.0 - s) * g);
    }
  if (grad) *grad /= n;
  return total / n;
}

ThresholdFitResult fit_thresholds(const Matrix& outputs, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                                  const Caps& caps, const ThresholdFitConfig& cfg) {
  check_shapes(outputs, noisy, "fit_thresholds");
  if (static_cast<std::size_t>(caps.m00.size()) != noisy.cols())
    throw std::invalid_argument("fit_thresholds: caps length does not match column count");
  const ad::LossSpec spec{.lambda = cfg.lambda, .epsilon = 1e-7};

  ThresholdFitResult result;
  result.thresholds = ThresholdVector::zeros(caps.m00, caps.has00, cfg.alpha);
  result.initial_loss = soft_threshold_loss(outputs, noisy, clean, result.thresholds.phi, cfg.alpha, spec);
  result.final_loss = result.initial_loss;

  ad::Parameter phi("phi", Matrix::Zero(1, static_cast<Eigen::Index>(noisy.cols())));
  ad::AdamW opt({&phi}, {.lr = cfg.lr, .weight_decay = 0.0});
  ThresholdVector current = result.thresholds;

  std::vector<std::size_t> order(noisy.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = cfg.batch_size == 0 ? std::max<std::size_t>(order.size(), 1) : cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < order.size()) {
      CounterRng rng(cfg.seed, 0x7f000000ull + epoch);
      shuffle_in_place(order, rng);
    }
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(begin + batch, order.size());
      Eigen::VectorXd grad;
      if (begin == 0 && end == order.size()) {
        soft_threshold_loss(outputs, noisy, clean, current.phi, cfg.alpha, spec, &grad);
      } else {
        std::span<const std::size_t> rows(order.data() + begin, end - begin);
        Matrix sub(static_cast<Eigen::Index>(rows.size()), outputs.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = outputs.row(static_cast<Eigen::Index>(rows[r]));
        soft_threshold_loss(sub, noisy.select_rows(rows), clean.select_rows(rows), current.phi, cfg.alpha, spec, &grad);
      }
      if (!grad.allFinite()) throw ad::NonFiniteError("fit_thresholds: non-finite gradient at epoch " + std::to_string(epoch + 1));
      phi.grad = grad.transpose();
      opt.step();
      current.phi = phi.value.row(0).transpose();
      current.project();
      phi.value.row(0) = current.phi.transpose();
    }
    const double loss = soft_threshold_loss(outputs, noisy, clean, current.phi, cfg.alpha, spec);
    if (!std::isfinite(loss)) throw ad::NonFiniteError("fit_thresholds: non-finite loss at epoch " + std::to_string(epoch + 1));
    result.loss_curve.push_back(loss);
    if (loss < result.final_loss) {
      result.final_loss = loss;
      result.thresholds.phi = current.phi;
    }
  }
  return result;
}

void save_thresholds(const ThresholdVector& thr, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << std::setprecision(17);
  out << "thr v1 T=" << thr.dims() << " alpha=" << thr.alpha << '\n';
  for (std::size_t j = 0; j < thr.dims(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    out << j << ' ' << thr.phi[jj] << ' ' << thr.cap[jj];
    if (!thr.constrained[j]) out << " unconstrained";
    out << '\n';
  }
}

ThresholdVector load_thresholds(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  static const std::regex header(R"(thr v1 T=(\d+) alpha=(\S+))");
  std::smatch m;
  if (!std::getline(in, line) || !std::regex_match(line, m, header))
    throw ParseError(path.string() + ": malformed thr header", 1);
  const std::size_t T = std::stoul(m[1].str());
  ThresholdVector thr{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(T)), Eigen::VectorXd::Ones(static_cast<Eigen::Index>(T)),
                      std::stod(m[2].str()), std::vector<bool>(T, true)};
  for (std::size_t j = 0; j < T; ++j) {
    if (!std::getline(in, line)) throw ParseError(path.string() + ": missing threshold row", j + 2);
    std::istringstream row(line);
    std::size_t idx = 0;
    std::string phi_tok, cap_tok, flag;
    if (!(row >> idx >> phi_tok >> cap_tok) || idx != j) throw ParseError(path.string() + ": malformed threshold row", j + 2);
    thr.phi[static_cast<Eigen::Index>(j)] = std::strtod(phi_tok.c_str(), nullptr);
    thr.cap[static_cast<Eigen::Index>(j)] = std::strtod(cap_tok.c_str(), nullptr);
    if (row >> flag) {
      if (flag != "unconstrained") throw ParseError(path.string() + ": unknown flag '" + flag + "'", j + 2);
      thr.constrained[j] = false;
    }
  }
  return thr;
}

}  // namespace d2i
