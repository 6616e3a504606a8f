#include "d2i/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "d2i/data.hpp"

namespace d2i {

Eigen::MatrixXd prevalence_impute(const BinaryMatrix& x_noisy, const Eigen::VectorXd& train_prev) {
  if (static_cast<std::size_t>(train_prev.size()) != x_noisy.cols())
    throw std::invalid_argument("prevalence_impute: prevalence length " + std::to_string(train_prev.size()) +
                                " does not match " + std::to_string(x_noisy.cols()) + " columns");
  Eigen::MatrixXd out(x_noisy.rows(), x_noisy.cols());
  for (std::size_t i = 0; i < x_noisy.rows(); ++i)
    for (std::size_t j = 0; j < x_noisy.cols(); ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          x_noisy(i, j) ? 1.0 : train_prev[static_cast<Eigen::Index>(j)];
  return out;
}

void KnnConfig::validate(std::size_t cols) const {
  if (buffer.rows() == 0) throw std::invalid_argument("knn_impute: empty buffer");
  if (buffer.cols() != cols)
    throw std::invalid_argument("knn_impute: buffer has " + std::to_string(buffer.cols()) + " columns, query has " +
                                std::to_string(cols));
  if (k == 0) throw std::invalid_argument("knn_impute: k must be at least 1");
}

BinaryMatrix knn_impute(const BinaryMatrix& x_noisy, const KnnConfig& cfg) {
  cfg.validate(x_noisy.cols());
  BinaryMatrix out = x_noisy;
  const std::size_t nb = cfg.buffer.rows();
  std::vector<std::size_t> dist(nb);
  std::vector<std::size_t> order(nb);
  for (std::size_t i = 0; i < x_noisy.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      dist[b] = hamming_distance(x_noisy, i, cfg.buffer, b);
      if (dist[b] < dist[best]) best = b;
    }
    if (dist[best] >= cfg.tau) continue;
    if (!cfg.majority_vote) {
      for (std::size_t j = 0; j < x_noisy.cols(); ++j)
        if (!x_noisy(i, j) && cfg.buffer(best, j)) out.set(i, j, true);
      continue;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t k = std::min(cfg.k, nb);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return dist[a] != dist[b] ? dist[a] < dist[b] : a < b; });
    for (std::size_t j = 0; j < x_noisy.cols(); ++j) {
      if (x_noisy(i, j)) continue;
      std::size_t votes = 0;
      for (std::size_t r = 0; r < k; ++r) votes += cfg.buffer(order[r], j) ? 1 : 0;
      if (2 * votes > k) out.set(i, j, true);
    }
  }
  return out;
}

void SoftImputeConfig::validate() const {
  if (!(shrinkage >= 0.0) || !std::isfinite(shrinkage)) throw std::invalid_argument("soft_impute: shrinkage must be >= 0");
  if (max_iters < 1) throw std::invalid_argument("soft_impute: max_iters must be >= 1");
  if (!(tol >= 0.0)) throw std::invalid_argument("soft_impute: tol must be >= 0");
}

Eigen::MatrixXd svt(const Eigen::MatrixXd& a, double shrinkage, std::size_t max_rank, double* nuclear_norm) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double norm_a = a.norm();
  const Eigen::MatrixXd recon = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  if (!((recon - a).norm() <= 1e-8 * std::max(norm_a, 1e-300)) && norm_a > 0.0)
    throw SvdError("SVD reconstruction check failed");
  const auto r = static_cast<Eigen::Index>(std::min<std::size_t>(max_rank, static_cast<std::size_t>(s.size())));
  Eigen::VectorXd shrunk = (s.head(r).array() - shrinkage).cwiseMax(0.0).matrix();
  if (nuclear_norm) *nuclear_norm = shrunk.sum();
  return svd.matrixU().leftCols(r) * shrunk.asDiagonal() * svd.matrixV().leftCols(r).transpose();
}

double soft_impute_objective(const BinaryMatrix& x_noisy, const Eigen::MatrixXd& z, double shrinkage) {
  double fit = 0.0;
  for (std::size_t i = 0; i < x_noisy.rows(); ++i)
    for (std::size_t j = 0; j < x_noisy.cols(); ++j)
      if (x_noisy(i, j)) {
        const double d = 1.0 - z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        fit += d * d;
      }
  double nuclear = 0.0;
  if (shrinkage > 0.0 && z.size() > 0) nuclear = Eigen::BDCSVD<Eigen::MatrixXd>(z).singularValues().sum();
  return 0.5 * fit + shrinkage * nuclear;
}

SoftImputeResult soft_impute(const BinaryMatrix& x_noisy, const SoftImputeConfig& cfg) {
  cfg.validate();
  if (x_noisy.rows() == 0 || x_noisy.cols() == 0) throw std::invalid_argument("soft_impute: empty matrix");
  const std::size_t max_rank =
      cfg.max_rank == 0 ? std::min<std::size_t>(50, std::min(x_noisy.rows(), x_noisy.cols())) : cfg.max_rank;
  const Eigen::MatrixXd observed = x_noisy.to_dense<double>();

  SoftImputeResult res;
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(observed.rows(), observed.cols());
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const Eigen::MatrixXd y = (observed.array() > 0.5).select(observed, z);
    Eigen::MatrixXd z_new;
    double nuclear = 0.0;
    try {
      z_new = svt(y, cfg.shrinkage, max_rank, &nuclear);
    } catch (const SvdError& e) {
      throw SvdError(std::string(e.what()) + " at iteration " + std::to_string(it + 1));
    }
    const double fit = 0.5 * (observed.array() > 0.5).select(observed - z_new, 0.0).squaredNorm();
    res.objective.push_back(fit + cfg.shrinkage * nuclear);
    const double denom = std::max(z.norm(), 1e-12);
    const double change = (z_new - z).norm() / denom;
    z = std::move(z_new);
    res.iterations = it + 1;
    if (it > 0 && change < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  res.z = (observed.array() > 0.5).select(Eigen::MatrixXd::Ones(z.rows(), z.cols()), z.cwiseMax(0.0).cwiseMin(1.0));
  return res;
}

void save_prob_csv(const Eigen::MatrixXd& probs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  char buf[32];
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6f", probs(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

Eigen::MatrixXd load_prob_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') throw ParseError(path.string() + ": bad number '" + cell + "'", lineno);
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError(path.string() + ": row length mismatch", lineno);
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

}  // namespace d2i
