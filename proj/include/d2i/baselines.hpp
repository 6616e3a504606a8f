#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "d2i/binary_matrix.hpp"

namespace d2i {

/// Zeros replaced by the training prevalence; ones kept.
Eigen::MatrixXd prevalence_impute(const BinaryMatrix& x_noisy, const Eigen::VectorXd& train_prev);

struct KnnConfig {
  std::size_t k = 5;
  std::size_t tau = 0;
  BinaryMatrix buffer;
  /// Off: copy the nearest row. On: set a zero to 1 when more than k/2 of
  /// the k nearest rows have it set.
  bool majority_vote = false;

  void validate(std::size_t cols) const;
};

/// Nearest buffer row by Hamming distance, ties to the lowest index. Rows
/// whose nearest distance is below tau get their zeros filled from it.
BinaryMatrix knn_impute(const BinaryMatrix& x_noisy, const KnnConfig& cfg);

struct SoftImputeConfig {
  double shrinkage = 1.0;
  std::size_t max_rank = 0;  // 0: min(50, min(rows, cols))
  std::size_t max_iters = 100;
  double tol = 1e-4;

  void validate() const;
};

struct SoftImputeResult {
  Eigen::MatrixXd z;               // clamped to [0,1], observed positions 1
  std::vector<double> objective;   // after each iteration
  std::size_t iterations = 0;
  bool converged = false;
};

class SvdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rank-truncated singular value soft-thresholding of `a`. Throws SvdError
/// when the decomposition fails its reconstruction check.
Eigen::MatrixXd svt(const Eigen::MatrixXd& a, double shrinkage, std::size_t max_rank, double* nuclear_norm = nullptr);

/// Observed set = positions with x̃ = 1; every zero is treated as missing.
SoftImputeResult soft_impute(const BinaryMatrix& x_noisy, const SoftImputeConfig& cfg);

/// 0.5 * ||P_obs(X - Z)||_F^2 + shrinkage * ||Z||_*
double soft_impute_objective(const BinaryMatrix& x_noisy, const Eigen::MatrixXd& z, double shrinkage);

/// Probability matrix as CSV, 6 decimals fixed, no header.
void save_prob_csv(const Eigen::MatrixXd& probs, const std::filesystem::path& path);
Eigen::MatrixXd load_prob_csv(const std::filesystem::path& path);

}  // namespace d2i
