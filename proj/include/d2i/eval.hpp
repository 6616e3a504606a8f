#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d2i/binary_matrix.hpp"

namespace d2i {

/// Average precision with exact score ties collapsed into one group:
/// AP = sum over groups of (group positives / P) * precision at group end.
/// Labels are positive where nonzero. Empty optional when no positives.
std::optional<double> auprc(const Eigen::Ref<const Eigen::VectorXd>& scores,
                            const Eigen::Ref<const Eigen::VectorXd>& labels);

struct EvalReport {
  std::string method;
  std::vector<std::optional<double>> per_dim_auprc;
  std::optional<double> macro_auprc;
  std::optional<double> micro_auprc;
  std::vector<std::size_t> excluded_dims;  // no positives among scored positions
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  std::optional<double> runtime_seconds;
};

/// Per-dimension AUPRC of probs against truth. With restrict_to_zeros only
/// positions where noisy is 0 are scored.
EvalReport evaluate_denoiser(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy,
                             bool restrict_to_zeros);

struct BootstrapSpec {
  double fraction = 0.8;
  std::size_t reps = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BootstrapResult {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 * sample std over valid reps
  std::size_t valid_reps = 0;
  std::vector<std::optional<double>> values;
  double low() const { return mean - half_width; }
  double high() const { return mean + half_width; }
};

using RowMetric = std::function<std::optional<double>(std::span<const std::size_t> rows)>;

/// Each rep scores floor(fraction * n) rows drawn without replacement.
/// Throws when fewer than 80% of reps produce a value.
BootstrapResult bootstrap_ci(std::size_t n_rows, const RowMetric& metric, const BootstrapSpec& spec);

/// Macro AUPRC restricted to a subset of rows; the usual bootstrap metric.
RowMetric macro_auprc_metric(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy,
                             bool restrict_to_zeros);

struct SpectrumResult {
  Eigen::VectorXd eigvals;  // descending
  Eigen::VectorXd band_lo;  // 1st percentile per index
  Eigen::VectorXd band_hi;  // 99th percentile per index
  std::vector<std::string> warnings;

  /// Fraction of indices whose eigenvalue lies inside [band_lo, band_hi].
  double inside_fraction() const;
};

/// Descending eigenvalues of the column covariance (1/n normalisation).
Eigen::VectorXd covariance_spectrum(const BinaryMatrix& x);

/// Eigenvalues of x against prevalence-matched i.i.d. Bernoulli matrices.
SpectrumResult spectrum_diagnostic(const BinaryMatrix& x, std::size_t n_random, std::uint64_t seed);

/// Linear-interpolation percentile (q in [0,1]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

struct LogisticConfig {
  double l2 = 1e-4;
  std::size_t epochs = 500;
  double lr = 0.5;
};

struct LogisticModel {
  Eigen::VectorXd w;
  double b = 0.0;

  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

/// Full-batch gradient descent on mean log-loss + l2/2 * ||w||^2, from zero.
LogisticModel fit_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const LogisticConfig& cfg);

using Imputer = std::function<Eigen::MatrixXd(const BinaryMatrix&)>;

struct HoldoutConfig {
  double train_frac = 0.5;
  LogisticConfig classifier;
  BootstrapSpec bootstrap;
  std::uint64_t seed = 0;
};

struct HoldoutResult {
  std::optional<double> auprc;
  std::optional<BootstrapResult> ci;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

/// Zeroes column target_dim of noisy, runs the method, then trains a
/// logistic classifier on its output to predict the clean target column.
HoldoutResult holdout_code_task(const Imputer& method, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                                std::size_t target_dim, const HoldoutConfig& cfg);

/// CSV "dim,auprc" (empty value for excluded dims).
void save_report_csv(const EvalReport& report, const std::filesystem::path& path);
/// JSON summary: method, macro, micro, ci_low, ci_high, seed, runtime_seconds.
std::string report_json(const EvalReport& report);
/// CSV "index,eigval,band_lo,band_hi".
void save_spectrum_csv(const SpectrumResult& s, const std::filesystem::path& path);

}  // namespace d2i
