#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "d2i/autodiff.hpp"
#include "d2i/binary_matrix.hpp"
#include "d2i/denoisers.hpp"

namespace d2i {

/// Per-dimension thresholds phi with their caps. Dimensions flagged
/// unconstrained have no (x̃=0, x=0) training positions and carry cap 1.
struct ThresholdVector {
  Eigen::VectorXd phi;
  Eigen::VectorXd cap;
  double alpha = 100.0;
  std::vector<bool> constrained;

  static ThresholdVector zeros(const Eigen::VectorXd& cap, const std::vector<bool>& constrained, double alpha = 100.0);
  std::size_t dims() const { return static_cast<std::size_t>(phi.size()); }
  /// Clamps phi into [0, cap] elementwise.
  void project();
  /// True iff 0 <= phi[j] <= cap[j] for every constrained j.
  bool satisfies_caps() const;
};

/// Mean denoiser output on (x̃=0, x=0) and (x̃=0, x=1) positions per dimension.
struct Caps {
  Eigen::VectorXd m00;  // 1.0 where has00 is false
  Eigen::VectorXd m01;  // NaN where has01 is false
  std::vector<bool> has00;
  std::vector<bool> has01;
};

/// `outputs` are raw g_theta values for the rows of `noisy`.
Caps compute_caps(const ad::Matrix& outputs, const BinaryMatrix& noisy, const BinaryMatrix& clean);
Caps compute_caps(DenoiserModel& model, const BinaryMatrix& noisy, const BinaryMatrix& clean);

/// Thresholded combiner on zero positions; positives map to 1.
///   hard: 0 if g < phi else g
///   soft: sigmoid(alpha (g - phi)) * g
ad::Matrix apply_thresholded(const ad::Matrix& outputs, const ThresholdVector& thr, const BinaryMatrix& noisy,
                             bool hard);
ad::Matrix apply_thresholded(DenoiserModel& model, const ThresholdVector& thr, const BinaryMatrix& noisy, bool hard);

/// Weighted CE of the soft combiner, averaged over rows, and its gradient
/// with respect to phi.
double soft_threshold_loss(const ad::Matrix& outputs, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                           const Eigen::VectorXd& phi, double alpha, const ad::LossSpec& spec,
                           Eigen::VectorXd* grad = nullptr);

struct ThresholdFitConfig {
  double lambda = 2.0;
  double alpha = 100.0;
  double lr = 1e-2;
  std::size_t epochs = 200;
  std::size_t batch_size = 0;  // 0: full batch
  std::uint64_t seed = 0;
};

struct ThresholdFitResult {
  ThresholdVector thresholds;
  std::vector<double> loss_curve;  // full-data loss after each epoch
  double initial_loss = 0.0;       // at phi = 0
  double final_loss = 0.0;         // at the returned phi
};

/// AdamW on phi only, projecting into [0, cap] after every step. Returns
/// the iterate with the lowest full-data loss (phi = 0 included).
ThresholdFitResult fit_thresholds(const ad::Matrix& outputs, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                                  const Caps& caps, const ThresholdFitConfig& cfg);

/// "thr v1" format.
void save_thresholds(const ThresholdVector& thr, const std::filesystem::path& path);
ThresholdVector load_thresholds(const std::filesystem::path& path);

}  // namespace d2i
