#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>

#include <Eigen/Dense>

#include "d2i/data.hpp"

namespace d2i::oracle {

/// Largest dimension for which exact enumeration is supported.
inline constexpr std::size_t kMaxDims = 12;

/// States of {0,1}^T are indexed by their binary encoding with dimension 0
/// as the least-significant bit.
using StateIndex = std::uint32_t;

inline std::size_t state_count(std::size_t dims) { return std::size_t{1} << dims; }

template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> decode_state(StateIndex s, std::size_t dims) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> x(static_cast<Eigen::Index>(dims));
  for (std::size_t d = 0; d < dims; ++d) x[static_cast<Eigen::Index>(d)] = ((s >> d) & 1u) ? 1 : 0;
  return x;
}

template <typename Derived>
StateIndex encode_state(const Eigen::MatrixBase<Derived>& x) {
  StateIndex s = 0;
  for (Eigen::Index d = 0; d < x.size(); ++d)
    if (x[d] > 0.5) s |= StateIndex{1} << d;
  return s;
}

/// Explicit probability table p(x) over {0,1}^T.
struct DiscreteDistribution {
  std::size_t dims = 0;
  Eigen::VectorXd probs;

  /// Validates length 2^T and normalization within 1e-12.
  static DiscreteDistribution from_probs(std::size_t dims, Eigen::VectorXd probs);
  /// Random table: Dirichlet(1)-style weights with a fraction of states zeroed.
  static DiscreteDistribution random(std::size_t dims, std::uint64_t seed, double zero_frac = 0.0);
  static DiscreteDistribution point_mass(std::size_t dims, StateIndex at);

  /// E_p[x] per dimension.
  Eigen::VectorXd mean() const;
};

/// The full corruption law p(x̃|x) = beta * delta(x̃ = x) + (1 - beta) q(x̃|x),
/// with q held as a dense table kernel(x, x̃) = q(x̃|x).
struct MixtureNoiseExact {
  double beta = 1.0;
  Eigen::MatrixXd kernel;

  static MixtureNoiseExact from_noise_spec(const NoiseSpec& spec);
  static MixtureNoiseExact identity_kernel(std::size_t dims, double beta);
  /// q maps every state to the all-zeros state.
  static MixtureNoiseExact zero_kernel(std::size_t dims, double beta);

  std::size_t dims() const;
  /// (1 - beta) / beta; +inf when beta == 0.
  double gamma() const;
  void validate() const;
};

/// q̃(x̃) = sum_x q(x̃|x) p(x).
Eigen::VectorXd marginal_q(const DiscreteDistribution& dist, const MixtureNoiseExact& noise);

/// beta p(x̃) + (1 - beta) q̃(x̃): probability of observing x̃ at all.
Eigen::VectorXd mixture_marginal(const DiscreteDistribution& dist, const MixtureNoiseExact& noise);

/// p / (p + gamma q). Throws when both terms vanish.
double omega(double p_val, double q_val, double gamma);

/// g*(x̃) = E_{q(x|x̃)}[x]; requires q̃(x̃) > 0.
Eigen::VectorXd mmse_denoiser(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                              StateIndex x_tilde);

/// f*(x̃) = omega(x̃) x̃ + (1 - omega(x̃)) g*(x̃).
Eigen::VectorXd optimal_denoiser(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                                 StateIndex x_tilde);

/// E[x | x̃] under the full mixture, summed directly over all clean states.
Eigen::VectorXd posterior_mean_bruteforce(const DiscreteDistribution& dist,
                                          const MixtureNoiseExact& noise, StateIndex x_tilde);

/// 2^T x T table of a denoiser's outputs; rows of unreachable x̃ are NaN.
using DenoiserTable = Eigen::MatrixXd;
using DenoiserFn = std::function<Eigen::VectorXd(StateIndex)>;

DenoiserTable tabulate(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                       const DenoiserFn& f);

/// E_{p(x) p(x̃|x)} ||f(x̃) - x||^2 by exact enumeration.
double mse_of_denoiser(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                       const DenoiserTable& table);

/// "dist v1" file format.
void save_distribution(const DiscreteDistribution& dist, const std::filesystem::path& path);
DiscreteDistribution load_distribution(const std::filesystem::path& path);

}  // namespace d2i::oracle
