#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d2i/binary_matrix.hpp"

namespace d2i {

/// Raised for malformed input files; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Mixture corruption: with probability `beta` a row passes through
/// untouched, otherwise each 1 in dimension d independently drops to 0 with
/// probability drop_prob[d]. Zeros never flip.
struct NoiseSpec {
  double beta = 0.0;
  Eigen::VectorXd drop_prob;

  static NoiseSpec uniform(double beta, double drop, std::size_t dims) {
    return {beta, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dims), drop)};
  }
  void validate() const;
};

/// Low-rank latent-factor Bernoulli generator.
struct GeneratorSpec {
  std::size_t dims = 0;
  std::size_t rank = 0;
  Eigen::VectorXd base_prev;
  double factor_strength = 0.0;
  std::uint64_t seed = 0;

  static GeneratorSpec uniform(std::size_t dims, std::size_t rank, double base, double strength,
                               std::uint64_t seed) {
    return {dims, rank, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dims), base), strength,
            seed};
  }
  void validate() const;
  /// dims x rank matrix of factor loadings in [0,1), a pure function of seed.
  Eigen::MatrixXd loadings() const;
};

/// Draws n rows: rank Bernoulli(1/2) factors z, then code d fires with
/// probability clamp(base_prev[d] + factor_strength * <loadings[d], z>, 0, 1).
BinaryMatrix sample_clean(const GeneratorSpec& spec, std::size_t n);

/// Forces target = AND(sources) on every row (the planted-rule construction).
void plant_and_rule(BinaryMatrix& x, std::size_t target, const std::vector<std::size_t>& sources);

BinaryMatrix corrupt(const BinaryMatrix& clean, const NoiseSpec& noise, std::uint64_t seed);

/// Retains each 1 in column d with probability target_prev[d] / prevalence[d].
BinaryMatrix prevalence_match_mask(const BinaryMatrix& clean, const Eigen::VectorXd& target_prev,
                                   std::uint64_t seed);

BinaryMatrix or_merge(const BinaryMatrix& a, const BinaryMatrix& b);

/// "ehrb v1" text format.
void save_matrix(const BinaryMatrix& m, const std::filesystem::path& path);
BinaryMatrix load_matrix(const std::filesystem::path& path);
void write_matrix(const BinaryMatrix& m, std::ostream& out);
BinaryMatrix read_matrix(std::istream& in);

/// One decimal per line.
void save_vector(const Eigen::VectorXd& v, const std::filesystem::path& path);
Eigen::VectorXd load_vector(const std::filesystem::path& path);

struct RowSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> fit;
  std::vector<std::size_t> test;
};

/// Seeded permutation of [0, n) cut into train / threshold-fit / test parts.
/// The test part receives the remainder after flooring the first two.
RowSplit split_rows(std::size_t n, double train_frac, double fit_frac, std::uint64_t seed);

}  // namespace d2i
