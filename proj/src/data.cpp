#include "d2i/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <regex>
#include <sstream>

#include "d2i/rng.hpp"

namespace d2i {
namespace {

// Lanes keep the substreams of different procedures disjoint under one seed.
constexpr std::uint32_t kLaneFactor = 1;
constexpr std::uint32_t kLaneCode = 2;
constexpr std::uint32_t kLaneLoading = 3;
constexpr std::uint32_t kLaneBranch = 10;
constexpr std::uint32_t kLaneDrop = 11;
constexpr std::uint32_t kLaneRetain = 20;

bool is_probability(double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; }

}  // namespace

void NoiseSpec::validate() const {
  if (!is_probability(beta)) throw std::invalid_argument("NoiseSpec: beta must lie in [0,1]");
  for (Eigen::Index d = 0; d < drop_prob.size(); ++d)
    if (!is_probability(drop_prob[d]))
      throw std::invalid_argument("NoiseSpec: drop_prob[" + std::to_string(d) + "] outside [0,1]");
}

void GeneratorSpec::validate() const {
  if (static_cast<std::size_t>(base_prev.size()) != dims)
    throw std::invalid_argument("GeneratorSpec: base_prev length must equal dims");
  if (!std::isfinite(factor_strength) || factor_strength < 0.0)
    throw std::invalid_argument("GeneratorSpec: factor_strength must be a nonnegative number");
  for (Eigen::Index d = 0; d < base_prev.size(); ++d) {
    if (!is_probability(base_prev[d]))
      throw std::invalid_argument("GeneratorSpec: base_prev[" + std::to_string(d) + "] outside [0,1]");
    // Largest pre-clamp activation is base + strength * rank (loadings < 1).
    const double worst = base_prev[d] + factor_strength * static_cast<double>(rank);
    if (worst > 2.0)
      throw std::invalid_argument("GeneratorSpec: activation for dim " + std::to_string(d) +
                                  " can exceed 1 by more than 1.0 before clamping");
  }
}

Eigen::MatrixXd GeneratorSpec::loadings() const {
  Eigen::MatrixXd L(static_cast<Eigen::Index>(dims), static_cast<Eigen::Index>(rank));
  for (std::size_t d = 0; d < dims; ++d)
    for (std::size_t k = 0; k < rank; ++k)
      L(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) =
          counter_uniform(seed, d, static_cast<std::uint32_t>(k), kLaneLoading);
  return L;
}

BinaryMatrix sample_clean(const GeneratorSpec& spec, std::size_t n) {
  spec.validate();
  const Eigen::MatrixXd L = spec.loadings();
  BinaryMatrix out(n, spec.dims);
  Eigen::VectorXd z(static_cast<Eigen::Index>(spec.rank));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < spec.rank; ++k)
      z[static_cast<Eigen::Index>(k)] =
          counter_uniform(spec.seed, i, static_cast<std::uint32_t>(k), kLaneFactor) < 0.5 ? 1.0 : 0.0;
    const Eigen::VectorXd p =
        (spec.base_prev + spec.factor_strength * (L * z)).cwiseMax(0.0).cwiseMin(1.0);
    for (std::size_t d = 0; d < spec.dims; ++d)
      if (counter_uniform(spec.seed, i, static_cast<std::uint32_t>(d), kLaneCode) <
          p[static_cast<Eigen::Index>(d)])
        out.set(i, d, true);
  }
  return out;
}

void plant_and_rule(BinaryMatrix& x, std::size_t target, const std::vector<std::size_t>& sources) {
  if (target >= x.cols()) throw std::out_of_range("plant_and_rule: target column out of range");
  for (std::size_t s : sources)
    if (s >= x.cols()) throw std::out_of_range("plant_and_rule: source column out of range");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    bool all = true;
    for (std::size_t s : sources) all = all && x(i, s);
    x.set(i, target, all);
  }
}

BinaryMatrix corrupt(const BinaryMatrix& clean, const NoiseSpec& noise, std::uint64_t seed) {
  noise.validate();
  if (static_cast<std::size_t>(noise.drop_prob.size()) != clean.cols())
    throw std::invalid_argument("corrupt: drop_prob has length " + std::to_string(noise.drop_prob.size()) +
                                " but matrix has " + std::to_string(clean.cols()) + " columns");
  BinaryMatrix out = clean;
  for (std::size_t i = 0; i < clean.rows(); ++i) {
    if (counter_uniform(seed, i, 0, kLaneBranch) < noise.beta) continue;
    for (std::size_t d = 0; d < clean.cols(); ++d) {
      if (!clean(i, d)) continue;
      if (counter_uniform(seed, i, static_cast<std::uint32_t>(d), kLaneDrop) <
          noise.drop_prob[static_cast<Eigen::Index>(d)])
        out.set(i, d, false);
    }
  }
  return out;
}

BinaryMatrix prevalence_match_mask(const BinaryMatrix& clean, const Eigen::VectorXd& target_prev,
                                   std::uint64_t seed) {
  if (static_cast<std::size_t>(target_prev.size()) != clean.cols())
    throw std::invalid_argument("prevalence_match_mask: target length does not match column count");
  const Eigen::VectorXd prev = clean.column_prevalence();
  std::ostringstream report;
  bool bad = false;
  for (Eigen::Index d = 0; d < prev.size(); ++d) {
    if (!std::isfinite(target_prev[d]) || target_prev[d] < 0.0 || target_prev[d] > prev[d] + 1e-12) {
      report << " dim " << d << ": target " << target_prev[d] << " > clean " << prev[d] << ";";
      bad = true;
    }
  }
  if (bad) throw std::invalid_argument("prevalence_match_mask: target prevalence infeasible:" + report.str());

  Eigen::VectorXd retain(prev.size());
  for (Eigen::Index d = 0; d < prev.size(); ++d)
    retain[d] = prev[d] > 0.0 ? std::min(1.0, target_prev[d] / prev[d]) : 0.0;

  BinaryMatrix out = clean;
  for (std::size_t i = 0; i < clean.rows(); ++i)
    for (std::size_t d = 0; d < clean.cols(); ++d) {
      if (!clean(i, d)) continue;
      if (counter_uniform(seed, i, static_cast<std::uint32_t>(d), kLaneRetain) >=
          retain[static_cast<Eigen::Index>(d)])
        out.set(i, d, false);
    }
  return out;
}

BinaryMatrix or_merge(const BinaryMatrix& a, const BinaryMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("or_merge: shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  BinaryMatrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row_words(i);
    auto src = b.row_words(i);
    for (std::size_t w = 0; w < dst.size(); ++w) dst[w] |= src[w];
  }
  return out;
}

void write_matrix(const BinaryMatrix& m, std::ostream& out) {
  out << "ehrb v1 rows=" << m.rows() << " cols=" << m.cols() << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) out << m.row_string(i) << '\n';
}

BinaryMatrix read_matrix(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("ehrb: missing header", 1);
  static const std::regex header(R"(ehrb v1 rows=(\d+) cols=(\d+))");
  std::smatch match;
  if (!std::regex_match(line, match, header))
    throw ParseError("ehrb: malformed header '" + line + "'", 1);
  const auto rows = static_cast<std::size_t>(std::stoull(match[1].str()));
  const auto cols = static_cast<std::size_t>(std::stoull(match[2].str()));
  BinaryMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t lineno = i + 2;
    if (!std::getline(in, line)) throw ParseError("ehrb: expected " + std::to_string(rows) + " rows", lineno);
    if (line.size() != cols)
      throw ParseError("ehrb: row has " + std::to_string(line.size()) + " characters, expected " +
                           std::to_string(cols),
                       lineno);
    for (std::size_t j = 0; j < cols; ++j) {
      if (line[j] == '1') {
        m.set(i, j, true);
      } else if (line[j] != '0') {
        throw ParseError(std::string("ehrb: invalid character '") + line[j] + "' at column " +
                             std::to_string(j),
                         lineno);
      }
    }
  }
  while (std::getline(in, line))
    if (!line.empty()) throw ParseError("ehrb: trailing data after declared rows", rows + 2);
  return m;
}

void save_matrix(const BinaryMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_matrix(m, out);
}

BinaryMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_matrix(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

void save_vector(const Eigen::VectorXd& v, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) out << v[i] << '\n';
}

Eigen::VectorXd load_vector(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(line, &used);
    } catch (const std::exception&) {
      throw ParseError(path.string() + ": not a number '" + line + "'", lineno);
    }
    if (used != line.size()) throw ParseError(path.string() + ": trailing characters", lineno);
    values.push_back(v);
  }
  return Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

RowSplit split_rows(std::size_t n, double train_frac, double fit_frac, std::uint64_t seed) {
  if (train_frac < 0.0 || fit_frac < 0.0 || train_frac + fit_frac > 1.0)
    throw std::invalid_argument("split_rows: fractions must be nonnegative and sum to at most 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, 0x5b117);
  shuffle_in_place(order, rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n)));
  const auto n_fit = static_cast<std::size_t>(std::floor(fit_frac * static_cast<double>(n)));
  RowSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.fit.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_fit));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_fit), order.end());
  return split;
}

}  // namespace d2i
