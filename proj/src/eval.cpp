#include "d2i/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "d2i/data.hpp"
#include "d2i/rng.hpp"

namespace d2i {

std::optional<double> auprc(const Eigen::Ref<const Eigen::VectorXd>& scores,
                            const Eigen::Ref<const Eigen::VectorXd>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auprc: scores and labels differ in length");
  if (!scores.allFinite()) throw std::invalid_argument("auprc: non-finite score");
  const Eigen::Index n = scores.size();
  double positives = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) positives += labels[i] != 0.0 ? 1.0 : 0.0;
  if (positives == 0.0) return std::nullopt;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores[a] > scores[b]; });

  double ap = 0.0, tp = 0.0, seen = 0.0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    double group_tp = 0.0;
    while (end < order.size() && scores[order[end]] == scores[order[g]]) {
      group_tp += labels[order[end]] != 0.0 ? 1.0 : 0.0;
      ++end;
    }
    tp += group_tp;
    seen += static_cast<double>(end - g);
    if (group_tp > 0.0) ap += (group_tp / positives) * (tp / seen);
    g = end;
  }
  return ap;
}

namespace {

void check_eval_shapes(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy) {
  const auto r = static_cast<std::size_t>(probs.rows()), c = static_cast<std::size_t>(probs.cols());
  if (truth.rows() != r || truth.cols() != c || noisy.rows() != r || noisy.cols() != c)
    throw std::invalid_argument("evaluate_denoiser: shape mismatch (probs " + std::to_string(r) + "x" + std::to_string(c) +
                                ", truth " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()) +
                                ", noisy " + std::to_string(noisy.rows()) + "x" + std::to_string(noisy.cols()) + ")");
}

// Scored positions of column j over the given rows.
void gather_column(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy, bool restrict,
                   std::span<const std::size_t> rows, std::size_t j, std::vector<double>& s, std::vector<double>& l) {
  for (std::size_t i : rows) {
    if (restrict && noisy(i, j)) continue;
    s.push_back(probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    l.push_back(truth(i, j) ? 1.0 : 0.0);
  }
}

EvalReport evaluate_rows(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy,
                         bool restrict, std::span<const std::size_t> rows, bool with_micro) {
  EvalReport rep;
  std::vector<double> all_s, all_l, s, l;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  for (std::size_t j = 0; j < truth.cols(); ++j) {
    s.clear();
    l.clear();
    gather_column(probs, truth, noisy, restrict, rows, j, s, l);
    const auto ap = auprc(Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size())),
                          Eigen::Map<const Eigen::VectorXd>(l.data(), static_cast<Eigen::Index>(l.size())));
    rep.per_dim_auprc.push_back(ap);
    if (ap) {
      macro_sum += *ap;
      ++macro_n;
    } else {
      rep.excluded_dims.push_back(j);
    }
    if (with_micro) {
      all_s.insert(all_s.end(), s.begin(), s.end());
      all_l.insert(all_l.end(), l.begin(), l.end());
    }
  }
  if (macro_n > 0) rep.macro_auprc = macro_sum / static_cast<double>(macro_n);
  if (with_micro)
    rep.micro_auprc = auprc(Eigen::Map<const Eigen::VectorXd>(all_s.data(), static_cast<Eigen::Index>(all_s.size())),
                            Eigen::Map<const Eigen::VectorXd>(all_l.data(), static_cast<Eigen::Index>(all_l.size())));
  return rep;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

}  // namespace

EvalReport evaluate_denoiser(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy,
                             bool restrict_to_zeros) {
  check_eval_shapes(probs, truth, noisy);
  const auto rows = iota_rows(truth.rows());
  return evaluate_rows(probs, truth, noisy, restrict_to_zeros, rows, true);
}

void BootstrapSpec::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("bootstrap: fraction must be in (0, 1]");
  if (reps < 1) throw std::invalid_argument("bootstrap: reps must be >= 1");
}

BootstrapResult bootstrap_ci(std::size_t n_rows, const RowMetric& metric, const BootstrapSpec& spec) {
  spec.validate();
  const auto m = static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(n_rows)));
  BootstrapResult res;
  std::vector<double> valid;
  std::vector<std::size_t> pool(n_rows);
  for (std::size_t r = 0; r < spec.reps; ++r) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    CounterRng rng(spec.seed, r);
    for (std::size_t i = 0; i < m; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(n_rows - i));
      std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> rows(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(rows.begin(), rows.end());
    const auto v = metric(rows);
    res.values.push_back(v);
    if (v) valid.push_back(*v);
  }
  res.valid_reps = valid.size();
  if (static_cast<double>(valid.size()) < 0.8 * static_cast<double>(spec.reps))
    throw std::runtime_error("bootstrap_ci: only " + std::to_string(valid.size()) + " of " + std::to_string(spec.reps) +
                             " reps produced a value");
  const double k = static_cast<double>(valid.size());
  res.mean = std::accumulate(valid.begin(), valid.end(), 0.0) / k;
  if (valid.size() >= 2) {
    double ss = 0.0;
    for (double v : valid) ss += (v - res.mean) * (v - res.mean);
    res.half_width = 1.96 * std::sqrt(ss / (k - 1.0));
  } else {
    res.half_width = std::numeric_limits<double>::quiet_NaN();
  }
  return res;
}

RowMetric macro_auprc_metric(const Eigen::MatrixXd& probs, const BinaryMatrix& truth, const BinaryMatrix& noisy,
                             bool restrict_to_zeros) {
  check_eval_shapes(probs, truth, noisy);
  return [&probs, &truth, &noisy, restrict_to_zeros](std::span<const std::size_t> rows) {
    return evaluate_rows(probs, truth, noisy, restrict_to_zeros, rows, false).macro_auprc;
  };
}

double SpectrumResult::inside_fraction() const {
  if (eigvals.size() == 0) return 1.0;
  Eigen::Index inside = 0;
  for (Eigen::Index i = 0; i < eigvals.size(); ++i)
    if (eigvals[i] >= band_lo[i] && eigvals[i] <= band_hi[i]) ++inside;
  return static_cast<double>(inside) / static_cast<double>(eigvals.size());
}

namespace {

Eigen::VectorXd dense_spectrum(const Eigen::MatrixXd& x) {
  const Eigen::Index T = x.cols();
  if (x.rows() == 0) return Eigen::VectorXd::Zero(T);
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw std::runtime_error("covariance eigen-decomposition failed");
  return es.eigenvalues().reverse();
}

}  // namespace

Eigen::VectorXd covariance_spectrum(const BinaryMatrix& x) { return dense_spectrum(x.to_dense<double>()); }

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SpectrumResult spectrum_diagnostic(const BinaryMatrix& x, std::size_t n_random, std::uint64_t seed) {
  if (n_random == 0) throw std::invalid_argument("spectrum_diagnostic: n_random must be >= 1");
  SpectrumResult res;
  const auto T = static_cast<Eigen::Index>(x.cols());
  const auto n = static_cast<Eigen::Index>(x.rows());
  if (x.rows() <= x.cols())
    res.warnings.push_back("rows (" + std::to_string(x.rows()) + ") do not exceed columns (" + std::to_string(x.cols()) + ")");
  res.eigvals = covariance_spectrum(x);
  const Eigen::VectorXd prev = x.rows() > 0 ? x.column_prevalence() : Eigen::VectorXd::Zero(T);
  if (x.rows() > 0 && ((prev.array() == 0.0) || (prev.array() == 1.0)).all())
    res.warnings.push_back("matrix is constant; covariance is zero");

  std::vector<std::vector<double>> samples(static_cast<std::size_t>(T));
  Eigen::MatrixXd r(n, T);
  for (std::size_t k = 0; k < n_random; ++k) {
    CounterRng rng(seed, k);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < T; ++j) r(i, j) = rng.uniform() < prev[j] ? 1.0 : 0.0;
    const Eigen::VectorXd ev = dense_spectrum(r);
    for (Eigen::Index j = 0; j < T; ++j) samples[static_cast<std::size_t>(j)].push_back(ev[j]);
  }
  res.band_lo.resize(T);
  res.band_hi.resize(T);
  for (Eigen::Index j = 0; j < T; ++j) {
    res.band_lo[j] = percentile(samples[static_cast<std::size_t>(j)], 0.01);
    res.band_hi[j] = percentile(samples[static_cast<std::size_t>(j)], 0.99);
  }
  return res;
}

Eigen::VectorXd LogisticModel::predict(const Eigen::MatrixXd& x) const {
  const Eigen::ArrayXd z = ((x * w).array() + b);
  return z.unaryExpr([](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); })
      .matrix();
}

LogisticModel fit_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const LogisticConfig& cfg) {
  if (x.rows() != y.size()) throw std::invalid_argument("fit_logistic: feature and label counts differ");
  if (x.rows() == 0) throw std::invalid_argument("fit_logistic: no training rows");
  LogisticModel m{Eigen::VectorXd::Zero(x.cols()), 0.0};
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const Eigen::VectorXd resid = m.predict(x) - y;
    const Eigen::VectorXd gw = inv_n * (x.transpose() * resid) + cfg.l2 * m.w;
    const double gb = inv_n * resid.sum();
    m.w -= cfg.lr * gw;
    m.b -= cfg.lr * gb;
  }
  return m;
}

HoldoutResult holdout_code_task(const Imputer& method, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                                std::size_t target_dim, const HoldoutConfig& cfg) {
  if (target_dim >= noisy.cols()) throw std::invalid_argument("holdout: target_dim out of range");
  if (clean.rows() != noisy.rows() || clean.cols() != noisy.cols())
    throw std::invalid_argument("holdout: noisy and clean matrices differ in shape");
  if (!(cfg.train_frac > 0.0 && cfg.train_frac < 1.0)) throw std::invalid_argument("holdout: train_frac must be in (0, 1)");

  const Eigen::MatrixXd features = method(noisy.with_zeroed_column(target_dim));
  if (static_cast<std::size_t>(features.rows()) != noisy.rows())
    throw std::invalid_argument("holdout: method returned the wrong number of rows");
  const RowSplit split = split_rows(noisy.rows(), cfg.train_frac, 0.0, cfg.seed);

  HoldoutResult res;
  res.n_train = split.train.size();
  res.n_test = split.test.size();
  auto take = [&](const std::vector<std::size_t>& rows, Eigen::MatrixXd& fx, Eigen::VectorXd& fy) {
    fx.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    fy.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      fx.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(rows[r]));
      fy[static_cast<Eigen::Index>(r)] = clean(rows[r], target_dim) ? 1.0 : 0.0;
    }
  };
  Eigen::MatrixXd xtr, xte;
  Eigen::VectorXd ytr, yte;
  take(split.train, xtr, ytr);
  take(split.test, xte, yte);
  if (yte.sum() == 0.0 || ytr.size() == 0) return res;

  const LogisticModel model = fit_logistic(xtr, ytr, cfg.classifier);
  const Eigen::VectorXd scores = model.predict(xte);
  res.auprc = auprc(scores, yte);
  res.ci = bootstrap_ci(
      split.test.size(),
      [&](std::span<const std::size_t> rows) {
        Eigen::VectorXd s(static_cast<Eigen::Index>(rows.size())), l(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          s[static_cast<Eigen::Index>(r)] = scores[static_cast<Eigen::Index>(rows[r])];
          l[static_cast<Eigen::Index>(r)] = yte[static_cast<Eigen::Index>(rows[r])];
        }
        return auprc(s, l);
      },
      cfg.bootstrap);
  return res;
}

void save_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "dim,auprc\n";
  char buf[40];
  for (std::size_t j = 0; j < report.per_dim_auprc.size(); ++j) {
    out << j << ',';
    if (report.per_dim_auprc[j]) {
      std::snprintf(buf, sizeof buf, "%.17g", *report.per_dim_auprc[j]);
      out << buf;
    }
    out << '\n';
  }
}

std::string report_json(const EvalReport& report) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["method"] = report.method;
  j["macro"] = opt(report.macro_auprc);
  j["micro"] = opt(report.micro_auprc);
  j["ci_low"] = num(report.ci_low);
  j["ci_high"] = num(report.ci_high);
  j["seed"] = report.seed;
  j["runtime_seconds"] = opt(report.runtime_seconds);
  j["excluded_dims"] = report.excluded_dims;
  return j.dump(2);
}

void save_spectrum_csv(const SpectrumResult& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "index,eigval,band_lo,band_hi\n";
  char buf[128];
  for (Eigen::Index i = 0; i < s.eigvals.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g\n", static_cast<long>(i), s.eigvals[i], s.band_lo[i],
                  s.band_hi[i]);
    out << buf;
  }
}

}  // namespace d2i
