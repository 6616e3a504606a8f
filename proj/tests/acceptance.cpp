// Acceptance suite: one PASS/FAIL line per criterion. Set D2I_ACCEPT_ONLY to
// a comma-separated list of criterion numbers to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "d2i/autodiff.hpp"
#include "d2i/baselines.hpp"
#include "d2i/cli.hpp"
#include "d2i/data.hpp"
#include "d2i/denoisers.hpp"
#include "d2i/eval.hpp"
#include "d2i/oracle.hpp"
#include "d2i/rng.hpp"
#include "d2i/thresholding.hpp"
#include "json.hpp"

using namespace d2i;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ------------------------------------------------------------ oracle (1-3)

struct Instance {
  oracle::DiscreteDistribution dist;
  oracle::MixtureNoiseExact noise;
};

std::vector<Instance> oracle_instances() {
  static constexpr double kBetas[] = {0.1, 0.5, 0.9, 1.0};
  std::vector<Instance> out;
  for (std::uint64_t k = 0; k < 200; ++k) {
    CounterRng rng(77, k);
    const std::size_t T = 1 + rng.below(8);
    NoiseSpec spec;
    spec.beta = kBetas[k % 4];
    spec.drop_prob.resize(static_cast<Eigen::Index>(T));
    for (Eigen::Index d = 0; d < spec.drop_prob.size(); ++d) spec.drop_prob[d] = rng.uniform();
    out.push_back({oracle::DiscreteDistribution::random(T, rng(), 0.25), oracle::MixtureNoiseExact::from_noise_spec(spec)});
  }
  return out;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (const auto& [dist, noise] : oracle_instances()) {
    const Eigen::VectorXd reach = oracle::mixture_marginal(dist, noise);
    for (oracle::StateIndex s = 0; s < oracle::state_count(dist.dims); ++s) {
      if (!(reach[static_cast<Eigen::Index>(s)] > 0.0)) continue;
      const Eigen::VectorXd d =
          oracle::optimal_denoiser(dist, noise, s) - oracle::posterior_mean_bruteforce(dist, noise, s);
      worst = std::max(worst, d.cwiseAbs().maxCoeff());
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 30.0, "max |f* - posterior| = " + fmt("%.3e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome criterion2() {
  using oracle::StateIndex;
  double worst_gap = -1e300;
  std::size_t perturb_violations = 0;
  for (const auto& [dist, noise] : oracle_instances()) {
    const std::size_t T = dist.dims;
    const Eigen::VectorXd mean = dist.mean();
    const auto fstar = oracle::tabulate(dist, noise, [&](StateIndex s) { return oracle::optimal_denoiser(dist, noise, s); });
    const double best = oracle::mse_of_denoiser(dist, noise, fstar);
    const std::vector<oracle::DenoiserFn> rivals = {
        [&](StateIndex s) { return Eigen::VectorXd(oracle::decode_state(s, T)); },
        [&](StateIndex s) { return oracle::mmse_denoiser(dist, noise, s); },
        [&](StateIndex) { return mean; },
        [&](StateIndex s) {
          const Eigen::VectorXd x = oracle::decode_state(s, T);
          return Eigen::VectorXd((x.array() > 0.5).select(1.0, mean.array()));
        },
    };
    for (const auto& g : rivals)
      worst_gap = std::max(worst_gap, best - oracle::mse_of_denoiser(dist, noise, oracle::tabulate(dist, noise, g)));
    CounterRng rng(91, T * 1000 + static_cast<std::uint64_t>(best * 1e6));
    for (int k = 0; k < 100; ++k) {
      oracle::DenoiserTable pert = fstar;
      for (Eigen::Index i = 0; i < pert.size(); ++i) pert.data()[i] += 0.01 * rng.normal();
      if (best > oracle::mse_of_denoiser(dist, noise, pert)) ++perturb_violations;
    }
  }
  return {worst_gap <= 1e-12 && perturb_violations == 0,
          "max mse(f*) - mse(g) = " + fmt("%.3e", worst_gap) + ", perturbation violations " +
              std::to_string(perturb_violations) + "/20000"};
}

Outcome criterion3() {
  bool identity_exact = true;
  double worst = 0.0;
  // |f* - g*| = omega |x - g*| and omega <= beta / ((1 - beta) prod_{x_d = 1} (1 - drop_d)),
  // so drops near 1 push the gap past any fixed tolerance. Report how tight that bound is.
  double worst_vs_bound = 0.0;
  std::size_t states = 0, within = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    CounterRng rng(55, k);
    const std::size_t T = 1 + rng.below(8);
    const auto dist = oracle::DiscreteDistribution::random(T, rng(), 0.25);
    NoiseSpec spec;
    spec.drop_prob.resize(static_cast<Eigen::Index>(T));
    for (Eigen::Index d = 0; d < spec.drop_prob.size(); ++d) spec.drop_prob[d] = rng.uniform();
    spec.beta = 1.0;
    const auto clean = oracle::MixtureNoiseExact::from_noise_spec(spec);
    spec.beta = 1e-12;
    const auto nearly = oracle::MixtureNoiseExact::from_noise_spec(spec);
    const Eigen::VectorXd reach_clean = oracle::mixture_marginal(dist, clean);
    const Eigen::VectorXd qtilde = oracle::marginal_q(dist, nearly);
    for (oracle::StateIndex s = 0; s < oracle::state_count(T); ++s) {
      if (reach_clean[static_cast<Eigen::Index>(s)] > 0.0) {
        const Eigen::VectorXd f = oracle::optimal_denoiser(dist, clean, s);
        const Eigen::VectorXd x = oracle::decode_state(s, T);
        identity_exact &= (f.array() == x.array()).all();
      }
      if (qtilde[static_cast<Eigen::Index>(s)] > 0.0) {
        const Eigen::VectorXd d = oracle::optimal_denoiser(dist, nearly, s) - oracle::mmse_denoiser(dist, nearly, s);
        const double gap = d.cwiseAbs().maxCoeff();
        const Eigen::VectorXd x = oracle::decode_state(s, T);
        double keep = 1.0;
        for (Eigen::Index j = 0; j < x.size(); ++j) {
          if (x[j] == 1.0) keep *= 1.0 - spec.drop_prob[j];
        }
        const double bound = std::min(1.0, spec.beta / ((1.0 - spec.beta) * keep));
        worst_vs_bound = std::max(worst_vs_bound, gap / bound);
        worst = std::max(worst, gap);
        ++states;
        within += gap < 1e-9;
      }
    }
  }
  return {identity_exact && worst < 1e-9, std::string("beta=1 identity ") + (identity_exact ? "exact" : "NOT exact") +
                                               ", beta=1e-12 ||f*-g*||inf = " + fmt("%.3e", worst) + " (" +
                                               std::to_string(within) + "/" + std::to_string(states) +
                                               " states under 1e-9, max gap/omega-bound " +
                                               fmt("%.3f", worst_vs_bound) + ")"};
}

// ------------------------------------------------------------ autodiff (4-5)

Outcome criterion4() {
  const std::size_t T = 6;
  CounterRng rng(4);
  ad::Matrix clean(5, static_cast<Eigen::Index>(T)), noisy(5, static_cast<Eigen::Index>(T));
  for (Eigen::Index i = 0; i < clean.size(); ++i) {
    clean.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    noisy.data()[i] = clean.data()[i] > 0.0 && rng.bernoulli(0.6) ? 1.0 : 0.0;
  }
  double worst = 0.0;
  std::size_t min_probed = SIZE_MAX;
  std::string where;
  for (Arch a : {Arch::MLP, Arch::DAE, Arch::SetAttention}) {
    Hyper h;
    h.arch = a;
    h.dims = T;
    h.width = 16;
    h.latent = 8;
    h.embed_dim = 8;
    h.model_dim = 8;
    h.heads = 2;
    h.depth = a == Arch::SetAttention ? 2 : 4;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto m = DenoiserModel::create(h, 500 + seed);
      const auto params = m.parameters();
      const auto res = ad::grad_check(
          params, [&](ad::Graph& g) { return denoiser_loss(g, m, noisy, clean, {2.0, 1e-7}); }, 1e-5, 200, seed);
      min_probed = std::min(min_probed, res.probed);
      if (res.max_rel_error > worst) {
        worst = res.max_rel_error;
        where = arch_name(a) + " seed " + std::to_string(seed) + " " + res.worst;
      }
    }
  }
  return {worst < 1e-4 && min_probed >= 200,
          "max rel error " + fmt("%.3e", worst) + " (" + where + "), min probed " + std::to_string(min_probed)};
}

Outcome criterion5() {
  std::size_t mismatches = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    CounterRng rng(5, k);
    const auto rows = static_cast<Eigen::Index>(1 + rng.below(20));
    const auto cols = static_cast<Eigen::Index>(1 + rng.below(20));
    ad::Matrix p(rows, cols), x(rows, cols), xt(rows, cols);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p.data()[i] = rng.uniform();
      x.data()[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
      xt.data()[i] = x.data()[i] > 0.0 && rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    ad::Graph g1, g2;
    const double a = ad::weighted_ce_loss(g1.constant(p), x, xt, {1.0, 1e-7}).value()(0, 0);
    const double b = ad::ce_loss(g2.constant(p), x, 1e-7).value()(0, 0);
    if (std::memcmp(&a, &b, sizeof a) != 0) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + "/100 instances differ bitwise"};
}

// ------------------------------------------------------------ planted rule (6-7)

// Desk-scale settings for the planted-rule comparison.
constexpr std::size_t kPlantedT = 64, kPlantedRows = 5000, kPlantedRank = 4;
constexpr double kPlantedBase = 0.05, kPlantedStrength = 0.2;
constexpr std::size_t kPlantedEpochs = 30;

struct PlantedRun {
  double identity = 0, prevalence = 0, mlp = 0, set = 0, set_thr = 0;
  bool caps_ok = true;
  double train_seconds = 0;
};

Hyper planted_hyper(Arch a) {
  Hyper h;
  h.arch = a;
  h.dims = kPlantedT;
  if (a == Arch::SetAttention) {
    h.embed_dim = 32;
    h.model_dim = 32;
    h.depth = 2;
    h.heads = 4;
  }
  return h;
}

PlantedRun planted_run(std::uint64_t seed) {
  PlantedRun r;
  BinaryMatrix clean = sample_clean(GeneratorSpec::uniform(kPlantedT, kPlantedRank, kPlantedBase, kPlantedStrength, seed),
                                    kPlantedRows);
  plant_and_rule(clean, 7, {0, 1});
  const BinaryMatrix noisy = corrupt(clean, NoiseSpec::uniform(0.3, 0.6, kPlantedT), seed + 100);
  const RowSplit split = split_rows(kPlantedRows, 0.5, 0.3, seed + 200);
  const auto ctr = clean.select_rows(split.train), ntr = noisy.select_rows(split.train);
  const auto cfi = clean.select_rows(split.fit), nfi = noisy.select_rows(split.fit);
  const auto cte = clean.select_rows(split.test), nte = noisy.select_rows(split.test);

  r.identity = *evaluate_denoiser(nte.to_dense<double>(), cte, nte, true).macro_auprc;
  r.prevalence = *evaluate_denoiser(prevalence_impute(nte, ctr.column_prevalence()), cte, nte, true).macro_auprc;
  for (Arch a : {Arch::MLP, Arch::SetAttention}) {
    auto model = DenoiserModel::create(planted_hyper(a), seed);
    TrainConfig tc;
    tc.epochs = kPlantedEpochs;
    tc.batch_size = TrainConfig::default_batch(a);
    tc.seed = seed;
    const auto t0 = Clock::now();
    train_denoiser(model, ntr, ctr, tc);
    r.train_seconds += seconds_since(t0);
    const double macro = *evaluate_denoiser(denoise(model, nte), cte, nte, true).macro_auprc;
    if (a == Arch::MLP) {
      r.mlp = macro;
      continue;
    }
    r.set = macro;
    const ad::Matrix g_fit = model.predict(nfi);
    ThresholdFitConfig fc;
    fc.seed = seed;
    const auto fit = fit_thresholds(g_fit, nfi, cfi, compute_caps(g_fit, nfi, cfi), fc);
    const auto& thr = fit.thresholds;
    for (std::size_t j = 0; j < thr.dims(); ++j)
      if (thr.constrained[j])
        r.caps_ok &= thr.phi[static_cast<Eigen::Index>(j)] >= 0.0 &&
                     thr.phi[static_cast<Eigen::Index>(j)] <= thr.cap[static_cast<Eigen::Index>(j)];
    r.set_thr = *evaluate_denoiser(apply_thresholded(model.predict(nte), thr, nte, true), cte, nte, true).macro_auprc;
  }
  return r;
}

const std::vector<PlantedRun>& planted_runs() {
  static const std::vector<PlantedRun> runs = [] {
    std::vector<PlantedRun> v;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      v.push_back(planted_run(seed));
      const auto& r = v.back();
      std::printf("  seed %llu: identity %.4f prevalence %.4f mlp %.4f set %.4f set+thr %.4f (train %.0f s)\n",
                  static_cast<unsigned long long>(seed), r.identity, r.prevalence, r.mlp, r.set, r.set_thr,
                  r.train_seconds);
      std::fflush(stdout);
    }
    return v;
  }();
  return runs;
}

Outcome criterion6() {
  int ordered = 0, learned = 0;
  std::string gaps;
  for (const auto& r : planted_runs()) {
    const bool models = r.set - r.mlp >= 0.02 && r.mlp - r.prevalence >= 0.02;
    ordered += models && r.prevalence - r.identity >= 0.02;
    learned += models;
    gaps += (gaps.empty() ? "" : "; ") + fmt("set-mlp %+.4f", r.set - r.mlp) + fmt(" mlp-prev %+.4f", r.mlp - r.prevalence) +
            fmt(" prev-id %+.4f", r.prevalence - r.identity);
  }
  // Restricted to observed zeros, identity and prevalence are both constant per code, so prev-id is 0.
  return {ordered >= 2, std::to_string(ordered) + "/3 seeds ordered with gaps >= 0.02, " + std::to_string(learned) +
                            "/3 ignoring prev-id [" + gaps + "]"};
}

Outcome criterion7() {
  int ok = 0;
  bool caps = true;
  std::string diffs;
  for (const auto& r : planted_runs()) {
    ok += r.set_thr >= r.set - 0.005;
    caps &= r.caps_ok;
    diffs += (diffs.empty() ? "" : ", ") + fmt("%+.4f", r.set_thr - r.set);
  }
  return {ok == 3 && caps, "thresholded - plain: " + diffs + (caps ? "; caps hold" : "; cap VIOLATED")};
}

// ------------------------------------------------------------ baselines (8)

BinaryMatrix random_binary(std::size_t rows, std::size_t cols, double p, CounterRng& rng) {
  BinaryMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m.set(i, j, rng.bernoulli(p));
  return m;
}

Outcome criterion8() {
  int monotone = 0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    CounterRng rng(8, k);
    const auto x = random_binary(20 + rng.below(30), 5 + rng.below(15), 0.2 + 0.5 * rng.uniform(), rng);
    SoftImputeConfig cfg;
    cfg.shrinkage = 0.1 + 2.0 * rng.uniform();
    cfg.max_iters = 60;
    cfg.tol = 0.0;
    const auto res = soft_impute(x, cfg);
    bool mono = true;
    for (std::size_t i = 1; i < res.objective.size(); ++i)
      mono &= res.objective[i] <= res.objective[i - 1] * (1.0 + 1e-12) + 1e-12;
    monotone += mono;
  }

  CounterRng rng(88);
  const std::size_t n = 200, T = 40;
  std::vector<bool> u(n), v(T);
  for (auto&& b : u) b = rng.bernoulli(0.5);
  for (auto&& b : v) b = rng.bernoulli(0.5);
  BinaryMatrix x(n, T), hidden(n, T);
  std::size_t n_hidden = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < T; ++j)
      if (u[i] && v[j]) {
        if (rng.bernoulli(0.1)) {
          hidden.set(i, j, true);
          ++n_hidden;
        } else {
          x.set(i, j, true);
        }
      }
  SoftImputeConfig cfg;
  cfg.shrinkage = 1e-6;
  cfg.max_rank = 1;
  cfg.max_iters = 2000;
  cfg.tol = 1e-9;
  const auto z = soft_impute(x, cfg).z;
  std::size_t recovered = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < T; ++j)
      if (hidden(i, j) && z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) >= 0.5) ++recovered;
  const double frac = static_cast<double>(recovered) / static_cast<double>(n_hidden);

  std::size_t knn_violations = 0;
  for (std::uint64_t k = 0; k < 200; ++k) {
    CounterRng r2(808, k);
    const std::size_t cols = 2 + r2.below(12);
    const auto q = random_binary(1 + r2.below(15), cols, r2.uniform(), r2);
    KnnConfig kc;
    kc.buffer = random_binary(1 + r2.below(15), cols, r2.uniform(), r2);
    kc.tau = r2.below(cols + 2);
    kc.k = 1 + r2.below(5);
    kc.majority_vote = k % 2 == 1;
    if (!q.is_subset_of(knn_impute(q, kc))) ++knn_violations;
  }
  return {monotone == 20 && frac >= 0.95 && knn_violations == 0,
          "softImpute monotone " + std::to_string(monotone) + "/20, rank-1 recovered " + fmt("%.4f", frac) + " of " +
              std::to_string(n_hidden) + ", knn dominance violations " + std::to_string(knn_violations) + "/200"};
}

// ------------------------------------------------------------ metrics (9)

struct PrCase {
  std::vector<double> scores;
  std::vector<double> labels;
  double expected;
};

// Expected values are exact fractions from an independent threshold-sweep
// implementation in rational arithmetic.
const std::vector<PrCase>& pr_cases() {
  static const std::vector<PrCase> cases = {
      {{0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}, 1.0 / 1.0},
      {{0.1, 0.9}, {1, 0}, 1.0 / 2.0},
      {{0.5, 0.5, 0.5, 0.5}, {1, 0, 0, 0}, 1.0 / 4.0},
      {{0.9, 0.5, 0.5, 0.5, 0.2}, {1, 1, 0, 0, 1}, 7.0 / 10.0},
      {{0.2, 0.4, 0.6, 0.8}, {1, 0, 1, 0}, 1.0 / 2.0},
      {{2.0 / 3, 1.0 / 3, 1.0, 2.0 / 3, 1.0 / 3, 1.0, 2.0 / 3, 1.0, 1.0 / 3}, {1, 1, 0, 0, 1, 0, 0, 1, 0}, 7.0 / 18.0},
      {{0.7, 0.1, 0.2, 0.5, 0.6, 0.5, 0.5}, {0, 1, 1, 1, 1, 0, 1}, 647.0 / 1050.0},
      {{0.0, 1.0 / 3, 0.0, 2.0 / 3, 2.0 / 3}, {1, 0, 1, 0, 0}, 2.0 / 5.0},
      {{0.2, 0.2, 0.4, 0.6, 0.8, 1.0, 0.2, 0.4, 0.6}, {1, 1, 1, 0, 0, 1, 0, 0, 0}, 5.0 / 9.0},
      {{0.0, 0.5, 1.0, 0.0}, {1, 0, 0, 0}, 1.0 / 4.0},
      {{1.0, 2.0 / 3, 1.0, 1.0, 1.0, 1.0 / 3}, {0, 1, 1, 1, 0, 1}, 17.0 / 30.0},
      {{0.3, 0.3, 0.6}, {0, 0, 1}, 1.0 / 1.0},
      {{1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0}, {0, 0, 0, 0, 1, 0, 0}, 1.0 / 6.0},
      {{1.0, 1.0 / 3, 1.0 / 3, 0.0}, {0, 1, 0, 0}, 1.0 / 3.0},
      {{0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0}, {0, 0, 0, 1, 0, 1, 1}, 13.0 / 21.0},
      {{1.0, 0.7, 0.3, 0.6, 0.9, 0.7}, {1, 0, 0, 0, 1, 1}, 11.0 / 12.0},
      {{2.0 / 3, 1.0, 0.0, 0.0, 2.0 / 3}, {0, 0, 1, 0, 0}, 1.0 / 5.0},
      {{0.8, 0.0, 0.6, 0.5, 0.0, 0.8, 0.5, 0.8, 0.4}, {0, 0, 0, 1, 0, 0, 0, 0, 1}, 19.0 / 84.0},
      {{0.6, 0.2, 0.4, 0.6, 0.6, 0.6}, {1, 0, 0, 0, 0, 1}, 1.0 / 2.0},
      {{0.0, 0.0, 1.0, 0.0, 2.0 / 3, 1.0 / 3, 0.0, 2.0 / 3}, {0, 0, 0, 1, 0, 1, 1, 0}, 1.0 / 3.0},
      {{1.0, 0.0, 0.0, 0.5, 1.0}, {1, 1, 0, 0, 1}, 13.0 / 15.0},
      {{0.6, 1.0, 0.0, 0.6, 0.6, 0.4}, {1, 0, 0, 1, 0, 1}, 8.0 / 15.0},
      {{0.4, 1.0, 1.0, 0.2, 0.6, 1.0, 0.8, 0.0, 0.4}, {1, 0, 1, 1, 0, 1, 1, 0, 0}, 551.0 / 840.0},
      {{0.9, 0.4, 0.4, 0.3, 1.0}, {1, 1, 0, 1, 1}, 71.0 / 80.0},
      {{0.1, 0.2}, {0, 1}, 1.0 / 1.0},
  };
  return cases;
}

Eigen::VectorXd to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Outcome criterion9() {
  double worst_case = 0.0;
  for (const auto& c : pr_cases())
    worst_case = std::max(worst_case, std::abs(*auprc(to_vec(c.scores), to_vec(c.labels)) - c.expected));

  double worst_const = 0.0;
  std::size_t transform_failures = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    CounterRng rng(9, k);
    const auto n = static_cast<Eigen::Index>(2 + rng.below(60));
    Eigen::VectorXd s(n), l(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      s[i] = std::round(rng.uniform() * 12.0) / 12.0;
      l[i] = rng.bernoulli(0.35) ? 1.0 : 0.0;
    }
    l[0] = 1.0;
    const double prev = l.sum() / static_cast<double>(n);
    worst_const = std::max(worst_const, std::abs(*auprc(Eigen::VectorXd::Constant(n, rng.uniform()), l) - prev));
    const double base = *auprc(s, l);
    const Eigen::VectorXd t1 = (2.5 * s.array() + 1.0).matrix();
    const Eigen::VectorXd t2 = s.array().exp().matrix();
    const Eigen::VectorXd t3 = (1.0 / (1.0 + (-8.0 * s.array()).exp())).matrix();
    if (*auprc(t1, l) != base || *auprc(t2, l) != base || *auprc(t3, l) != base) ++transform_failures;
  }
  return {worst_case <= 1e-12 && worst_const <= 1e-12 && transform_failures == 0,
          "25 cases max err " + fmt("%.2e", worst_case) + ", constant-score max err " + fmt("%.2e", worst_const) +
              ", monotone-transform failures " + std::to_string(transform_failures) + "/100"};
}

// ------------------------------------------------------------ spectrum (10)

Outcome criterion10() {
  int above = 0;
  std::size_t inside = 0, total = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    const auto planted = sample_clean(GeneratorSpec::uniform(16, 1, 0.05, 0.4, 1000 + k), 1000);
    const auto sp = spectrum_diagnostic(planted, 100, 2000 + k);
    above += sp.eigvals[0] > sp.band_hi[0];

    CounterRng rng(10, k);
    BinaryMatrix null(1000, 16);
    for (std::size_t i = 0; i < 1000; ++i)
      for (std::size_t j = 0; j < 16; ++j) null.set(i, j, rng.bernoulli(0.05 + 0.02 * static_cast<double>(j)));
    const auto sn = spectrum_diagnostic(null, 100, 3000 + k);
    for (Eigen::Index i = 0; i < sn.eigvals.size(); ++i)
      inside += sn.eigvals[i] >= sn.band_lo[i] && sn.eigvals[i] <= sn.band_hi[i];
    total += static_cast<std::size_t>(sn.eigvals.size());
  }
  const double frac = static_cast<double>(inside) / static_cast<double>(total);
  return {above >= 95 && frac >= 0.98,
          "planted top eigenvalue above band in " + std::to_string(above) + "/100, null inside band " + fmt("%.4f", frac)};
}

// ------------------------------------------------------------ determinism (11)

Outcome criterion11() {
  const fs::path dir = fs::temp_directory_path() / "d2i_acceptance_pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  const std::vector<std::vector<std::string>> stages = {
      {"gen", "--T", "10", "--rows", "300", "--rank", "2", "--seed", "1", "--rule", "7=0,1", "--out", p("clean.ehrb")},
      {"gen", "--T", "10", "--rows", "300", "--rank", "2", "--seed", "9", "--out", p("other.ehrb")},
      {"merge", "--a", p("clean.ehrb"), "--b", p("other.ehrb"), "--out", p("merged.ehrb")},
      {"corrupt", "--in", p("clean.ehrb"), "--beta", "0.3", "--drop", "0.6", "--seed", "2", "--out", p("noisy.ehrb")},
      {"split", "--in", p("clean.ehrb"), "--in", p("noisy.ehrb"), "--seed", "3", "--out-dir", p("s")},
      {"train", "--noisy", p("s/noisy.train.ehrb"), "--clean", p("s/clean.train.ehrb"), "--arch", "set", "--embed-dim",
       "8", "--model-dim", "8", "--heads", "2", "--depth", "1", "--epochs", "2", "--seed", "4", "--out", p("set.ckpt"),
       "--loss-curve", p("loss.csv")},
      {"train", "--noisy", p("s/noisy.train.ehrb"), "--clean", p("s/clean.train.ehrb"), "--arch", "dae", "--width", "16",
       "--latent", "8", "--depth", "2", "--epochs", "2", "--seed", "4", "--out", p("dae.ckpt")},
      {"fit-thresholds", "--model", p("set.ckpt"), "--noisy", p("s/noisy.fit.ehrb"), "--clean", p("s/clean.fit.ehrb"),
       "--epochs", "20", "--batch-size", "16", "--seed", "5", "--out", p("set.thr")},
      {"denoise", "--model", p("set.ckpt"), "--in", p("s/noisy.test.ehrb"), "--thresholds", p("set.thr"), "--out",
       p("set.csv")},
      {"baseline", "--method", "prevalence", "--prev-from", p("s/clean.train.ehrb"), "--in", p("s/noisy.test.ehrb"),
       "--out", p("prev.csv")},
      {"baseline", "--method", "knn", "--buffer", p("s/clean.train.ehrb"), "--tau", "3", "--in",
       p("s/noisy.test.ehrb"), "--out", p("knn.csv")},
      {"baseline", "--method", "softimpute", "--in", p("s/noisy.test.ehrb"), "--out", p("si.csv")},
      {"eval", "--probs", p("set.csv"), "--truth", p("s/clean.test.ehrb"), "--noisy", p("s/noisy.test.ehrb"),
       "--restrict-to-zeros", "--seed", "6", "--out", p("eval.csv"), "--json", p("eval.json")},
      {"holdout", "--method", "model", "--model", p("dae.ckpt"), "--noisy", p("noisy.ehrb"), "--clean",
       p("clean.ehrb"), "--target", "7", "--seed", "7", "--bootstrap-reps", "10", "--out", p("holdout.json")},
      {"spectrum", "--in", p("clean.ehrb"), "--n-random", "20", "--seed", "8", "--out", p("spectrum.csv")},
      {"oracle-check", "--T", "4", "--trials", "10", "--seed", "1", "--out", p("oracle.json")},
      {"gradcheck", "--arch", "mlp", "--width", "8", "--seed", "2", "--out", p("grad.json")},
  };
  std::ostringstream sink_out, sink_err;
  std::vector<std::string> manifests;
  for (const auto& args : stages) {
    if (cli::run(args, sink_out, sink_err) != 0)
      return {false, "stage '" + args.front() + "' failed: " + sink_err.str()};
  }
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.path().string().ends_with(".manifest.json")) manifests.push_back(entry.path().string());
  std::sort(manifests.begin(), manifests.end());
  std::size_t matched = 0, outputs = 0;
  std::vector<std::string> bad;
  for (const auto& m : manifests) {
    std::ostringstream out, err;
    const int code = cli::run({"replay", "--manifest", m}, out, err);
    std::istringstream lines(out.str());
    std::string status, path;
    while (lines >> status >> path) {
      ++outputs;
      if (status == "match") ++matched;
      else bad.push_back(path);
    }
    if (code != 0 && bad.empty()) bad.push_back(m + " (" + err.str() + ")");
  }
  fs::remove_all(dir);
  std::string detail = std::to_string(manifests.size()) + " manifests, " + std::to_string(matched) + "/" +
                       std::to_string(outputs) + " outputs reproduced bitwise";
  for (const auto& b : bad) detail += "; differs: " + b;
  return {bad.empty() && manifests.size() == stages.size() && outputs > 0, detail};
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* env = std::getenv("D2I_ACCEPT_ONLY")) {
    std::stringstream ss(env);
    std::string tok;
    while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
  }
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"oracle equivalence", criterion1},     {"optimality", criterion2},
      {"limit cases", criterion3},            {"gradient correctness", criterion4},
      {"loss reduction identity", criterion5}, {"planted-rule ordering", criterion6},
      {"thresholding non-inferiority", criterion7}, {"baseline contracts", criterion8},
      {"metric references", criterion9},      {"spectrum diagnostic", criterion10},
      {"determinism", criterion11},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
