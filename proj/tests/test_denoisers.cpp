#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "d2i/baselines.hpp"
#include "d2i/data.hpp"
#include "d2i/denoisers.hpp"
#include "d2i/eval.hpp"
#include "d2i/rng.hpp"

using namespace d2i;

namespace {

Hyper small(Arch a, std::size_t T) {
  Hyper h;
  h.arch = a;
  h.dims = T;
  h.width = 16;
  h.depth = a == Arch::SetAttention ? 2 : 4;
  h.latent = 8;
  h.embed_dim = 8;
  h.model_dim = 8;
  h.heads = 2;
  return h;
}

BinaryMatrix random_binary(std::size_t rows, std::size_t cols, double p, std::uint64_t seed) {
  BinaryMatrix m(rows, cols);
  CounterRng rng(seed);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m.set(i, j, rng.bernoulli(p));
  return m;
}

ad::Matrix dense(const BinaryMatrix& m) { return m.to_dense<double>(); }

// T=8 planted-rule data: code 7 = code 0 AND code 1, code 7 dropped 90% of the time.
struct Planted {
  BinaryMatrix clean, noisy;
};

Planted planted_t8(std::uint64_t seed, std::size_t n = 2000) {
  auto clean = sample_clean(GeneratorSpec::uniform(8, 2, 0.2, 0.3, seed), n);
  plant_and_rule(clean, 7, {0, 1});
  NoiseSpec noise = NoiseSpec::uniform(0.3, 0.1, 8);
  noise.drop_prob[7] = 0.9;
  return {clean, corrupt(clean, noise, seed + 1)};
}

const Arch kArchs[] = {Arch::MLP, Arch::DAE, Arch::SetAttention};

}  // namespace

TEST(Arch, NamesRoundTrip) {
  for (Arch a : kArchs) EXPECT_EQ(parse_arch(arch_name(a)), a);
  EXPECT_EQ(parse_arch("set"), Arch::SetAttention);
  EXPECT_THROW(parse_arch("cdae"), std::invalid_argument);
}

TEST(Hyper, FullSizeDefaults) {
  Hyper h;
  EXPECT_EQ(h.width, 512u);
  EXPECT_EQ(h.depth, 4u);
  EXPECT_EQ(h.embed_dim, 200u);
  EXPECT_EQ(h.heads, 10u);
  h.dims = 4;
  h.model_dim = 201;
  EXPECT_THROW(h.validate(), std::invalid_argument);
}

TEST(Forward, ZeroHeadGivesOneHalf) {
  for (Arch a : kArchs) {
    auto m = DenoiserModel::create(small(a, 6), 1);
    m.zero_output_head();
    const auto out = m.predict(random_binary(5, 6, 0.4, 2));
    EXPECT_TRUE((out.array() == 0.5).all()) << arch_name(a);
    const auto d = denoise(m, BinaryMatrix(3, 6));
    EXPECT_TRUE((d.array() == 0.5).all()) << arch_name(a);
  }
}

TEST(Forward, OutputsInUnitIntervalAndRejectsWrongWidth) {
  for (Arch a : kArchs) {
    auto m = DenoiserModel::create(small(a, 6), 3);
    const auto out = m.predict(random_binary(10, 6, 0.4, 4));
    EXPECT_GT(out.minCoeff(), 0.0);
    EXPECT_LT(out.maxCoeff(), 1.0);
    EXPECT_THROW(m.predict(BinaryMatrix(2, 5)), std::invalid_argument);
  }
}

TEST(Forward, IdenticalRowsGiveIdenticalOutputs) {
  for (Arch a : kArchs) {
    auto m = DenoiserModel::create(small(a, 7), 5);
    BinaryMatrix x(4, 7);
    for (std::size_t i = 0; i < 4; ++i) {
      x.set(i, 1, true);
      x.set(i, 5, true);
    }
    const auto out = m.predict(x);
    for (Eigen::Index i = 1; i < 4; ++i) EXPECT_EQ(out.row(i), out.row(0));
  }
}

TEST(Forward, SetModelIsPermutationEquivariant) {
  const std::size_t T = 9;
  auto m = DenoiserModel::create(small(Arch::SetAttention, T), 6);
  const auto x = random_binary(6, T, 0.4, 7);
  const auto base = m.predict(x);
  CounterRng rng(8);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::size_t> perm(T);
    for (std::size_t k = 0; k < T; ++k) perm[k] = k;
    shuffle_in_place(perm, rng);
    auto pm = m;
    pm.permute_embeddings(perm);
    const auto out = pm.predict(x.permute_columns(perm));
    for (std::size_t k = 0; k < T; ++k)
      for (Eigen::Index i = 0; i < out.rows(); ++i)
        EXPECT_NEAR(out(i, static_cast<Eigen::Index>(k)), base(i, static_cast<Eigen::Index>(perm[k])), 1e-10);
  }
}

TEST(GradCheck, EveryArchitectureUnderWeightedLoss) {
  const std::size_t T = 6;
  const auto clean = random_binary(4, T, 0.5, 9);
  const auto noisy = corrupt(clean, NoiseSpec::uniform(0.3, 0.5, T), 10);
  for (Arch a : kArchs) {
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
      auto m = DenoiserModel::create(small(a, T), 100 + seed);
      const auto params = m.parameters();
      const auto res = ad::grad_check(
          params, [&](ad::Graph& g) { return denoiser_loss(g, m, dense(noisy), dense(clean), {2.0, 1e-7}); }, 1e-5, 200,
          seed);
      EXPECT_LT(res.max_rel_error, 1e-4) << arch_name(a) << " worst " << res.worst;
      EXPECT_EQ(res.probed, 200u);
    }
  }
}

TEST(Denoise, PreservesObservedPositives) {
  for (Arch a : kArchs) {
    auto m = DenoiserModel::create(small(a, 6), 11);
    const auto x = random_binary(20, 6, 0.5, 12);
    const auto out = denoise(m, x);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        if (x(i, j)) { EXPECT_EQ(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), 1.0); }
    BinaryMatrix ones(1, 6);
    for (std::size_t j = 0; j < 6; ++j) ones.set(0, j, true);
    EXPECT_TRUE((denoise(m, ones).array() == 1.0).all());
  }
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  auto m = DenoiserModel::create(small(Arch::MLP, 6), 13);
  const auto before = m;
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto x = random_binary(10, 6, 0.5, 14);
  const auto res = train_denoiser(m, x, x, cfg);
  EXPECT_TRUE(res.epoch_loss.empty());
  EXPECT_TRUE(m == before);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.mask_prob = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.mask_prob = 0.3;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(TrainConfig::default_batch(Arch::MLP), 128u);
  EXPECT_EQ(TrainConfig::default_batch(Arch::SetAttention), 48u);
}

TEST(Train, LossDecreasesByEpochTen) {
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto data = planted_t8(seed, 600);
    auto m = DenoiserModel::create(small(Arch::MLP, 8), seed);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 128;
    cfg.seed = seed;
    const auto res = train_denoiser(m, data.noisy, data.clean, cfg);
    ASSERT_EQ(res.epoch_loss.size(), 10u);
    improved += res.epoch_loss[9] < res.epoch_loss[0];
  }
  EXPECT_GE(improved, 2);
}

TEST(Train, DeterministicCheckpoints) {
  const auto data = planted_t8(4, 300);
  const auto dir = std::filesystem::temp_directory_path();
  std::string bytes[2];
  for (int r = 0; r < 2; ++r) {
    auto m = DenoiserModel::create(small(Arch::SetAttention, 8), 21);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 22;
    train_denoiser(m, data.noisy, data.clean, cfg);
    const auto path = dir / ("d2i_det_" + std::to_string(r) + ".ckpt");
    save_checkpoint(m, path);
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    bytes[r] = ss.str();
    std::filesystem::remove(path);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Checkpoint, RoundTripEveryArchitecture) {
  for (Arch a : kArchs) {
    auto m = DenoiserModel::create(small(a, 5), 23);
    const auto path = std::filesystem::temp_directory_path() / "d2i_rt.ckpt";
    save_checkpoint(m, path);
    auto back = load_checkpoint(path);
    EXPECT_TRUE(back == m) << arch_name(a);
    EXPECT_EQ(back.hyper().arch, a);
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, RejectsMalformedHeader) {
  const auto path = std::filesystem::temp_directory_path() / "d2i_bad.ckpt";
  std::ofstream(path) << "ckpt v9 arch=mlp\n";
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}

TEST(PlantedRule, SetModelLearnsConjunction) {
  const auto data = planted_t8(1);
  Hyper h = small(Arch::SetAttention, 8);
  h.embed_dim = 32;
  h.model_dim = 32;
  h.heads = 4;
  auto m = DenoiserModel::create(h, 1);
  TrainConfig cfg;
  // the attention model sits on a plateau for a while before picking up the rule
  cfg.epochs = 60;
  cfg.seed = 1;
  train_denoiser(m, data.noisy, data.clean, cfg);
  const auto g = m.predict(data.noisy);

  double present = 0, n_present = 0, absent = 0, n_absent = 0, bayes_absent = 0;
  for (std::size_t i = 0; i < data.noisy.rows(); ++i) {
    if (data.noisy(i, 7)) continue;
    if (data.noisy(i, 0) && data.noisy(i, 1)) {
      present += g(static_cast<Eigen::Index>(i), 7);
      ++n_present;
    } else {
      absent += g(static_cast<Eigen::Index>(i), 7);
      bayes_absent += data.clean(i, 7) ? 1.0 : 0.0;
      ++n_absent;
    }
  }
  // Observed codes 0 and 1 force code 7 clean, so the Bayes rate there is 1;
  // on the rest it is the empirical rate of hidden code-7 positives.
  ASSERT_GT(n_present, 20);
  EXPECT_LE(bayes_absent / n_absent, 0.2);
  EXPECT_GE(present / n_present, 0.8);
  EXPECT_LE(absent / n_absent, 0.2);

  const auto test = planted_t8(101, 1000);
  const auto probs = denoise(m, test.noisy);
  const auto prev = prevalence_impute(test.noisy, data.noisy.column_prevalence());
  const auto ours = evaluate_denoiser(probs, test.clean, test.noisy, true);
  const auto base = evaluate_denoiser(prev, test.clean, test.noisy, true);
  EXPECT_GT(*ours.per_dim_auprc[7], *base.per_dim_auprc[7]);
}

TEST(PlantedRule, DaeBeatsPrevalenceOnCodeSeven) {
  const auto data = planted_t8(2);
  Hyper h = small(Arch::DAE, 8);
  h.width = 64;
  h.latent = 32;
  auto m = DenoiserModel::create(h, 2);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 128;
  cfg.seed = 2;
  train_denoiser(m, data.noisy, data.clean, cfg);
  const auto test = planted_t8(102, 1000);
  const auto ours = evaluate_denoiser(denoise(m, test.noisy), test.clean, test.noisy, true);
  const auto base = evaluate_denoiser(prevalence_impute(test.noisy, data.noisy.column_prevalence()), test.clean,
                                      test.noisy, true);
  EXPECT_GT(*ours.per_dim_auprc[7], *base.per_dim_auprc[7]);
}

TEST(LossCurve, CsvFormat) {
  TrainResult r{{1.5, 0.25}};
  const auto path = std::filesystem::temp_directory_path() / "d2i_curve.csv";
  save_loss_curve(r, path);
  std::ifstream in(path);
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  EXPECT_EQ(l1, "epoch,mean_loss");
  EXPECT_EQ(l2.substr(0, 5), "1,1.5");
  EXPECT_EQ(l3.substr(0, 6), "2,0.25");
  std::filesystem::remove(path);
}
