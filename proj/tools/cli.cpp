#include "d2i/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "d2i/autodiff.hpp"
#include "d2i/baselines.hpp"
#include "d2i/data.hpp"
#include "d2i/denoisers.hpp"
#include "d2i/eval.hpp"
#include "d2i/oracle.hpp"
#include "d2i/rng.hpp"
#include "d2i/thresholding.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace d2i::cli {

namespace {

// Error categories map to exit codes; kind is what scripts match on.
struct CliError : std::runtime_error {
  CliError(std::string kind, const std::string& msg, int code)
      : std::runtime_error(msg), kind(std::move(kind)), code(code) {}
  std::string kind;
  int code;
};

[[noreturn]] void usage(const std::string& msg) { throw CliError("usage", msg, 2); }
[[noreturn]] void input_error(const std::string& msg) { throw CliError("input", msg, 3); }

constexpr int kCheckFailed = 1;

struct Context {
  std::vector<std::string> argv;
  std::string command;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::string manifest;
  std::size_t threads = 1;
  std::ostream* out = nullptr;
};

std::string shape_str(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

// Splits "key=value" lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) input_error("cannot open config " + path.string());
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      usage(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    std::string key = trim(line.substr(0, eq));
    while (!key.empty() && key.front() == '-') key.erase(0, 1);
    kv.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return kv;
}

// Inlines a --config file into the argument list. Keys already given as
// flags are skipped so the command line wins.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> kept;
  std::optional<std::string> config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) usage("--config needs a path");
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      kept.push_back(args[i]);
    }
  }
  if (!config) return kept;
  auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    return std::any_of(kept.begin(), kept.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  for (const auto& [key, value] : read_config(*config))
    if (!given(key)) kept.push_back("--" + key + "=" + value);
  return kept;
}

json resolved_config(const CLI::App* sub) {
  json cfg = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (!opt->results().empty()) {
      std::string joined;
      for (const auto& r : opt->results()) joined += (joined.empty() ? "" : ",") + r;
      cfg[name] = joined;
    } else {
      cfg[name] = opt->get_default_str();
    }
  }
  return cfg;
}

json file_list(const std::vector<fs::path>& files) {
  json arr = json::array();
  for (const auto& f : files) arr.push_back({{"path", f.string()}, {"fnv1a64", file_digest(f)}});
  return arr;
}

void write_manifest(const Context& ctx, const CLI::App* sub) {
  fs::path path = ctx.manifest;
  if (path.empty())
    path = ctx.outputs.empty() ? fs::path(ctx.command + ".manifest.json") : manifest_path_for(ctx.outputs.front());
  json m;
  m["schema"] = kManifestSchema;
  m["version"] = kVersion;
  m["command"] = ctx.command;
  m["argv"] = ctx.argv;
  m["cwd"] = fs::current_path().string();
  m["config"] = resolved_config(sub);
  json seeds = json::object();
  for (const char* key : {"seed"})
    if (const CLI::Option* opt = sub->get_option_no_throw(std::string("--") + key); opt && !opt->results().empty())
      seeds[key] = std::stoull(opt->results().front());
  m["seeds"] = seeds;
  m["inputs"] = file_list(ctx.inputs);
  m["outputs"] = file_list(ctx.outputs);
  std::ofstream f(path, std::ios::binary);
  if (!f) input_error("cannot write manifest " + path.string());
  f << m.dump(2) << '\n';
}

BinaryMatrix load_input(Context& ctx, const fs::path& p) {
  ctx.inputs.push_back(p);
  return load_matrix(p);
}

Eigen::MatrixXd load_probs(Context& ctx, const fs::path& p) {
  ctx.inputs.push_back(p);
  return load_prob_csv(p);
}

DenoiserModel load_model(Context& ctx, const fs::path& p) {
  ctx.inputs.push_back(p);
  return load_checkpoint(p);
}

void require_seed(const CLI::App* sub) {
  if (sub->count("--seed") == 0) usage(sub->get_name() + ": --seed is required");
}

// ---------------------------------------------------------------- options

struct GenOpts {
  std::size_t dims = 0, rows = 0, rank = 4;
  double base = 0.05, strength = 0.15;
  std::uint64_t seed = 0;
  std::string rule, out;
};

struct CorruptOpts {
  std::string in, out, drop_file, target_prev;
  double beta = -1.0, drop = -1.0;
  std::uint64_t seed = 0;
};

struct MergeOpts {
  std::string a, b, out;
};

struct SplitOpts {
  std::vector<std::string> in;
  std::string out_dir;
  double train_frac = 0.5, fit_frac = 0.3;
  std::uint64_t seed = 0;
};

struct TrainOpts {
  std::string noisy, clean, arch = "set", out, loss_curve;
  std::size_t epochs = 50, batch_size = 0, width = 512, depth = 4, latent = 512, embed_dim = 200, model_dim = 200,
              heads = 10;
  double lr = 3e-4, weight_decay = 1e-5, lambda = 2.0, mask_prob = 0.3;
  std::uint64_t seed = 0;
};

struct FitOpts {
  std::string model, noisy, clean, out;
  double lambda = 2.0, alpha = 100.0, lr = 1e-2;
  std::size_t epochs = 200, batch_size = 0;
  std::uint64_t seed = 0;
};

struct DenoiseOpts {
  std::string model, in, thresholds, out;
  bool hard = false;
};

struct MethodOpts {
  std::string method;
  std::string prev_from, buffer, model, thresholds;
  std::size_t k = 5, max_rank = 0, max_iters = 100;
  long long tau = -1;
  bool majority_vote = false, hard = false;
  double shrinkage = 1.0, tol = 1e-4;
};

struct BaselineOpts {
  MethodOpts m;
  std::string in, out;
};

struct EvalOpts {
  std::string probs, truth, noisy, method = "unnamed", out, json_out;
  bool restrict_to_zeros = false, timing = false;
  std::size_t reps = 50;
  double fraction = 0.8;
  std::uint64_t seed = 0;
};

struct HoldoutOpts {
  MethodOpts m;
  std::string noisy, clean, out;
  std::size_t target = 0, reps = 50;
  double train_frac = 0.5, fraction = 0.8;
  std::uint64_t seed = 0;
};

struct SpectrumOpts {
  std::string in, out;
  std::size_t n_random = 100;
  std::uint64_t seed = 0;
};

struct OracleOpts {
  std::size_t dims = 6, trials = 50;
  double tol = 1e-10;
  std::uint64_t seed = 0;
  std::string out;
};

struct GradOpts {
  std::string arch = "set", out;
  std::size_t dims = 6, rows = 4, probes = 200, width = 16, depth = 2, latent = 8, embed_dim = 8, model_dim = 8,
              heads = 2;
  double lambda = 2.0, tol = 1e-4;
  std::uint64_t seed = 0;
};

struct ReplayOpts {
  std::string manifest;
};

void add_method_options(CLI::App* sub, MethodOpts& m, bool allow_model) {
  std::string methods = "identity|prevalence|knn|softimpute";
  if (allow_model) methods += "|model";
  sub->add_option("--method", m.method, "Imputation method: " + methods)->required();
  sub->add_option("--prev-from", m.prev_from, "prevalence: matrix whose column means are used (training split)")
      ->check(CLI::ExistingFile);
  sub->add_option("--buffer", m.buffer, "knn: clean reference rows")->check(CLI::ExistingFile);
  sub->add_option("--k", m.k, "knn: neighbours for --majority-vote");
  sub->add_option("--tau", m.tau, "knn: Hamming tolerance (required for knn)");
  sub->add_flag("--majority-vote", m.majority_vote, "knn: vote over k neighbours instead of copying the nearest");
  sub->add_option("--shrinkage", m.shrinkage, "softimpute: singular value shrinkage");
  sub->add_option("--max-rank", m.max_rank, "softimpute: rank cap (0 = min(50, min dim))");
  sub->add_option("--max-iters", m.max_iters, "softimpute: iteration cap");
  sub->add_option("--tol", m.tol, "softimpute: relative change tolerance");
  if (allow_model) {
    sub->add_option("--model", m.model, "model: denoiser checkpoint")->check(CLI::ExistingFile);
    sub->add_option("--thresholds", m.thresholds, "model: threshold file")->check(CLI::ExistingFile);
    sub->add_flag("--hard", m.hard, "model: hard thresholding");
  }
}

void validate_method(const MethodOpts& m) {
  static const std::vector<std::string> known = {"identity", "prevalence", "knn", "softimpute", "model"};
  if (std::find(known.begin(), known.end(), m.method) == known.end()) usage("unknown method '" + m.method + "'");
  if (m.method == "prevalence" && m.prev_from.empty()) usage("prevalence needs --prev-from");
  if (m.method == "knn") {
    if (m.buffer.empty()) usage("knn needs --buffer");
    if (m.tau < 0) usage("knn needs --tau (nonnegative)");
    if (m.k == 0) usage("--k must be at least 1");
  }
  if (m.method == "softimpute") {
    SoftImputeConfig cfg{m.shrinkage, m.max_rank, m.max_iters, m.tol};
    try {
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      usage(e.what());
    }
  }
  if (m.method == "model" && m.model.empty()) usage("model needs --model");
}

// Loads whatever the method needs and returns the imputer.
Imputer make_imputer(Context& ctx, const MethodOpts& m, std::shared_ptr<DenoiserModel>& model_holder) {
  if (m.method == "identity")
    return [](const BinaryMatrix& x) { return Eigen::MatrixXd(x.to_dense<double>()); };
  if (m.method == "prevalence") {
    const Eigen::VectorXd prev = load_input(ctx, m.prev_from).column_prevalence();
    return [prev](const BinaryMatrix& x) { return prevalence_impute(x, prev); };
  }
  if (m.method == "knn") {
    KnnConfig cfg;
    cfg.k = m.k;
    cfg.tau = static_cast<std::size_t>(m.tau);
    cfg.majority_vote = m.majority_vote;
    cfg.buffer = load_input(ctx, m.buffer);
    return [cfg](const BinaryMatrix& x) { return Eigen::MatrixXd(knn_impute(x, cfg).to_dense<double>()); };
  }
  if (m.method == "softimpute") {
    SoftImputeConfig cfg{m.shrinkage, m.max_rank, m.max_iters, m.tol};
    return [cfg](const BinaryMatrix& x) { return soft_impute(x, cfg).z; };
  }
  model_holder = std::make_shared<DenoiserModel>(load_model(ctx, m.model));
  if (m.thresholds.empty())
    return [model_holder](const BinaryMatrix& x) { return Eigen::MatrixXd(denoise(*model_holder, x)); };
  ctx.inputs.push_back(m.thresholds);
  const ThresholdVector thr = load_thresholds(m.thresholds);
  const bool hard = m.hard;
  return [model_holder, thr, hard](const BinaryMatrix& x) {
    return Eigen::MatrixXd(apply_thresholded(*model_holder, thr, x, hard));
  };
}

// Parses "7=0,1" into target 7 and sources {0,1}.
std::pair<std::size_t, std::vector<std::size_t>> parse_rule(const std::string& rule) {
  const auto eq = rule.find('=');
  if (eq == std::string::npos) usage("--rule expects target=src,src,...");
  try {
    std::pair<std::size_t, std::vector<std::size_t>> r;
    r.first = std::stoul(rule.substr(0, eq));
    std::stringstream ss(rule.substr(eq + 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) r.second.push_back(std::stoul(tok));
    if (r.second.empty()) usage("--rule needs at least one source");
    return r;
  } catch (const std::logic_error&) {
    usage("--rule expects target=src,src,...");
  }
}

// ---------------------------------------------------------------- commands

int cmd_gen(Context& ctx, const GenOpts& o) {
  GeneratorSpec spec = GeneratorSpec::uniform(o.dims, o.rank, o.base, o.strength, o.seed);
  std::optional<std::pair<std::size_t, std::vector<std::size_t>>> rule;
  if (!o.rule.empty()) {
    rule = parse_rule(o.rule);
    if (rule->first >= o.dims) usage("--rule target out of range");
    for (auto s : rule->second)
      if (s >= o.dims) usage("--rule source out of range");
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    usage(e.what());
  }
  BinaryMatrix x = sample_clean(spec, o.rows);
  if (rule) plant_and_rule(x, rule->first, rule->second);
  save_matrix(x, o.out);
  ctx.outputs.push_back(o.out);
  return 0;
}

int cmd_corrupt(Context& ctx, const CorruptOpts& o) {
  const bool mixture = o.beta >= 0.0;
  if (mixture == !o.target_prev.empty()) usage("give exactly one of --beta or --target-prev");
  if (mixture && (o.drop < 0.0) == o.drop_file.empty()) usage("give exactly one of --drop or --drop-file");
  const BinaryMatrix clean = load_input(ctx, o.in);
  BinaryMatrix noisy;
  if (mixture) {
    NoiseSpec noise;
    noise.beta = o.beta;
    if (!o.drop_file.empty()) {
      ctx.inputs.push_back(o.drop_file);
      noise.drop_prob = load_vector(o.drop_file);
    } else {
      noise.drop_prob = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(clean.cols()), o.drop);
    }
    noisy = corrupt(clean, noise, o.seed);
  } else {
    ctx.inputs.push_back(o.target_prev);
    noisy = prevalence_match_mask(clean, load_vector(o.target_prev), o.seed);
  }
  save_matrix(noisy, o.out);
  ctx.outputs.push_back(o.out);
  return 0;
}

int cmd_merge(Context& ctx, const MergeOpts& o) {
  const BinaryMatrix a = load_input(ctx, o.a), b = load_input(ctx, o.b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    input_error("shape mismatch: " + o.a + " is " + shape_str(a.rows(), a.cols()) + " but " + o.b + " is " +
                shape_str(b.rows(), b.cols()));
  save_matrix(or_merge(a, b), o.out);
  ctx.outputs.push_back(o.out);
  return 0;
}

int cmd_split(Context& ctx, const SplitOpts& o) {
  if (!(o.train_frac > 0.0) || !(o.fit_frac >= 0.0) || o.train_frac + o.fit_frac > 1.0)
    usage("split fractions must satisfy train > 0, fit >= 0, train + fit <= 1");
  std::vector<BinaryMatrix> mats;
  for (const auto& p : o.in) mats.push_back(load_input(ctx, p));
  for (std::size_t i = 1; i < mats.size(); ++i)
    if (mats[i].rows() != mats[0].rows())
      input_error("row count mismatch: " + o.in[0] + " has " + std::to_string(mats[0].rows()) + " rows but " + o.in[i] +
                  " has " + std::to_string(mats[i].rows()));
  const RowSplit split = split_rows(mats[0].rows(), o.train_frac, o.fit_frac, o.seed);
  fs::create_directories(o.out_dir);
  for (std::size_t i = 0; i < mats.size(); ++i) {
    const fs::path src(o.in[i]);
    for (const auto& [name, rows] : {std::pair{"train", &split.train}, {"fit", &split.fit}, {"test", &split.test}}) {
      const fs::path dst = fs::path(o.out_dir) / (src.stem().string() + "." + name + src.extension().string());
      save_matrix(mats[i].select_rows(*rows), dst);
      ctx.outputs.push_back(dst);
    }
  }
  return 0;
}

Hyper make_hyper(const std::string& arch, std::size_t dims, std::size_t width, std::size_t depth, std::size_t latent,
                 std::size_t embed_dim, std::size_t model_dim, std::size_t heads) {
  Hyper h;
  try {
    h.arch = parse_arch(arch);
  } catch (const std::invalid_argument& e) {
    usage(e.what());
  }
  h.dims = dims;
  h.width = width;
  h.depth = depth;
  h.latent = latent;
  h.embed_dim = embed_dim;
  h.model_dim = model_dim;
  h.heads = heads;
  return h;
}

int cmd_train(Context& ctx, const TrainOpts& o) {
  Hyper probe = make_hyper(o.arch, 1, o.width, o.depth, o.latent, o.embed_dim, o.model_dim, o.heads);
  TrainConfig cfg;
  cfg.lambda = o.lambda;
  cfg.mask_prob = o.mask_prob;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size == 0 ? TrainConfig::default_batch(probe.arch) : o.batch_size;
  cfg.lr = o.lr;
  cfg.weight_decay = o.weight_decay;
  cfg.seed = o.seed;
  try {
    cfg.validate();
    probe.validate();
  } catch (const std::invalid_argument& e) {
    usage(e.what());
  }
  const BinaryMatrix noisy = load_input(ctx, o.noisy), clean = load_input(ctx, o.clean);
  if (noisy.rows() != clean.rows() || noisy.cols() != clean.cols())
    input_error("shape mismatch: " + o.noisy + " is " + shape_str(noisy.rows(), noisy.cols()) + " but " + o.clean +
                " is " + shape_str(clean.rows(), clean.cols()));
  Hyper h = probe;
  h.dims = noisy.cols();
  DenoiserModel model = DenoiserModel::create(h, o.seed);
  const TrainResult res = train_denoiser(model, noisy, clean, cfg);
  save_checkpoint(model, o.out);
  ctx.outputs.push_back(o.out);
  if (!o.loss_curve.empty()) {
    save_loss_curve(res, o.loss_curve);
    ctx.outputs.push_back(o.loss_curve);
  }
  if (!res.epoch_loss.empty()) *ctx.out << "final_loss " << res.epoch_loss.back() << '\n';
  return 0;
}

int cmd_fit(Context& ctx, const FitOpts& o) {
  if (!(o.alpha > 0.0) || !(o.lr > 0.0)) usage("--alpha and --lr must be positive");
  DenoiserModel model = load_model(ctx, o.model);
  const BinaryMatrix noisy = load_input(ctx, o.noisy), clean = load_input(ctx, o.clean);
  if (noisy.cols() != model.dims()) input_error(o.noisy + " has " + std::to_string(noisy.cols()) + " columns but " +
                                                o.model + " expects " + std::to_string(model.dims()));
  const ad::Matrix outputs = model.predict(noisy);
  const Caps caps = compute_caps(outputs, noisy, clean);
  ThresholdFitConfig cfg;
  cfg.lambda = o.lambda;
  cfg.alpha = o.alpha;
  cfg.lr = o.lr;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.seed = o.seed;
  const ThresholdFitResult res = fit_thresholds(outputs, noisy, clean, caps, cfg);
  save_thresholds(res.thresholds, o.out);
  ctx.outputs.push_back(o.out);
  *ctx.out << "initial_loss " << res.initial_loss << "\nfinal_loss " << res.final_loss << '\n';
  return 0;
}

int cmd_denoise(Context& ctx, const DenoiseOpts& o) {
  DenoiserModel model = load_model(ctx, o.model);
  const BinaryMatrix x = load_input(ctx, o.in);
  if (x.cols() != model.dims())
    input_error(o.in + " has " + std::to_string(x.cols()) + " columns but " + o.model + " expects " +
                std::to_string(model.dims()));
  Eigen::MatrixXd probs;
  if (o.thresholds.empty()) {
    probs = denoise(model, x);
  } else {
    ctx.inputs.push_back(o.thresholds);
    probs = apply_thresholded(model, load_thresholds(o.thresholds), x, o.hard);
  }
  save_prob_csv(probs, o.out);
  ctx.outputs.push_back(o.out);
  return 0;
}

int cmd_baseline(Context& ctx, const BaselineOpts& o) {
  validate_method(o.m);
  if (o.m.method == "model") usage("baseline does not take --method model; use denoise");
  std::shared_ptr<DenoiserModel> holder;
  const Imputer imp = make_imputer(ctx, o.m, holder);
  const BinaryMatrix x = load_input(ctx, o.in);
  if (o.m.method == "knn") *ctx.out << "knn tau=" << o.m.tau << " k=" << o.m.k << '\n';
  save_prob_csv(imp(x), o.out);
  ctx.outputs.push_back(o.out);
  return 0;
}

int cmd_eval(Context& ctx, const EvalOpts& o, const CLI::App* sub) {
  if (o.reps > 0) require_seed(sub);
  if (!(o.fraction > 0.0 && o.fraction <= 1.0)) usage("--bootstrap-fraction must be in (0, 1]");
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXd probs = load_probs(ctx, o.probs);
  const BinaryMatrix truth = load_input(ctx, o.truth), noisy = load_input(ctx, o.noisy);
  auto mismatch = [&](const std::string& a, std::size_t ar, std::size_t ac, const std::string& b, std::size_t br,
                      std::size_t bc) {
    if (ar != br || ac != bc)
      input_error("shape mismatch: " + a + " is " + shape_str(ar, ac) + " but " + b + " is " + shape_str(br, bc));
  };
  mismatch(o.probs, static_cast<std::size_t>(probs.rows()), static_cast<std::size_t>(probs.cols()), o.truth,
           truth.rows(), truth.cols());
  mismatch(o.truth, truth.rows(), truth.cols(), o.noisy, noisy.rows(), noisy.cols());
  EvalReport rep = evaluate_denoiser(probs, truth, noisy, o.restrict_to_zeros);
  rep.method = o.method;
  rep.seed = o.seed;
  if (o.reps > 0) {
    const auto ci = bootstrap_ci(truth.rows(), macro_auprc_metric(probs, truth, noisy, o.restrict_to_zeros),
                                 {o.fraction, o.reps, o.seed});
    rep.ci_low = ci.low();
    rep.ci_high = ci.high();
  }
  if (o.timing) rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!o.out.empty()) {
    save_report_csv(rep, o.out);
    ctx.outputs.push_back(o.out);
  }
  const std::string summary = report_json(rep);
  if (!o.json_out.empty()) {
    std::ofstream f(o.json_out, std::ios::binary);
    if (!f) input_error("cannot open " + o.json_out + " for writing");
    f << summary << '\n';
    f.close();
    ctx.outputs.push_back(o.json_out);
  }
  *ctx.out << summary << '\n';
  return 0;
}

int cmd_holdout(Context& ctx, const HoldoutOpts& o) {
  validate_method(o.m);
  if (!(o.train_frac > 0.0 && o.train_frac < 1.0)) usage("--train-frac must be in (0, 1)");
  std::shared_ptr<DenoiserModel> holder;
  const Imputer imp = make_imputer(ctx, o.m, holder);
  const BinaryMatrix noisy = load_input(ctx, o.noisy), clean = load_input(ctx, o.clean);
  if (noisy.rows() != clean.rows() || noisy.cols() != clean.cols())
    input_error("shape mismatch: " + o.noisy + " is " + shape_str(noisy.rows(), noisy.cols()) + " but " + o.clean +
                " is " + shape_str(clean.rows(), clean.cols()));
  if (o.target >= noisy.cols()) usage("--target out of range");
  HoldoutConfig cfg;
  cfg.train_frac = o.train_frac;
  cfg.seed = o.seed;
  cfg.bootstrap = {o.fraction, o.reps, o.seed};
  HoldoutResult res;
  if (o.reps == 0) {
    cfg.bootstrap.reps = 1;
    cfg.bootstrap.fraction = 1.0;
  }
  res = holdout_code_task(imp, noisy, clean, o.target, cfg);
  json j;
  j["method"] = o.m.method;
  j["target"] = o.target;
  j["auprc"] = res.auprc ? json(*res.auprc) : json(nullptr);
  j["ci_low"] = res.ci && o.reps > 0 ? json(res.ci->low()) : json(nullptr);
  j["ci_high"] = res.ci && o.reps > 0 ? json(res.ci->high()) : json(nullptr);
  j["n_train"] = res.n_train;
  j["n_test"] = res.n_test;
  j["seed"] = o.seed;
  const std::string s = j.dump();
  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::binary);
    if (!f) input_error("cannot open " + o.out + " for writing");
    f << s << '\n';
    f.close();
    ctx.outputs.push_back(o.out);
  }
  *ctx.out << s << '\n';
  return 0;
}

int cmd_spectrum(Context& ctx, const SpectrumOpts& o) {
  if (o.n_random == 0) usage("--n-random must be at least 1");
  const BinaryMatrix x = load_input(ctx, o.in);
  const SpectrumResult res = spectrum_diagnostic(x, o.n_random, o.seed);
  for (const auto& w : res.warnings) *ctx.out << "warning: " << w << '\n';
  save_spectrum_csv(res, o.out);
  ctx.outputs.push_back(o.out);
  *ctx.out << "inside_fraction " << res.inside_fraction() << '\n';
  return 0;
}

int cmd_oracle_check(Context& ctx, const OracleOpts& o) {
  if (o.dims < 1 || o.dims > 12) usage("--T must be in [1, 12]");
  static constexpr double kBetas[] = {0.1, 0.5, 0.9, 1.0};
  double worst = 0.0;
  for (std::size_t t = 0; t < o.trials; ++t) {
    CounterRng rng(o.seed, t);
    const auto dist = oracle::DiscreteDistribution::random(o.dims, rng(), 0.2);
    NoiseSpec spec;
    spec.beta = kBetas[t % 4];
    spec.drop_prob.resize(static_cast<Eigen::Index>(o.dims));
    for (Eigen::Index d = 0; d < spec.drop_prob.size(); ++d) spec.drop_prob[d] = rng.uniform();
    const auto noise = oracle::MixtureNoiseExact::from_noise_spec(spec);
    const Eigen::VectorXd reach = oracle::mixture_marginal(dist, noise);
    for (oracle::StateIndex s = 0; s < oracle::state_count(o.dims); ++s) {
      if (!(reach[static_cast<Eigen::Index>(s)] > 0.0)) continue;
      const Eigen::VectorXd diff = oracle::optimal_denoiser(dist, noise, s) -
                                   oracle::posterior_mean_bruteforce(dist, noise, s);
      worst = std::max(worst, diff.cwiseAbs().maxCoeff());
    }
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6e", worst);
  *ctx.out << "max_abs_diff " << buf << '\n';
  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::binary);
    f << json{{"max_abs_diff", worst}, {"trials", o.trials}, {"T", o.dims}, {"seed", o.seed}}.dump() << '\n';
    f.close();
    ctx.outputs.push_back(o.out);
  }
  return worst < o.tol ? 0 : kCheckFailed;
}

int cmd_gradcheck(Context& ctx, const GradOpts& o) {
  Hyper h = make_hyper(o.arch, o.dims, o.width, o.depth, o.latent, o.embed_dim, o.model_dim, o.heads);
  try {
    h.validate();
  } catch (const std::invalid_argument& e) {
    usage(e.what());
  }
  if (o.rows == 0) usage("--rows must be at least 1");
  CounterRng rng(o.seed, 1);
  ad::Matrix clean(static_cast<Eigen::Index>(o.rows), static_cast<Eigen::Index>(o.dims));
  ad::Matrix noisy(clean.rows(), clean.cols());
  for (Eigen::Index i = 0; i < clean.size(); ++i) {
    clean.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    noisy.data()[i] = clean.data()[i] > 0.0 && rng.bernoulli(0.6) ? 1.0 : 0.0;
  }
  DenoiserModel model = DenoiserModel::create(h, o.seed);
  const auto params = model.parameters();
  const ad::LossSpec spec{o.lambda, 1e-7};
  const auto res = ad::grad_check(
      params, [&](ad::Graph& g) { return denoiser_loss(g, model, noisy, clean, spec); }, 1e-5, o.probes, o.seed);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6e", res.max_rel_error);
  *ctx.out << "max_rel_error " << buf << " probed " << res.probed << " worst " << res.worst << '\n';
  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::binary);
    f << json{{"max_rel_error", res.max_rel_error}, {"probed", res.probed}, {"worst", res.worst}, {"seed", o.seed}}
             .dump()
      << '\n';
    f.close();
    ctx.outputs.push_back(o.out);
  }
  return res.max_rel_error < o.tol ? 0 : kCheckFailed;
}

// Restores the working directory on scope exit.
struct CwdGuard {
  fs::path saved = fs::current_path();
  ~CwdGuard() {
    std::error_code ec;
    fs::current_path(saved, ec);
  }
};

int cmd_replay(const ReplayOpts& o, std::ostream& out, std::ostream& err) {
  std::ifstream in(o.manifest);
  if (!in) input_error("cannot open manifest " + o.manifest);
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw CliError("parse", o.manifest + ": " + e.what(), 3);
  }
  if (m.value("schema", "") != kManifestSchema)
    throw CliError("schema", o.manifest + ": expected schema '" + std::string(kManifestSchema) + "', found '" +
                                 m.value("schema", "") + "'",
                   3);
  if (m.value("version", "") != kVersion)
    throw CliError("schema", o.manifest + ": written by '" + m.value("version", "") + "', this is '" + kVersion + "'",
                   3);
  const auto argv = m.at("argv").get<std::vector<std::string>>();
  CwdGuard guard;
  fs::current_path(m.at("cwd").get<std::string>());
  std::ostringstream sink;
  const int code = run(argv, sink, err);
  if (code != 0 && code != kCheckFailed) return code;
  bool all = true;
  for (const auto& entry : m.at("outputs")) {
    const std::string path = entry.at("path");
    const bool same = fs::exists(path) && file_digest(path) == entry.at("fnv1a64").get<std::string>();
    out << (same ? "match " : "mismatch ") << path << '\n';
    all &= same;
  }
  return all ? 0 : kCheckFailed;
}

void common_options(CLI::App* sub, Context& ctx) {
  sub->add_option("--manifest", ctx.manifest, "Manifest path (default: <first output>.manifest.json)");
  sub->add_option("--threads", ctx.threads, "Worker cap; execution is sequential and deterministic")
      ->check(CLI::PositiveNumber);
  // Consumed before parsing; declared here so --help lists it.
  sub->add_option("--config", "key=value file; flags on the command line win");
}

}  // namespace

std::filesystem::path manifest_path_for(const std::filesystem::path& output) {
  return fs::path(output.string() + ".manifest.json");
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) input_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  auto fail = [&](const std::string& kind, const std::string& msg, int code) {
    err << json{{"error", kind}, {"message", msg}}.dump() << '\n';
    return code;
  };
  try {
    Context ctx;
    ctx.out = &out;
    ctx.argv = expand_config(raw_args);

    CLI::App app{"Denoising of unrecorded positives in sparse binary records", "d2i"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    GenOpts gen;
    auto* s_gen = app.add_subcommand("gen", "Sample a clean matrix from the low-rank generator");
    s_gen->add_option("--T", gen.dims, "Number of codes")->required();
    s_gen->add_option("--rows", gen.rows, "Number of rows")->required();
    s_gen->add_option("--rank", gen.rank, "Latent factors");
    s_gen->add_option("--base", gen.base, "Base activation probability");
    s_gen->add_option("--strength", gen.strength, "Factor strength");
    s_gen->add_option("--rule", gen.rule, "Deterministic AND rule target=src,src (e.g. 7=0,1)");
    s_gen->add_option("--seed", gen.seed, "Generator seed")->required();
    s_gen->add_option("--out", gen.out, "Output matrix")->required();

    CorruptOpts cor;
    auto* s_cor = app.add_subcommand("corrupt", "Apply mixture corruption or prevalence-matched masking");
    s_cor->add_option("--in", cor.in, "Clean matrix")->required()->check(CLI::ExistingFile);
    s_cor->add_option("--beta", cor.beta, "Passthrough probability (mixture mode)")->check(CLI::Range(0.0, 1.0));
    s_cor->add_option("--drop", cor.drop, "Drop probability for every code")->check(CLI::Range(0.0, 1.0));
    s_cor->add_option("--drop-file", cor.drop_file, "Per-code drop probabilities")->check(CLI::ExistingFile);
    s_cor->add_option("--target-prev", cor.target_prev, "Target prevalences (prevalence-match mode)")
        ->check(CLI::ExistingFile);
    s_cor->add_option("--seed", cor.seed, "Corruption seed")->required();
    s_cor->add_option("--out", cor.out, "Output matrix")->required();

    MergeOpts mer;
    auto* s_mer = app.add_subcommand("merge", "Elementwise OR of two matrices");
    s_mer->add_option("--a", mer.a, "First matrix")->required()->check(CLI::ExistingFile);
    s_mer->add_option("--b", mer.b, "Second matrix")->required()->check(CLI::ExistingFile);
    s_mer->add_option("--out", mer.out, "Output matrix")->required();

    SplitOpts spl;
    auto* s_spl = app.add_subcommand("split", "Split aligned matrices into train/fit/test rows");
    s_spl->add_option("--in", spl.in, "Matrices sharing rows (repeatable)")->required()->check(CLI::ExistingFile);
    s_spl->add_option("--train-frac", spl.train_frac, "Training fraction");
    s_spl->add_option("--fit-frac", spl.fit_frac, "Threshold-fit fraction; the rest is test");
    s_spl->add_option("--seed", spl.seed, "Shuffle seed")->required();
    s_spl->add_option("--out-dir", spl.out_dir, "Directory for <stem>.{train,fit,test}<ext>")->required();

    TrainOpts tr;
    auto* s_tr = app.add_subcommand("train", "Train a neural denoiser");
    s_tr->add_option("--noisy", tr.noisy, "Noisy training matrix")->required()->check(CLI::ExistingFile);
    s_tr->add_option("--clean", tr.clean, "Clean training matrix")->required()->check(CLI::ExistingFile);
    s_tr->add_option("--arch", tr.arch, "mlp|dae|set");
    s_tr->add_option("--epochs", tr.epochs, "Epochs");
    s_tr->add_option("--batch-size", tr.batch_size, "Batch size (0: 128 dense, 48 set)");
    s_tr->add_option("--lr", tr.lr, "AdamW learning rate");
    s_tr->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay");
    s_tr->add_option("--lambda", tr.lambda, "Weight on positives dropped by the noise");
    s_tr->add_option("--mask-prob", tr.mask_prob, "Extra input masking probability");
    s_tr->add_option("--width", tr.width, "Hidden width (mlp, dae)");
    s_tr->add_option("--depth", tr.depth, "Hidden layers or attention blocks");
    s_tr->add_option("--latent", tr.latent, "Bottleneck size (dae)");
    s_tr->add_option("--embed-dim", tr.embed_dim, "Code embedding size (set)");
    s_tr->add_option("--model-dim", tr.model_dim, "Attention width (set)");
    s_tr->add_option("--heads", tr.heads, "Attention heads (set)");
    s_tr->add_option("--seed", tr.seed, "Init and shuffle seed")->required();
    s_tr->add_option("--out", tr.out, "Checkpoint path")->required();
    s_tr->add_option("--loss-curve", tr.loss_curve, "Optional epoch,mean_loss CSV");

    FitOpts fit;
    auto* s_fit = app.add_subcommand("fit-thresholds", "Fit per-code thresholds on a held-out split");
    s_fit->add_option("--model", fit.model, "Checkpoint")->required()->check(CLI::ExistingFile);
    s_fit->add_option("--noisy", fit.noisy, "Noisy fit matrix")->required()->check(CLI::ExistingFile);
    s_fit->add_option("--clean", fit.clean, "Clean fit matrix")->required()->check(CLI::ExistingFile);
    s_fit->add_option("--lambda", fit.lambda, "Loss weight");
    s_fit->add_option("--alpha", fit.alpha, "Sigmoid sharpness");
    s_fit->add_option("--lr", fit.lr, "AdamW learning rate");
    s_fit->add_option("--epochs", fit.epochs, "Epochs");
    s_fit->add_option("--batch-size", fit.batch_size, "Batch size (0: full batch)");
    s_fit->add_option("--seed", fit.seed, "Shuffle seed")->required();
    s_fit->add_option("--out", fit.out, "Threshold file")->required();

    DenoiseOpts den;
    auto* s_den = app.add_subcommand("denoise", "Score a noisy matrix with a trained denoiser");
    s_den->add_option("--model", den.model, "Checkpoint")->required()->check(CLI::ExistingFile);
    s_den->add_option("--in", den.in, "Noisy matrix")->required()->check(CLI::ExistingFile);
    s_den->add_option("--thresholds", den.thresholds, "Threshold file")->check(CLI::ExistingFile);
    s_den->add_flag("--hard", den.hard, "Hard thresholding");
    s_den->add_option("--out", den.out, "Probability CSV")->required();

    BaselineOpts bas;
    auto* s_bas = app.add_subcommand("baseline", "Run a classical imputation baseline");
    add_method_options(s_bas, bas.m, false);
    s_bas->add_option("--in", bas.in, "Noisy matrix")->required()->check(CLI::ExistingFile);
    s_bas->add_option("--out", bas.out, "Probability CSV")->required();

    EvalOpts ev;
    auto* s_ev = app.add_subcommand("eval", "Per-code, macro and micro AUPRC with a bootstrap interval");
    s_ev->add_option("--probs", ev.probs, "Probability CSV")->required()->check(CLI::ExistingFile);
    s_ev->add_option("--truth", ev.truth, "Clean matrix")->required()->check(CLI::ExistingFile);
    s_ev->add_option("--noisy", ev.noisy, "Noisy matrix")->required()->check(CLI::ExistingFile);
    s_ev->add_option("--method", ev.method, "Label stored in the report");
    s_ev->add_flag("--restrict-to-zeros", ev.restrict_to_zeros, "Score only positions that are 0 in the noisy matrix");
    s_ev->add_option("--bootstrap-reps", ev.reps, "Bootstrap repetitions (0 disables)");
    s_ev->add_option("--bootstrap-fraction", ev.fraction, "Row fraction per repetition");
    s_ev->add_option("--seed", ev.seed, "Bootstrap seed (required when reps > 0)");
    s_ev->add_flag("--timing", ev.timing, "Record wall time in the report");
    s_ev->add_option("--out", ev.out, "Per-code CSV");
    s_ev->add_option("--json", ev.json_out, "Summary JSON");

    HoldoutOpts ho;
    auto* s_ho = app.add_subcommand("holdout", "Hold one code out and predict it from the imputed matrix");
    add_method_options(s_ho, ho.m, true);
    s_ho->add_option("--noisy", ho.noisy, "Noisy matrix")->required()->check(CLI::ExistingFile);
    s_ho->add_option("--clean", ho.clean, "Clean matrix")->required()->check(CLI::ExistingFile);
    s_ho->add_option("--target", ho.target, "Code to hold out")->required();
    s_ho->add_option("--train-frac", ho.train_frac, "Classifier training fraction");
    s_ho->add_option("--bootstrap-reps", ho.reps, "Bootstrap repetitions (0 disables)");
    s_ho->add_option("--bootstrap-fraction", ho.fraction, "Row fraction per repetition");
    s_ho->add_option("--seed", ho.seed, "Split and bootstrap seed")->required();
    s_ho->add_option("--out", ho.out, "Result JSON");

    SpectrumOpts sp;
    auto* s_sp = app.add_subcommand("spectrum", "Covariance spectrum against prevalence-matched random matrices");
    s_sp->add_option("--in", sp.in, "Matrix")->required()->check(CLI::ExistingFile);
    s_sp->add_option("--n-random", sp.n_random, "Random matrices in the null band");
    s_sp->add_option("--seed", sp.seed, "Null sampling seed")->required();
    s_sp->add_option("--out", sp.out, "index,eigval,band_lo,band_hi CSV")->required();

    OracleOpts orc;
    auto* s_orc = app.add_subcommand("oracle-check", "Closed-form optimal denoiser against brute-force posterior means");
    s_orc->add_option("--T", orc.dims, "Codes per instance");
    s_orc->add_option("--trials", orc.trials, "Random instances");
    s_orc->add_option("--tol", orc.tol, "Pass threshold");
    s_orc->add_option("--seed", orc.seed, "Instance seed")->required();
    s_orc->add_option("--out", orc.out, "Optional result JSON");

    GradOpts gc;
    auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference check of a denoiser's gradients");
    s_gc->add_option("--arch", gc.arch, "mlp|dae|set");
    s_gc->add_option("--T", gc.dims, "Codes");
    s_gc->add_option("--rows", gc.rows, "Batch rows");
    s_gc->add_option("--probes", gc.probes, "Coordinates probed");
    s_gc->add_option("--lambda", gc.lambda, "Loss weight");
    s_gc->add_option("--width", gc.width, "Hidden width");
    s_gc->add_option("--depth", gc.depth, "Layers or blocks");
    s_gc->add_option("--latent", gc.latent, "Bottleneck size");
    s_gc->add_option("--embed-dim", gc.embed_dim, "Embedding size");
    s_gc->add_option("--model-dim", gc.model_dim, "Attention width");
    s_gc->add_option("--heads", gc.heads, "Attention heads");
    s_gc->add_option("--tol", gc.tol, "Pass threshold on max relative error");
    s_gc->add_option("--seed", gc.seed, "Init and data seed")->required();
    s_gc->add_option("--out", gc.out, "Optional result JSON");

    ReplayOpts rep;
    auto* s_rep = app.add_subcommand("replay", "Re-run a manifest and compare output digests");
    s_rep->add_option("--manifest", rep.manifest, "Manifest to replay")->required()->check(CLI::ExistingFile);

    for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; }))
      if (sub != s_rep) common_options(sub, ctx);

    try {
      std::vector<std::string> rev(ctx.argv.rbegin(), ctx.argv.rend());
      app.parse(rev);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::CallForVersion&) {
      out << kVersion << '\n';
      return 0;
    } catch (const CLI::ParseError& e) {
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      return fail("usage", msg, 2);
    }

    if (s_rep->parsed()) return cmd_replay(rep, out, err);

    CLI::App* sub = app.get_subcommands().front();
    ctx.command = sub->get_name();
    int code = 0;
    if (sub == s_gen) code = cmd_gen(ctx, gen);
    else if (sub == s_cor) code = cmd_corrupt(ctx, cor);
    else if (sub == s_mer) code = cmd_merge(ctx, mer);
    else if (sub == s_spl) code = cmd_split(ctx, spl);
    else if (sub == s_tr) code = cmd_train(ctx, tr);
    else if (sub == s_fit) code = cmd_fit(ctx, fit);
    else if (sub == s_den) code = cmd_denoise(ctx, den);
    else if (sub == s_bas) code = cmd_baseline(ctx, bas);
    else if (sub == s_ev) code = cmd_eval(ctx, ev, sub);
    else if (sub == s_ho) code = cmd_holdout(ctx, ho);
    else if (sub == s_sp) code = cmd_spectrum(ctx, sp);
    else if (sub == s_orc) code = cmd_oracle_check(ctx, orc);
    else if (sub == s_gc) code = cmd_gradcheck(ctx, gc);
    write_manifest(ctx, sub);
    return code;
  } catch (const CliError& e) {
    return fail(e.kind, e.what(), e.code);
  } catch (const ParseError& e) {
    return fail("parse", e.what(), 3);
  } catch (const std::invalid_argument& e) {
    return fail("invalid", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 4);
  }
}

}  // namespace d2i::cli
