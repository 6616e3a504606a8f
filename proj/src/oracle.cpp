#include "d2i/oracle.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <regex>
#include <stdexcept>
#include <string>

#include "d2i/rng.hpp"

namespace d2i::oracle {
namespace {

void check_dims(std::size_t dims) {
  if (dims == 0 || dims > kMaxDims)
    throw std::invalid_argument("oracle: T must be in [1, " + std::to_string(kMaxDims) + "], got " +
                                std::to_string(dims));
}

void check_compatible(const DiscreteDistribution& dist, const MixtureNoiseExact& noise) {
  if (noise.kernel.rows() != dist.probs.size())
    throw std::invalid_argument("oracle: kernel size does not match distribution size");
}

void check_state(const DiscreteDistribution& dist, StateIndex s) {
  if (s >= state_count(dist.dims)) throw std::out_of_range("oracle: state index out of range");
}

}  // namespace

DiscreteDistribution DiscreteDistribution::from_probs(std::size_t dims, Eigen::VectorXd probs) {
  check_dims(dims);
  if (static_cast<std::size_t>(probs.size()) != state_count(dims))
    throw std::invalid_argument("DiscreteDistribution: expected 2^T probabilities");
  if (!probs.allFinite() || (probs.array() < 0.0).any())
    throw std::invalid_argument("DiscreteDistribution: probabilities must be finite and nonnegative");
  if (std::abs(probs.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("DiscreteDistribution: probabilities must sum to 1");
  return {dims, std::move(probs)};
}

DiscreteDistribution DiscreteDistribution::random(std::size_t dims, std::uint64_t seed, double zero_frac) {
  check_dims(dims);
  CounterRng rng(seed, 0xd157);
  Eigen::VectorXd w(static_cast<Eigen::Index>(state_count(dims)));
  for (Eigen::Index s = 0; s < w.size(); ++s) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    w[s] = rng.uniform() < zero_frac ? 0.0 : -std::log(u);
  }
  if (w.sum() <= 0.0) w[0] = 1.0;
  w /= w.sum();
  // Renormalize once more so the sum is 1 to the last few ulps.
  w /= w.sum();
  return {dims, w};
}

DiscreteDistribution DiscreteDistribution::point_mass(std::size_t dims, StateIndex at) {
  check_dims(dims);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(state_count(dims)));
  if (at >= p.size()) throw std::out_of_range("point_mass: state index out of range");
  p[at] = 1.0;
  return {dims, p};
}

Eigen::VectorXd DiscreteDistribution::mean() const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dims));
  for (Eigen::Index s = 0; s < probs.size(); ++s)
    if (probs[s] > 0.0) m += probs[s] * decode_state(static_cast<StateIndex>(s), dims);
  return m;
}

MixtureNoiseExact MixtureNoiseExact::from_noise_spec(const NoiseSpec& spec) {
  spec.validate();
  const auto dims = static_cast<std::size_t>(spec.drop_prob.size());
  check_dims(dims);
  const auto n = static_cast<Eigen::Index>(state_count(dims));
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index x = 0; x < n; ++x) {
    // Only subsets of x are reachable under one-sided drops.
    const auto clean = static_cast<StateIndex>(x);
    for (StateIndex sub = clean;; sub = (sub - 1) & clean) {
      double prob = 1.0;
      for (std::size_t d = 0; d < dims; ++d) {
        if (!((clean >> d) & 1u)) continue;
        const double rho = spec.drop_prob[static_cast<Eigen::Index>(d)];
        prob *= ((sub >> d) & 1u) ? (1.0 - rho) : rho;
      }
      K(x, sub) = prob;
      if (sub == 0) break;
    }
  }
  return {spec.beta, std::move(K)};
}

MixtureNoiseExact MixtureNoiseExact::identity_kernel(std::size_t dims, double beta) {
  check_dims(dims);
  const auto n = static_cast<Eigen::Index>(state_count(dims));
  return {beta, Eigen::MatrixXd::Identity(n, n)};
}

MixtureNoiseExact MixtureNoiseExact::zero_kernel(std::size_t dims, double beta) {
  check_dims(dims);
  const auto n = static_cast<Eigen::Index>(state_count(dims));
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n, n);
  K.col(0).setOnes();
  return {beta, std::move(K)};
}

std::size_t MixtureNoiseExact::dims() const {
  std::size_t d = 0;
  while ((Eigen::Index{1} << d) < kernel.rows()) ++d;
  return d;
}

double MixtureNoiseExact::gamma() const {
  if (beta == 0.0) return std::numeric_limits<double>::infinity();
  return (1.0 - beta) / beta;
}

void MixtureNoiseExact::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("MixtureNoiseExact: beta outside [0,1]");
  if (kernel.rows() != kernel.cols() || kernel.rows() == 0 ||
      static_cast<std::size_t>(kernel.rows()) != state_count(dims()))
    throw std::invalid_argument("MixtureNoiseExact: kernel must be 2^T x 2^T");
  if ((kernel.array() < 0.0).any()) throw std::invalid_argument("MixtureNoiseExact: negative kernel entry");
  const Eigen::VectorXd row_sums = kernel.rowwise().sum();
  if (((row_sums.array() - 1.0).abs() > 1e-12).any())
    throw std::invalid_argument("MixtureNoiseExact: kernel rows must sum to 1");
}

Eigen::VectorXd marginal_q(const DiscreteDistribution& dist, const MixtureNoiseExact& noise) {
  check_compatible(dist, noise);
  noise.validate();
  if (std::abs(dist.probs.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("marginal_q: distribution is not normalized");
  return noise.kernel.transpose() * dist.probs;
}

Eigen::VectorXd mixture_marginal(const DiscreteDistribution& dist, const MixtureNoiseExact& noise) {
  return noise.beta * dist.probs + (1.0 - noise.beta) * marginal_q(dist, noise);
}

double omega(double p_val, double q_val, double gamma) {
  if (p_val < 0.0 || q_val < 0.0 || gamma < 0.0) throw std::invalid_argument("omega: negative argument");
  if (std::isinf(gamma)) {
    if (q_val > 0.0) return 0.0;
    if (p_val > 0.0) return 1.0;
  }
  const double denom = p_val + gamma * q_val;
  if (!(denom > 0.0)) throw std::domain_error("omega: x̃ impossible under both branches");
  return p_val / denom;
}

Eigen::VectorXd mmse_denoiser(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                              StateIndex x_tilde) {
  check_compatible(dist, noise);
  check_state(dist, x_tilde);
  // q(x|x̃) ∝ q(x̃|x) p(x)
  const Eigen::VectorXd joint = noise.kernel.col(x_tilde).cwiseProduct(dist.probs);
  const double z = joint.sum();
  if (!(z > 0.0)) throw std::domain_error("mmse_denoiser: x̃ has zero probability under q");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dist.dims));
  for (Eigen::Index s = 0; s < joint.size(); ++s)
    if (joint[s] > 0.0) acc += joint[s] * decode_state(static_cast<StateIndex>(s), dist.dims);
  return acc / z;
}

Eigen::VectorXd optimal_denoiser(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                                 StateIndex x_tilde) {
  check_compatible(dist, noise);
  check_state(dist, x_tilde);
  const Eigen::VectorXd q_tilde = marginal_q(dist, noise);
  const double p_val = dist.probs[x_tilde];
  const double q_val = q_tilde[x_tilde];
  if (!(noise.beta * p_val + (1.0 - noise.beta) * q_val > 0.0))
    throw std::domain_error("optimal_denoiser: x̃ has zero probability under the mixture");
  if (noise.beta == 0.0) return mmse_denoiser(dist, noise, x_tilde);
  const double w = omega(p_val, q_val, noise.gamma());
  const Eigen::VectorXd x = decode_state(x_tilde, dist.dims);
  if (w == 1.0) return x;
  return w * x + (1.0 - w) * mmse_denoiser(dist, noise, x_tilde);
}

Eigen::VectorXd posterior_mean_bruteforce(const DiscreteDistribution& dist,
                                          const MixtureNoiseExact& noise, StateIndex x_tilde) {
  check_compatible(dist, noise);
  check_state(dist, x_tilde);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dist.dims));
  double z = 0.0;
  for (Eigen::Index s = 0; s < dist.probs.size(); ++s) {
    const double channel = noise.beta * (s == x_tilde ? 1.0 : 0.0) + (1.0 - noise.beta) * noise.kernel(s, x_tilde);
    const double w = dist.probs[s] * channel;
    if (w == 0.0) continue;
    acc += w * decode_state(static_cast<StateIndex>(s), dist.dims);
    z += w;
  }
  if (!(z > 0.0)) throw std::domain_error("posterior_mean_bruteforce: x̃ has zero probability under the mixture");
  return acc / z;
}

DenoiserTable tabulate(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                       const DenoiserFn& f) {
  const Eigen::VectorXd reach = mixture_marginal(dist, noise);
  DenoiserTable table(reach.size(), static_cast<Eigen::Index>(dist.dims));
  table.setConstant(std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index s = 0; s < reach.size(); ++s)
    if (reach[s] > 0.0) table.row(s) = f(static_cast<StateIndex>(s)).transpose();
  return table;
}

double mse_of_denoiser(const DiscreteDistribution& dist, const MixtureNoiseExact& noise,
                       const DenoiserTable& table) {
  check_compatible(dist, noise);
  if (table.rows() != dist.probs.size() || static_cast<std::size_t>(table.cols()) != dist.dims)
    throw std::invalid_argument("mse_of_denoiser: table must be 2^T x T");
  double total = 0.0;
  for (Eigen::Index x = 0; x < dist.probs.size(); ++x) {
    if (dist.probs[x] == 0.0) continue;
    const Eigen::RowVectorXd clean = decode_state(static_cast<StateIndex>(x), dist.dims).transpose();
    for (Eigen::Index xt = 0; xt < dist.probs.size(); ++xt) {
      const double channel = noise.beta * (x == xt ? 1.0 : 0.0) + (1.0 - noise.beta) * noise.kernel(x, xt);
      if (channel == 0.0) continue;
      if (!table.row(xt).allFinite())
        throw std::invalid_argument("mse_of_denoiser: denoiser undefined on a reachable state");
      total += dist.probs[x] * channel * (table.row(xt) - clean).squaredNorm();
    }
  }
  return total;
}

void save_distribution(const DiscreteDistribution& dist, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "dist v1 T=" << dist.dims << '\n' << std::setprecision(17);
  for (Eigen::Index s = 0; s < dist.probs.size(); ++s) out << dist.probs[s] << '\n';
}

DiscreteDistribution load_distribution(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  static const std::regex header(R"(dist v1 T=(\d+))");
  std::smatch match;
  if (!std::getline(in, line) || !std::regex_match(line, match, header))
    throw ParseError(path.string() + ": malformed dist header", 1);
  const auto dims = static_cast<std::size_t>(std::stoul(match[1].str()));
  check_dims(dims);
  Eigen::VectorXd probs(static_cast<Eigen::Index>(state_count(dims)));
  for (Eigen::Index s = 0; s < probs.size(); ++s) {
    if (!std::getline(in, line)) throw ParseError(path.string() + ": too few probabilities", static_cast<std::size_t>(s) + 2);
    try {
      probs[s] = std::stod(line);
    } catch (const std::exception&) {
      throw ParseError(path.string() + ": not a number", static_cast<std::size_t>(s) + 2);
    }
  }
  return DiscreteDistribution::from_probs(dims, std::move(probs));
}

}  // namespace d2i::oracle
