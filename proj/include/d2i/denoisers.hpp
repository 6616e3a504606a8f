#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "d2i/autodiff.hpp"
#include "d2i/binary_matrix.hpp"
#include "d2i/rng.hpp"

namespace d2i {

enum class Arch { MLP, DAE, SetAttention };

std::string arch_name(Arch a);
Arch parse_arch(const std::string& s);

/// Architecture record. Defaults are the full-size settings: 4 x 512 for the
/// dense models, 200-dim embeddings with 4 blocks of 10 heads for the set
/// model.
struct Hyper {
  Arch arch = Arch::SetAttention;
  std::size_t dims = 0;
  std::size_t width = 512;      // MLP / DAE hidden width
  std::size_t depth = 4;        // hidden layers (MLP/DAE) or attention blocks
  std::size_t latent = 512;     // DAE bottleneck
  std::size_t embed_dim = 200;  // per-dimension embedding size
  std::size_t model_dim = 200;  // attention block width
  std::size_t heads = 10;

  void validate() const;
};

/// A denoiser g_theta mapping noisy binary rows to per-dimension
/// probabilities. Parameters live in a fixed-size vector so pointers handed
/// to the graph and optimizer stay valid for the model's lifetime.
class DenoiserModel {
 public:
  static DenoiserModel create(const Hyper& hyper, std::uint64_t seed);

  const Hyper& hyper() const { return hyper_; }
  std::size_t dims() const { return hyper_.dims; }

  /// N x T probabilities, recorded on `g`.
  ad::Var forward(ad::Graph& g, const ad::Matrix& x_noisy);
  /// Raw g_theta outputs, evaluated in chunks of `batch` rows.
  ad::Matrix predict(const BinaryMatrix& x_noisy, std::size_t batch = 256);

  std::vector<ad::Parameter*> parameters();
  ad::Parameter& parameter(const std::string& name);
  const ad::Parameter& parameter(const std::string& name) const;
  const std::vector<ad::Parameter>& parameter_list() const { return params_; }
  std::size_t parameter_count() const;

  /// Zeroes the output layer so every output is exactly sigmoid(0) = 0.5.
  void zero_output_head();

  /// Set model only: reorders the per-dimension embedding rows so that new
  /// row k is old row perm[k].
  void permute_embeddings(const std::vector<std::size_t>& perm);

  friend bool operator==(const DenoiserModel& a, const DenoiserModel& b);

 private:
  DenoiserModel() = default;
  void add(std::string name, ad::Matrix value);
  void add_linear(const std::string& name, std::size_t in, std::size_t out, CounterRng& rng);
  void add_layer_norm(const std::string& name, std::size_t width);
  ad::Var p(ad::Graph& g, const std::string& name);
  ad::Var linear(ad::Graph& g, ad::Var x, const std::string& name);
  ad::Var attention_block(ad::Graph& g, ad::Var x, const std::string& name, Eigen::Index set_size);

  ad::Var forward_mlp(ad::Graph& g, ad::Var x);
  ad::Var forward_dae(ad::Graph& g, ad::Var x);
  ad::Var forward_set(ad::Graph& g, ad::Var x);

  Hyper hyper_;
  std::vector<ad::Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::string head_;
};

struct TrainConfig {
  double lambda = 2.0;
  double mask_prob = 0.3;
  std::size_t epochs = 50;
  std::size_t batch_size = 48;
  double lr = 3e-4;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;

  void validate() const;
  /// 128 for the dense models, 48 for the set model.
  static std::size_t default_batch(Arch a) { return a == Arch::SetAttention ? 48 : 128; }
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean weighted CE per row, per epoch
};

/// Trains in place: each step masks extra input entries to 0 with
/// probability mask_prob, evaluates the weighted CE against the clean
/// target and takes an AdamW step.
TrainResult train_denoiser(DenoiserModel& model, const BinaryMatrix& noisy, const BinaryMatrix& clean,
                           const TrainConfig& cfg);

/// g_theta(x̃) with observed positives forced to exactly 1.
ad::Matrix denoise(DenoiserModel& model, const BinaryMatrix& x_noisy);

/// Weighted CE summed over a batch; the loss used in training and gradient checks.
ad::Var denoiser_loss(ad::Graph& g, DenoiserModel& model, const ad::Matrix& noisy, const ad::Matrix& clean,
                      const ad::LossSpec& spec);

/// "ckpt v1" format; values written with 17 significant digits.
void save_checkpoint(const DenoiserModel& model, const std::filesystem::path& path);
DenoiserModel load_checkpoint(const std::filesystem::path& path);

/// Loss curve as CSV "epoch,mean_loss".
void save_loss_curve(const TrainResult& result, const std::filesystem::path& path);

}  // namespace d2i
