#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "attnsteer/common.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

/// Decoder-only transformer shape. Blocks are numbered 1..n_blocks in every
/// public interface; token positions are 0-based.
struct ModelConfig {
  int n_blocks = 8;
  int d_model = 128;
  int n_heads = 4;
  int vocab_size = 4096;
  int max_context = 256;
  std::uint64_t seed = 1;
  // Multiplies the embeddings and every branch output written to the residual
  // stream. Every read goes through an RMS norm whose epsilon scales by s^2, so
  // the network function does not depend on s; only the units of the hidden
  // states (and hence of steering coefficients) do. Powers of two are exact.
  float residual_scale = 0.015625f;

  static constexpr int kMlpRatio = 4;
  int head_dim() const noexcept { return d_model / n_heads; }
  int mlp_dim() const noexcept { return kMlpRatio * d_model; }
  float rms_eps() const noexcept;
  void validate() const;

  json to_json() const;
  static ModelConfig from_json(const json& j);
};

struct BlockParams {
  MatrixF w_q, w_k, w_v;  // k x k
  MatrixF w_1;            // k x 4k
  MatrixF w_2;            // 4k x k
  VectorF norm_attn;      // RMS gain before attention
  VectorF norm_mlp;       // RMS gain before the MLP
};

struct ModelParams {
  MatrixF w_e;  // d x k token embedding
  MatrixF w_p;  // T_max x k learned positions
  std::vector<BlockParams> blocks;
  VectorF norm_final;
  MatrixF w_o;  // k x d unembedding

  static ModelParams initialize(const ModelConfig& config);
  static ModelParams zeros_like(const ModelParams& other);
  bool all_finite() const;
  std::size_t parameter_count() const;

  // Visits every tensor as (name, contiguous float span) in a fixed order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn);
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const;
};

/// Per-block hidden states (post-residual, post-steering) and per-head
/// post-softmax causal attention for one prompt.
struct ForwardTrace {
  std::vector<MatrixF> hidden;                  // [block-1]: T x k
  std::vector<std::vector<MatrixF>> attention;  // [block-1][head]: T x T

  int n_blocks() const noexcept { return static_cast<int>(hidden.size()); }
  int n_heads() const noexcept { return attention.empty() ? 0 : static_cast<int>(attention.front().size()); }
  int length() const noexcept { return hidden.empty() ? 0 : static_cast<int>(hidden.front().rows()); }
  const MatrixF& hidden_at(int block) const;
  const MatrixF& attention_at(int block, int head) const;
};

/// Additive steering: H(b) <- H(b) + coefficient * v(b) on every row, for
/// each block b in `vectors`. Vectors must be unit norm or exactly zero.
struct SteeringSpec {
  std::map<int, VectorF> vectors;
  float coefficient = 0.0f;

  void validate(const ModelConfig& config) const;
  std::vector<int> blocks() const;
};

struct ForwardResult {
  MatrixF logits;  // T x d, pre-softmax
  ForwardTrace trace;
};

ForwardResult forward(std::span<const TokenId> prompt, const ModelParams& params, const ModelConfig& config,
                      const SteeringSpec* steering = nullptr, bool capture_trace = true);

/// Causal row-stochastic attention for one head, scores scaled by 1/sqrt(k/heads).
MatrixF attention_matrix(const MatrixF& hidden, const MatrixF& w_k, const MatrixF& w_q, int head, int n_heads);

struct DecodeOptions {
  enum class Mode { Greedy, Temperature };
  Mode mode = Mode::Greedy;
  float temperature = 1.0f;
  std::uint64_t seed = 0;
  int max_new = 16;
};

/// Autoregressive decoding with a per-block key/value cache. Steering is
/// re-applied to every new row, so cached and uncached paths agree.
std::vector<TokenId> generate(std::span<const TokenId> prompt, const ModelParams& params,
                              const ModelConfig& config, const SteeringSpec* steering,
                              const DecodeOptions& decode);

struct TrainOptions {
  int epochs = 1;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double min_learning_rate = 3e-4;
  int warmup_steps = 50;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double holdout_fraction = 0.1;
  std::size_t max_eval_sequences = 256;
  int max_steps = -1;
  double loss_threshold = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 1;

  json to_json() const;
  static TrainOptions from_json(const json& j);
};

struct TrainResult {
  ModelParams params;
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> epoch_train_losses;
  int steps = 0;
  bool below_threshold = false;
};

/// Mean next-token cross-entropy over all positions of one sequence.
double sequence_loss(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config);

/// Adds d(sum of per-position losses)/d(params) into `grad`; returns the summed loss.
double accumulate_gradient(std::span<const TokenId> tokens, const ModelParams& params,
                           const ModelConfig& config, ModelParams& grad);

TrainResult train_toy(std::span<const std::vector<TokenId>> corpus, const ModelConfig& config,
                      const TrainOptions& options);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  json meta;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params,
                     const json& meta = json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

void dump_trace(const std::filesystem::path& path, const ForwardTrace& trace);
ForwardTrace load_trace(const std::filesystem::path& path);

template <typename Fn>
void ModelParams::for_each_tensor(Fn&& fn) {
  auto visit = [&](const std::string& name, auto& t) { fn(name, std::span<float>(t.data(), t.size())); };
  visit("w_e", w_e);
  visit("w_p", w_p);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "block" + std::to_string(b + 1) + ".";
    visit(p + "w_q", blocks[b].w_q);
    visit(p + "w_k", blocks[b].w_k);
    visit(p + "w_v", blocks[b].w_v);
    visit(p + "w_1", blocks[b].w_1);
    visit(p + "w_2", blocks[b].w_2);
    visit(p + "norm_attn", blocks[b].norm_attn);
    visit(p + "norm_mlp", blocks[b].norm_mlp);
  }
  visit("norm_final", norm_final);
  visit("w_o", w_o);
}

template <typename Fn>
void ModelParams::for_each_tensor(Fn&& fn) const {
  const_cast<ModelParams*>(this)->for_each_tensor(
      [&](const std::string& name, std::span<float> s) { fn(name, std::span<const float>(s.data(), s.size())); });
}

}  // namespace attnsteer
