#include "attnsteer/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

namespace attnsteer {

namespace {

constexpr float kRmsEps = 1e-5f;
constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

inline float gelu(float u) { return 0.5f * u * (1.0f + std::erf(u * kInvSqrt2)); }
inline float gelu_grad(float u) {
  return 0.5f * (1.0f + std::erf(u * kInvSqrt2)) + u * kInvSqrt2Pi * std::exp(-0.5f * u * u);
}

// Row-wise x / rms(x) * gain. `inv_rms` receives 1/rms per row.
MatrixF rms_norm(const MatrixF& x, const VectorF& gain, float eps, VectorF* inv_rms = nullptr) {
  const Eigen::Index k = x.cols();
  MatrixF out(x.rows(), k);
  if (inv_rms) inv_rms->resize(x.rows());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const float ms = x.row(t).squaredNorm() / static_cast<float>(k);
    const float inv = 1.0f / std::sqrt(ms + eps);
    out.row(t) = (x.row(t) * inv).cwiseProduct(gain.transpose());
    if (inv_rms) (*inv_rms)(t) = inv;
  }
  return out;
}

// Adds the input gradient of rms_norm to `dx` and the gain gradient to `dgain`.
void rms_norm_backward(const MatrixF& x, const VectorF& inv_rms, const VectorF& gain, const MatrixF& dout,
                       MatrixF& dx, VectorF& dgain) {
  const float k = static_cast<float>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const RowVectorF xhat = x.row(t) * inv_rms(t);
    const RowVectorF dxhat = dout.row(t).cwiseProduct(gain.transpose());
    dgain += dout.row(t).cwiseProduct(xhat).transpose();
    const float proj = dxhat.dot(xhat) / k;
    dx.row(t) += (dxhat - xhat * proj) * inv_rms(t);
  }
}

// Causal softmax of scale * q k^T, rows t attend to columns 0..t.
MatrixF causal_attention(const Eigen::Ref<const MatrixF>& q, const Eigen::Ref<const MatrixF>& k, float scale) {
  const Eigen::Index T = q.rows();
  MatrixF scores = (q * k.transpose()) * scale;
  for (Eigen::Index t = 0; t < T; ++t) {
    const float mx = scores.row(t).head(t + 1).maxCoeff();
    float sum = 0.0f;
    for (Eigen::Index j = 0; j <= t; ++j) {
      const float e = std::exp(scores(t, j) - mx);
      scores(t, j) = e;
      sum += e;
    }
    const float inv = 1.0f / sum;
    for (Eigen::Index j = 0; j <= t; ++j) scores(t, j) *= inv;
    for (Eigen::Index j = t + 1; j < T; ++j) scores(t, j) = 0.0f;
  }
  return scores;
}

// Activations of one block kept for the backward pass.
struct BlockActivations {
  MatrixF input, norm1, q, k, v, mixed, z, norm2, pre_act, act;
  VectorF inv_rms1, inv_rms2;
  std::vector<MatrixF> attn;
};

MatrixF block_forward(const MatrixF& h, const BlockParams& bp, const ModelConfig& config,
                      std::vector<MatrixF>* attn_out, BlockActivations* acts) {
  const int dh = config.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  VectorF inv1;
  const float eps = config.rms_eps();
  MatrixF n1 = rms_norm(h, bp.norm_attn, eps, &inv1);
  MatrixF q = n1 * bp.w_q;
  MatrixF k = n1 * bp.w_k;
  MatrixF v = n1 * bp.w_v;
  MatrixF mixed(h.rows(), h.cols());
  std::vector<MatrixF> attn(config.n_heads);
  for (int hd = 0; hd < config.n_heads; ++hd) {
    attn[hd] = causal_attention(q.middleCols(hd * dh, dh), k.middleCols(hd * dh, dh), scale);
    mixed.middleCols(hd * dh, dh).noalias() = attn[hd] * v.middleCols(hd * dh, dh);
  }
  MatrixF z = h + config.residual_scale * mixed;
  VectorF inv2;
  MatrixF n2 = rms_norm(z, bp.norm_mlp, eps, &inv2);
  MatrixF pre = n2 * bp.w_1;
  MatrixF act = pre.unaryExpr([](float u) { return gelu(u); });
  MatrixF out = z;
  out.noalias() += config.residual_scale * (act * bp.w_2);
  if (acts) {
    acts->input = h;
    acts->norm1 = std::move(n1);
    acts->q = std::move(q);
    acts->k = std::move(k);
    acts->v = std::move(v);
    acts->mixed = std::move(mixed);
    acts->z = std::move(z);
    acts->norm2 = std::move(n2);
    acts->pre_act = std::move(pre);
    acts->act = std::move(act);
    acts->inv_rms1 = std::move(inv1);
    acts->inv_rms2 = std::move(inv2);
    acts->attn = attn;
  }
  if (attn_out) *attn_out = std::move(attn);
  return out;
}

// Returns dL/d(block input) and accumulates parameter gradients.
MatrixF block_backward(const MatrixF& dout, const BlockActivations& a, const BlockParams& bp,
                       const ModelConfig& config, BlockParams& g) {
  const int dh = config.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const float rs = config.residual_scale;
  // MLP branch
  const MatrixF dbranch = rs * dout;
  g.w_2.noalias() += a.act.transpose() * dbranch;
  MatrixF dact = dbranch * bp.w_2.transpose();
  MatrixF dpre = dact.cwiseProduct(a.pre_act.unaryExpr([](float u) { return gelu_grad(u); }));
  g.w_1.noalias() += a.norm2.transpose() * dpre;
  MatrixF dn2 = dpre * bp.w_1.transpose();
  MatrixF dz = dout;
  rms_norm_backward(a.z, a.inv_rms2, bp.norm_mlp, dn2, dz, g.norm_mlp);
  // attention branch
  const Eigen::Index T = a.input.rows();
  MatrixF dq(T, config.d_model), dk(T, config.d_model), dv(T, config.d_model);
  for (int hd = 0; hd < config.n_heads; ++hd) {
    const auto cols = [&](const MatrixF& m) { return m.middleCols(hd * dh, dh); };
    const MatrixF& A = a.attn[hd];
    const MatrixF dmix = rs * cols(dz);
    MatrixF dA = dmix * cols(a.v).transpose();
    dv.middleCols(hd * dh, dh).noalias() = A.transpose() * dmix;
    MatrixF dS = A.cwiseProduct(dA);
    const VectorF rowdot = dS.rowwise().sum();
    dS -= A.cwiseProduct(rowdot.replicate(1, T));
    dS *= scale;
    dq.middleCols(hd * dh, dh).noalias() = dS * cols(a.k);
    dk.middleCols(hd * dh, dh).noalias() = dS.transpose() * cols(a.q);
  }
  g.w_q.noalias() += a.norm1.transpose() * dq;
  g.w_k.noalias() += a.norm1.transpose() * dk;
  g.w_v.noalias() += a.norm1.transpose() * dv;
  MatrixF dn1 = dq * bp.w_q.transpose();
  dn1.noalias() += dk * bp.w_k.transpose();
  dn1.noalias() += dv * bp.w_v.transpose();
  MatrixF dh_in = dz;
  rms_norm_backward(a.input, a.inv_rms1, bp.norm_attn, dn1, dh_in, g.norm_attn);
  return dh_in;
}

MatrixF embed(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config) {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  MatrixF h(T, config.d_model);
  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId id = tokens[static_cast<std::size_t>(t)];
    require(id >= 0 && id < config.vocab_size, ErrorKind::InvalidArgument,
            "token id " + std::to_string(id) + " outside vocabulary");
    h.row(t) = config.residual_scale * (params.w_e.row(id) + params.w_p.row(t));
  }
  return h;
}

void check_context(std::size_t length, const ModelConfig& config) {
  if (length == 0) fail(ErrorKind::InvalidArgument, "empty prompt");
  if (length > static_cast<std::size_t>(config.max_context)) {
    fail(ErrorKind::ContextOverflow, "length " + std::to_string(length) + " exceeds max_context " +
                                         std::to_string(config.max_context));
  }
}

// Per-block steering offset eps * v, or empty when it is an exact no-op.
std::vector<RowVectorF> steering_offsets(const SteeringSpec* steering, const ModelConfig& config) {
  std::vector<RowVectorF> offsets(config.n_blocks);
  if (!steering || steering->coefficient == 0.0f) return offsets;
  steering->validate(config);
  for (const auto& [block, vec] : steering->vectors) {
    RowVectorF off = (vec * steering->coefficient).transpose();
    if (off.cwiseAbs().maxCoeff() > 0.0f) offsets[block - 1] = std::move(off);
  }
  return offsets;
}

void check_finite(const MatrixF& h, int block) {
  if (!h.allFinite()) fail(ErrorKind::NonFiniteActivation, "block " + std::to_string(block));
}

}  // namespace

void ModelConfig::validate() const {
  require(n_blocks >= 2, ErrorKind::InvalidArgument, "n_blocks must be >= 2");
  require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, ErrorKind::InvalidArgument,
          "d_model must be divisible by n_heads");
  require(vocab_size > 0, ErrorKind::InvalidArgument, "vocab_size must be positive");
  require(max_context > 0, ErrorKind::InvalidArgument, "max_context must be positive");
  require(residual_scale > 0.0f && std::isfinite(residual_scale), ErrorKind::InvalidArgument,
          "residual_scale must be positive");
}

float ModelConfig::rms_eps() const noexcept { return kRmsEps * residual_scale * residual_scale; }

json ModelConfig::to_json() const {
  return json{{"n_blocks", n_blocks}, {"d_model", d_model},         {"n_heads", n_heads},
              {"mlp_ratio", kMlpRatio}, {"vocab_size", vocab_size}, {"max_context", max_context},
              {"activation", "gelu"},  {"seed", seed},
              {"residual_scale", residual_scale}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_context = j.value("max_context", c.max_context);
  c.seed = j.value("seed", c.seed);
  c.residual_scale = j.value("residual_scale", c.residual_scale);
  require(j.value("mlp_ratio", kMlpRatio) == kMlpRatio, ErrorKind::ConfigError, "mlp_ratio is fixed at 4");
  c.validate();
  return c;
}

ModelParams ModelParams::initialize(const ModelConfig& config) {
  config.validate();
  const int k = config.d_model;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto randn = [&](int rows, int cols, float stddev) {
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * stddev;
    return m;
  };
  ModelParams p;
  p.w_e = randn(config.vocab_size, k, 0.02f);
  p.w_p = randn(config.max_context, k, 0.02f);
  const float proj = 1.0f / std::sqrt(static_cast<float>(k));
  const float out_scale = 1.0f / std::sqrt(static_cast<float>(config.mlp_dim()) * 2.0f * config.n_blocks);
  for (int b = 0; b < config.n_blocks; ++b) {
    BlockParams bp;
    bp.w_q = randn(k, k, proj);
    bp.w_k = randn(k, k, proj);
    bp.w_v = randn(k, k, proj / std::sqrt(2.0f * config.n_blocks));
    bp.w_1 = randn(k, config.mlp_dim(), proj);
    bp.w_2 = randn(config.mlp_dim(), k, out_scale);
    bp.norm_attn = VectorF::Ones(k);
    bp.norm_mlp = VectorF::Ones(k);
    p.blocks.push_back(std::move(bp));
  }
  p.norm_final = VectorF::Ones(k);
  p.w_o = randn(k, config.vocab_size, proj);
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams z = other;
  z.for_each_tensor([](const std::string&, std::span<float> s) { std::fill(s.begin(), s.end(), 0.0f); });
  return z;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, std::span<const float> s) {
    for (float v : s) ok = ok && std::isfinite(v);
  });
  return ok;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, std::span<const float> s) { n += s.size(); });
  return n;
}

const MatrixF& ForwardTrace::hidden_at(int block) const {
  if (block < 1 || block > n_blocks()) fail(ErrorKind::MissingTrace, "no hidden state for block " + std::to_string(block));
  return hidden[static_cast<std::size_t>(block - 1)];
}

const MatrixF& ForwardTrace::attention_at(int block, int head) const {
  if (block < 1 || block > static_cast<int>(attention.size()) || head < 0 || head >= n_heads()) {
    fail(ErrorKind::MissingTrace, "no attention for block " + std::to_string(block) + " head " + std::to_string(head));
  }
  return attention[static_cast<std::size_t>(block - 1)][static_cast<std::size_t>(head)];
}

void SteeringSpec::validate(const ModelConfig& config) const {
  for (const auto& [block, vec] : vectors) {
    require(block >= 1 && block <= config.n_blocks, ErrorKind::InvalidArgument,
            "steering block " + std::to_string(block) + " out of range");
    require(vec.size() == config.d_model, ErrorKind::ShapeMismatch, "steering vector has wrong dimension");
    const float norm = vec.norm();
    require(norm == 0.0f || std::abs(norm - 1.0f) <= 1e-5f, ErrorKind::InvalidArgument,
            "steering vector for block " + std::to_string(block) + " is not unit norm");
  }
}

std::vector<int> SteeringSpec::blocks() const {
  std::vector<int> out;
  for (const auto& kv : vectors) out.push_back(kv.first);
  return out;
}

MatrixF attention_matrix(const MatrixF& hidden, const MatrixF& w_k, const MatrixF& w_q, int head, int n_heads) {
  const Eigen::Index k = hidden.cols();
  if (n_heads <= 0 || k % n_heads != 0 || w_k.rows() != k || w_q.rows() != k || w_k.cols() != w_q.cols() ||
      w_k.cols() % n_heads != 0) {
    fail(ErrorKind::ShapeMismatch, "attention weights do not match hidden width");
  }
  require(head >= 0 && head < n_heads, ErrorKind::ShapeMismatch, "head index out of range");
  const Eigen::Index dh = w_k.cols() / n_heads;
  const MatrixF q = hidden * w_q.middleCols(head * dh, dh);
  const MatrixF kk = hidden * w_k.middleCols(head * dh, dh);
  return causal_attention(q, kk, 1.0f / std::sqrt(static_cast<float>(dh)));
}

ForwardResult forward(std::span<const TokenId> prompt, const ModelParams& params, const ModelConfig& config,
                      const SteeringSpec* steering, bool capture_trace) {
  check_context(prompt.size(), config);
  const auto offsets = steering_offsets(steering, config);
  ForwardResult result;
  MatrixF h = embed(prompt, params, config);
  if (capture_trace) {
    result.trace.hidden.reserve(config.n_blocks);
    result.trace.attention.reserve(config.n_blocks);
  }
  for (int b = 0; b < config.n_blocks; ++b) {
    std::vector<MatrixF> attn;
    h = block_forward(h, params.blocks[b], config, capture_trace ? &attn : nullptr, nullptr);
    if (offsets[b].size() > 0) h.rowwise() += offsets[b];
    check_finite(h, b + 1);
    if (capture_trace) {
      result.trace.hidden.push_back(h);
      result.trace.attention.push_back(std::move(attn));
    }
  }
  result.logits = rms_norm(h, params.norm_final, config.rms_eps()) * params.w_o;
  return result;
}

namespace {

// Incremental decoder state: cached keys/values per block.
class DecodeState {
 public:
  DecodeState(const ModelParams& params, const ModelConfig& config, std::vector<RowVectorF> offsets)
      : params_(params), config_(config), offsets_(std::move(offsets)) {
    keys_.assign(config.n_blocks, MatrixF(config.max_context, config.d_model));
    values_.assign(config.n_blocks, MatrixF(config.max_context, config.d_model));
  }

  // Consumes the token at position `length_` and returns next-token logits.
  RowVectorF step(TokenId token) {
    if (length_ >= config_.max_context) {
      fail(ErrorKind::ContextOverflow, "generation exceeds max_context " + std::to_string(config_.max_context));
    }
    require(token >= 0 && token < config_.vocab_size, ErrorKind::InvalidArgument, "token id outside vocabulary");
    const int pos = length_;
    const int dh = config_.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const float rs = config_.residual_scale, eps = config_.rms_eps();
    MatrixF h = rs * (params_.w_e.row(token) + params_.w_p.row(pos));
    for (int b = 0; b < config_.n_blocks; ++b) {
      const BlockParams& bp = params_.blocks[b];
      const MatrixF n1 = rms_norm(h, bp.norm_attn, eps);
      const RowVectorF q = n1 * bp.w_q;
      keys_[b].row(pos) = n1 * bp.w_k;
      values_[b].row(pos) = n1 * bp.w_v;
      RowVectorF mixed(config_.d_model);
      for (int hd = 0; hd < config_.n_heads; ++hd) {
        const auto kh = keys_[b].block(0, hd * dh, pos + 1, dh);
        Eigen::VectorXf s = (kh * q.segment(hd * dh, dh).transpose()) * scale;
        const float mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        mixed.segment(hd * dh, dh) = s.transpose() * values_[b].block(0, hd * dh, pos + 1, dh);
      }
      MatrixF z = h + rs * mixed;
      const MatrixF n2 = rms_norm(z, bp.norm_mlp, eps);
      const MatrixF act = (n2 * bp.w_1).unaryExpr([](float u) { return gelu(u); });
      h = z + rs * (act * bp.w_2);
      if (offsets_[b].size() > 0) h.row(0) += offsets_[b];
      check_finite(h, b + 1);
    }
    ++length_;
    return rms_norm(h, params_.norm_final, eps) * params_.w_o;
  }

 private:
  const ModelParams& params_;
  const ModelConfig& config_;
  std::vector<RowVectorF> offsets_;
  std::vector<MatrixF> keys_, values_;
  int length_ = 0;
};

TokenId sample(const RowVectorF& logits, const DecodeOptions& decode, std::mt19937_64& rng) {
  if (decode.mode == DecodeOptions::Mode::Greedy) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<TokenId>(best);
  }
  require(decode.temperature > 0.0f, ErrorKind::InvalidArgument, "temperature must be positive");
  const double mx = logits.maxCoeff();
  std::vector<double> p(static_cast<std::size_t>(logits.size()));
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits(i) - mx) / decode.temperature);
    total += p[i];
  }
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(p.size() - 1);
}

}  // namespace

std::vector<TokenId> generate(std::span<const TokenId> prompt, const ModelParams& params,
                              const ModelConfig& config, const SteeringSpec* steering,
                              const DecodeOptions& decode) {
  require(decode.max_new >= 1, ErrorKind::InvalidArgument, "max_new must be >= 1");
  check_context(prompt.size(), config);
  if (prompt.size() + static_cast<std::size_t>(decode.max_new) > static_cast<std::size_t>(config.max_context) + 1) {
    fail(ErrorKind::ContextOverflow, "prompt plus generation budget exceeds max_context");
  }
  DecodeState state(params, config, steering_offsets(steering, config));
  std::mt19937_64 rng(decode.seed);
  RowVectorF logits;
  for (TokenId t : prompt) logits = state.step(t);
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(decode.max_new));
  for (int i = 0; i < decode.max_new; ++i) {
    const TokenId next = sample(logits, decode, rng);
    out.push_back(next);
    if (i + 1 < decode.max_new) logits = state.step(next);
  }
  return out;
}

namespace {

double loss_impl(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config,
                 ModelParams* grad) {
  require(tokens.size() >= 2, ErrorKind::InvalidArgument, "training sequence needs >= 2 tokens");
  check_context(tokens.size(), config);
  const Eigen::Index T = static_cast<Eigen::Index>(tokens.size());
  std::vector<BlockActivations> acts(grad ? config.n_blocks : 0);
  MatrixF h = embed(tokens, params, config);
  for (int b = 0; b < config.n_blocks; ++b) {
    h = block_forward(h, params.blocks[b], config, nullptr, grad ? &acts[b] : nullptr);
  }
  VectorF inv_final;
  const MatrixF nf = rms_norm(h, params.norm_final, config.rms_eps(), &inv_final);
  MatrixF logits = nf.topRows(T - 1) * params.w_o;
  double loss = 0.0;
  for (Eigen::Index t = 0; t < T - 1; ++t) {
    auto row = logits.row(t);
    const float mx = row.maxCoeff();
    row.array() -= mx;
    row = row.array().exp();
    const float sum = row.sum();
    row /= sum;
    const TokenId target = tokens[static_cast<std::size_t>(t + 1)];
    loss -= std::log(std::max(static_cast<double>(row(target)), 1e-30));
    row(target) -= 1.0f;  // becomes dL/dlogits
  }
  if (!grad) return loss;

  grad->w_o.noalias() += nf.topRows(T - 1).transpose() * logits;
  MatrixF dnf = MatrixF::Zero(T, config.d_model);
  dnf.topRows(T - 1).noalias() = logits * params.w_o.transpose();
  MatrixF dh = MatrixF::Zero(T, config.d_model);
  rms_norm_backward(h, inv_final, params.norm_final, dnf, dh, grad->norm_final);
  for (int b = config.n_blocks - 1; b >= 0; --b) {
    dh = block_backward(dh, acts[b], params.blocks[b], config, grad->blocks[b]);
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    const RowVectorF d = config.residual_scale * dh.row(t);
    grad->w_e.row(tokens[static_cast<std::size_t>(t)]) += d;
    grad->w_p.row(t) += d;
  }
  return loss;
}

struct Adam {
  std::vector<std::vector<float>> m, v;
  long step = 0;
};

}  // namespace

double sequence_loss(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config) {
  return loss_impl(tokens, params, config, nullptr) / static_cast<double>(tokens.size() - 1);
}

double accumulate_gradient(std::span<const TokenId> tokens, const ModelParams& params,
                           const ModelConfig& config, ModelParams& grad) {
  return loss_impl(tokens, params, config, &grad);
}

json TrainOptions::to_json() const {
  return json{{"epochs", epochs},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"min_learning_rate", min_learning_rate},
              {"warmup_steps", warmup_steps},
              {"beta1", beta1},
              {"beta2", beta2},
              {"weight_decay", weight_decay},
              {"grad_clip", grad_clip},
              {"holdout_fraction", holdout_fraction},
              {"max_eval_sequences", max_eval_sequences},
              {"max_steps", max_steps},
              {"loss_threshold", std::isfinite(loss_threshold) ? json(loss_threshold) : json(nullptr)},
              {"seed", seed}};
}

TrainOptions TrainOptions::from_json(const json& j) {
  TrainOptions o;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.min_learning_rate = j.value("min_learning_rate", o.min_learning_rate);
  o.warmup_steps = j.value("warmup_steps", o.warmup_steps);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.grad_clip = j.value("grad_clip", o.grad_clip);
  o.holdout_fraction = j.value("holdout_fraction", o.holdout_fraction);
  o.max_eval_sequences = j.value("max_eval_sequences", o.max_eval_sequences);
  o.max_steps = j.value("max_steps", o.max_steps);
  if (j.contains("loss_threshold") && !j.at("loss_threshold").is_null()) {
    o.loss_threshold = j.at("loss_threshold").get<double>();
  }
  o.seed = j.value("seed", o.seed);
  return o;
}

TrainResult train_toy(std::span<const std::vector<TokenId>> corpus, const ModelConfig& config,
                      const TrainOptions& options) {
  require(!corpus.empty(), ErrorKind::InvalidArgument, "training corpus is empty");
  require(options.batch_size >= 1 && options.epochs >= 1, ErrorKind::InvalidArgument, "bad batch/epoch settings");
  config.validate();

  // Held-out split is the tail of a seeded permutation.
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  std::size_t n_holdout = static_cast<std::size_t>(std::floor(options.holdout_fraction * corpus.size()));
  if (corpus.size() > 1) n_holdout = std::clamp<std::size_t>(n_holdout, 1, corpus.size() - 1);
  else n_holdout = 0;
  std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_holdout));
  std::vector<std::size_t> eval_idx(order.end() - static_cast<std::ptrdiff_t>(n_holdout), order.end());
  if (eval_idx.size() > options.max_eval_sequences) eval_idx.resize(options.max_eval_sequences);
  if (eval_idx.empty()) eval_idx = train_idx;

  TrainResult result;
  result.params = ModelParams::initialize(config);
  auto heldout = [&](const ModelParams& p) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i : eval_idx) {
      total += loss_impl(corpus[i], p, config, nullptr);
      count += corpus[i].size() - 1;
    }
    return total / static_cast<double>(count);
  };
  result.initial_heldout_loss = heldout(result.params);

  Adam adam;
  result.params.for_each_tensor([&](const std::string&, std::span<const float> s) {
    adam.m.emplace_back(s.size(), 0.0f);
    adam.v.emplace_back(s.size(), 0.0f);
  });
  const std::size_t steps_per_epoch = (train_idx.size() + options.batch_size - 1) / options.batch_size;
  long total_steps = static_cast<long>(steps_per_epoch) * options.epochs;
  if (options.max_steps > 0) total_steps = std::min<long>(total_steps, options.max_steps);

  ModelParams grad = ModelParams::zeros_like(result.params);
  bool stop = false;
  for (int epoch = 0; epoch < options.epochs && !stop; ++epoch) {
    for (std::size_t i = train_idx.size() - 1; i > 0; --i) {
      std::swap(train_idx[i], train_idx[uniform_index(rng, i + 1)]);
    }
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += options.batch_size) {
      if (adam.step >= total_steps) {
        stop = true;
        break;
      }
      grad.for_each_tensor([](const std::string&, std::span<float> s) { std::fill(s.begin(), s.end(), 0.0f); });
      const std::size_t end = std::min(train_idx.size(), start + options.batch_size);
      double batch_loss = 0.0;
      std::size_t batch_tokens = 0;
      for (std::size_t b = start; b < end; ++b) {
        const auto& seq = corpus[train_idx[b]];
        batch_loss += loss_impl(seq, result.params, config, &grad);
        batch_tokens += seq.size() - 1;
      }
      if (!std::isfinite(batch_loss)) {
        fail(ErrorKind::DivergedTraining, "non-finite loss at step " + std::to_string(adam.step));
      }
      epoch_loss += batch_loss;
      epoch_tokens += batch_tokens;

      const float inv_tokens = 1.0f / static_cast<float>(batch_tokens);
      double sq = 0.0;
      grad.for_each_tensor([&](const std::string&, std::span<float> s) {
        for (float& g : s) {
          g *= inv_tokens;
          sq += static_cast<double>(g) * g;
        }
      });
      const double gnorm = std::sqrt(sq);
      if (!std::isfinite(gnorm)) fail(ErrorKind::DivergedTraining, "non-finite gradient");
      const float clip = (options.grad_clip > 0 && gnorm > options.grad_clip)
                             ? static_cast<float>(options.grad_clip / gnorm) : 1.0f;

      ++adam.step;
      double lr = options.learning_rate;
      if (adam.step <= options.warmup_steps) {
        lr *= static_cast<double>(adam.step) / std::max(1, options.warmup_steps);
      } else if (total_steps > options.warmup_steps) {
        const double progress = static_cast<double>(adam.step - options.warmup_steps) /
                                static_cast<double>(total_steps - options.warmup_steps);
        lr = options.min_learning_rate +
             0.5 * (options.learning_rate - options.min_learning_rate) * (1.0 + std::cos(M_PI * progress));
      }
      const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(adam.step));
      const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(adam.step));
      const float b1 = static_cast<float>(options.beta1), b2 = static_cast<float>(options.beta2);
      const float step_size = static_cast<float>(lr / bc1);
      const float inv_bc2 = static_cast<float>(1.0 / bc2);
      const float decay = static_cast<float>(lr * options.weight_decay);

      std::size_t tensor = 0;
      std::vector<std::span<float>> grads;
      grad.for_each_tensor([&](const std::string&, std::span<float> s) { grads.push_back(s); });
      result.params.for_each_tensor([&](const std::string& name, std::span<float> w) {
        auto& m = adam.m[tensor];
        auto& v = adam.v[tensor];
        const auto g = grads[tensor];
        const bool decayed = name.find("norm") == std::string::npos;
        for (std::size_t i = 0; i < w.size(); ++i) {
          const float gi = g[i] * clip;
          m[i] = b1 * m[i] + (1.0f - b1) * gi;
          v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
          if (decayed) w[i] -= decay * w[i];
          w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + 1e-8f);
        }
        ++tensor;
      });
    }
    if (epoch_tokens > 0) {
      result.epoch_train_losses.push_back(epoch_loss / static_cast<double>(epoch_tokens));
      spdlog::info("epoch {} train loss {:.4f} ({} steps)", epoch + 1, result.epoch_train_losses.back(), adam.step);
    }
  }
  if (!result.params.all_finite()) fail(ErrorKind::DivergedTraining, "parameters became non-finite");
  result.steps = static_cast<int>(adam.step);
  result.final_heldout_loss = heldout(result.params);
  if (!std::isfinite(result.final_heldout_loss)) fail(ErrorKind::DivergedTraining, "held-out loss is not finite");
  result.below_threshold = result.final_heldout_loss <= options.loss_threshold;
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params,
                     const json& meta) {
  json manifest = json::array();
  std::vector<float> flat;
  flat.reserve(params.parameter_count());
  params.for_each_tensor([&](const std::string& name, std::span<const float> s) {
    manifest.push_back(json{{"name", name}, {"offset", flat.size() * sizeof(float)}, {"count", s.size()}});
    flat.insert(flat.end(), s.begin(), s.end());
  });
  json header{{"format", "attnsteer-checkpoint-v1"},
              {"dtype", "float32"},
              {"config", config.to_json()},
              {"seed", config.seed},
              {"tensors", std::move(manifest)},
              {"meta", meta}};
  write_blob(path, header, pack_f32(flat));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Blob blob = read_blob(path);
  require(blob.header.value("format", "") == "attnsteer-checkpoint-v1", ErrorKind::IoError,
          path.string() + " is not a checkpoint");
  Checkpoint ck;
  ck.config = ModelConfig::from_json(blob.header.at("config"));
  ck.params = ModelParams::initialize(ck.config);
  ck.meta = blob.header.value("meta", json::object());
  std::map<std::string, json> by_name;
  for (const auto& t : blob.header.at("tensors")) by_name[t.at("name").get<std::string>()] = t;
  ck.params.for_each_tensor([&](const std::string& name, std::span<float> s) {
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorKind::IoError, "checkpoint lacks tensor " + name);
    const auto count = it->second.at("count").get<std::size_t>();
    require(count == s.size(), ErrorKind::ShapeMismatch, "tensor " + name + " has wrong size");
    const auto values = unpack_f32(blob.payload, it->second.at("offset").get<std::size_t>(), count);
    std::copy(values.begin(), values.end(), s.begin());
  });
  return ck;
}

void dump_trace(const std::filesystem::path& path, const ForwardTrace& trace) {
  std::vector<float> flat;
  const int T = trace.length();
  for (const auto& h : trace.hidden) flat.insert(flat.end(), h.data(), h.data() + h.size());
  for (const auto& block : trace.attention) {
    for (const auto& a : block) flat.insert(flat.end(), a.data(), a.data() + a.size());
  }
  const json header{{"format", "attnsteer-trace-v1"},
                    {"dtype", "float32"},
                    {"n_blocks", trace.n_blocks()},
                    {"n_heads", trace.n_heads()},
                    {"length", T},
                    {"d_model", trace.hidden.empty() ? 0 : trace.hidden.front().cols()}};
  write_blob(path, header, pack_f32(flat));
}

ForwardTrace load_trace(const std::filesystem::path& path) {
  const Blob blob = read_blob(path);
  require(blob.header.value("format", "") == "attnsteer-trace-v1", ErrorKind::IoError,
          path.string() + " is not a trace dump");
  const int L = blob.header.at("n_blocks"), H = blob.header.at("n_heads"), T = blob.header.at("length");
  const int k = blob.header.at("d_model");
  const auto flat = unpack_f32(blob.payload, 0, blob.payload.size() / sizeof(float));
  require(flat.size() == static_cast<std::size_t>(L) * T * k + static_cast<std::size_t>(L) * H * T * T,
          ErrorKind::IoError, "trace payload size mismatch");
  ForwardTrace trace;
  std::size_t off = 0;
  for (int b = 0; b < L; ++b) {
    trace.hidden.push_back(Eigen::Map<const MatrixF>(flat.data() + off, T, k));
    off += static_cast<std::size_t>(T) * k;
  }
  for (int b = 0; b < L; ++b) {
    std::vector<MatrixF> heads;
    for (int h = 0; h < H; ++h) {
      heads.push_back(Eigen::Map<const MatrixF>(flat.data() + off, T, T));
      off += static_cast<std::size_t>(T) * T;
    }
    trace.attention.push_back(std::move(heads));
  }
  return trace;
}

}  // namespace attnsteer
