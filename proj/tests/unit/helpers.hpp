#pragma once

#include <random>
#include <vector>

#include "attnsteer/corpus.hpp"
#include "attnsteer/model.hpp"

namespace testutil {

using namespace attnsteer;

inline MatrixD randn(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline VectorD randv(std::mt19937_64& rng, Eigen::Index n, double sd = 1.0) {
  return randn(rng, n, 1, sd).col(0);
}

inline double cosine(const VectorD& a, const VectorD& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Random causal row-stochastic matrix.
inline MatrixF random_attention(std::mt19937_64& rng, int T, double spread = 2.0) {
  std::normal_distribution<double> n(0.0, spread);
  MatrixF a = MatrixF::Zero(T, T);
  for (int t = 0; t < T; ++t) {
    double s = 0.0;
    for (int j = 0; j <= t; ++j) {
      a(t, j) = static_cast<float>(std::exp(n(rng)));
      s += a(t, j);
    }
    for (int j = 0; j <= t; ++j) a(t, j) = static_cast<float>(a(t, j) / s);
  }
  return a;
}

inline ForwardTrace random_trace(std::mt19937_64& rng, int T, int n_blocks, int n_heads, int k) {
  ForwardTrace tr;
  for (int b = 0; b < n_blocks; ++b) {
    tr.hidden.push_back(randn(rng, T, k).cast<float>());
    std::vector<MatrixF> heads;
    for (int h = 0; h < n_heads; ++h) heads.push_back(random_attention(rng, T));
    tr.attention.push_back(std::move(heads));
  }
  return tr;
}

// Prompt skeleton with BOS at 0, prefix [1, 1+P), body, then the four markers.
inline RenderedPrompt skeleton_prompt(int prefix_len, int body_len, int statement_index = 0) {
  RenderedPrompt p;
  const int T = 1 + prefix_len + body_len + kNumMarkers;
  p.token_ids.assign(static_cast<std::size_t>(T), 0);
  p.prefix_begin = 1;
  p.prefix_end = 1 + prefix_len;
  for (int m = 0; m < kNumMarkers; ++m) p.candidate_positions[m] = T - kNumMarkers + m;
  p.statement_index = statement_index;
  return p;
}

inline ModelConfig tiny_config(int vocab = 64, int blocks = 2, int d = 16, int heads = 2, int ctx = 48) {
  ModelConfig c;
  c.n_blocks = blocks;
  c.d_model = d;
  c.n_heads = heads;
  c.vocab_size = vocab;
  c.max_context = ctx;
  c.seed = 5;
  return c;
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::vector<TokenId> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(vocab)));
  return t;
}

}  // namespace testutil
