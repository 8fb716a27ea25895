#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "iapo/grad.hpp"
#include "iapo/model.hpp"

namespace iapo::testing {

inline ModelConfig small_config(int max_seq_len = 96) {
  ModelConfig c;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq_len = max_seq_len;
  return c;
}

// All weights zero: every logits row is the (zero) head bias.
inline Params uniform_params(const ModelConfig& c = ModelConfig{}) { return Params(c); }

// Attention and MLP silent, one-hot token embeddings, zero positions; the
// head maps "previous token" -> "next token" with a large margin.
inline Params bigram_params(const std::vector<std::pair<TokenId, TokenId>>& edges,
                            const ModelConfig& c = ModelConfig{}, double margin = 60.0) {
  Params p(c);
  const auto& L = p.layout();
  for (int v = 0; v < c.vocab_size; ++v) p[L.tok_embedding + static_cast<std::size_t>(v * c.d_model + v)] = 1.0;
  for (auto [from, to] : edges) {
    p[L.head_weight + static_cast<std::size_t>(from * c.vocab_size + to)] = margin;
  }
  return p;
}

// Central difference of `f` along coordinate i.
template <typename F>
double central_difference(Params params, std::size_t i, double eps, F&& f) {
  const double x = params[i];
  params[i] = x + eps;
  const double up = f(params);
  params[i] = x - eps;
  const double down = f(params);
  return (up - down) / (2.0 * eps);
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace iapo::testing
