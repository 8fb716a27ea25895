#pragma once

#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "iapo/model.hpp"

namespace iapo {

enum class MIEstimator { kNaive, kPreload, kChunked };

std::string_view to_string(MIEstimator e);
MIEstimator parse_mi_estimator(std::string_view name);

// Per-token answer-entropy profile of one completion. Entry t (0-based)
// describes completion token t: pre = H(y | q, o_<t), post = H(y | q, o_<=t),
// score = pre - post. Scores may be negative.
struct MIProfile {
  std::vector<double> pre_entropies;
  std::vector<double> post_entropies;
  std::vector<double> scores;
  MIEstimator estimator = MIEstimator::kNaive;
  std::size_t chunk_count = 0;  // chunked estimator only

  std::size_t size() const { return scores.size(); }
};

// -sum p ln p with 0 ln 0 = 0. Throws DomainError for negative entries or a
// total mass farther than 1e-9 from 1.
double entropy_of_distribution(std::span<const double> p);

// Two independent full forwards per token, (q, o_<t, postfix) and
// (q, o_<=t, postfix).
MIProfile mi_profile_naive(const Params& params, std::span<const TokenId> query,
                           std::span<const TokenId> completion,
                           const AnswerReadout& readout = AnswerReadout::standard());

// One full pass builds the master cache over (q, o); every prefix entropy is
// then a postfix-only continuation of a truncated view.
MIProfile mi_profile_preload(const Params& params, std::span<const TokenId> query,
                             std::span<const TokenId> completion,
                             const AnswerReadout& readout = AnswerReadout::standard());

// As preload, but the |o|+1 prefix evaluations are split into `chunks`
// contiguous groups, each evaluated in one batched forward.
MIProfile mi_profile_chunked(const Params& params, std::span<const TokenId> query,
                             std::span<const TokenId> completion, std::size_t chunks,
                             const AnswerReadout& readout = AnswerReadout::standard());

inline constexpr std::size_t kDefaultChunkSize = 8;

// ceil(|o| / 8), at least 1.
std::size_t default_chunk_count(std::size_t completion_length);

MIProfile mi_profile(const Params& params, std::span<const TokenId> query,
                     std::span<const TokenId> completion, MIEstimator estimator,
                     const AnswerReadout& readout = AnswerReadout::standard());

// CSV: position,token,pre_entropy,post_entropy,score
void write_mi_csv(std::ostream& out, std::span<const TokenId> completion, const MIProfile& profile);

}  // namespace iapo
