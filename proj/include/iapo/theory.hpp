#pragma once

#include <span>
#include <vector>

#include "iapo/model.hpp"
#include "json.hpp"

namespace iapo {

// Small enumerable policy: 3 answer tokens, the two readout tokens and EOS.
struct ReducedPolicy {
  ModelConfig config;
  TokenId eos = 5;
  AnswerReadout readout;
  TokenSeq query;
  std::size_t max_len = 5;  // EOS is forced at this depth

  static ReducedPolicy standard();
  Params params(std::uint64_t seed, double init_std = 0.5) const;
};

struct Trajectory {
  TokenSeq tokens;        // ends with EOS
  double probability = 0.0;
  std::vector<double> g;  // per-token score-gradient / direction dot products
  double score_sum = 0.0;  // S(o) = sum_t g_t
  bool forced_end = false; // final EOS was forced rather than sampled

  std::size_t length() const { return tokens.size(); }
};

struct EnumeratedEnsemble {
  std::vector<Trajectory> trajectories;
  double total_probability = 0.0;

  double expected_length() const;
  // Cov(L(o), S(o)) under the ensemble.
  double length_score_covariance() const;
};

inline constexpr std::size_t kDefaultEnsembleCap = 100000;

// Exhaustive tree walk. When `direction` is given, g_t = <grad log pi(o_t|.),
// direction> is filled in (zero for a forced EOS). Throws ResourceError when
// more than `cap` trajectories would be produced.
EnumeratedEnsemble enumerate_trajectory_distribution(const Params& params, std::span<const TokenId> query,
                                                     std::size_t max_len, TokenId eos,
                                                     const ParamBuffer* direction = nullptr,
                                                     std::size_t cap = kDefaultEnsembleCap);

// (1/G) sum_i (1/|o_i|) sum_t beta_{i,t} grad log pi(o_{i,t} | q, o_{i,<t}),
// with beta the group-normalized `scores`. Tokens flagged in `forced` (the
// last one of a completion that hit max_len) contribute nothing.
Gradients score_weighted_direction(const Params& params, std::span<const TokenId> query,
                                   std::span<const TokenSeq> completions,
                                   std::span<const std::vector<double>> scores, std::size_t max_len,
                                   double norm_epsilon = 1e-6);

// Draws `count` trajectories from the exact ensemble.
std::vector<TokenSeq> sample_from_ensemble(const EnumeratedEnsemble& ensemble, std::size_t count,
                                           RngStream& rng);

// The informativeness update direction: a sampled group scored with the
// preload MI estimator on the policy's readout.
Gradients informativeness_direction(const Params& params, const ReducedPolicy& policy,
                                    std::size_t group_size, std::uint64_t seed);

struct CovarianceRow {
  double eta = 0.0;
  double predicted = 0.0;
  double realized = 0.0;
  double ratio = 0.0;           // realized / predicted (0 when predicted is 0)
  double error_over_eta = 0.0;  // |realized - predicted| / eta
};

struct CovarianceReport {
  double covariance = 0.0;
  double base_length = 0.0;
  std::vector<CovarianceRow> rows;

  nlohmann::json to_json() const;
};

inline const std::vector<double> kDefaultEtaGrid{1e-1, 1e-2, 1e-3, 1e-4};

// Throws DomainError unless the grid is strictly decreasing and positive, or
// NumericError if the direction is non-finite.
CovarianceReport predict_length_change(const Params& params, const ParamBuffer& direction,
                                       std::span<const double> etas, std::span<const TokenId> query,
                                       std::size_t max_len, TokenId eos);

enum class AdvantageMode { kPositiveProb, kNegativeProb };

struct EntropyRow {
  double eta = 0.0;
  double h_before = 0.0;
  double h_after = 0.0;
  double realized = 0.0;   // h_after - h_before
  double predicted = 0.0;  // -eta * Cov(log pi0, A)
  double ratio = 0.0;
  double error_over_eta = 0.0;
};

struct EntropyReport {
  bool uniform = false;  // no sign claim is made for a uniform pi0
  double covariance = 0.0;
  std::vector<EntropyRow> rows;

  nlohmann::json to_json() const;
};

// One softmax-policy step in logit space, z' = log pi0 + eta * A with
// A(a) = +/- pi0(a).
std::vector<double> entropy_step(std::span<const double> pi0, AdvantageMode mode, double eta);

EntropyReport entropy_change_check(std::span<const double> pi0, AdvantageMode mode,
                                   std::span<const double> etas);

// Same check at state s = `context` of a policy.
EntropyReport entropy_change_check(const Params& params, std::span<const TokenId> context,
                                   AdvantageMode mode, std::span<const double> etas);

// Cov_p(log p, p) style covariance: sum p x y - (sum p x)(sum p y).
double weighted_covariance(std::span<const double> p, std::span<const double> x,
                           std::span<const double> y);

struct TheorySuiteOptions {
  std::uint64_t seed = 0;
  std::size_t group_size = 16;
  std::size_t distributions = 100;  // random pi0 draws for the entropy law
  std::size_t outcomes = 6;
};

// Runs every covariance and entropy check with pass/fail verdicts:
//   informativeness: error/eta shrinks >= 5x from eta=1e-2 to 1e-3
//   zero_direction: predicted and realized exactly 0
//   constant_score: Cov = 0 and |realized| <= 10 eta^2
//   negative_covariance: Cov < 0 and realized < 0 for eta <= 1e-2
//   entropy_law: sign checks at eta=1e-3, <= 10% relative error at 1e-4
nlohmann::json run_theory_suite(const TheorySuiteOptions& options);

}  // namespace iapo
