#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "iapo/mi_estimator.hpp"
#include "iapo/rollout.hpp"

namespace iapo {

enum class ShapingVariant {
  kIapo,    // sequence + informativeness + exploration
  kIapoNI,  // no informativeness term
  kIapoNE,  // informativeness replaced by next-token entropy reduction
  kGrpo,    // sequence term only
};

enum class ExplorationSignal { kProbability, kEntropy };

std::string_view to_string(ShapingVariant v);
ShapingVariant parse_shaping_variant(std::string_view name);
std::string_view to_string(ExplorationSignal s);
ExplorationSignal parse_exploration_signal(std::string_view name);

struct ShapingConfig {
  double alpha = 1e-4;
  double beta_explo = 1e-4;  // exploration coefficient (distinct from the KL weight)
  ExplorationSignal exploration_signal = ExplorationSignal::kEntropy;
  ShapingVariant variant = ShapingVariant::kIapo;
  double norm_epsilon = 1e-6;

  bool needs_mi_profiles() const { return variant == ShapingVariant::kIapo; }
  // Coefficients after the variant is applied (grpo zeroes both, iapo_ni
  // zeroes alpha).
  double effective_alpha() const;
  double effective_beta() const;
};

// (x - mean(v)) / (population_std(v) + epsilon); 0 when v has no spread.
// Throws DomainError for empty v.
double normalize(double x, std::span<const double> v, double epsilon = 1e-6);

// Every entry of v normalized against v.
std::vector<double> normalize_all(std::span<const double> v, double epsilon = 1e-6);

// Group-normalized rewards. Throws DomainError when G < 2.
std::vector<double> grpo_advantages(std::span<const double> rewards, double epsilon = 1e-6);

// c_{i,t} = +signal for correct completions, -signal for incorrect ones, where
// signal is pi_old(o_t | .) or the next-token entropy H(. | q, o_<t).
std::vector<std::vector<double>> exploration_scores(const RolloutGroup& group,
                                                    ExplorationSignal signal);

// H(o_t | q, o_<t) - H(o_{t+1} | q, o_<=t), last token 0.
std::vector<double> next_token_entropy_reduction(const SampledCompletion& completion);

struct AdvantageBreakdown {
  std::vector<std::vector<double>> seq_term;
  std::vector<std::vector<double>> info_term;
  std::vector<std::vector<double>> explo_term;
  std::vector<std::vector<double>> total;
  double alpha = 0.0;
  double beta_explo = 0.0;

  std::size_t size() const { return total.size(); }
};

// Token-level advantages for one group. `profiles` must hold one MIProfile
// per completion when config.needs_mi_profiles(); it is ignored otherwise.
AdvantageBreakdown compose_advantages(const RolloutGroup& group, std::span<const MIProfile> profiles,
                                      const ShapingConfig& config);

}  // namespace iapo
