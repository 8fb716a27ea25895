#include "iapo/advantage.hpp"

#include <cmath>

#include "iapo/error.hpp"

namespace iapo {

std::string_view to_string(ShapingVariant v) {
  switch (v) {
    case ShapingVariant::kIapo: return "iapo";
    case ShapingVariant::kIapoNI: return "iapo_ni";
    case ShapingVariant::kIapoNE: return "iapo_ne";
    case ShapingVariant::kGrpo: return "grpo";
  }
  return "?";
}

ShapingVariant parse_shaping_variant(std::string_view name) {
  if (name == "iapo") return ShapingVariant::kIapo;
  if (name == "iapo_ni") return ShapingVariant::kIapoNI;
  if (name == "iapo_ne") return ShapingVariant::kIapoNE;
  if (name == "grpo") return ShapingVariant::kGrpo;
  throw ConfigError("unknown shaping variant \"" + std::string(name) + "\"");
}

std::string_view to_string(ExplorationSignal s) {
  return s == ExplorationSignal::kProbability ? "probability" : "entropy";
}

ExplorationSignal parse_exploration_signal(std::string_view name) {
  if (name == "probability") return ExplorationSignal::kProbability;
  if (name == "entropy") return ExplorationSignal::kEntropy;
  throw ConfigError("unknown exploration signal \"" + std::string(name) + "\"");
}

double ShapingConfig::effective_alpha() const {
  return variant == ShapingVariant::kGrpo || variant == ShapingVariant::kIapoNI ? 0.0 : alpha;
}

double ShapingConfig::effective_beta() const {
  return variant == ShapingVariant::kGrpo ? 0.0 : beta_explo;
}

namespace {

struct Moments {
  double mean;
  double stddev;
};

Moments population_moments(std::span<const double> v) {
  if (v.empty()) throw DomainError("normalize needs a non-empty reference set");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return {mean, std::sqrt(var)};
}

double normalized(double x, const Moments& m, double epsilon) {
  if (m.stddev == 0.0) return 0.0;
  return (x - m.mean) / (m.stddev + epsilon);
}

}  // namespace

double normalize(double x, std::span<const double> v, double epsilon) {
  return normalized(x, population_moments(v), epsilon);
}

std::vector<double> normalize_all(std::span<const double> v, double epsilon) {
  const Moments m = population_moments(v);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = normalized(v[i], m, epsilon);
  return out;
}

std::vector<double> grpo_advantages(std::span<const double> rewards, double epsilon) {
  if (rewards.size() < 2) throw DomainError("group advantages need G >= 2");
  return normalize_all(rewards, epsilon);
}

std::vector<std::vector<double>> exploration_scores(const RolloutGroup& group,
                                                    ExplorationSignal signal) {
  std::vector<std::vector<double>> c(group.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& comp = group.completions[i];
    const double sign = group.correct(i) ? 1.0 : -1.0;
    c[i].resize(comp.length());
    for (std::size_t t = 0; t < comp.length(); ++t) {
      const double s = signal == ExplorationSignal::kProbability ? std::exp(comp.logprobs[t])
                                                                 : comp.entropies[t];
      c[i][t] = sign * s;
    }
  }
  return c;
}

std::vector<double> next_token_entropy_reduction(const SampledCompletion& completion) {
  const std::size_t n = completion.length();
  std::vector<double> s(n, 0.0);
  for (std::size_t t = 0; t + 1 < n; ++t) s[t] = completion.entropies[t] - completion.entropies[t + 1];
  return s;
}

AdvantageBreakdown compose_advantages(const RolloutGroup& group, std::span<const MIProfile> profiles,
                                      const ShapingConfig& config) {
  const std::size_t G = group.size();
  if (group.rewards.size() != G) throw ShapeError("rewards do not match completions");
  if (config.needs_mi_profiles()) {
    if (profiles.size() != G) throw ShapeError("need one MI profile per completion");
    for (std::size_t i = 0; i < G; ++i) {
      if (profiles[i].size() != group.completions[i].length()) {
        throw ShapeError("MI profile " + std::to_string(i) + " has " +
                         std::to_string(profiles[i].size()) + " entries for a completion of length " +
                         std::to_string(group.completions[i].length()));
      }
    }
  }

  AdvantageBreakdown out;
  out.alpha = config.effective_alpha();
  out.beta_explo = config.effective_beta();
  const double eps = config.norm_epsilon;
  const std::vector<double> seq = grpo_advantages(group.rewards, eps);
  const bool use_explo = config.variant != ShapingVariant::kGrpo;
  const auto c = use_explo ? exploration_scores(group, config.exploration_signal)
                           : std::vector<std::vector<double>>{};

  out.seq_term.resize(G);
  out.info_term.resize(G);
  out.explo_term.resize(G);
  out.total.resize(G);
  for (std::size_t i = 0; i < G; ++i) {
    const std::size_t n = group.completions[i].length();
    out.seq_term[i].assign(n, seq[i]);
    switch (config.variant) {
      case ShapingVariant::kIapo: out.info_term[i] = normalize_all(profiles[i].scores, eps); break;
      case ShapingVariant::kIapoNE:
        out.info_term[i] = normalize_all(next_token_entropy_reduction(group.completions[i]), eps);
        break;
      case ShapingVariant::kIapoNI:
      case ShapingVariant::kGrpo: out.info_term[i].assign(n, 0.0); break;
    }
    out.explo_term[i] = use_explo ? normalize_all(c[i], eps) : std::vector<double>(n, 0.0);
    out.total[i].resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      out.total[i][t] = out.seq_term[i][t] + out.alpha * out.info_term[i][t] +
                        out.beta_explo * out.explo_term[i][t];
    }
  }
  return out;
}

}  // namespace iapo
