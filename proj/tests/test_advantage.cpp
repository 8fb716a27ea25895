#include <gtest/gtest.h>

#include <numeric>

#include "iapo/advantage.hpp"
#include "iapo/error.hpp"

using namespace iapo;

namespace {

SampledCompletion completion(std::vector<double> probs, std::vector<double> entropies) {
  SampledCompletion c;
  for (double p : probs) {
    c.tokens.push_back(1);
    c.logprobs.push_back(std::log(p));
  }
  c.entropies = std::move(entropies);
  return c;
}

RolloutGroup toy_group() {
  RolloutGroup g;
  g.completions = {completion({0.9, 0.5, 0.2}, {0.1, 1.0, 2.0}), completion({0.3, 0.8}, {1.5, 0.5}),
                   completion({0.6, 0.6, 0.7, 0.1}, {0.4, 0.2, 1.1, 0.9}), completion({0.5}, {2.2})};
  g.rewards = {kRewardCorrect, kRewardIncorrect, kRewardCorrect, kRewardIncorrect};
  return g;
}

std::vector<MIProfile> toy_profiles(const RolloutGroup& g) {
  std::vector<MIProfile> out;
  double x = 0.3;
  for (const auto& c : g.completions) {
    MIProfile p;
    for (std::size_t t = 0; t < c.length(); ++t) {
      p.scores.push_back(x);
      p.pre_entropies.push_back(1.0);
      p.post_entropies.push_back(1.0 - x);
      x = -0.7 * x + 0.11;
    }
    out.push_back(std::move(p));
  }
  return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

TEST(Normalize, Examples) {
  const std::vector<double> v{1, 2, 3};
  EXPECT_NEAR(normalize(2, v), 0.0, 1e-15);
  EXPECT_NEAR(normalize(3, v), 1.0 / (std::sqrt(2.0 / 3.0) + 1e-6), 1e-12);
  EXPECT_NEAR(normalize(3, v), 1.224742, 2e-6);
  EXPECT_EQ(normalize(5, std::vector<double>{5, 5, 5}), 0.0);
  EXPECT_THROW(normalize(1, std::vector<double>{}), DomainError);
}

TEST(GrpoAdvantages, Examples) {
  const auto two = grpo_advantages(std::vector<double>{1, -1});
  EXPECT_NEAR(two[0], 1.0, 1e-5);
  EXPECT_NEAR(two[1], -1.0, 1e-5);
  for (double a : grpo_advantages(std::vector<double>(8, 1.0))) EXPECT_EQ(a, 0.0);
  const std::vector<double> balanced{1, 1, -1, -1, 1, -1, 1, -1};
  const auto bal = grpo_advantages(balanced);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(bal[i], balanced[i], 1e-5);
  EXPECT_THROW(grpo_advantages(std::vector<double>{1}), DomainError);
}

TEST(ExplorationScores, SignConvention) {
  RolloutGroup g;
  g.completions = {completion({0.9}, {0.3}), completion({0.9}, {0.3})};
  g.rewards = {kRewardCorrect, kRewardIncorrect};
  const auto prob = exploration_scores(g, ExplorationSignal::kProbability);
  EXPECT_NEAR(prob[0][0], 0.9, 1e-12);
  EXPECT_NEAR(prob[1][0], -0.9, 1e-12);
  const auto ent = exploration_scores(g, ExplorationSignal::kEntropy);
  EXPECT_NEAR(ent[0][0], 0.3, 1e-15);
  EXPECT_NEAR(ent[1][0], -0.3, 1e-15);
}

TEST(ExplorationScores, UniformPolicyEntropy) {
  RolloutGroup g;
  const double h = std::log(18.0);
  g.completions = {completion({1.0 / 18, 1.0 / 18}, {h, h}), completion({1.0 / 18}, {h})};
  g.rewards = {kRewardCorrect, kRewardIncorrect};
  const auto c = exploration_scores(g, ExplorationSignal::kEntropy);
  for (double x : c[0]) EXPECT_NEAR(x, std::log(18.0), 1e-12);
}

TEST(ExplorationScores, FlippingCorrectnessFlipsSign) {
  RolloutGroup g = toy_group();
  const auto before = exploration_scores(g, ExplorationSignal::kProbability);
  g.rewards[0] = kRewardIncorrect;
  const auto after = exploration_scores(g, ExplorationSignal::kProbability);
  for (std::size_t t = 0; t < before[0].size(); ++t) EXPECT_EQ(after[0][t], -before[0][t]);
}

TEST(NextTokenEntropyReduction, LastIsZero) {
  const auto r = next_token_entropy_reduction(completion({0.5, 0.5, 0.5}, {2.0, 1.5, 0.25}));
  ASSERT_EQ(r.size(), 3u);
  EXPECT_DOUBLE_EQ(r[0], 0.5);
  EXPECT_DOUBLE_EQ(r[1], 1.25);
  EXPECT_EQ(r[2], 0.0);
}

TEST(ComposeAdvantages, ReducesToGrpo) {
  const RolloutGroup g = toy_group();
  ShapingConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta_explo = 0.0;
  const auto a = compose_advantages(g, toy_profiles(g), cfg);
  const auto ref = grpo_advantages(g.rewards);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (double x : a.total[i]) EXPECT_EQ(x, ref[i]);
  }
  ShapingConfig grpo;
  grpo.variant = ShapingVariant::kGrpo;
  const auto b = compose_advantages(g, {}, grpo);
  EXPECT_EQ(b.alpha, 0.0);
  EXPECT_EQ(b.beta_explo, 0.0);
  EXPECT_EQ(a.total, b.total);
}

TEST(ComposeAdvantages, TotalRecomputableAndMeanZero) {
  const RolloutGroup g = toy_group();
  ShapingConfig cfg;
  cfg.alpha = 0.3;
  cfg.beta_explo = 0.2;
  const auto a = compose_advantages(g, toy_profiles(g), cfg);
  double seq_sum = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    ASSERT_EQ(a.total[i].size(), g.completions[i].length());
    for (std::size_t t = 0; t < a.total[i].size(); ++t) {
      EXPECT_NEAR(a.total[i][t], a.seq_term[i][t] + 0.3 * a.info_term[i][t] + 0.2 * a.explo_term[i][t], 1e-12);
    }
    if (a.total[i].size() >= 2) {
      EXPECT_NEAR(mean(a.info_term[i]), 0.0, 1e-9);
      EXPECT_NEAR(mean(a.explo_term[i]), 0.0, 1e-9);
    } else {
      EXPECT_EQ(a.info_term[i][0], 0.0);
      EXPECT_EQ(a.explo_term[i][0], 0.0);
    }
    seq_sum += a.seq_term[i][0];
  }
  EXPECT_NEAR(seq_sum, 0.0, 1e-9);
}

TEST(ComposeAdvantages, EqualRewardsZeroSeqTerm) {
  RolloutGroup g = toy_group();
  g.rewards.assign(g.size(), kRewardIncorrect);
  ShapingConfig cfg;
  cfg.alpha = 1.0;
  const auto a = compose_advantages(g, toy_profiles(g), cfg);
  for (const auto& row : a.seq_term) {
    for (double x : row) EXPECT_EQ(x, 0.0);
  }
  EXPECT_NE(a.total[0][0], 0.0);
}

TEST(ComposeAdvantages, Variants) {
  const RolloutGroup g = toy_group();
  ShapingConfig ni;
  ni.variant = ShapingVariant::kIapoNI;
  ni.alpha = 1.0;
  EXPECT_FALSE(ni.needs_mi_profiles());
  const auto a = compose_advantages(g, {}, ni);
  EXPECT_EQ(a.alpha, 0.0);
  EXPECT_GT(a.beta_explo, 0.0);

  ShapingConfig ne;
  ne.variant = ShapingVariant::kIapoNE;
  ne.alpha = 1.0;
  const auto b = compose_advantages(g, {}, ne);
  const auto red = next_token_entropy_reduction(g.completions[0]);
  EXPECT_NEAR(b.info_term[0][0], normalize(red[0], red), 1e-12);
  EXPECT_NEAR(b.info_term[0][2], normalize(0.0, red), 1e-12);
}

TEST(ComposeAdvantages, PermutationEquivariant) {
  const RolloutGroup g = toy_group();
  const auto prof = toy_profiles(g);
  ShapingConfig cfg;
  cfg.alpha = 0.5;
  cfg.beta_explo = 0.5;
  const auto a = compose_advantages(g, prof, cfg);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  RolloutGroup h;
  std::vector<MIProfile> pp;
  for (std::size_t i : perm) {
    h.completions.push_back(g.completions[i]);
    h.rewards.push_back(g.rewards[i]);
    pp.push_back(prof[i]);
  }
  const auto b = compose_advantages(h, pp, cfg);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    ASSERT_EQ(b.total[k].size(), a.total[perm[k]].size());
    for (std::size_t t = 0; t < b.total[k].size(); ++t) EXPECT_NEAR(b.total[k][t], a.total[perm[k]][t], 1e-12);
  }
}

TEST(ComposeAdvantages, MisalignedProfiles) {
  const RolloutGroup g = toy_group();
  auto prof = toy_profiles(g);
  prof[1].scores.push_back(0.0);
  prof[1].pre_entropies.push_back(0.0);
  prof[1].post_entropies.push_back(0.0);
  EXPECT_THROW(compose_advantages(g, prof, ShapingConfig{}), ShapeError);
  EXPECT_THROW(compose_advantages(g, std::span<const MIProfile>(prof).first(2), ShapingConfig{}), ShapeError);
}

TEST(ShapingNames, RoundTrip) {
  for (auto v : {ShapingVariant::kIapo, ShapingVariant::kIapoNI, ShapingVariant::kIapoNE, ShapingVariant::kGrpo}) {
    EXPECT_EQ(parse_shaping_variant(to_string(v)), v);
  }
  for (auto s : {ExplorationSignal::kProbability, ExplorationSignal::kEntropy}) {
    EXPECT_EQ(parse_exploration_signal(to_string(s)), s);
  }
  EXPECT_THROW(parse_shaping_variant("ppo"), ConfigError);
}
