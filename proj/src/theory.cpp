#include "iapo/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "iapo/advantage.hpp"
#include "iapo/error.hpp"
#include "iapo/grad.hpp"
#include "iapo/mi_estimator.hpp"

namespace iapo {

ReducedPolicy ReducedPolicy::standard() {
  ReducedPolicy p;
  p.config = ModelConfig{6, 16, 1, 2, 32, 16};
  p.eos = 5;
  p.readout = AnswerReadout{{3, 4}, {0, 1, 2}};
  p.query = {1, 2};
  p.max_len = 5;
  return p;
}

Params ReducedPolicy::params(std::uint64_t seed, double init_std) const {
  return Params::random(config, seed, init_std);
}

double weighted_covariance(std::span<const double> p, std::span<const double> x,
                           std::span<const double> y) {
  if (p.size() != x.size() || p.size() != y.size()) throw ShapeError("covariance inputs differ in length");
  double ex = 0.0, ey = 0.0, exy = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    ex += p[i] * x[i];
    ey += p[i] * y[i];
    exy += p[i] * x[i] * y[i];
  }
  return exy - ex * ey;
}

double EnumeratedEnsemble::expected_length() const {
  double e = 0.0;
  for (const auto& t : trajectories) e += t.probability * static_cast<double>(t.length());
  return e;
}

double EnumeratedEnsemble::length_score_covariance() const {
  std::vector<double> p, l, s;
  for (const auto& t : trajectories) {
    p.push_back(t.probability);
    l.push_back(static_cast<double>(t.length()));
    s.push_back(t.score_sum);
  }
  return weighted_covariance(p, l, s);
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

class Walker {
 public:
  Walker(const Params& params, std::span<const TokenId> query, std::size_t max_len, TokenId eos,
         const ParamBuffer* direction, std::size_t cap)
      : params_(params), query_(query.begin(), query.end()), max_len_(max_len), eos_(eos),
        direction_(direction), cap_(cap) {}

  EnumeratedEnsemble run() {
    KVCache cache(params_.config());
    const Mat logits = forward_logits(params_, query_, cache);
    TokenSeq prefix;
    std::vector<double> g;
    visit(cache, logits.row(logits.rows() - 1), prefix, 1.0, g);
    for (const auto& t : out_.trajectories) out_.total_probability += t.probability;
    return std::move(out_);
  }

 private:
  // <d z_k / d theta, direction> for every logit k at the end of `prefix`.
  RowVec logit_directional(const TokenSeq& prefix) {
    TokenSeq seq = query_;
    seq.insert(seq.end(), prefix.begin(), prefix.end());
    const ForwardTape tape = forward_tape(params_, seq);
    const int V = params_.config().vocab_size;
    RowVec dz(V);
    Mat dlogits = Mat::Zero(static_cast<Eigen::Index>(seq.size()), V);
    for (int k = 0; k < V; ++k) {
      Gradients grads(params_);
      dlogits.setZero();
      dlogits(dlogits.rows() - 1, k) = 1.0;
      backward(params_, tape, dlogits, grads);
      dz(k) = dot(grads.values(), direction_->values());
    }
    return dz;
  }

  void emit(TokenSeq tokens, double prob, std::vector<double> g, bool forced) {
    if (out_.trajectories.size() >= cap_) {
      throw ResourceError("trajectory ensemble exceeds cap of " + std::to_string(cap_));
    }
    Trajectory t;
    t.tokens = std::move(tokens);
    t.probability = prob;
    t.score_sum = std::accumulate(g.begin(), g.end(), 0.0);
    t.g = std::move(g);
    t.forced_end = forced;
    out_.trajectories.push_back(std::move(t));
  }

  void visit(const KVCache& cache, const RowVec& logits, TokenSeq& prefix, double prob,
             std::vector<double>& g) {
    if (prefix.size() + 1 == max_len_) {
      TokenSeq tokens = prefix;
      tokens.push_back(eos_);
      std::vector<double> gg = g;
      gg.push_back(0.0);
      emit(std::move(tokens), prob, std::move(gg), true);
      return;
    }
    const RowVec lp = log_softmax(logits);
    RowVec gk;
    if (direction_) {
      const RowVec dz = logit_directional(prefix);
      const double mean = lp.array().exp().matrix().dot(dz);
      gk = dz.array() - mean;
    }
    const int V = params_.config().vocab_size;
    for (int a = 0; a < V; ++a) {
      const double pa = prob * std::exp(lp(a));
      prefix.push_back(a);
      g.push_back(direction_ ? gk(a) : 0.0);
      if (a == eos_) {
        emit(prefix, pa, g, false);
      } else {
        KVCache next = cache;
        const TokenId step[1] = {a};
        const RowVec nl = forward_logits(params_, step, next).row(0);
        visit(next, nl, prefix, pa, g);
      }
      prefix.pop_back();
      g.pop_back();
    }
  }

  const Params& params_;
  TokenSeq query_;
  std::size_t max_len_;
  TokenId eos_;
  const ParamBuffer* direction_;
  std::size_t cap_;
  EnumeratedEnsemble out_;
};

}  // namespace

EnumeratedEnsemble enumerate_trajectory_distribution(const Params& params, std::span<const TokenId> query,
                                                     std::size_t max_len, TokenId eos,
                                                     const ParamBuffer* direction, std::size_t cap) {
  if (query.empty()) throw DomainError("empty query");
  if (max_len < 1) throw DomainError("max_len must be >= 1");
  if (eos < 0 || eos >= params.config().vocab_size) throw VocabularyError("eos id out of range");
  if (query.size() + max_len > static_cast<std::size_t>(params.config().max_seq_len)) {
    throw LengthError("enumeration depth does not fit max_seq_len");
  }
  if (direction && direction->size() != params.size()) throw ShapeError("direction does not match params");
  return Walker(params, query, max_len, eos, direction, cap).run();
}

Gradients score_weighted_direction(const Params& params, std::span<const TokenId> query,
                                   std::span<const TokenSeq> completions,
                                   std::span<const std::vector<double>> scores, std::size_t max_len,
                                   double norm_epsilon) {
  if (completions.size() != scores.size()) throw ShapeError("one score row per completion");
  if (completions.empty()) throw DomainError("empty group");
  std::vector<double> flat;
  for (std::size_t i = 0; i < completions.size(); ++i) {
    if (scores[i].size() != completions[i].size()) throw ShapeError("score row length mismatch");
    if (completions[i].empty()) throw DomainError("empty completion");
    flat.insert(flat.end(), scores[i].begin(), scores[i].end());
  }
  const std::vector<double> beta = normalize_all(flat, norm_epsilon);

  Gradients dir(params);
  const double G = static_cast<double>(completions.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < completions.size(); ++i) {
    const TokenSeq& o = completions[i];
    TokenSeq seq(query.begin(), query.end());
    seq.insert(seq.end(), o.begin(), o.end());
    const ForwardTape tape = forward_tape(params, seq);
    Mat dlogits = Mat::Zero(tape.logits.rows(), tape.logits.cols());
    const double w = 1.0 / (G * static_cast<double>(o.size()));
    for (std::size_t t = 0; t < o.size(); ++t, ++k) {
      if (o.size() == max_len && t + 1 == o.size()) continue;  // forced EOS
      const auto r = static_cast<Eigen::Index>(query.size() + t - 1);
      const RowVec p = log_softmax(tape.logits.row(r)).array().exp();
      dlogits.row(r) = -w * beta[k] * p;
      dlogits(r, o[t]) += w * beta[k];
    }
    backward(params, tape, dlogits, dir);
  }
  if (!dir.all_finite()) throw NumericError("non-finite update direction");
  return dir;
}

std::vector<TokenSeq> sample_from_ensemble(const EnumeratedEnsemble& ensemble, std::size_t count,
                                           RngStream& rng) {
  if (ensemble.trajectories.empty()) throw DomainError("empty ensemble");
  std::vector<double> cdf;
  double acc = 0.0;
  for (const auto& t : ensemble.trajectories) cdf.push_back(acc += t.probability);
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double u = rng.uniform() * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    out.push_back(ensemble.trajectories[static_cast<std::size_t>(it - cdf.begin())].tokens);
  }
  return out;
}

Gradients informativeness_direction(const Params& params, const ReducedPolicy& policy,
                                    std::size_t group_size, std::uint64_t seed) {
  const EnumeratedEnsemble ens =
      enumerate_trajectory_distribution(params, policy.query, policy.max_len, policy.eos);
  RngStream rng = RngStream::derived(seed, {0x7E0});
  const std::vector<TokenSeq> group = sample_from_ensemble(ens, group_size, rng);
  std::vector<std::vector<double>> scores;
  for (const auto& o : group) {
    scores.push_back(mi_profile_preload(params, policy.query, o, policy.readout).scores);
  }
  return score_weighted_direction(params, policy.query, group, scores, policy.max_len);
}

CovarianceReport predict_length_change(const Params& params, const ParamBuffer& direction,
                                       std::span<const double> etas, std::span<const TokenId> query,
                                       std::size_t max_len, TokenId eos) {
  if (etas.empty()) throw DomainError("empty eta grid");
  for (std::size_t i = 0; i < etas.size(); ++i) {
    if (!(etas[i] > 0.0) || (i > 0 && !(etas[i] < etas[i - 1]))) {
      throw DomainError("eta grid must be positive and strictly decreasing");
    }
  }
  if (!direction.all_finite()) throw NumericError("non-finite update direction");
  const EnumeratedEnsemble base = enumerate_trajectory_distribution(params, query, max_len, eos, &direction);
  CovarianceReport report;
  report.covariance = base.length_score_covariance();
  report.base_length = base.expected_length();
  for (double eta : etas) {
    Params moved = params;
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += eta * direction[i];
    const double len = enumerate_trajectory_distribution(moved, query, max_len, eos).expected_length();
    CovarianceRow row;
    row.eta = eta;
    row.predicted = eta * report.covariance;
    row.realized = len - report.base_length;
    row.ratio = row.predicted != 0.0 ? row.realized / row.predicted : 0.0;
    row.error_over_eta = std::abs(row.realized - row.predicted) / eta;
    report.rows.push_back(row);
  }
  return report;
}

nlohmann::json CovarianceReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"eta", r.eta}, {"predicted", r.predicted}, {"realized", r.realized},
                  {"ratio", r.ratio}, {"error_over_eta", r.error_over_eta}});
  }
  return {{"covariance", covariance}, {"base_length", base_length}, {"rows", rs}};
}

namespace {

void check_distribution(std::span<const double> pi0) {
  if (pi0.size() < 2) throw DomainError("distribution needs at least two outcomes");
  double s = 0.0;
  for (double p : pi0) {
    if (!(p > 0.0)) throw DomainError("distribution entries must be positive");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9) throw DomainError("distribution does not sum to 1");
}

double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

}  // namespace

std::vector<double> entropy_step(std::span<const double> pi0, AdvantageMode mode, double eta) {
  check_distribution(pi0);
  const double sign = mode == AdvantageMode::kPositiveProb ? 1.0 : -1.0;
  std::vector<double> z(pi0.size());
  for (std::size_t a = 0; a < pi0.size(); ++a) z[a] = std::log(pi0[a]) + eta * sign * pi0[a];
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) total += (v = std::exp(v - mx));
  for (double& v : z) v /= total;
  return z;
}

EntropyReport entropy_change_check(std::span<const double> pi0, AdvantageMode mode,
                                   std::span<const double> etas) {
  check_distribution(pi0);
  const double sign = mode == AdvantageMode::kPositiveProb ? 1.0 : -1.0;
  std::vector<double> logp(pi0.size()), adv(pi0.size());
  for (std::size_t a = 0; a < pi0.size(); ++a) {
    logp[a] = std::log(pi0[a]);
    adv[a] = sign * pi0[a];
  }
  EntropyReport report;
  const auto [mn, mx] = std::minmax_element(pi0.begin(), pi0.end());
  report.uniform = *mx - *mn <= 1e-12;
  report.covariance = weighted_covariance(pi0, logp, adv);
  const double h0 = entropy_nats(pi0);
  for (double eta : etas) {
    const std::vector<double> next = entropy_step(pi0, mode, eta);
    EntropyRow row;
    row.eta = eta;
    row.h_before = h0;
    row.h_after = entropy_nats(next);
    row.realized = row.h_after - h0;
    row.predicted = -eta * report.covariance;
    row.ratio = row.predicted != 0.0 ? row.realized / row.predicted : 0.0;
    row.error_over_eta = std::abs(row.realized - row.predicted) / eta;
    report.rows.push_back(row);
  }
  return report;
}

EntropyReport entropy_change_check(const Params& params, std::span<const TokenId> context,
                                   AdvantageMode mode, std::span<const double> etas) {
  const Mat logits = forward_logits(params, context);
  const RowVec p = log_softmax(logits.row(logits.rows() - 1)).array().exp();
  std::vector<double> pi0(p.data(), p.data() + p.size());
  return entropy_change_check(pi0, mode, etas);
}

nlohmann::json EntropyReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"eta", r.eta}, {"h_before", r.h_before}, {"h_after", r.h_after},
                  {"realized", r.realized}, {"predicted", r.predicted}, {"ratio", r.ratio},
                  {"error_over_eta", r.error_over_eta}});
  }
  return {{"uniform", uniform}, {"covariance", covariance}, {"rows", rs}};
}

}  // namespace iapo

namespace iapo {

namespace {

const CovarianceRow& row_at(const CovarianceReport& r, double eta) {
  for (const auto& row : r.rows) {
    if (std::abs(row.eta - eta) <= 1e-15) return row;
  }
  throw DomainError("eta not in grid");
}

}  // namespace

nlohmann::json run_theory_suite(const TheorySuiteOptions& options) {
  const ReducedPolicy policy = ReducedPolicy::standard();
  const Params params = policy.params(derive_seed(options.seed, {0x7E01}));
  const std::vector<double> etas = kDefaultEtaGrid;
  nlohmann::json out;
  bool all = true;

  {
    const Gradients dir = informativeness_direction(params, policy, options.group_size, options.seed);
    const CovarianceReport r = predict_length_change(params, dir, etas, policy.query, policy.max_len, policy.eos);
    const double shrink = row_at(r, 1e-2).error_over_eta / row_at(r, 1e-3).error_over_eta;
    const bool pass = shrink >= 5.0;
    out["informativeness"] = r.to_json();
    out["informativeness"]["shrink_1e-2_to_1e-3"] = shrink;
    out["informativeness"]["pass"] = pass;
    all = all && pass;
  }
  {
    const Gradients dir(params);
    const CovarianceReport r = predict_length_change(params, dir, etas, policy.query, policy.max_len, policy.eos);
    bool pass = true;
    for (const auto& row : r.rows) pass = pass && row.predicted == 0.0 && row.realized == 0.0;
    out["zero_direction"] = r.to_json();
    out["zero_direction"]["pass"] = pass;
    all = all && pass;
  }
  {
    // A uniform shift of the output bias leaves every softmax unchanged, so
    // every g_t (and S) is identically 0.
    Gradients dir(params);
    const auto& L = params.layout();
    for (int k = 0; k < params.config().vocab_size; ++k) dir[L.head_bias + static_cast<std::size_t>(k)] = 1.0;
    const CovarianceReport r = predict_length_change(params, dir, etas, policy.query, policy.max_len, policy.eos);
    bool pass = std::abs(r.covariance) <= 1e-12;
    for (const auto& row : r.rows) pass = pass && std::abs(row.realized) <= 10.0 * row.eta * row.eta;
    out["constant_score"] = r.to_json();
    out["constant_score"]["pass"] = pass;
    all = all && pass;
  }
  {
    // Informativeness concentrated on a sampled EOS: per-token information
    // 1/|o| falls with length.
    const EnumeratedEnsemble ens =
        enumerate_trajectory_distribution(params, policy.query, policy.max_len, policy.eos);
    RngStream rng = RngStream::derived(options.seed, {0x7E02});
    const std::vector<TokenSeq> group = sample_from_ensemble(ens, options.group_size, rng);
    std::vector<std::vector<double>> scores;
    for (const auto& o : group) {
      std::vector<double> s(o.size(), 0.0);
      if (o.size() < policy.max_len) s.back() = 1.0;
      scores.push_back(std::move(s));
    }
    const Gradients dir = score_weighted_direction(params, policy.query, group, scores, policy.max_len);
    const CovarianceReport r = predict_length_change(params, dir, etas, policy.query, policy.max_len, policy.eos);
    bool pass = r.covariance < 0.0;
    for (const auto& row : r.rows) {
      if (row.eta <= 1e-2) pass = pass && row.realized < 0.0;
    }
    out["negative_covariance"] = r.to_json();
    out["negative_covariance"]["pass"] = pass;
    all = all && pass;
  }
  {
    RngStream rng = RngStream::derived(options.seed, {0x7E03});
    const std::vector<double> grid{1e-3, 1e-4};
    std::size_t sign_ok = 0, first_order_ok = 0;
    double worst = 0.0;
    for (std::size_t d = 0; d < options.distributions; ++d) {
      std::vector<double> p(options.outcomes);
      double total = 0.0;
      for (double& v : p) total += (v = -std::log(1.0 - rng.uniform()));
      for (double& v : p) v /= total;
      const EntropyReport plus = entropy_change_check(p, AdvantageMode::kPositiveProb, grid);
      const EntropyReport minus = entropy_change_check(p, AdvantageMode::kNegativeProb, grid);
      if (plus.rows[0].realized < 0.0 && minus.rows[0].realized > 0.0) ++sign_ok;
      const double rel = std::max(std::abs(plus.rows[1].ratio - 1.0), std::abs(minus.rows[1].ratio - 1.0));
      worst = std::max(worst, rel);
      if (rel <= 0.1) ++first_order_ok;
    }
    const bool pass = sign_ok == options.distributions && first_order_ok == options.distributions;
    out["entropy_law"] = {{"distributions", options.distributions},
                          {"sign_ok", sign_ok},
                          {"first_order_ok", first_order_ok},
                          {"worst_relative_error", worst},
                          {"pass", pass}};
    {
      const std::vector<double> two{0.7, 0.3};
      out["entropy_law"]["example_plus"] = entropy_change_check(two, AdvantageMode::kPositiveProb, etas).to_json();
      out["entropy_law"]["example_minus"] = entropy_change_check(two, AdvantageMode::kNegativeProb, etas).to_json();
    }
    all = all && pass;
  }
  out["pass"] = all;
  return out;
}

}  // namespace iapo
