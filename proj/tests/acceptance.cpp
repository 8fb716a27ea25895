// Acceptance harness: prints one PASS/FAIL line per criterion.
//   iapo_acceptance --group fast       AC-1..AC-4, AC-7..AC-10
//   iapo_acceptance --group training   AC-5, AC-6 (long training runs)
#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "iapo/bench.hpp"
#include "iapo/config.hpp"
#include "iapo/evaluation.hpp"
#include "iapo/mi_estimator.hpp"
#include "iapo/theory.hpp"
#include "iapo/trainer.hpp"
#include "json.hpp"

using namespace iapo;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

TokenSeq random_completion(RngStream& rng, std::size_t length) {
  TokenSeq o(length);
  for (auto& t : o) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(tok::kPad)));
  return o;
}

// AC-1 and AC-2 share the random cases.
struct EstimatorCases {
  double max_discrepancy = 0.0;
  double max_telescoping_error = 0.0;
  std::size_t cases = 0;
  std::size_t profiles = 0;
  double seconds = 0.0;
};

// H(y | context) straight from a full forward of context ++ postfix.
double direct_answer_entropy(const Params& p, const TokenSeq& context, const AnswerReadout& readout) {
  TokenSeq seq = context;
  seq.insert(seq.end(), readout.postfix.begin(), readout.postfix.end());
  const Mat logits = forward_logits(p, seq);
  const auto row = logits.row(logits.rows() - 1);
  double m = -INFINITY;
  for (TokenId a : readout.answers) m = std::max(m, row(a));
  std::vector<double> probs;
  double z = 0.0;
  for (TokenId a : readout.answers) {
    probs.push_back(std::exp(row(a) - m));
    z += probs.back();
  }
  for (double& v : probs) v /= z;
  return entropy_of_distribution(probs);
}

EstimatorCases run_estimator_cases(std::size_t n) {
  const auto t0 = Clock::now();
  EstimatorCases out;
  const AnswerReadout readout = AnswerReadout::standard();
  const ModelConfig model;
  RngStream rng(20251);
  for (std::size_t i = 0; i < n; ++i) {
    const double init_std = 0.05 + 0.95 * rng.uniform();
    const Params p = Params::random(model, 1000 + i, init_std);
    const Task task = synthetic_task(77, i, 2 + static_cast<int>(rng.below(3)));
    const std::size_t len = 1 + rng.below(64);
    const TokenSeq o = random_completion(rng, len);
    const std::size_t chunks = 1 + rng.below(len);
    const MIProfile naive = mi_profile_naive(p, task.query, o, readout);
    const MIProfile preload = mi_profile_preload(p, task.query, o, readout);
    const MIProfile chunked = mi_profile_chunked(p, task.query, o, chunks, readout);
    for (std::size_t t = 0; t < len; ++t) {
      out.max_discrepancy = std::max({out.max_discrepancy, std::abs(naive.scores[t] - preload.scores[t]),
                                      std::abs(naive.scores[t] - chunked.scores[t]),
                                      std::abs(preload.scores[t] - chunked.scores[t])});
    }
    TokenSeq full = task.query;
    full.insert(full.end(), o.begin(), o.end());
    const double total = direct_answer_entropy(p, task.query, readout) - direct_answer_entropy(p, full, readout);
    for (const MIProfile* prof : {&naive, &preload, &chunked}) {
      double sum = 0.0;
      for (double s : prof->scores) sum += s;
      out.max_telescoping_error = std::max(out.max_telescoping_error, std::abs(sum - total));
      ++out.profiles;
    }
    ++out.cases;
  }
  out.seconds = seconds_since(t0);
  return out;
}

Outcome ac3_complexity() {
  const auto t0 = Clock::now();
  BenchOptions opts;
  const std::size_t longest = *std::max_element(opts.lengths.begin(), opts.lengths.end());
  const Params p = Params::random(bench_model_config(longest, opts.query_length), 3, 0.1);
  const BenchReport r = bench_mi(p, opts);
  const double gap = r.slope(MIEstimator::kNaive) - r.slope(MIEstimator::kPreload);
  bool counts_ok = true;
  for (std::size_t L : opts.lengths) {
    const ForwardStats& f = r.cell(MIEstimator::kPreload, L).forwards;
    counts_ok = counts_ok && f.full_passes == 1 && f.continuation_passes == L + 1 && f.batched_passes == 0;
  }
  const double secs = seconds_since(t0);
  return {gap >= 0.7 && counts_ok && secs <= 600.0,
          fmt::format("slope gap {:.3f} (naive {:.3f}, preload {:.3f}), preload pass counts {}, {:.1f}s", gap,
                      r.slope(MIEstimator::kNaive), r.slope(MIEstimator::kPreload), counts_ok ? "exact" : "WRONG",
                      secs)};
}

Outcome ac4_gradients() {
  const auto t0 = Clock::now();
  const ModelConfig model;
  const AnswerReadout readout = AnswerReadout::standard();
  double worst = 0.0;
  std::size_t min_checked = SIZE_MAX;
  std::size_t variants = 0;
  for (ShapingVariant v : {ShapingVariant::kGrpo, ShapingVariant::kIapo, ShapingVariant::kIapoNI,
                           ShapingVariant::kIapoNE}) {
    ShapingConfig shaping;
    shaping.variant = v;
    shaping.alpha = 0.5;
    shaping.beta_explo = 0.3;
    const Params snapshot = Params::random(model, 41, 0.3);
    const Params reference = Params::random(model, 42, 0.3);
    std::vector<RolloutGroup> groups;
    std::vector<AdvantageBreakdown> advantages;
    const auto tasks = synthetic_tasks(43, 2, 2);
    for (std::size_t b = 0; b < tasks.size(); ++b) {
      auto streams = group_streams(44, 0, b, 4);
      groups.push_back(sample_group(snapshot, tasks[b], streams, {12, 1.0}));
      // Mixed rewards so the sequence term is active.
      groups.back().rewards = {kRewardCorrect, kRewardIncorrect, kRewardCorrect, kRewardIncorrect};
      std::vector<MIProfile> profiles;
      if (shaping.needs_mi_profiles()) {
        for (const auto& c : groups.back().completions) {
          profiles.push_back(mi_profile(snapshot, tasks[b].query, c.tokens, MIEstimator::kChunked, readout));
        }
      }
      advantages.push_back(compose_advantages(groups.back(), profiles, shaping));
    }
    const SurrogateBatch batch = make_surrogate_batch(reference, groups, advantages);
    TrainConfig cfg;
    cfg.kl_coeff = 0.05;
    Params live = snapshot;
    RngStream rng(45);
    for (std::size_t i = 0; i < live.size(); ++i) live[i] += 1e-3 * rng.normal();
    const LossAndGradients lg = surrogate_loss_and_grad(live, batch, cfg);
    std::size_t checked = 0;
    for (std::size_t tries = 0; checked < 50 && tries < 5000; ++tries) {
      const std::size_t i = rng.below(live.size());
      if (lg.grads[i] == 0.0) continue;  // structurally unused coordinate
      const double eps = 1e-3;
      Params q = live;
      q[i] = live[i] + eps;
      const double up = surrogate_loss(q, batch, cfg);
      q[i] = live[i] - eps;
      const double down = surrogate_loss(q, batch, cfg);
      const double fd = (up - down) / (2.0 * eps);
      const double rel = std::abs(lg.grads[i] - fd) / std::max({std::abs(lg.grads[i]), std::abs(fd), 1e-6});
      worst = std::max(worst, rel);
      ++checked;
    }
    min_checked = std::min(min_checked, checked);
    ++variants;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && min_checked >= 50 && secs <= 300.0,
          fmt::format("worst relative error {:.2e} over {} variants, >= {} coordinates each, {:.1f}s", worst,
                      variants, min_checked, secs)};
}

Outcome ac7_covariance_law(const nlohmann::json& suite, double secs) {
  const bool ok = suite.at("informativeness").at("pass").get<bool>() &&
                  suite.at("zero_direction").at("pass").get<bool>() &&
                  suite.at("constant_score").at("pass").get<bool>();
  return {ok && secs <= 120.0,
          fmt::format("error/eta shrink {:.2f}x (need >= 5), zero direction {}, constant score {}, {:.1f}s",
                      suite.at("informativeness").at("shrink_1e-2_to_1e-3").get<double>(),
                      suite.at("zero_direction").at("pass").get<bool>() ? "ok" : "bad",
                      suite.at("constant_score").at("pass").get<bool>() ? "ok" : "bad", secs)};
}

Outcome ac8_entropy_law(const nlohmann::json& suite, double secs) {
  const auto& e = suite.at("entropy_law");
  return {e.at("pass").get<bool>() && secs <= 60.0,
          fmt::format("signs ok {}/{}, first order ok {}/{}, worst relative error {:.2e}, {:.1f}s",
                      e.at("sign_ok").get<int>(), e.at("distributions").get<int>(), e.at("first_order_ok").get<int>(),
                      e.at("distributions").get<int>(), e.at("worst_relative_error").get<double>(), secs)};
}

Outcome ac9_reduction() {
  const ModelConfig model;
  TrainConfig grpo;
  grpo.lr = 3e-4;
  grpo.batch_size = 2;
  grpo.budget = 16;
  grpo.seed = 9;
  grpo.total_steps = 50;
  grpo.shaping.variant = ShapingVariant::kGrpo;
  TrainConfig iapo = grpo;
  iapo.shaping.variant = ShapingVariant::kIapo;
  iapo.shaping.alpha = 0.0;
  iapo.shaping.beta_explo = 0.0;
  TrainState a = TrainState::initial(model, grpo);
  TrainState b = TrainState::initial(model, iapo);
  const TaskFeed feed = TaskFeed::synthetic(1, 2);
  double worst = 0.0;
  for (std::uint64_t step = 0; step < 50; ++step) {
    std::vector<Task> tasks;
    for (int j = 0; j < grpo.batch_size; ++j) tasks.push_back(feed.at(step * 2 + static_cast<std::uint64_t>(j)));
    train_step(a, tasks, grpo);
    train_step(b, tasks, iapo);
    for (std::size_t i = 0; i < a.live.size(); ++i) worst = std::max(worst, std::abs(a.live[i] - b.live[i]));
  }
  return {worst <= 1e-9, fmt::format("max parameter divergence {:.3e} over 50 steps", worst)};
}

Outcome ac10_metrics() {
  std::size_t reports = 0;
  double worst_identity = 0.0;
  bool monotone = true;
  const ModelConfig model;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Params p = Params::random(model, 300 + s, 0.3 + 0.3 * static_cast<double>(s));
    EvalOptions opts;
    opts.budget = 16;
    opts.seed = s;
    const EvalReport r = evaluate_policy(p, synthetic_tasks(310 + s, 20, 2), opts);
    ++reports;
    for (const auto& m : r.per_k) worst_identity = std::max(worst_identity, std::abs(m.ratio * m.length - m.pass));
    for (std::size_t i = 1; i < r.per_k.size(); ++i) monotone = monotone && r.per_k[i].pass >= r.per_k[i - 1].pass;
  }
  RngStream rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<bool>> m(1 + rng.below(20), std::vector<bool>(1 + rng.below(16)));
    const double density = rng.uniform();
    for (auto& row : m) {
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = rng.uniform() < density;
    }
    double prev = 0.0;
    for (std::size_t k = 1; k <= m[0].size(); ++k) {
      const double pk = pass_at_k(m, k);
      monotone = monotone && pk >= prev;
      prev = pk;
    }
  }
  return {worst_identity <= 1e-12 && monotone,
          fmt::format("ratio*length-pass max {:.1e} over {} reports, pass monotone in k on 200 matrices: {}",
                      worst_identity, reports, monotone ? "yes" : "no")};
}

// ---- training criteria ----

struct RunResult {
  double pass1 = 0.0;
  double pass8 = 0.0;
  double length8 = 0.0;  // mean completion length over all 8 trials
  double train_length = 0.0;  // mean of the last 20 logged training lengths
  double seconds = 0.0;
};

nlohmann::json to_json(const RunResult& r) {
  return {{"pass1", r.pass1}, {"pass8", r.pass8}, {"length8", r.length8}, {"train_length", r.train_length},
          {"seconds", r.seconds}};
}

RunResult from_json(const nlohmann::json& j) {
  return {j.at("pass1").get<double>(), j.at("pass8").get<double>(), j.at("length8").get<double>(),
          j.at("train_length").get<double>(), j.at("seconds").get<double>()};
}

struct TrainingProtocol {
  int steps = 2000;
  fs::path out_dir;
  bool reuse = false;
};

RunConfig protocol_config(ShapingVariant variant, std::uint64_t seed, int steps) {
  nlohmann::json doc = default_config_json();
  apply_override(doc, "trainer.lr=3e-4");
  apply_override(doc, "trainer.group_size=8");
  apply_override(doc, "trainer.budget=64");
  apply_override(doc, "data.difficulty=2");
  apply_override(doc, "trainer.total_steps=" + std::to_string(steps));
  if (variant == ShapingVariant::kIapo) {
    apply_override(doc, "shaping.variant=iapo");
    apply_override(doc, "shaping.alpha=1e-2");
    apply_override(doc, "shaping.beta_explo=1e-4");
  } else {
    apply_override(doc, "shaping.variant=grpo");
  }
  RunConfig c = run_config_from_json(doc);
  c.seed = seed;
  c.trainer.seed = seed;
  return c;
}

RunResult training_run(const TrainingProtocol& proto, ShapingVariant variant, std::uint64_t seed) {
  const std::string name = fmt::format("{}_seed{}", to_string(variant), seed);
  const fs::path dir = proto.out_dir / name;
  const fs::path result_path = dir / "result.json";
  if (proto.reuse && fs::exists(result_path)) {
    std::ifstream in(result_path);
    return from_json(nlohmann::json::parse(in));
  }
  const RunConfig c = protocol_config(variant, seed, proto.steps);
  fs::create_directories(dir);
  const auto t0 = Clock::now();
  TrainLoopOptions loop;
  loop.out_dir = dir;
  std::deque<double> lengths;
  loop.on_step = [&lengths](const StepReport& r) {
    lengths.push_back(r.mean_length);
    if (lengths.size() > 20) lengths.pop_front();
    if (r.step % 100 == 0) fmt::print(stderr, "  step {} reward {:.3f} length {:.2f}\n", r.step, r.mean_reward, r.mean_length);
  };
  const TrainState state = train_loop(c.model, c.trainer, TaskFeed::synthetic(c.data.train_seed, c.data.difficulty), loop);
  RunResult r;
  r.seconds = seconds_since(t0);
  EvalOptions eval;
  eval.ks = {1, 8};
  eval.budget = 64;
  eval.temperature = 1.0;
  eval.seed = seed;
  const EvalReport rep = evaluate_policy(state.live, synthetic_tasks(c.eval_task_seed, 100, 2), eval);
  r.pass1 = rep.at(1).pass;
  r.pass8 = rep.at(8).pass;
  r.length8 = rep.at(8).length;
  for (double l : lengths) r.train_length += l / static_cast<double>(lengths.size());
  std::ofstream(result_path) << to_json(r).dump(2) << '\n';
  return r;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void report(const std::string& id, const std::string& title, const Outcome& o, bool& all) {
  fmt::print("{} {} {}: {}\n", id, o.pass ? "PASS" : "FAIL", title, o.detail);
  std::fflush(stdout);
  all = all && o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string group = "fast";
  TrainingProtocol proto;
  proto.out_dir = "acceptance_runs";
  int seeds = 3;
  app.add_option("--group", group, "fast|training|all")->check(CLI::IsMember({"fast", "training", "all"}));
  app.add_option("--steps", proto.steps, "training steps for AC-5/AC-6");
  app.add_option("--seeds", seeds, "seeds per variant for AC-6")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", proto.out_dir, "directory for training runs");
  app.add_flag("--reuse", proto.reuse, "reuse finished runs found in --out-dir");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  bool all = true;
  if (group == "fast" || group == "all") {
    const EstimatorCases cases = run_estimator_cases(100);
    report("AC-1", "estimator equivalence",
           {cases.max_discrepancy <= 1e-6 && cases.seconds <= 120.0,
            fmt::format("max discrepancy {:.2e} over {} cases, {:.1f}s", cases.max_discrepancy, cases.cases,
                        cases.seconds)},
           all);
    report("AC-2", "telescoping identity",
           {cases.max_telescoping_error <= 1e-9,
            fmt::format("max |sum s_t - (H(y|q) - H(y|q,o))| {:.2e} over {} profiles", cases.max_telescoping_error,
                        cases.profiles)},
           all);
    report("AC-3", "complexity trend", ac3_complexity(), all);
    report("AC-4", "gradient correctness", ac4_gradients(), all);
  }
  if (group == "training" || group == "all") {
    std::map<std::string, std::vector<RunResult>> runs;
    for (int s = 0; s < seeds; ++s) {
      for (ShapingVariant v : {ShapingVariant::kGrpo, ShapingVariant::kIapo}) {
        fmt::print(stderr, "training {} seed {}\n", to_string(v), s);
        runs[std::string(to_string(v))].push_back(training_run(proto, v, static_cast<std::uint64_t>(s)));
      }
      if (s == 0) {
        const RunResult& g = runs["grpo"][0];
        report("AC-5", "GRPO learning smoke",
               {g.pass1 >= 0.9 && g.seconds <= 1800.0,
                fmt::format("held-out Pass@1 {:.3f} (need >= 0.9), {} steps in {:.0f}s", g.pass1, proto.steps,
                            g.seconds)},
               all);
      }
    }
    auto med = [&](const std::string& v, double RunResult::*field) {
      std::vector<double> xs;
      for (const auto& r : runs[v]) xs.push_back(r.*field);
      return median(xs);
    };
    const double lg = med("grpo", &RunResult::length8), li = med("iapo", &RunResult::length8);
    const double pg = med("grpo", &RunResult::pass8), pi = med("iapo", &RunResult::pass8);
    report("AC-6", "IAPO directional claim",
           {li <= 0.9 * lg && pi >= pg - 0.05,
            fmt::format("median length iapo {:.2f} vs grpo {:.2f} ({:+.1f}%), median Pass@8 iapo {:.3f} vs grpo "
                        "{:.3f}, {} seeds",
                        li, lg, 100.0 * (li - lg) / lg, pi, pg, seeds)},
           all);
  }
  if (group == "fast" || group == "all") {
    const auto t0 = Clock::now();
    const nlohmann::json suite = run_theory_suite({});
    const double secs = seconds_since(t0);
    report("AC-7", "first-order length law", ac7_covariance_law(suite, secs), all);
    report("AC-8", "entropy law", ac8_entropy_law(suite, secs), all);
    report("AC-9", "reduction identity", ac9_reduction(), all);
    report("AC-10", "metrics algebra", ac10_metrics(), all);
  }
  return all ? 0 : 1;
}
