#include "iapo/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "iapo/bench.hpp"
#include "iapo/checkpoint.hpp"
#include "iapo/config.hpp"
#include "iapo/error.hpp"
#include "iapo/evaluation.hpp"
#include "iapo/mi_estimator.hpp"
#include "iapo/theory.hpp"
#include "iapo/trainer.hpp"

namespace iapo {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void setup_logging(const std::string& level) {
  static bool installed = false;
  if (!installed) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("iapo"));
    installed = true;
  }
  std::string chosen = level;
  if (chosen.empty()) {
    const char* env = std::getenv("IAPO_LOG");
    chosen = env ? env : "info";
  }
  const auto lvl = spdlog::level::from_str(chosen);
  if (lvl == spdlog::level::off && chosen != "off") throw UsageError("unknown log level: " + chosen);
  spdlog::set_level(lvl);
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// Timestamps live apart from the reproducible outputs.
void write_run_meta(const fs::path& path, const std::string& command) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[64];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  write_json(path, {{"command", command}, {"finished_at", buf}});
}

RunConfig config_or_usage(const std::string& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed, json* effective) {
  std::vector<std::string> all = overrides;
  if (seed) all.push_back("seed=" + std::to_string(*seed));
  try {
    return load_run_config(path, all, effective);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::vector<Task> eval_task_set(const RunConfig& c, const std::string& tasks_path) {
  if (!tasks_path.empty()) return load_tasks_jsonl(tasks_path);
  return synthetic_tasks(c.eval_task_seed, c.eval_tasks, c.data.difficulty);
}

struct Options {
  std::string log_level;

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::string checkpoint;
  std::string tasks;

  std::string query;
  std::string completion;
  std::string estimator = "chunked";
  std::size_t chunks = 0;

  std::vector<std::size_t> lengths{32, 64, 128, 256};
  std::vector<std::string> estimators{"naive", "preload", "chunked"};
  int repetitions = 3;

  std::size_t count = 100;
  int difficulty = 2;
  bool print_config = false;
};

int cmd_gen_data(const Options& o) {
  if (o.out.empty()) throw UsageError("gen-data needs --out");
  const auto tasks = synthetic_tasks(o.seed.value_or(0), o.count, o.difficulty);
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  write_tasks_jsonl(o.out, tasks);
  spdlog::info("wrote {} tasks to {}", tasks.size(), o.out);
  return kExitOk;
}

int cmd_train(const Options& o) {
  json effective;
  const RunConfig c = config_or_usage(o.config_path, o.overrides, o.seed, &effective);
  if (o.print_config) {
    std::cout << effective.dump(2) << '\n';
    return kExitOk;
  }
  const fs::path out_dir = o.out.empty() ? fs::path("run") : fs::path(o.out);
  fs::create_directories(out_dir);
  write_json(out_dir / "effective_config.json", effective);

  const TaskFeed feed = c.data.train_path.empty()
                            ? TaskFeed::synthetic(c.data.train_seed, c.data.difficulty)
                            : TaskFeed::from_list(load_tasks_jsonl(c.data.train_path));
  TrainLoopOptions loop;
  loop.out_dir = out_dir;
  if (!o.resume.empty()) loop.resume_from = fs::path(o.resume);
  std::vector<Task> validation;
  if (c.trainer.eval_every > 0 && c.data.validation_tasks > 0) {
    validation = synthetic_tasks(c.data.validation_seed, c.data.validation_tasks, c.data.difficulty);
    EvalOptions ev = c.eval;
    ev.ks = {1};
    loop.validate = [validation, ev](const Params& p) {
      const EvalReport r = evaluate_policy(p, validation, ev);
      return std::make_pair(r.per_k.front().pass, r.per_k.front().ratio);
    };
  }
  loop.on_step = [](const StepReport& r) {
    if (r.step % 50 == 0) {
      spdlog::info("step {} reward {:.3f} length {:.2f} loss {:.4g}", r.step, r.mean_reward, r.mean_length, r.loss);
    }
  };
  const TrainState state = train_loop(c.model, c.trainer, feed, loop);
  write_run_meta(out_dir / "run_meta.json", "train");
  spdlog::info("finished at step {}", state.step);
  return kExitOk;
}

Params params_from(const Options& o, const RunConfig& c) {
  if (!o.checkpoint.empty()) return load_checkpoint(o.checkpoint).params;
  return TrainState::initial(c.model, c.trainer).live;
}

int cmd_eval(const Options& o) {
  const RunConfig c = config_or_usage(o.config_path, o.overrides, o.seed, nullptr);
  const Params params = params_from(o, c);
  const std::vector<Task> tasks = eval_task_set(c, o.tasks);
  const EvalReport r = evaluate_policy(params, tasks, c.eval);
  const json doc = r.to_json();
  if (o.out.empty()) {
    std::cout << doc.dump(2) << '\n';
  } else {
    write_json(o.out, doc);
    fs::path csv = o.out;
    csv.replace_extension(".csv");
    auto out = open_out(csv);
    r.write_csv(out);
    fs::path meta = o.out;
    meta.replace_extension(".meta.json");
    write_run_meta(meta, "eval");
  }
  return kExitOk;
}

int cmd_estimate_mi(const Options& o) {
  const RunConfig c = config_or_usage(o.config_path, o.overrides, o.seed, nullptr);
  const Params params = params_from(o, c);
  const Vocab& vocab = Vocab::standard();
  TokenSeq query;
  try {
    query = o.query.empty() ? synthetic_task(c.eval_task_seed, 0, c.data.difficulty).query : vocab.tokenize(o.query);
  } catch (const VocabularyError& e) {
    throw UsageError(e.what());
  }
  TokenSeq completion;
  if (!o.completion.empty()) {
    try {
      completion = vocab.tokenize(o.completion);
    } catch (const VocabularyError& e) {
      throw UsageError(e.what());
    }
  } else {
    RngStream rng = RngStream::derived(c.seed, {0x313});
    completion = sample_completion(params, query, {c.trainer.budget, c.trainer.temperature}, rng).tokens;
  }
  MIEstimator estimator;
  try {
    estimator = parse_mi_estimator(o.estimator);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const MIProfile profile = estimator == MIEstimator::kChunked && o.chunks > 0
                                ? mi_profile_chunked(params, query, completion, o.chunks)
                                : mi_profile(params, query, completion, estimator);
  if (o.out.empty()) {
    write_mi_csv(std::cout, completion, profile);
  } else {
    auto out = open_out(o.out);
    write_mi_csv(out, completion, profile);
  }
  return kExitOk;
}

int cmd_theory(const Options& o) {
  TheorySuiteOptions opts;
  opts.seed = o.seed.value_or(0);
  const json report = run_theory_suite(opts);
  if (o.out.empty()) {
    std::cout << report.dump(2) << '\n';
  } else {
    write_json(o.out, report);
  }
  spdlog::info("theory checks {}", report.at("pass").get<bool>() ? "passed" : "FAILED");
  return report.at("pass").get<bool>() ? kExitOk : kExitDomain;
}

int cmd_bench(const Options& o) {
  BenchOptions b;
  b.lengths = o.lengths;
  b.repetitions = o.repetitions;
  b.seed = o.seed.value_or(0);
  b.estimators.clear();
  try {
    for (const auto& e : o.estimators) b.estimators.push_back(parse_mi_estimator(e));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (b.lengths.empty()) throw UsageError("bench needs at least one length");
  std::size_t longest = 0;
  for (auto l : b.lengths) longest = std::max(longest, l);
  const Params params = Params::random(bench_model_config(longest, b.query_length),
                                       derive_seed(b.seed, {0xBE7}));
  const BenchReport r = bench_mi(params, b);
  if (o.out.empty()) {
    r.write_csv(std::cout);
  } else {
    auto out = open_out(o.out);
    r.write_csv(out);
    fs::path meta = o.out;
    meta.replace_extension(".meta.json");
    json slopes = json::object();
    for (const auto& s : r.slopes) slopes[std::string(to_string(s.estimator))] = s.slope;
    write_json(meta, {{"slopes", slopes}, {"max_discrepancy", r.max_discrepancy}});
    write_run_meta(fs::path(o.out).replace_extension(".time.json"), "bench");
  }
  for (const auto& s : r.slopes) spdlog::info("slope {} = {:.3f}", to_string(s.estimator), s.slope);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Information-aware advantage shaping lab"};
  app.fallthrough();  // global options may follow the subcommand
  app.name("iapo");
  app.require_subcommand(1);
  Options o;
  app.add_option("--log-level", o.log_level, "trace|debug|info|warn|error|off (default: $IAPO_LOG or info)");

  auto add_config = [&o](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "JSON config file");
    sub->add_option("-o,--override", o.overrides, "dotted.key=value, repeatable");
    sub->add_option("--seed", o.seed, "run seed (overrides the config)");
  };

  auto* gen = app.add_subcommand("gen-data", "write synthetic tasks as JSONL");
  gen->add_option("--seed", o.seed);
  gen->add_option("--count", o.count)->check(CLI::PositiveNumber);
  gen->add_option("-n,--n,--difficulty", o.difficulty, "operand count")->check(CLI::Range(2, 64));
  gen->add_option("--out", o.out)->required();

  auto* train = app.add_subcommand("train", "run GRPO/IAPO training");
  add_config(train);
  train->add_option("--out-dir", o.out, "output directory (default: run)");
  train->add_option("--resume", o.resume, "checkpoint to resume from");
  train->add_flag("--print-config", o.print_config, "print the effective config and exit");

  auto* eval = app.add_subcommand("eval", "Pass@k / Length@k / Ratio@k report");
  add_config(eval);
  eval->add_option("--checkpoint", o.checkpoint);
  eval->add_option("--tasks", o.tasks, "JSONL task file (default: synthetic eval set)");
  eval->add_option("--out", o.out, "report JSON (CSV twin written alongside)");

  auto* mi = app.add_subcommand("estimate-mi", "per-token answer-information profile as CSV");
  add_config(mi);
  mi->add_option("--checkpoint", o.checkpoint);
  mi->add_option("--query", o.query, "e.g. \"3 + 4 =\"");
  mi->add_option("--completion", o.completion, "tokens; sampled from the policy when omitted");
  mi->add_option("--estimator", o.estimator, "naive|preload|chunked");
  mi->add_option("--chunks", o.chunks, "chunk count for the chunked estimator");
  mi->add_option("--out", o.out);

  auto* theory = app.add_subcommand("theory-check", "length-covariance and entropy-law checks");
  theory->add_option("--seed", o.seed);
  theory->add_option("--out", o.out);

  auto* bench = app.add_subcommand("bench", "MI estimator timing benchmark");
  bench->add_option("--seed", o.seed);
  bench->add_option("--lengths", o.lengths)->delimiter(',');
  bench->add_option("--estimators", o.estimators)->delimiter(',');
  bench->add_option("--reps", o.repetitions)->check(CLI::Range(3, 1000));
  bench->add_option("--out", o.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    setup_logging(o.log_level);
    if (gen->parsed()) return cmd_gen_data(o);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (mi->parsed()) return cmd_estimate_mi(o);
    if (theory->parsed()) return cmd_theory(o);
    if (bench->parsed()) return cmd_bench(o);
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << config_schema_help();
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  }
}

}  // namespace iapo
