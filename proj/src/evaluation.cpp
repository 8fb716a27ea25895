#include "iapo/evaluation.hpp"

#include <algorithm>

#include <spdlog/fmt/fmt.h>

#include "iapo/error.hpp"

namespace iapo {

namespace {

template <typename T>
void check_matrix(const std::vector<std::vector<T>>& m, std::size_t k) {
  if (m.empty()) throw DomainError("empty evaluation matrix");
  const std::size_t cols = m.front().size();
  for (const auto& row : m) {
    if (row.size() != cols) throw DomainError("ragged evaluation matrix");
  }
  if (k < 1 || k > cols) throw DomainError("k must be in [1, trials]");
}

}  // namespace

double pass_at_k(const std::vector<std::vector<bool>>& correctness, std::size_t k) {
  check_matrix(correctness, k);
  std::size_t hits = 0;
  for (const auto& row : correctness) {
    if (std::any_of(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), [](bool b) { return b; })) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(correctness.size());
}

double length_at_k(const std::vector<std::vector<std::size_t>>& lengths, std::size_t k) {
  check_matrix(lengths, k);
  double total = 0.0;
  for (const auto& row : lengths) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += static_cast<double>(row[i]);
    total += s / static_cast<double>(k);
  }
  return total / static_cast<double>(lengths.size());
}

const KMetrics& EvalReport::at(std::size_t k) const {
  for (const auto& m : per_k) {
    if (m.k == k) return m;
  }
  throw DomainError("k=" + std::to_string(k) + " not in report");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : per_k) {
    metrics.push_back({{"k", m.k}, {"pass", m.pass}, {"length", m.length}, {"ratio", m.ratio}});
  }
  return {{"metrics", metrics}, {"n_tasks", n_tasks},     {"trials", trials},
          {"tau", tau},         {"tau_satisfied", tau_satisfied}, {"seed", seed}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    for (const auto& m : j.at("metrics")) {
      r.per_k.push_back({m.at("k").get<std::size_t>(), m.at("pass").get<double>(),
                         m.at("length").get<double>(), m.at("ratio").get<double>()});
    }
    r.n_tasks = j.at("n_tasks").get<std::size_t>();
    r.trials = j.at("trials").get<std::size_t>();
    r.tau = j.at("tau").get<double>();
    r.tau_satisfied = j.at("tau_satisfied").get<bool>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "k,pass,length,ratio\n";
  for (const auto& m : per_k) out << fmt::format("{},{},{},{}\n", m.k, m.pass, m.length, m.ratio);
}

EvalReport evaluate_policy(const Params& params, std::span<const Task> tasks, const EvalOptions& options) {
  if (tasks.empty()) throw DomainError("no evaluation tasks");
  if (options.ks.empty()) throw DomainError("no k values");
  const std::size_t trials = *std::max_element(options.ks.begin(), options.ks.end());
  if (trials < 1) throw DomainError("k must be >= 1");

  EvalReport report;
  report.n_tasks = tasks.size();
  report.trials = trials;
  report.tau = options.tau;
  report.seed = options.seed;
  const SamplingOptions sampling{options.budget, options.temperature};
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    const Task& task = tasks[j];
    if (task.query.size() + static_cast<std::size_t>(options.budget) >
        static_cast<std::size_t>(params.config().max_seq_len)) {
      throw LengthError("query does not fit max_seq_len - budget");
    }
    KVCache prefill(params.config());
    const Mat logits = forward_logits(params, task.query, prefill);
    const RowVec next = logits.row(logits.rows() - 1);
    std::vector<bool> ok(trials);
    std::vector<std::size_t> len(trials);
    std::vector<RngStream> streams;
    streams.reserve(trials);
    for (std::size_t i = 0; i < trials; ++i) streams.push_back(RngStream::derived(options.seed, {0xE7A1, j, i}));
    const auto completions = sample_continuations(params, prefill, next, sampling, streams);
    for (std::size_t i = 0; i < trials; ++i) {
      ok[i] = check_answer(task, completions[i].tokens);
      len[i] = completions[i].length();
    }
    report.correctness.push_back(std::move(ok));
    report.lengths.push_back(std::move(len));
  }
  std::vector<std::size_t> ks = options.ks;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (std::size_t k : ks) {
    KMetrics m;
    m.k = k;
    m.pass = pass_at_k(report.correctness, k);
    m.length = length_at_k(report.lengths, k);
    m.ratio = m.length > 0.0 ? m.pass / m.length : 0.0;
    report.per_k.push_back(m);
  }
  report.tau_satisfied = report.per_k.back().pass >= options.tau;
  return report;
}

}  // namespace iapo
