#pragma once

#include <ostream>
#include <span>
#include <vector>

#include "iapo/model.hpp"
#include "iapo/tasks.hpp"
#include "json.hpp"

namespace iapo {

// Fraction of tasks (rows) with at least one correct trial among the first k
// columns. Throws DomainError on an empty matrix, ragged rows or k outside
// [1, columns].
double pass_at_k(const std::vector<std::vector<bool>>& correctness, std::size_t k);

// Mean over tasks of the mean length of the first k trials.
double length_at_k(const std::vector<std::vector<std::size_t>>& lengths, std::size_t k);

struct KMetrics {
  std::size_t k = 0;
  double pass = 0.0;
  double length = 0.0;
  double ratio = 0.0;  // pass / length

  friend bool operator==(const KMetrics&, const KMetrics&) = default;
};

struct EvalOptions {
  std::vector<std::size_t> ks{1, 2, 4, 8};
  int budget = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  double tau = 0.0;  // minimum pass at the largest k
};

struct EvalReport {
  std::vector<KMetrics> per_k;
  std::size_t n_tasks = 0;
  std::size_t trials = 0;
  double tau = 0.0;
  bool tau_satisfied = false;  // pass at the largest k >= tau
  std::uint64_t seed = 0;
  std::vector<std::vector<bool>> correctness;
  std::vector<std::vector<std::size_t>> lengths;

  const KMetrics& at(std::size_t k) const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  // k,pass,length,ratio
  void write_csv(std::ostream& out) const;
};

// max(ks) trials per task; trial i of task j draws from a stream derived from
// (seed, j, i), so the report is a pure function of its inputs.
EvalReport evaluate_policy(const Params& params, std::span<const Task> tasks, const EvalOptions& options);

}  // namespace iapo
