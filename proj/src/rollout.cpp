#include "iapo/rollout.hpp"

#include <cmath>
#include <fstream>

#include "iapo/error.hpp"
#include "json.hpp"

namespace iapo {

RolloutGroup sample_group(const Params& snapshot, const Task& task, std::span<RngStream> streams,
                          const SamplingOptions& options, std::uint64_t snapshot_id) {
  if (streams.size() < 2) throw DomainError("group size must be >= 2");
  if (task.query.empty()) throw DomainError("empty query");
  if (task.query.size() + static_cast<std::size_t>(options.budget) >
      static_cast<std::size_t>(snapshot.config().max_seq_len)) {
    throw LengthError("query does not fit max_seq_len - budget");
  }
  KVCache prefill(snapshot.config());
  const Mat logits = forward_logits(snapshot, task.query, prefill);
  const RowVec next = logits.row(logits.rows() - 1);

  RolloutGroup group;
  group.task = task;
  group.snapshot_id = snapshot_id;
  group.completions.reserve(streams.size());
  group.rewards.reserve(streams.size());
  group.completions = sample_continuations(snapshot, prefill, next, options, streams);
  for (const auto& c : group.completions) {
    group.rewards.push_back(check_answer(task, c.tokens) ? kRewardCorrect : kRewardIncorrect);
  }
  return group;
}

std::vector<RngStream> group_streams(std::uint64_t seed, std::uint64_t step, std::uint64_t query,
                                     std::size_t group_size) {
  std::vector<RngStream> streams;
  streams.reserve(group_size);
  for (std::size_t i = 0; i < group_size; ++i) {
    streams.push_back(RngStream::derived(seed, {0x5A4D, step, query, i}));
  }
  return streams;
}

std::vector<std::vector<double>> importance_ratios(const Params& live, const RolloutGroup& group) {
  std::vector<std::vector<double>> ratios;
  ratios.reserve(group.size());
  for (const auto& c : group.completions) {
    const TokenScores scores = token_scores(live, group.task.query, c.tokens);
    std::vector<double> rho(c.length());
    for (std::size_t t = 0; t < c.length(); ++t) {
      rho[t] = std::exp(scores.logprobs[t] - c.logprobs[t]);
      if (!std::isfinite(rho[t]) || rho[t] <= 0.0) throw NumericError("non-finite importance ratio");
    }
    ratios.push_back(std::move(rho));
  }
  return ratios;
}

void append_rollout_dump(const std::filesystem::path& path, std::span<const RolloutGroup> groups) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open rollout dump " + path.string());
  const auto& vocab = Vocab::standard();
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      nlohmann::json rec{{"query", vocab.detokenize(g.task.query)},
                         {"tokens", vocab.detokenize(g.completions[i].tokens)},
                         {"reward", g.rewards[i]},
                         {"logprobs_old", g.completions[i].logprobs}};
      out << rec.dump() << '\n';
    }
  }
}

}  // namespace iapo
