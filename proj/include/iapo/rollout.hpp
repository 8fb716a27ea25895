#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "iapo/model.hpp"
#include "iapo/tasks.hpp"

namespace iapo {

inline constexpr double kRewardCorrect = 1.0;
inline constexpr double kRewardIncorrect = -1.0;

struct RolloutGroup {
  Task task;
  std::vector<SampledCompletion> completions;
  std::vector<double> rewards;  // +1 correct, -1 incorrect
  std::uint64_t snapshot_id = 0;

  std::size_t size() const { return completions.size(); }
  bool correct(std::size_t i) const { return rewards[i] > 0.0; }
};

// Samples G completions of one task from the frozen snapshot. The query is
// prefilled once and its cache shared by all G samples; sample i draws from
// streams[i].
RolloutGroup sample_group(const Params& snapshot, const Task& task, std::span<RngStream> streams,
                          const SamplingOptions& options, std::uint64_t snapshot_id = 0);

// G streams derived from (seed, tags..., i).
std::vector<RngStream> group_streams(std::uint64_t seed, std::uint64_t step, std::uint64_t query,
                                     std::size_t group_size);

// rho_{i,t} = exp(logprob_live - logprob_old) per completion token.
std::vector<std::vector<double>> importance_ratios(const Params& live, const RolloutGroup& group);

// One JSON line per completion: {query, tokens, reward, logprobs_old}.
void append_rollout_dump(const std::filesystem::path& path, std::span<const RolloutGroup> groups);

}  // namespace iapo
