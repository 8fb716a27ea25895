#pragma once

#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "iapo/advantage.hpp"
#include "iapo/grad.hpp"
#include "iapo/mi_estimator.hpp"
#include "iapo/rollout.hpp"
#include "iapo/tasks.hpp"

namespace iapo {

struct TrainConfig {
  int group_size = 8;
  double lr = 1e-6;
  double lr_decay = 0.5;
  double lr_decay_every = 0.5;  // fraction of total_steps between decays
  double kl_coeff = 0.001;
  double clip_epsilon = 0.2;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  int budget = 64;
  int batch_size = 8;  // queries per step
  int total_steps = 100;
  int inner_epochs = 1;
  double temperature = 1.0;
  double init_std = 0.1;
  MIEstimator estimator = MIEstimator::kChunked;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  int eval_every = 0;        // 0 disables validation
  ShapingConfig shaping;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  // lr multiplier in effect at `step` (0-based).
  double lr_scale_at(std::uint64_t step) const;
};

// Cycles through a finite task list or draws from the synthetic stream.
class TaskFeed {
 public:
  static TaskFeed synthetic(std::uint64_t seed, int difficulty);
  static TaskFeed from_list(std::vector<Task> tasks);

  Task at(std::uint64_t index) const;

 private:
  std::uint64_t seed_ = 0;
  int difficulty_ = 2;
  std::vector<Task> tasks_;
};

struct StepReport {
  std::uint64_t step = 0;  // 1-based index of the completed step
  double mean_reward = 0.0;
  double accuracy = 0.0;
  double mean_length = 0.0;
  double mean_entropy = 0.0;
  double ratio = 0.0;  // accuracy / mean_length
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double seq_term_rms = 0.0;
  double info_term_rms = 0.0;
  double explo_term_rms = 0.0;

  friend bool operator==(const StepReport&, const StepReport&) = default;
};

struct TrainState {
  Params live;
  Params reference;  // frozen at initialization
  Params snapshot;   // sampling policy of the current batch
  AdamWState optimizer;
  std::uint64_t step = 0;
  std::uint64_t snapshot_id = 0;
  std::deque<StepReport> recent;  // last kRecentReports reports

  static constexpr std::size_t kRecentReports = 64;

  static TrainState initial(const ModelConfig& model, const TrainConfig& config);
};

// Everything the surrogate needs besides the live parameters.
struct SurrogateBatch {
  std::vector<TokenSeq> sequences;        // q ++ o_i
  std::vector<std::size_t> query_lengths;
  std::vector<const SampledCompletion*> completions;
  std::vector<const std::vector<double>*> advantages;
  std::vector<Mat> reference_logits;  // one per sequence
  std::size_t completion_count = 0;
};

SurrogateBatch make_surrogate_batch(const Params& reference, std::span<const RolloutGroup> groups,
                                    std::span<const AdvantageBreakdown> advantages);

// Negative clipped-surrogate objective with exact per-position KL to the
// reference: mean over completions of (1/|o_i|) sum_t [-min(rho A, clip(rho) A)
// + kl_coeff * KL_t].
double surrogate_loss(const Params& live, const SurrogateBatch& batch, const TrainConfig& config);

LossAndGradients surrogate_loss_and_grad(const Params& live, const SurrogateBatch& batch,
                                         const TrainConfig& config);

// The per-sequence callback behind both functions above.
SequenceLoss surrogate_sequence_loss(const SurrogateBatch& batch, const TrainConfig& config);

// One IAPO/GRPO update on `tasks` (batch_size of them). On any error the
// state is left untouched.
StepReport train_step(TrainState& state, std::span<const Task> tasks, const TrainConfig& config);

// Optional hook run every eval_every steps; returns (pass, ratio) used to
// pick the best checkpoint.
using ValidationFn = std::function<std::pair<double, double>(const Params&)>;

struct TrainLoopOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  ValidationFn validate;
  std::function<void(const StepReport&)> on_step;
};

inline constexpr const char* kMetricsHeader = "step,mean_reward,mean_length,ratio,loss,alpha,beta_explo";

// Runs total_steps steps (continuing from a resumed checkpoint's step), writes
// metrics.csv, periodic checkpoints and final.ckpt to out_dir.
TrainState train_loop(const ModelConfig& model, const TrainConfig& config, const TaskFeed& feed,
                      const TrainLoopOptions& options);

}  // namespace iapo
