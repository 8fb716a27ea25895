#include "iapo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "iapo/checkpoint.hpp"
#include "iapo/error.hpp"

namespace iapo {

void TrainConfig::validate() const {
  if (group_size < 2) throw ConfigError("trainer.group_size must be >= 2");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("trainer.lr must be >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("trainer.lr_decay must be in (0, 1]");
  if (!(lr_decay_every > 0.0)) throw ConfigError("trainer.lr_decay_every must be positive");
  if (kl_coeff < 0.0) throw ConfigError("trainer.kl_coeff must be >= 0");
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw ConfigError("trainer.clip_epsilon must be in (0, 1)");
  if (!(grad_clip > 0.0)) throw ConfigError("trainer.grad_clip must be positive");
  if (weight_decay < 0.0) throw ConfigError("trainer.weight_decay must be >= 0");
  if (budget < 1) throw ConfigError("trainer.budget must be >= 1");
  if (batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("trainer.total_steps must be >= 0");
  if (inner_epochs < 1) throw ConfigError("trainer.inner_epochs must be >= 1");
  if (temperature < 0.0) throw ConfigError("trainer.temperature must be >= 0");
  if (!(init_std > 0.0)) throw ConfigError("trainer.init_std must be positive");
  if (checkpoint_every < 0 || eval_every < 0) throw ConfigError("intervals must be >= 0");
  if (shaping.alpha < 0.0 || shaping.beta_explo < 0.0) throw ConfigError("shaping coefficients must be >= 0");
  if (!(shaping.norm_epsilon > 0.0)) throw ConfigError("shaping.norm_epsilon must be positive");
}

double TrainConfig::lr_scale_at(std::uint64_t step) const {
  if (total_steps <= 0) return 1.0;
  const double period = std::max(1.0, std::floor(lr_decay_every * total_steps));
  const double k = std::floor(static_cast<double>(step) / period);
  return std::pow(lr_decay, k);
}

TaskFeed TaskFeed::synthetic(std::uint64_t seed, int difficulty) {
  if (difficulty < 2) throw DomainError("difficulty must be >= 2");
  TaskFeed f;
  f.seed_ = seed;
  f.difficulty_ = difficulty;
  return f;
}

TaskFeed TaskFeed::from_list(std::vector<Task> tasks) {
  if (tasks.empty()) throw DomainError("empty task list");
  TaskFeed f;
  f.tasks_ = std::move(tasks);
  return f;
}

Task TaskFeed::at(std::uint64_t index) const {
  if (!tasks_.empty()) return tasks_[index % tasks_.size()];
  return synthetic_task(seed_, index, difficulty_);
}

TrainState TrainState::initial(const ModelConfig& model, const TrainConfig& config) {
  Params init = Params::random(model, derive_seed(config.seed, {0x1417}), config.init_std);
  AdamWHyper hyper;
  hyper.lr = config.lr;
  hyper.weight_decay = config.weight_decay;
  AdamWState opt = AdamWState::for_params(init, hyper);
  return TrainState{init, init, init, std::move(opt), 0, 0, {}};
}

SurrogateBatch make_surrogate_batch(const Params& reference, std::span<const RolloutGroup> groups,
                                    std::span<const AdvantageBreakdown> advantages) {
  if (groups.size() != advantages.size()) throw ShapeError("one advantage breakdown per group");
  SurrogateBatch batch;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const RolloutGroup& group = groups[g];
    if (advantages[g].size() != group.size()) throw ShapeError("advantages do not match group size");
    for (std::size_t i = 0; i < group.size(); ++i) {
      const SampledCompletion& c = group.completions[i];
      if (c.length() == 0) continue;
      if (advantages[g].total[i].size() != c.length()) throw ShapeError("advantage length mismatch");
      TokenSeq seq = group.task.query;
      seq.insert(seq.end(), c.tokens.begin(), c.tokens.end());
      batch.sequences.push_back(std::move(seq));
      batch.query_lengths.push_back(group.task.query.size());
      batch.completions.push_back(&c);
      batch.advantages.push_back(&advantages[g].total[i]);
    }
  }
  batch.completion_count = batch.sequences.size();
  batch.reference_logits = forward_logits_many(reference, batch.sequences);
  return batch;
}

SequenceLoss surrogate_sequence_loss(const SurrogateBatch& batch, const TrainConfig& config) {
  const double eps = config.clip_epsilon;
  const double kl_coeff = config.kl_coeff;
  return [&batch, eps, kl_coeff](std::size_t idx, const Mat& logits, Mat& dlogits) {
    const SampledCompletion& c = *batch.completions[idx];
    const std::vector<double>& adv = *batch.advantages[idx];
    const Mat& ref = batch.reference_logits[idx];
    const std::size_t q = batch.query_lengths[idx];
    const double w = 1.0 / (static_cast<double>(batch.completion_count) * static_cast<double>(c.length()));
    double loss = 0.0;
    for (std::size_t t = 0; t < c.length(); ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(q + t - 1);
      const RowVec lp = log_softmax(logits.row(r));
      const RowVec lr = log_softmax(ref.row(r));
      const RowVec p = lp.array().exp();
      const TokenId tok = c.tokens[t];
      const double rho = std::exp(lp(tok) - c.logprobs[t]);
      const double a = adv[t];
      const double unclipped = rho * a;
      const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps) * a;
      loss -= w * std::min(unclipped, clipped);
      if (unclipped <= clipped) {
        const double dlogp = -w * a * rho;
        dlogits.row(r) -= dlogp * p;
        dlogits(r, tok) += dlogp;
      }
      if (kl_coeff > 0.0) {
        const RowVec diff = lp - lr;
        const double kl = p.dot(diff);
        loss += w * kl_coeff * kl;
        dlogits.row(r).array() += w * kl_coeff * p.array() * (diff.array() - kl);
      }
    }
    return loss;
  };
}

double surrogate_loss(const Params& live, const SurrogateBatch& batch, const TrainConfig& config) {
  return evaluate_loss(live, batch.sequences, surrogate_sequence_loss(batch, config));
}

LossAndGradients surrogate_loss_and_grad(const Params& live, const SurrogateBatch& batch,
                                         const TrainConfig& config) {
  return backward_loss(live, batch.sequences, surrogate_sequence_loss(batch, config));
}

namespace {

double rms(const std::vector<AdvantageBreakdown>& advs,
           std::vector<std::vector<double>> AdvantageBreakdown::*term) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& a : advs) {
    for (const auto& row : a.*term) {
      for (double x : row) sum += x * x;
      n += row.size();
    }
  }
  return n == 0 ? 0.0 : std::sqrt(sum / static_cast<double>(n));
}

}  // namespace

StepReport train_step(TrainState& state, std::span<const Task> tasks, const TrainConfig& config) {
  if (tasks.empty()) throw DomainError("train_step needs at least one task");
  const std::uint64_t step = state.step;
  Params snapshot = state.live;
  const std::uint64_t snapshot_id = state.snapshot_id + 1;

  SamplingOptions sampling{config.budget, config.temperature};
  std::vector<RolloutGroup> groups;
  groups.reserve(tasks.size());
  for (std::size_t b = 0; b < tasks.size(); ++b) {
    auto streams = group_streams(config.seed, step, b, static_cast<std::size_t>(config.group_size));
    groups.push_back(sample_group(snapshot, tasks[b], streams, sampling, snapshot_id));
  }

  std::vector<AdvantageBreakdown> advantages;
  advantages.reserve(groups.size());
  for (const auto& group : groups) {
    std::vector<MIProfile> profiles;
    if (config.shaping.needs_mi_profiles() && config.shaping.alpha != 0.0) {
      profiles.reserve(group.size());
      for (const auto& c : group.completions) {
        profiles.push_back(mi_profile(snapshot, group.task.query, c.tokens, config.estimator));
      }
    } else if (config.shaping.needs_mi_profiles()) {
      // alpha = 0: the term vanishes, so skip the estimator and feed zeros.
      for (const auto& c : group.completions) {
        MIProfile p;
        p.pre_entropies.assign(c.length(), 0.0);
        p.post_entropies.assign(c.length(), 0.0);
        p.scores.assign(c.length(), 0.0);
        profiles.push_back(std::move(p));
      }
    }
    advantages.push_back(compose_advantages(group, profiles, config.shaping));
  }

  const SurrogateBatch batch = make_surrogate_batch(state.reference, groups, advantages);

  Params live = state.live;
  AdamWState opt = state.optimizer;
  opt.lr_scale = config.lr_scale_at(step);
  double first_loss = 0.0;
  double grad_norm = 0.0;
  for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
    LossAndGradients lg = surrogate_loss_and_grad(live, batch, config);
    if (epoch == 0) first_loss = lg.loss;
    const double norm = clip_grad_norm(lg.grads, config.grad_clip);
    if (epoch == 0) grad_norm = norm;
    adamw_step(live, opt, lg.grads);
  }
  if (!live.all_finite()) throw NumericError("parameters became non-finite");

  StepReport report;
  report.step = step + 1;
  std::size_t n = 0;
  double tokens = 0.0, correct = 0.0, reward = 0.0, entropy = 0.0, entropy_n = 0.0;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      ++n;
      reward += g.rewards[i];
      correct += g.correct(i) ? 1.0 : 0.0;
      tokens += static_cast<double>(g.completions[i].length());
      for (double h : g.completions[i].entropies) entropy += h;
      entropy_n += static_cast<double>(g.completions[i].entropies.size());
    }
  }
  const double dn = static_cast<double>(n);
  report.mean_reward = reward / dn;
  report.accuracy = correct / dn;
  report.mean_length = tokens / dn;
  report.mean_entropy = entropy_n > 0 ? entropy / entropy_n : 0.0;
  report.ratio = report.mean_length > 0 ? report.accuracy / report.mean_length : 0.0;
  report.loss = first_loss;
  report.grad_norm = grad_norm;
  report.lr = opt.effective_lr();
  report.seq_term_rms = rms(advantages, &AdvantageBreakdown::seq_term);
  report.info_term_rms = rms(advantages, &AdvantageBreakdown::info_term);
  report.explo_term_rms = rms(advantages, &AdvantageBreakdown::explo_term);

  state.snapshot = std::move(snapshot);
  state.live = std::move(live);
  state.optimizer = std::move(opt);
  state.snapshot_id = snapshot_id;
  state.step = step + 1;
  state.recent.push_back(report);
  while (state.recent.size() > TrainState::kRecentReports) state.recent.pop_front();
  return report;
}

namespace {

nlohmann::json state_meta(const TrainState& s, const TrainConfig& c) {
  return {{"step", s.step}, {"snapshot_id", s.snapshot_id}, {"seed", c.seed}};
}

void write_metrics_row(std::ostream& out, const StepReport& r, const ShapingConfig& s) {
  out << fmt::format("{},{},{},{},{},{},{}\n", r.step, r.mean_reward, r.mean_length, r.ratio, r.loss,
                     s.effective_alpha(), s.effective_beta());
}

}  // namespace

TrainState train_loop(const ModelConfig& model, const TrainConfig& config, const TaskFeed& feed,
                      const TrainLoopOptions& options) {
  config.validate();
  model.validate();
  namespace fs = std::filesystem;
  fs::create_directories(options.out_dir);
  TrainState state = TrainState::initial(model, config);

  const fs::path metrics_path = options.out_dir / "metrics.csv";
  std::ofstream metrics;
  if (options.resume_from) {
    Checkpoint ck = load_checkpoint(*options.resume_from, &model);
    if (!ck.optimizer) throw IncompatibleError("checkpoint has no optimizer state to resume from");
    state.live = ck.params;
    state.snapshot = ck.params;
    state.optimizer = *ck.optimizer;
    state.step = ck.meta.value("step", std::uint64_t{0});
    state.snapshot_id = ck.meta.value("snapshot_id", std::uint64_t{0});
    const bool fresh = !fs::exists(metrics_path);
    metrics.open(metrics_path, std::ios::app);
    if (fresh) metrics << kMetricsHeader << '\n';
  } else {
    metrics.open(metrics_path, std::ios::trunc);
    metrics << kMetricsHeader << '\n';
  }
  if (!metrics) throw IoError("cannot write " + metrics_path.string());

  if (state.step == 0) save_checkpoint(options.out_dir / "initial.ckpt", state.live, &state.optimizer, state_meta(state, config));

  double best_pass = -1.0, best_ratio = -1.0;
  const auto total = static_cast<std::uint64_t>(config.total_steps);
  std::vector<Task> batch(static_cast<std::size_t>(config.batch_size));
  while (state.step < total) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      batch[b] = feed.at(state.step * batch.size() + b);
    }
    const StepReport r = train_step(state, batch, config);
    write_metrics_row(metrics, r, config.shaping);
    metrics.flush();
    spdlog::debug("step {} reward {:.3f} len {:.2f} loss {:.4g}", r.step, r.mean_reward, r.mean_length, r.loss);
    if (options.on_step) options.on_step(r);
    if (config.checkpoint_every > 0 && state.step % static_cast<std::uint64_t>(config.checkpoint_every) == 0) {
      save_checkpoint(options.out_dir / ("step" + std::to_string(state.step) + ".ckpt"), state.live,
                      &state.optimizer, state_meta(state, config));
    }
    if (options.validate && config.eval_every > 0 &&
        state.step % static_cast<std::uint64_t>(config.eval_every) == 0) {
      const auto [pass, ratio] = options.validate(state.live);
      if (pass > best_pass || (pass == best_pass && ratio > best_ratio)) {
        best_pass = pass;
        best_ratio = ratio;
        save_checkpoint(options.out_dir / "best.ckpt", state.live, &state.optimizer, state_meta(state, config));
      }
      spdlog::info("step {} validation pass@1 {:.3f} ratio {:.4f}", state.step, pass, ratio);
    }
  }
  save_checkpoint(options.out_dir / "final.ckpt", state.live, &state.optimizer, state_meta(state, config));
  return state;
}

}  // namespace iapo
