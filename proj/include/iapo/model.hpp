#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "iapo/rng.hpp"
#include "iapo/vocab.hpp"
#include "json.hpp"

namespace iapo {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

struct ModelConfig {
  int vocab_size = tok::kVocabSize;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 256;

  int head_dim() const { return d_model / n_heads; }
  // Throws ConfigError on non-positive sizes or d_model % n_heads != 0.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct LayerSlots {
  std::size_t ln1_gain, ln1_bias;
  std::size_t qkv_weight, qkv_bias;  // d x 3d, packed [q | k | v]
  std::size_t attn_out_weight, attn_out_bias;
  std::size_t ln2_gain, ln2_bias;
  std::size_t ff1_weight, ff1_bias;  // d x d_ff
  std::size_t ff2_weight, ff2_bias;  // d_ff x d
};

// Offsets of every tensor inside one flat parameter array, in declaration
// order. Weights, gradients and optimizer moments all share this layout.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  std::size_t size() const { return total_; }
  const std::vector<TensorSlot>& tensors() const { return tensors_; }
  const TensorSlot& slot(const std::string& name) const;

  std::size_t tok_embedding = 0;  // vocab x d
  std::size_t pos_embedding = 0;  // max_seq_len x d
  std::vector<LayerSlots> layers;
  std::size_t lnf_gain = 0, lnf_bias = 0;
  std::size_t head_weight = 0;  // d x vocab (untied)
  std::size_t head_bias = 0;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  std::vector<TensorSlot> tensors_;
  std::size_t total_ = 0;
};

// Flat double array shaped by a ParamLayout.
class ParamBuffer {
 public:
  ParamBuffer() = default;
  explicit ParamBuffer(std::shared_ptr<const ParamLayout> layout)
      : layout_(std::move(layout)), values_(layout_->size(), 0.0) {}

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& shared_layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  Eigen::Map<Mat> mat(std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
    return {values_.data() + offset, rows, cols};
  }
  Eigen::Map<const Mat> mat(std::size_t offset, Eigen::Index rows, Eigen::Index cols) const {
    return {values_.data() + offset, rows, cols};
  }
  Eigen::Map<RowVec> row(std::size_t offset, Eigen::Index n) { return {values_.data() + offset, n}; }
  Eigen::Map<const RowVec> row(std::size_t offset, Eigen::Index n) const {
    return {values_.data() + offset, n};
  }

  bool all_finite() const;
  double l2_norm() const;
  void set_zero();

 protected:
  std::shared_ptr<const ParamLayout> layout_;
  // Aligned so vectorized reductions over Maps peel identically every run.
  std::vector<double, Eigen::aligned_allocator<double>> values_;
};

// Policy weights. LayerNorm gains start at 1, everything else at 0 unless
// initialized with `random`.
class Params : public ParamBuffer {
 public:
  explicit Params(const ModelConfig& config);

  static Params random(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
};

// Same layout as Params; one entry per weight.
class Gradients : public ParamBuffer {
 public:
  explicit Gradients(const Params& like) : ParamBuffer(like.shared_layout()) {}
};

// Per-layer keys and values for the positions seen so far. Rows are stored
// contiguously (position-major, heads concatenated) so a prefix of length p
// is simply the first p rows.
class KVCache {
 public:
  explicit KVCache(const ModelConfig& config);

  std::size_t size() const { return length_; }
  int n_layers() const { return static_cast<int>(keys_.size()); }
  int width() const { return width_; }
  const double* keys(int layer) const { return keys_[static_cast<std::size_t>(layer)].data(); }
  const double* values(int layer) const { return values_[static_cast<std::size_t>(layer)].data(); }

  // Drops positions >= length.
  void truncate(std::size_t length);

 private:
  friend class SegmentRunner;

  int width_;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

// Read-only window onto the first `length` positions of a cache. Nothing is
// copied.
struct CacheView {
  const KVCache* cache = nullptr;
  std::size_t length = 0;
};

// Counts model invocations on the current thread while alive.
struct ForwardStats {
  std::uint64_t full_passes = 0;         // no prefix cache
  std::uint64_t continuation_passes = 0; // one segment on top of a cache
  std::uint64_t batched_passes = 0;      // several segments in one invocation
  std::uint64_t rows = 0;                // token rows pushed through the dense layers

  std::uint64_t total() const { return full_passes + continuation_passes + batched_passes; }
};

class ForwardProbe {
 public:
  ForwardProbe();
  ~ForwardProbe();
  ForwardProbe(const ForwardProbe&) = delete;
  ForwardProbe& operator=(const ForwardProbe&) = delete;

  const ForwardStats& stats() const { return stats_; }
  ForwardStats& counters() { return stats_; }

 private:
  ForwardStats stats_;
  ForwardProbe* previous_;
};

// Full causal pass from position 0. Returns |tokens| x vocab logits.
Mat forward_logits(const Params& params, std::span<const TokenId> tokens);

// Independent full passes over several sequences, stacked into shared dense
// products. Counted as one full pass per sequence.
std::vector<Mat> forward_logits_many(const Params& params, std::span<const TokenSeq> sequences);

// Continues `cache`; positions start at cache.size(). Appends the new
// keys/values to the cache.
Mat forward_logits(const Params& params, std::span<const TokenId> tokens, KVCache& cache);

// Continues a read-only view without touching the underlying cache.
Mat forward_from_view(const Params& params, CacheView prefix, std::span<const TokenId> tokens);

// One batched invocation: for each prefix length, `suffix` is appended to
// that truncation of `master`. Returns one row per prefix holding the logits
// at the last suffix position.
Mat forward_batched_last(const Params& params, const KVCache& master,
                         std::span<const std::size_t> prefix_lengths,
                         std::span<const TokenId> suffix);

// log-softmax / softmax / entropy of one logits row (nats).
RowVec log_softmax(const Eigen::Ref<const RowVec>& logits);
double entropy_of_logits(const Eigen::Ref<const RowVec>& logits);

struct SampledCompletion {
  TokenSeq tokens;
  std::vector<double> logprobs;   // log pi(o_t | q, o_<t) at temperature 1
  std::vector<double> entropies;  // H(. | q, o_<t) at temperature 1

  std::size_t length() const { return tokens.size(); }
};

struct SamplingOptions {
  int budget = 64;
  // Softmax temperature of the sampling distribution. 0 selects argmax
  // decoding. Recorded logprobs/entropies always refer to the policy itself.
  double temperature = 1.0;
};

SampledCompletion sample_completion(const Params& params, std::span<const TokenId> query,
                                    const SamplingOptions& options, RngStream& rng);

// Samples from a query that was already pushed through `cache`;
// `next_logits` is the logits row at the last query position.
SampledCompletion sample_continuation(const Params& params, KVCache cache, RowVec next_logits,
                                      const SamplingOptions& options, RngStream& rng);

// Samples one completion per stream from the same prefilled query, decoding
// all of them in lockstep (one stacked pass per position). Completion i uses
// only streams[i].
std::vector<SampledCompletion> sample_continuations(const Params& params, const KVCache& prefill,
                                                    const RowVec& next_logits,
                                                    const SamplingOptions& options,
                                                    std::span<RngStream> streams);

struct TokenScores {
  std::vector<double> logprobs;
  std::vector<double> entropies;
};

// Teacher-forced scores of `completion` given `query`, one full pass.
TokenScores token_scores(const Params& params, std::span<const TokenId> query,
                         std::span<const TokenId> completion);

// Early-exit answer distribution: appends the readout postfix to the prefix
// view and renormalizes the final row over the answer ids.
std::vector<double> answer_distribution(const Params& params, CacheView prefix,
                                        const AnswerReadout& readout);

// Restricts a logits row to `answers` and renormalizes.
std::vector<double> restrict_to_answers(const Eigen::Ref<const RowVec>& logits,
                                        std::span<const TokenId> answers);

}  // namespace iapo
