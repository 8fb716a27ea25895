#include "iapo/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "iapo/error.hpp"
#include "kernels.hpp"

namespace iapo {

// ---------------------------------------------------------------------------
// Config and layout

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
      max_seq_len <= 0) {
    throw ConfigError("model sizes must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  tok_embedding = add("tok_embedding", V, d);
  pos_embedding = add("pos_embedding", static_cast<std::size_t>(c.max_seq_len), d);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerSlots s{};
    s.ln1_gain = add(p + "ln1_gain", 1, d);
    s.ln1_bias = add(p + "ln1_bias", 1, d);
    s.qkv_weight = add(p + "qkv_weight", d, 3 * d);
    s.qkv_bias = add(p + "qkv_bias", 1, 3 * d);
    s.attn_out_weight = add(p + "attn_out_weight", d, d);
    s.attn_out_bias = add(p + "attn_out_bias", 1, d);
    s.ln2_gain = add(p + "ln2_gain", 1, d);
    s.ln2_bias = add(p + "ln2_bias", 1, d);
    s.ff1_weight = add(p + "ff1_weight", d, f);
    s.ff1_bias = add(p + "ff1_bias", 1, f);
    s.ff2_weight = add(p + "ff2_weight", f, d);
    s.ff2_bias = add(p + "ff2_bias", 1, d);
    layers.push_back(s);
  }
  lnf_gain = add("lnf_gain", 1, d);
  lnf_bias = add("lnf_bias", 1, d);
  head_weight = add("head_weight", d, V);
  head_bias = add("head_bias", 1, V);
}

std::size_t ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = total_;
  tensors_.push_back(TensorSlot{std::move(name), offset, rows, cols});
  total_ += rows * cols;
  return offset;
}

const TensorSlot& ParamLayout::slot(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw DomainError("no parameter tensor named " + name);
}

bool ParamBuffer::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double ParamBuffer::l2_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return std::sqrt(s);
}

void ParamBuffer::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

Params::Params(const ModelConfig& config)
    : ParamBuffer(std::make_shared<const ParamLayout>(config)), config_(config) {
  const auto d = static_cast<Eigen::Index>(config.d_model);
  for (const auto& l : layout_->layers) {
    row(l.ln1_gain, d).setOnes();
    row(l.ln2_gain, d).setOnes();
  }
  row(layout_->lnf_gain, d).setOnes();
}

Params Params::random(const ModelConfig& config, std::uint64_t seed, double init_std) {
  Params p(config);
  RngStream rng(derive_seed(seed, {0x1A17}));
  const double resid_std = init_std / std::sqrt(2.0 * config.n_layers);
  auto fill = [&](std::size_t offset, std::size_t count, double stddev) {
    for (std::size_t i = 0; i < count; ++i) p.values_[offset + i] = rng.normal(0.0, stddev);
  };
  const auto& L = *p.layout_;
  for (const auto& t : L.tensors()) {
    const bool is_matrix = t.rows > 1;
    if (!is_matrix) continue;
    const bool residual_out = t.name.ends_with("attn_out_weight") || t.name.ends_with("ff2_weight");
    fill(t.offset, t.size(), residual_out ? resid_std : init_std);
  }
  return p;
}

// ---------------------------------------------------------------------------
// KV cache

KVCache::KVCache(const ModelConfig& config)
    : width_(config.d_model),
      keys_(static_cast<std::size_t>(config.n_layers)),
      values_(static_cast<std::size_t>(config.n_layers)) {}

void KVCache::truncate(std::size_t length) {
  if (length >= length_) return;
  length_ = length;
  for (auto& k : keys_) k.resize(length * static_cast<std::size_t>(width_));
  for (auto& v : values_) v.resize(length * static_cast<std::size_t>(width_));
}

// ---------------------------------------------------------------------------
// Instrumentation

namespace {
thread_local ForwardProbe* g_probe = nullptr;
}

ForwardProbe::ForwardProbe() : previous_(g_probe) { g_probe = this; }
ForwardProbe::~ForwardProbe() { g_probe = previous_; }

namespace {

enum class PassKind { kFull, kContinuation, kBatched };

void record_pass(PassKind kind, std::size_t rows) {
  if (g_probe) {
    ForwardStats& s = g_probe->counters();
    switch (kind) {
      case PassKind::kFull: ++s.full_passes; break;
      case PassKind::kContinuation: ++s.continuation_passes; break;
      case PassKind::kBatched: ++s.batched_passes; break;
    }
    s.rows += rows;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Segment forward
//
// Every inference pass is a list of segments. A segment is a run of new
// tokens continuing some prefix (possibly empty) of a cache. The dense parts
// of all segments are stacked into one matrix; attention runs per segment
// against its own prefix rows plus its own new rows.

struct Segment {
  const KVCache* prefix = nullptr;
  std::size_t prefix_len = 0;
  std::span<const TokenId> tokens;
  KVCache* append_to = nullptr;  // receives the new keys/values when set
};

class SegmentRunner {
 public:
  static Mat run(const Params& params, std::span<const Segment> segments, bool last_rows_only);
};

Mat SegmentRunner::run(const Params& params, std::span<const Segment> segments,
                       bool last_rows_only) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto D = static_cast<Eigen::Index>(d);

  std::vector<Eigen::Index> base(segments.size() + 1, 0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Segment& seg = segments[s];
    if (seg.tokens.empty()) throw DomainError("forward called with no new tokens");
    if (seg.prefix_len + seg.tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
      throw LengthError("sequence of length " + std::to_string(seg.prefix_len + seg.tokens.size()) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (seg.prefix_len > 0 && (!seg.prefix || seg.prefix->size() < seg.prefix_len)) {
      throw LengthError("cache view longer than the cache");
    }
    base[s + 1] = base[s] + static_cast<Eigen::Index>(seg.tokens.size());
  }
  const Eigen::Index R = base.back();

  Mat x(R, D);
  const auto tok_emb = params.mat(L.tok_embedding, cfg.vocab_size, D);
  const auto pos_emb = params.mat(L.pos_embedding, cfg.max_seq_len, D);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Segment& seg = segments[s];
    for (std::size_t r = 0; r < seg.tokens.size(); ++r) {
      const TokenId t = seg.tokens[r];
      if (t < 0 || t >= cfg.vocab_size) throw VocabularyError("token id out of range");
      x.row(base[s] + static_cast<Eigen::Index>(r)) =
          tok_emb.row(t) + pos_emb.row(static_cast<Eigen::Index>(seg.prefix_len + r));
    }
  }

  Mat h, qkv, attn(R, D), u;
  std::vector<double> scores;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerSlots& ls = L.layers[static_cast<std::size_t>(l)];
    kernels::layer_norm(x, params.row(ls.ln1_gain, D), params.row(ls.ln1_bias, D), h);
    qkv.noalias() = h * params.mat(ls.qkv_weight, D, 3 * D);
    qkv.rowwise() += params.row(ls.qkv_bias, 3 * D);

    attn.setZero();
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const Segment& seg = segments[s];
      const std::size_t P = seg.prefix_len;
      const double* pk = P ? seg.prefix->keys(l) : nullptr;
      const double* pv = P ? seg.prefix->values(l) : nullptr;
      const auto m = static_cast<Eigen::Index>(seg.tokens.size());
      scores.resize(P + static_cast<std::size_t>(m));
      for (Eigen::Index r = 0; r < m; ++r) {
        const Eigen::Index row = base[s] + r;
        for (int hd = 0; hd < H; ++hd) {
          const double* q = qkv.row(row).data() + hd * dh;
          const std::size_t n_keys = P + static_cast<std::size_t>(r) + 1;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < P; ++j) {
            scores[j] = scale * kernels::dot(q, pk + j * d + hd * dh, dh);
            mx = std::max(mx, scores[j]);
          }
          for (Eigen::Index j = 0; j <= r; ++j) {
            const double v = scale * kernels::dot(q, qkv.row(base[s] + j).data() + d + hd * dh, dh);
            scores[P + static_cast<std::size_t>(j)] = v;
            mx = std::max(mx, v);
          }
          double z = 0.0;
          for (std::size_t j = 0; j < n_keys; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            z += scores[j];
          }
          double* out = attn.row(row).data() + hd * dh;
          for (std::size_t j = 0; j < P; ++j) kernels::axpy(scores[j] / z, pv + j * d + hd * dh, out, dh);
          for (Eigen::Index j = 0; j <= r; ++j) {
            kernels::axpy(scores[P + static_cast<std::size_t>(j)] / z,
                          qkv.row(base[s] + j).data() + 2 * d + hd * dh, out, dh);
          }
        }
      }
      if (seg.append_to) {
        auto& kk = seg.append_to->keys_[static_cast<std::size_t>(l)];
        auto& vv = seg.append_to->values_[static_cast<std::size_t>(l)];
        kk.resize(seg.prefix_len * static_cast<std::size_t>(d));
        vv.resize(seg.prefix_len * static_cast<std::size_t>(d));
        for (Eigen::Index r = 0; r < m; ++r) {
          const double* row = qkv.row(base[s] + r).data();
          kk.insert(kk.end(), row + d, row + 2 * d);
          vv.insert(vv.end(), row + 2 * d, row + 3 * d);
        }
      }
    }
    x.noalias() += attn * params.mat(ls.attn_out_weight, D, D);
    x.rowwise() += params.row(ls.attn_out_bias, D);

    kernels::layer_norm(x, params.row(ls.ln2_gain, D), params.row(ls.ln2_bias, D), h);
    const auto F = static_cast<Eigen::Index>(cfg.d_ff);
    u.noalias() = h * params.mat(ls.ff1_weight, D, F);
    u.rowwise() += params.row(ls.ff1_bias, F);
    u = kernels::gelu(u);
    x.noalias() += u * params.mat(ls.ff2_weight, F, D);
    x.rowwise() += params.row(ls.ff2_bias, D);
  }
  for (const Segment& seg : segments) {
    if (seg.append_to) seg.append_to->length_ = seg.prefix_len + seg.tokens.size();
  }

  Mat xs;
  if (last_rows_only) {
    xs.resize(static_cast<Eigen::Index>(segments.size()), D);
    for (std::size_t s = 0; s < segments.size(); ++s) xs.row(static_cast<Eigen::Index>(s)) = x.row(base[s + 1] - 1);
  } else {
    xs = std::move(x);
  }
  Mat xf;
  kernels::layer_norm(xs, params.row(L.lnf_gain, D), params.row(L.lnf_bias, D), xf);
  Mat logits = xf * params.mat(L.head_weight, D, cfg.vocab_size);
  logits.rowwise() += params.row(L.head_bias, cfg.vocab_size);
  if (!logits.allFinite()) throw NumericError("non-finite logits in forward pass");
  return logits;
}

Mat forward_logits(const Params& params, std::span<const TokenId> tokens) {
  const Segment seg{nullptr, 0, tokens, nullptr};
  record_pass(PassKind::kFull, tokens.size());
  return SegmentRunner::run(params, {&seg, 1}, false);
}

std::vector<Mat> forward_logits_many(const Params& params, std::span<const TokenSeq> sequences) {
  constexpr std::size_t kMaxRows = 4096;
  std::vector<Mat> out;
  out.reserve(sequences.size());
  std::vector<Segment> segments;
  std::size_t rows = 0;
  auto flush = [&] {
    if (segments.empty()) return;
    const Mat all = SegmentRunner::run(params, segments, false);
    Eigen::Index at = 0;
    for (const Segment& seg : segments) {
      const auto n = static_cast<Eigen::Index>(seg.tokens.size());
      out.push_back(all.middleRows(at, n));
      at += n;
    }
    segments.clear();
    rows = 0;
  };
  for (const TokenSeq& seq : sequences) {
    if (rows > 0 && rows + seq.size() > kMaxRows) flush();
    segments.push_back(Segment{nullptr, 0, seq, nullptr});
    record_pass(PassKind::kFull, seq.size());
    rows += seq.size();
  }
  flush();
  return out;
}

Mat forward_logits(const Params& params, std::span<const TokenId> tokens, KVCache& cache) {
  const Segment seg{&cache, cache.size(), tokens, &cache};
  record_pass(cache.size() ? PassKind::kContinuation : PassKind::kFull, tokens.size());
  return SegmentRunner::run(params, {&seg, 1}, false);
}

Mat forward_from_view(const Params& params, CacheView prefix, std::span<const TokenId> tokens) {
  const Segment seg{prefix.cache, prefix.length, tokens, nullptr};
  record_pass(prefix.length ? PassKind::kContinuation : PassKind::kFull, tokens.size());
  return SegmentRunner::run(params, {&seg, 1}, false);
}

Mat forward_batched_last(const Params& params, const KVCache& master,
                         std::span<const std::size_t> prefix_lengths,
                         std::span<const TokenId> suffix) {
  if (prefix_lengths.empty()) throw DomainError("batched forward needs at least one prefix");
  std::vector<Segment> segments;
  segments.reserve(prefix_lengths.size());
  for (std::size_t len : prefix_lengths) segments.push_back(Segment{&master, len, suffix, nullptr});
  record_pass(PassKind::kBatched, prefix_lengths.size() * suffix.size());
  return SegmentRunner::run(params, segments, true);
}

// ---------------------------------------------------------------------------
// Distributions

RowVec log_softmax(const Eigen::Ref<const RowVec>& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

double entropy_of_logits(const Eigen::Ref<const RowVec>& logits) {
  const RowVec lp = log_softmax(logits);
  double h = 0.0;
  for (Eigen::Index i = 0; i < lp.size(); ++i) {
    const double p = std::exp(lp(i));
    if (p > 0.0) h -= p * lp(i);
  }
  return std::max(0.0, h);
}

std::vector<double> restrict_to_answers(const Eigen::Ref<const RowVec>& logits,
                                        std::span<const TokenId> answers) {
  double mx = -std::numeric_limits<double>::infinity();
  for (TokenId a : answers) mx = std::max(mx, logits(a));
  std::vector<double> p(answers.size());
  double z = 0.0;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    p[i] = std::exp(logits(answers[i]) - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> answer_distribution(const Params& params, CacheView prefix,
                                        const AnswerReadout& readout) {
  const Mat logits = forward_from_view(params, prefix, readout.postfix);
  return restrict_to_answers(logits.row(logits.rows() - 1), readout.answers);
}

// ---------------------------------------------------------------------------
// Sampling and scoring

namespace {

TokenId draw(const RowVec& logits, double temperature, RngStream& rng) {
  if (temperature == 0.0) {
    Eigen::Index arg;
    logits.maxCoeff(&arg);
    return static_cast<TokenId>(arg);
  }
  const RowVec scaled = logits / temperature;
  const double mx = scaled.maxCoeff();
  const RowVec w = (scaled.array() - mx).exp();
  const double u = rng.uniform() * w.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    acc += w(i);
    if (u < acc) return static_cast<TokenId>(i);
  }
  // u landed on the rounding tail; take the last token with nonzero weight.
  for (Eigen::Index i = w.size() - 1; i >= 0; --i) {
    if (w(i) > 0.0) return static_cast<TokenId>(i);
  }
  return 0;
}

}  // namespace

SampledCompletion sample_continuation(const Params& params, KVCache cache, RowVec next_logits,
                                      const SamplingOptions& options, RngStream& rng) {
  if (options.budget < 1) throw DomainError("sampling budget must be >= 1");
  if (!(options.temperature >= 0.0)) throw DomainError("temperature must be >= 0");
  SampledCompletion out;
  out.tokens.reserve(static_cast<std::size_t>(options.budget));
  for (int t = 0; t < options.budget; ++t) {
    const TokenId tok = draw(next_logits, options.temperature, rng);
    const RowVec lp = log_softmax(next_logits);
    out.tokens.push_back(tok);
    out.logprobs.push_back(lp(tok));
    out.entropies.push_back(entropy_of_logits(next_logits));
    if (tok == tok::kEos || t + 1 == options.budget) break;
    const TokenId step[1] = {tok};
    next_logits = forward_logits(params, step, cache).row(0);
  }
  return out;
}

std::vector<SampledCompletion> sample_continuations(const Params& params, const KVCache& prefill,
                                                    const RowVec& next_logits,
                                                    const SamplingOptions& options,
                                                    std::span<RngStream> streams) {
  if (options.budget < 1) throw DomainError("sampling budget must be >= 1");
  if (!(options.temperature >= 0.0)) throw DomainError("temperature must be >= 0");
  const std::size_t n = streams.size();
  std::vector<SampledCompletion> out(n);
  std::vector<KVCache> caches(n, prefill);
  Mat next = next_logits.replicate(static_cast<Eigen::Index>(n), 1);
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) {
    active[i] = i;
    out[i].tokens.reserve(static_cast<std::size_t>(options.budget));
  }
  std::vector<TokenId> step_tokens(n);
  std::vector<Segment> segments;
  for (int t = 0; t < options.budget && !active.empty(); ++t) {
    std::vector<std::size_t> still;
    segments.clear();
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      const RowVec logits = next.row(static_cast<Eigen::Index>(a));
      const TokenId tok = draw(logits, options.temperature, streams[i]);
      out[i].tokens.push_back(tok);
      out[i].logprobs.push_back(log_softmax(logits)(tok));
      out[i].entropies.push_back(entropy_of_logits(logits));
      if (tok == tok::kEos || t + 1 == options.budget) continue;
      step_tokens[i] = tok;
      still.push_back(i);
    }
    active = std::move(still);
    if (active.empty()) break;
    for (std::size_t i : active) {
      KVCache& c = caches[i];
      segments.push_back(Segment{&c, c.size(), {&step_tokens[i], 1}, &c});
      record_pass(PassKind::kContinuation, 1);
    }
    next = SegmentRunner::run(params, segments, false);
  }
  return out;
}

SampledCompletion sample_completion(const Params& params, std::span<const TokenId> query,
                                    const SamplingOptions& options, RngStream& rng) {
  if (query.empty()) throw DomainError("empty query");
  if (options.budget < 1) throw DomainError("sampling budget must be >= 1");
  if (query.size() + static_cast<std::size_t>(options.budget) >
      static_cast<std::size_t>(params.config().max_seq_len)) {
    throw LengthError("query of length " + std::to_string(query.size()) +
                      " does not fit max_seq_len - budget");
  }
  KVCache cache(params.config());
  const Mat logits = forward_logits(params, query, cache);
  return sample_continuation(params, std::move(cache), logits.row(logits.rows() - 1), options, rng);
}

TokenScores token_scores(const Params& params, std::span<const TokenId> query,
                         std::span<const TokenId> completion) {
  if (query.empty()) throw DomainError("empty query");
  TokenSeq seq(query.begin(), query.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  const Mat logits = forward_logits(params, seq);
  TokenScores out;
  out.logprobs.reserve(completion.size());
  out.entropies.reserve(completion.size());
  for (std::size_t t = 0; t < completion.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(query.size() + t - 1);
    const RowVec lp = log_softmax(logits.row(row));
    out.logprobs.push_back(lp(completion[t]));
    out.entropies.push_back(entropy_of_logits(logits.row(row)));
  }
  return out;
}

}  // namespace iapo
