#include "iapo/mi_estimator.hpp"

#include <cmath>
#include <iomanip>

#include "iapo/error.hpp"

namespace iapo {

std::string_view to_string(MIEstimator e) {
  switch (e) {
    case MIEstimator::kNaive: return "naive";
    case MIEstimator::kPreload: return "preload";
    case MIEstimator::kChunked: return "chunked";
  }
  return "?";
}

MIEstimator parse_mi_estimator(std::string_view name) {
  if (name == "naive") return MIEstimator::kNaive;
  if (name == "preload") return MIEstimator::kPreload;
  if (name == "chunked") return MIEstimator::kChunked;
  throw ConfigError("unknown MI estimator \"" + std::string(name) + "\"");
}

double entropy_of_distribution(std::span<const double> p) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw DomainError("probability entries must be non-negative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("probabilities do not sum to 1");
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

namespace {

void check_lengths(const Params& params, std::span<const TokenId> query,
                   std::span<const TokenId> completion, const AnswerReadout& readout) {
  if (query.empty()) throw DomainError("empty query");
  if (completion.empty()) throw DomainError("empty completion");
  if (readout.postfix.empty() || readout.answers.empty()) throw DomainError("empty answer readout");
  if (query.size() + completion.size() + readout.postfix.size() >
      static_cast<std::size_t>(params.config().max_seq_len)) {
    throw LengthError("query + completion + postfix exceeds max_seq_len");
  }
}

// entropies[k] = H(y | q, o_<k) for k = 0..|o|.
MIProfile from_prefix_entropies(const std::vector<double>& entropies, MIEstimator tag) {
  MIProfile out;
  out.estimator = tag;
  const std::size_t n = entropies.size() - 1;
  out.pre_entropies.assign(entropies.begin(), entropies.begin() + static_cast<std::ptrdiff_t>(n));
  out.post_entropies.assign(entropies.begin() + 1, entropies.end());
  out.scores.resize(n);
  for (std::size_t t = 0; t < n; ++t) out.scores[t] = out.pre_entropies[t] - out.post_entropies[t];
  return out;
}

double entropy_at_row(const Eigen::Ref<const RowVec>& logits, const AnswerReadout& readout) {
  return entropy_of_distribution(restrict_to_answers(logits, readout.answers));
}

}  // namespace

MIProfile mi_profile_naive(const Params& params, std::span<const TokenId> query,
                           std::span<const TokenId> completion, const AnswerReadout& readout) {
  check_lengths(params, query, completion, readout);
  auto prefix_entropy = [&](std::size_t t) {
    TokenSeq seq(query.begin(), query.end());
    seq.insert(seq.end(), completion.begin(), completion.begin() + static_cast<std::ptrdiff_t>(t));
    seq.insert(seq.end(), readout.postfix.begin(), readout.postfix.end());
    const Mat logits = forward_logits(params, seq);
    return entropy_at_row(logits.row(logits.rows() - 1), readout);
  };
  MIProfile out;
  out.estimator = MIEstimator::kNaive;
  for (std::size_t t = 0; t < completion.size(); ++t) {
    const double pre = prefix_entropy(t);
    const double post = prefix_entropy(t + 1);
    out.pre_entropies.push_back(pre);
    out.post_entropies.push_back(post);
    out.scores.push_back(pre - post);
  }
  return out;
}

MIProfile mi_profile_preload(const Params& params, std::span<const TokenId> query,
                             std::span<const TokenId> completion, const AnswerReadout& readout) {
  check_lengths(params, query, completion, readout);
  TokenSeq seq(query.begin(), query.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  KVCache master(params.config());
  forward_logits(params, seq, master);

  std::vector<double> entropies(completion.size() + 1);
  for (std::size_t t = 0; t <= completion.size(); ++t) {
    const CacheView view{&master, query.size() + t};
    entropies[t] = entropy_of_distribution(answer_distribution(params, view, readout));
  }
  return from_prefix_entropies(entropies, MIEstimator::kPreload);
}

MIProfile mi_profile_chunked(const Params& params, std::span<const TokenId> query,
                             std::span<const TokenId> completion, std::size_t chunks,
                             const AnswerReadout& readout) {
  check_lengths(params, query, completion, readout);
  if (chunks < 1 || chunks > completion.size()) {
    throw ConfigError("chunk count " + std::to_string(chunks) + " outside [1, " +
                      std::to_string(completion.size()) + "]");
  }
  TokenSeq seq(query.begin(), query.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  KVCache master(params.config());
  forward_logits(params, seq, master);

  const std::size_t positions = completion.size() + 1;
  std::vector<double> entropies(positions);
  std::vector<std::size_t> lengths;
  std::size_t begin = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    // Sizes differ by at most one; earlier chunks take the remainder.
    const std::size_t size = positions / chunks + (c < positions % chunks ? 1 : 0);
    lengths.clear();
    for (std::size_t t = begin; t < begin + size; ++t) lengths.push_back(query.size() + t);
    const Mat last = forward_batched_last(params, master, lengths, readout.postfix);
    for (std::size_t k = 0; k < size; ++k) {
      entropies[begin + k] = entropy_at_row(last.row(static_cast<Eigen::Index>(k)), readout);
    }
    begin += size;
  }
  MIProfile out = from_prefix_entropies(entropies, MIEstimator::kChunked);
  out.chunk_count = chunks;
  return out;
}

std::size_t default_chunk_count(std::size_t completion_length) {
  return std::max<std::size_t>(1, (completion_length + kDefaultChunkSize - 1) / kDefaultChunkSize);
}

MIProfile mi_profile(const Params& params, std::span<const TokenId> query,
                     std::span<const TokenId> completion, MIEstimator estimator,
                     const AnswerReadout& readout) {
  switch (estimator) {
    case MIEstimator::kNaive: return mi_profile_naive(params, query, completion, readout);
    case MIEstimator::kPreload: return mi_profile_preload(params, query, completion, readout);
    case MIEstimator::kChunked:
      return mi_profile_chunked(params, query, completion, default_chunk_count(completion.size()),
                                readout);
  }
  throw ConfigError("unknown MI estimator");
}

void write_mi_csv(std::ostream& out, std::span<const TokenId> completion, const MIProfile& profile) {
  const auto& vocab = Vocab::standard();
  out << "position,token,pre_entropy,post_entropy,score\n";
  out << std::setprecision(17);
  for (std::size_t t = 0; t < profile.size(); ++t) {
    std::string token = vocab.token(completion[t]);
    out << t + 1 << ',' << token << ',' << profile.pre_entropies[t] << ','
        << profile.post_entropies[t] << ',' << profile.scores[t] << '\n';
  }
}

}  // namespace iapo
