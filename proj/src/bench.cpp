#include "iapo/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "iapo/error.hpp"

namespace iapo {

const BenchCell& BenchReport::cell(MIEstimator e, std::size_t length) const {
  for (const auto& c : cells) {
    if (c.estimator == e && c.length == length) return c;
  }
  throw DomainError("no bench cell for " + std::string(to_string(e)) + " at " + std::to_string(length));
}

double BenchReport::slope(MIEstimator e) const {
  for (const auto& s : slopes) {
    if (s.estimator == e) return s.slope;
  }
  throw DomainError("no slope for " + std::string(to_string(e)));
}

void BenchReport::write_csv(std::ostream& out) const {
  out << "estimator,length,median_seconds,forward_calls,full_passes,continuation_passes,"
         "batched_passes,peak_cache_positions,chunks\n";
  for (const auto& c : cells) {
    out << fmt::format("{},{},{},{},{},{},{},{},{}\n", to_string(c.estimator), c.length, c.median_seconds,
                       c.forwards.total(), c.forwards.full_passes, c.forwards.continuation_passes,
                       c.forwards.batched_passes, c.peak_cache_positions, c.chunks);
  }
}

ModelConfig bench_model_config(std::size_t max_completion, std::size_t query_length) {
  ModelConfig c;
  // Query is query_length digits plus the trailing "=".
  const std::size_t need = max_completion + query_length + 1 + AnswerReadout::standard().postfix.size();
  c.max_seq_len = std::max(c.max_seq_len, static_cast<int>(need));
  return c;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("slope fit needs two or more points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DomainError("log-log fit needs positive values");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DomainError("log-log fit needs distinct x values");
  return sxy / sxx;
}

BenchReport bench_mi(const Params& params, const BenchOptions& options) {
  if (options.repetitions < 3) throw DomainError("bench needs at least 3 repetitions");
  if (options.lengths.empty() || !std::is_sorted(options.lengths.begin(), options.lengths.end())) {
    throw DomainError("bench lengths must be nonempty and ascending");
  }
  if (options.estimators.empty()) throw DomainError("no estimators to bench");

  RngStream rng = RngStream::derived(options.seed, {0xBE7C});
  TokenSeq query;
  for (std::size_t i = 0; i < options.query_length; ++i) query.push_back(tok::digit(static_cast<int>(rng.below(10))));
  query.push_back(tok::kEquals);

  BenchReport report;
  for (std::size_t len : options.lengths) {
    TokenSeq completion(len);
    // Anything but EOS and padding.
    for (auto& t : completion) t = static_cast<TokenId>(rng.below(tok::kEos));

    std::vector<double> reference;
    for (MIEstimator e : options.estimators) {
      const MIProfile p = mi_profile(params, query, completion, e);
      if (reference.empty()) {
        reference = p.scores;
        continue;
      }
      for (std::size_t t = 0; t < len; ++t) {
        const double d = std::abs(p.scores[t] - reference[t]);
        report.max_discrepancy = std::max(report.max_discrepancy, d);
        if (!(d <= options.tolerance)) {
          throw IntegrityError(fmt::format("{} disagrees with {} by {} at |o|={}", to_string(e),
                                           to_string(options.estimators.front()), d, len));
        }
      }
    }

    for (MIEstimator e : options.estimators) {
      BenchCell cell;
      cell.estimator = e;
      cell.length = len;
      std::vector<double> times;
      for (int r = 0; r < options.repetitions; ++r) {
        ForwardProbe probe;
        const auto t0 = std::chrono::steady_clock::now();
        const MIProfile p = mi_profile(params, query, completion, e);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
        cell.forwards = probe.stats();
        cell.chunks = p.chunk_count;
      }
      std::sort(times.begin(), times.end());
      cell.median_seconds = times[times.size() / 2];
      cell.peak_cache_positions = e == MIEstimator::kNaive ? 0 : query.size() + len;
      spdlog::info("bench {} |o|={} median {:.4g}s forwards {}", to_string(e), len, cell.median_seconds,
                   cell.forwards.total());
      report.cells.push_back(cell);
    }
  }

  std::vector<double> xs;
  for (std::size_t len : options.lengths) xs.push_back(static_cast<double>(len));
  if (xs.size() >= 2) {
    for (MIEstimator e : options.estimators) {
      std::vector<double> ys;
      for (std::size_t len : options.lengths) ys.push_back(report.cell(e, len).median_seconds);
      report.slopes.push_back({e, loglog_slope(xs, ys)});
    }
  }
  return report;
}

}  // namespace iapo
