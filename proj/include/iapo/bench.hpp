#pragma once

#include <ostream>
#include <span>
#include <vector>

#include "iapo/mi_estimator.hpp"

namespace iapo {

struct BenchCell {
  MIEstimator estimator = MIEstimator::kNaive;
  std::size_t length = 0;
  double median_seconds = 0.0;
  ForwardStats forwards;  // one profile's worth
  std::size_t peak_cache_positions = 0;
  std::size_t chunks = 0;
};

struct BenchSlope {
  MIEstimator estimator = MIEstimator::kNaive;
  double slope = 0.0;  // d log(time) / d log(|o|)
};

struct BenchReport {
  std::vector<BenchCell> cells;
  std::vector<BenchSlope> slopes;
  double max_discrepancy = 0.0;  // equality spot-check across estimators

  const BenchCell& cell(MIEstimator e, std::size_t length) const;
  double slope(MIEstimator e) const;
  // estimator,length,median_seconds,forward_calls,full_passes,continuation_passes,batched_passes,peak_cache_positions,chunks
  void write_csv(std::ostream& out) const;
};

struct BenchOptions {
  std::vector<std::size_t> lengths{32, 64, 128, 256};
  std::vector<MIEstimator> estimators{MIEstimator::kNaive, MIEstimator::kPreload, MIEstimator::kChunked};
  int repetitions = 3;
  std::size_t query_length = 4;
  std::uint64_t seed = 0;
  double tolerance = 1e-6;
};

// Model config used by the benchmark: the default model with room for the
// longest completion, a query of query_length digits plus "=", and the
// readout postfix.
ModelConfig bench_model_config(std::size_t max_completion, std::size_t query_length);

// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

// Fixed random params and completions. Scores of all estimators must agree
// within tolerance (IntegrityError otherwise) before timings are taken.
BenchReport bench_mi(const Params& params, const BenchOptions& options);

}  // namespace iapo
