#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "miasrec/model.hpp"
#include "miasrec/sessions.hpp"

namespace miasrec {

// 1 + #{j : s_j > s_t} + #{j : s_j == s_t, j < t}; ties go to the lower item index.
template <typename Derived>
int rank_target(const Eigen::MatrixBase<Derived>& scores, ItemIndex target) {
  const Eigen::Index t = target - 1;
  if (t < 0 || t >= scores.size()) throw std::out_of_range("rank_target: target out of range");
  const auto value = scores[t];
  int rank = 1;
  for (Eigen::Index j = 0; j < scores.size(); ++j) {
    const auto s = scores[j];
    if (s > value || (s == value && j < t)) ++rank;
  }
  return rank;
}

double recall_at(std::span<const int> ranks, int cutoff);
double mrr_at(std::span<const int> ranks, int cutoff);

// Inclusive prefix-length range; `hi < 0` means unbounded.
struct LengthBucket {
  int lo = 1;
  int hi = -1;

  bool contains(int length) const { return length >= lo && (hi < 0 || length <= hi); }
  std::string label() const;
  bool operator==(const LengthBucket&) const = default;
};

// "1,2,3-4,5-6,7-9,10+"
std::vector<LengthBucket> parse_buckets(const std::string& text);
std::vector<LengthBucket> default_buckets();
std::vector<int> parse_cutoffs(const std::string& text);

struct EvaluationOptions {
  std::vector<int> cutoffs = {5, 10, 20};
  std::vector<LengthBucket> buckets = default_buckets();
};

struct CutoffMetrics {
  int cutoff = 0;
  double recall = 0.0;
  double mrr = 0.0;
  bool operator==(const CutoffMetrics&) const = default;
};

struct BucketReport {
  LengthBucket bucket;
  std::size_t count = 0;
  std::vector<CutoffMetrics> metrics;
  bool operator==(const BucketReport&) const = default;
};

struct MetricsReport {
  std::vector<int> cutoffs;
  std::size_t example_count = 0;
  std::vector<CutoffMetrics> overall;
  std::vector<BucketReport> buckets;

  // Filled by aggregate_seeds.
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<CutoffMetrics>> per_seed;
  std::vector<CutoffMetrics> stddev;

  const CutoffMetrics& at(int cutoff) const;
  nlohmann::json to_json() const;
  bool operator==(const MetricsReport&) const = default;
};

// Metrics from precomputed ranks and the prefix length of each example.
MetricsReport build_report(std::span<const int> ranks, std::span<const int> lengths,
                           const EvaluationOptions& options = {});

template <typename Scalar>
std::vector<int> rank_examples(const ModelParameters<Scalar>& params, const ModelConfig& config,
                               std::span<const PrefixExample> examples);

template <typename Scalar>
MetricsReport evaluate(const ModelParameters<Scalar>& params, const ModelConfig& config,
                       std::span<const PrefixExample> examples, const EvaluationOptions& options = {});

// Training-occurrence counts rescaled affinely onto [-1, 1]; all zero when
// every count is equal.
Eigen::VectorXd popularity_baseline(const SessionCorpus& train);

// Metrics for a scorer that ignores the prefix.
MetricsReport evaluate_fixed_scores(const Eigen::VectorXd& scores, std::span<const PrefixExample> examples,
                                    const EvaluationOptions& options = {});

// Mean of each metric across seeds, keeping per-seed overall values and the
// sample standard deviation.
MetricsReport aggregate_seeds(std::span<const MetricsReport> reports, std::span<const std::uint64_t> seeds = {});

}  // namespace miasrec
