#include "miasrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "miasrec/errors.hpp"

namespace miasrec {
namespace {

void require_ranks(std::span<const int> ranks) {
  if (ranks.empty()) throw std::invalid_argument("metrics over an empty rank list");
  for (const int r : ranks)
    if (r < 1) throw std::invalid_argument("ranks must be >= 1");
}

// Reciprocal-rank sums are accumulated through a rank histogram so the
// result does not depend on example order.
struct RankHistogram {
  std::map<int, std::size_t> counts;
  std::size_t total = 0;

  void add(int rank) {
    ++counts[rank];
    ++total;
  }

  CutoffMetrics metrics(int cutoff) const {
    CutoffMetrics m{cutoff, 0.0, 0.0};
    if (total == 0) return m;
    std::size_t hits = 0;
    double reciprocal = 0.0;
    for (const auto& [rank, count] : counts) {
      if (rank > cutoff) break;
      hits += count;
      reciprocal += static_cast<double>(count) / rank;
    }
    m.recall = static_cast<double>(hits) / static_cast<double>(total);
    m.mrr = reciprocal / static_cast<double>(total);
    return m;
  }
};

std::vector<CutoffMetrics> metrics_for(const RankHistogram& h, const std::vector<int>& cutoffs) {
  std::vector<CutoffMetrics> out;
  for (const int k : cutoffs) out.push_back(h.metrics(k));
  return out;
}

int parse_int(const std::string& s) {
  std::size_t used = 0;
  int value = 0;
  try {
    value = std::stoi(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return value;
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    part.erase(0, part.find_first_not_of(' '));
    part.erase(part.find_last_not_of(' ') + 1);
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

nlohmann::json metrics_json(const std::vector<CutoffMetrics>& metrics) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& m : metrics) {
    j["recall@" + std::to_string(m.cutoff)] = m.recall;
    j["mrr@" + std::to_string(m.cutoff)] = m.mrr;
  }
  return j;
}

}  // namespace

double recall_at(std::span<const int> ranks, int cutoff) {
  require_ranks(ranks);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](int r) { return r <= cutoff; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double mrr_at(std::span<const int> ranks, int cutoff) {
  require_ranks(ranks);
  RankHistogram h;
  for (const int r : ranks) h.add(r);
  return h.metrics(cutoff).mrr;
}

std::string LengthBucket::label() const {
  if (hi < 0) return std::to_string(lo) + "+";
  if (hi == lo) return std::to_string(lo);
  return std::to_string(lo) + "-" + std::to_string(hi);
}

std::vector<LengthBucket> default_buckets() { return {{1, 1}, {2, 2}, {3, 4}, {5, 6}, {7, 9}, {10, -1}}; }

std::vector<LengthBucket> parse_buckets(const std::string& text) {
  std::vector<LengthBucket> buckets;
  for (const auto& part : split_commas(text)) {
    LengthBucket b;
    if (part.back() == '+') {
      b.lo = parse_int(part.substr(0, part.size() - 1));
      b.hi = -1;
    } else if (const auto dash = part.find('-'); dash != std::string::npos) {
      b.lo = parse_int(part.substr(0, dash));
      b.hi = parse_int(part.substr(dash + 1));
    } else {
      b.lo = b.hi = parse_int(part);
    }
    if (b.lo < 1 || (b.hi >= 0 && b.hi < b.lo)) throw ConfigError("bad length bucket '" + part + "'");
    buckets.push_back(b);
  }
  if (buckets.empty()) throw ConfigError("no length buckets given");
  return buckets;
}

std::vector<int> parse_cutoffs(const std::string& text) {
  std::vector<int> cutoffs;
  for (const auto& part : split_commas(text)) {
    const int k = parse_int(part);
    if (k < 1) throw ConfigError("cutoffs must be positive");
    cutoffs.push_back(k);
  }
  if (cutoffs.empty()) throw ConfigError("no cutoffs given");
  std::sort(cutoffs.begin(), cutoffs.end());
  cutoffs.erase(std::unique(cutoffs.begin(), cutoffs.end()), cutoffs.end());
  return cutoffs;
}

const CutoffMetrics& MetricsReport::at(int cutoff) const {
  for (const auto& m : overall)
    if (m.cutoff == cutoff) return m;
  throw std::out_of_range("report has no cutoff " + std::to_string(cutoff));
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["cutoffs"] = cutoffs;
  j["example_count"] = example_count;
  j["overall"] = metrics_json(overall);
  j["buckets"] = nlohmann::json::array();
  for (const auto& b : buckets) {
    j["buckets"].push_back({{"label", b.bucket.label()},
                            {"min_length", b.bucket.lo},
                            {"max_length", b.bucket.hi < 0 ? nlohmann::json(nullptr) : nlohmann::json(b.bucket.hi)},
                            {"count", b.count},
                            {"metrics", metrics_json(b.metrics)}});
  }
  if (!seeds.empty()) j["seeds"] = seeds;
  if (!per_seed.empty()) {
    j["per_seed"] = nlohmann::json::array();
    for (const auto& s : per_seed) j["per_seed"].push_back(metrics_json(s));
  }
  if (!stddev.empty()) j["stddev"] = metrics_json(stddev);
  return j;
}

MetricsReport build_report(std::span<const int> ranks, std::span<const int> lengths, const EvaluationOptions& options) {
  if (ranks.empty()) throw DataError("evaluation set is empty");
  if (ranks.size() != lengths.size()) throw std::invalid_argument("build_report: ranks and lengths differ in size");
  require_ranks(ranks);
  MetricsReport report;
  report.cutoffs = options.cutoffs;
  report.example_count = ranks.size();

  RankHistogram all;
  std::vector<RankHistogram> per_bucket(options.buckets.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    all.add(ranks[i]);
    for (std::size_t b = 0; b < options.buckets.size(); ++b) {
      if (options.buckets[b].contains(lengths[i])) {
        per_bucket[b].add(ranks[i]);
        break;
      }
    }
  }
  report.overall = metrics_for(all, options.cutoffs);
  for (std::size_t b = 0; b < options.buckets.size(); ++b) {
    report.buckets.push_back({options.buckets[b], per_bucket[b].total, metrics_for(per_bucket[b], options.cutoffs)});
  }
  return report;
}

template <typename Scalar>
std::vector<int> rank_examples(const ModelParameters<Scalar>& params, const ModelConfig& config,
                               std::span<const PrefixExample> examples) {
  std::vector<int> ranks(examples.size());
  score_batch(examples, params, config, [&](std::size_t i, const auto& scores) {
    ranks[i] = rank_target(scores.transpose(), examples[i].target);
  });
  return ranks;
}

namespace {
std::vector<int> lengths_of(std::span<const PrefixExample> examples) {
  std::vector<int> lengths;
  lengths.reserve(examples.size());
  for (const auto& e : examples) lengths.push_back(e.revealed_length > 0 ? e.revealed_length : static_cast<int>(e.prefix.size()));
  return lengths;
}
}  // namespace

template <typename Scalar>
MetricsReport evaluate(const ModelParameters<Scalar>& params, const ModelConfig& config,
                       std::span<const PrefixExample> examples, const EvaluationOptions& options) {
  if (examples.empty()) throw DataError("evaluation set is empty");
  const auto ranks = rank_examples(params, config, examples);
  return build_report(ranks, lengths_of(examples), options);
}

Eigen::VectorXd popularity_baseline(const SessionCorpus& train) {
  if (train.sessions.empty() || train.num_items() == 0) throw DataError("popularity baseline needs a non-empty corpus");
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(train.num_items()));
  for (const auto& s : train.sessions)
    for (const auto item : s.items) counts[item - 1] += 1.0;
  const double lo = counts.minCoeff();
  const double hi = counts.maxCoeff();
  if (hi == lo) return Eigen::VectorXd::Zero(counts.size());
  return ((counts.array() - lo) * (2.0 / (hi - lo)) - 1.0).matrix();
}

MetricsReport evaluate_fixed_scores(const Eigen::VectorXd& scores, std::span<const PrefixExample> examples,
                                    const EvaluationOptions& options) {
  if (examples.empty()) throw DataError("evaluation set is empty");
  std::vector<int> ranks;
  ranks.reserve(examples.size());
  for (const auto& e : examples) ranks.push_back(rank_target(scores, e.target));
  return build_report(ranks, lengths_of(examples), options);
}

MetricsReport aggregate_seeds(std::span<const MetricsReport> reports, std::span<const std::uint64_t> seeds) {
  if (reports.empty()) throw std::invalid_argument("aggregate_seeds: no reports");
  if (!seeds.empty() && seeds.size() != reports.size()) throw std::invalid_argument("aggregate_seeds: seed count mismatch");
  const auto& first = reports.front();
  for (const auto& r : reports) {
    bool same = r.cutoffs == first.cutoffs && r.buckets.size() == first.buckets.size();
    for (std::size_t b = 0; same && b < r.buckets.size(); ++b) same = r.buckets[b].bucket == first.buckets[b].bucket;
    if (!same) throw DataError("aggregate_seeds: reports differ in cutoffs or buckets");
  }
  const auto n = static_cast<double>(reports.size());

  auto mean_of = [&](auto&& pick) {
    std::vector<CutoffMetrics> out;
    for (std::size_t c = 0; c < first.cutoffs.size(); ++c) {
      CutoffMetrics m{first.cutoffs[c], 0.0, 0.0};
      for (const auto& r : reports) {
        m.recall += pick(r)[c].recall;
        m.mrr += pick(r)[c].mrr;
      }
      m.recall /= n;
      m.mrr /= n;
      out.push_back(m);
    }
    return out;
  };

  MetricsReport out;
  out.cutoffs = first.cutoffs;
  out.example_count = first.example_count;
  out.overall = mean_of([](const MetricsReport& r) -> const std::vector<CutoffMetrics>& { return r.overall; });
  for (std::size_t b = 0; b < first.buckets.size(); ++b) {
    BucketReport br{first.buckets[b].bucket, first.buckets[b].count, {}};
    br.metrics = mean_of([b](const MetricsReport& r) -> const std::vector<CutoffMetrics>& { return r.buckets[b].metrics; });
    out.buckets.push_back(std::move(br));
  }
  out.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& r : reports) out.per_seed.push_back(r.overall);
  for (std::size_t c = 0; c < first.cutoffs.size(); ++c) {
    CutoffMetrics sd{first.cutoffs[c], 0.0, 0.0};
    if (reports.size() > 1) {
      for (const auto& r : reports) {
        sd.recall += std::pow(r.overall[c].recall - out.overall[c].recall, 2);
        sd.mrr += std::pow(r.overall[c].mrr - out.overall[c].mrr, 2);
      }
      sd.recall = std::sqrt(sd.recall / (n - 1.0));
      sd.mrr = std::sqrt(sd.mrr / (n - 1.0));
    }
    out.stddev.push_back(sd);
  }
  return out;
}

template std::vector<int> rank_examples<float>(const ModelParameters<float>&, const ModelConfig&, std::span<const PrefixExample>);
template std::vector<int> rank_examples<double>(const ModelParameters<double>&, const ModelConfig&, std::span<const PrefixExample>);
template MetricsReport evaluate<float>(const ModelParameters<float>&, const ModelConfig&, std::span<const PrefixExample>,
                                       const EvaluationOptions&);
template MetricsReport evaluate<double>(const ModelParameters<double>&, const ModelConfig&, std::span<const PrefixExample>,
                                        const EvaluationOptions&);

}  // namespace miasrec
