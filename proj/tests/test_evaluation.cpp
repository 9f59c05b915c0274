#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "doctest.h"
#include "miasrec/errors.hpp"
#include "miasrec/evaluation.hpp"
#include "support/synthetic.hpp"

using namespace miasrec;
using miasrec::testing::random_parameters;
using miasrec::testing::small_config;

namespace {

// Position of the target after a full sort by (score desc, index asc).
int sort_rank(const Eigen::VectorXd& scores, ItemIndex target) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores[a] > scores[b]; });
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i] == target - 1) return static_cast<int>(i + 1);
  return -1;
}

std::vector<int> random_ranks(std::mt19937_64& rng, std::size_t n, int max_rank) {
  std::uniform_int_distribution<int> rank(1, max_rank);
  std::vector<int> ranks(n);
  for (auto& r : ranks) r = rank(rng);
  return ranks;
}

MetricsReport random_report(std::mt19937_64& rng) {
  const auto ranks = random_ranks(rng, 200, 40);
  std::vector<int> lengths(ranks.size());
  std::uniform_int_distribution<int> len(1, 15);
  for (auto& l : lengths) l = len(rng);
  return build_report(ranks, lengths);
}

}  // namespace

TEST_CASE("rank_target: definition and tie-break") {
  CHECK(rank_target(Eigen::Vector3d(0.1, 0.9, 0.3), 2) == 1);
  CHECK(rank_target(Eigen::Vector3d(0.1, 0.9, 0.3), 1) == 3);
  const Eigen::VectorXd flat = Eigen::VectorXd::Constant(8, 0.5);
  CHECK(rank_target(flat, 1) == 1);
  CHECK(rank_target(flat, 8) == 8);
  CHECK_THROWS(rank_target(flat, 9));

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 500; ++trial) {
    Eigen::VectorXd scores(20);
    for (Eigen::Index j = 0; j < 20; ++j) scores[j] = coarse(rng) * 0.25;
    const ItemIndex target = 1 + trial % 20;
    CHECK(rank_target(scores, target) == sort_rank(scores, target));
  }
}

TEST_CASE("recall and mrr: definitions and brute force") {
  const std::vector<int> a{1, 25, 3};
  CHECK(recall_at(a, 20) == doctest::Approx(2.0 / 3.0));
  const std::vector<int> b{1, 25, 4};
  CHECK(mrr_at(b, 20) == doctest::Approx((1.0 + 0.0 + 0.25) / 3.0));
  CHECK_THROWS(recall_at(std::vector<int>{}, 20));
  CHECK_THROWS(mrr_at(std::vector<int>{}, 20));
  CHECK_THROWS(recall_at(std::vector<int>{0}, 20));

  std::mt19937_64 rng(2);
  const auto ranks = random_ranks(rng, 1000, 60);
  for (const int k : {1, 5, 10, 20, 50}) {
    double hits = 0.0, rr = 0.0;
    for (const int r : ranks) {
      if (r <= k) {
        hits += 1.0;
        rr += 1.0 / r;
      }
    }
    CHECK(recall_at(ranks, k) == doctest::Approx(hits / 1000.0).epsilon(1e-12));
    CHECK(mrr_at(ranks, k) == doctest::Approx(rr / 1000.0).epsilon(1e-12));
  }
}

TEST_CASE("bucket and cutoff parsing") {
  CHECK(parse_buckets("1,2,3-4,5-6,7-9,10+") == default_buckets());
  CHECK(default_buckets().size() == 6);
  CHECK(default_buckets()[2].label() == "3-4");
  CHECK(default_buckets()[5].label() == "10+");
  CHECK(default_buckets()[5].contains(400));
  CHECK_THROWS_AS(parse_buckets("3-1"), ConfigError);
  CHECK_THROWS_AS(parse_buckets("0"), ConfigError);
  CHECK_THROWS_AS(parse_buckets("a"), ConfigError);
  CHECK_THROWS_AS(parse_buckets(""), ConfigError);
  CHECK(parse_cutoffs("20, 5,10") == std::vector<int>{5, 10, 20});
  CHECK_THROWS_AS(parse_cutoffs("0"), ConfigError);
  CHECK_THROWS_AS(parse_cutoffs("x"), ConfigError);
}

TEST_CASE("report: perfect ranker, invariants, bucket counting oracle") {
  const std::vector<int> ones(30, 1);
  std::vector<int> lengths(30);
  for (std::size_t i = 0; i < lengths.size(); ++i) lengths[i] = 1 + static_cast<int>(i);
  const auto perfect = build_report(ones, lengths);
  for (const auto& m : perfect.overall) {
    CHECK(m.recall == 1.0);
    CHECK(m.mrr == 1.0);
  }

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ranks = random_ranks(rng, 300, 50);
    std::vector<int> lens(ranks.size());
    std::uniform_int_distribution<int> len(1, 30);
    for (auto& l : lens) l = len(rng);
    const auto report = build_report(ranks, lens);
    CHECK(report.cutoffs == std::vector<int>{5, 10, 20});
    REQUIRE(report.buckets.size() == 6);

    std::map<int, std::size_t> oracle;
    for (const int l : lens) {
      const int bucket = l == 1 ? 0 : l == 2 ? 1 : l <= 4 ? 2 : l <= 6 ? 3 : l <= 9 ? 4 : 5;
      ++oracle[bucket];
    }
    std::size_t total = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      CHECK(report.buckets[b].count == oracle[static_cast<int>(b)]);
      total += report.buckets[b].count;
    }
    CHECK(total == report.example_count);

    auto check_metrics = [](const std::vector<CutoffMetrics>& ms) {
      for (std::size_t c = 0; c < ms.size(); ++c) {
        CHECK(ms[c].mrr <= ms[c].recall);
        if (c > 0) {
          CHECK(ms[c - 1].recall <= ms[c].recall);
          CHECK(ms[c - 1].mrr <= ms[c].mrr);
        }
      }
    };
    check_metrics(report.overall);
    for (const auto& b : report.buckets) check_metrics(b.metrics);
  }
}

TEST_CASE("report is independent of example order") {
  std::mt19937_64 rng(4);
  const auto ranks = random_ranks(rng, 500, 100);
  std::vector<int> lengths(ranks.size());
  std::uniform_int_distribution<int> len(1, 12);
  for (auto& l : lengths) l = len(rng);
  const auto report = build_report(ranks, lengths);
  std::vector<std::size_t> order(ranks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> r2, l2;
  for (const auto i : order) {
    r2.push_back(ranks[i]);
    l2.push_back(lengths[i]);
  }
  CHECK(build_report(r2, l2) == report);

  const auto config = small_config(12);
  const auto params = random_parameters<float>(config, 5);
  auto examples = expand_prefixes(miasrec::testing::random_corpus(30, 12, 6));
  const auto before = evaluate(params, config, std::span<const PrefixExample>(examples)).to_json().dump();
  std::shuffle(examples.begin(), examples.end(), rng);
  CHECK(evaluate(params, config, std::span<const PrefixExample>(examples)).to_json().dump() == before);
}

TEST_CASE("evaluate: one session of length four gives three examples") {
  SessionCorpus corpus;
  for (int i = 1; i <= 6; ++i) corpus.vocabulary.add("i" + std::to_string(i));
  corpus.sessions.push_back({"only", {3, 1, 4, 1}, 10});
  const auto examples = expand_prefixes(corpus);
  const auto config = small_config(6);
  const auto report = evaluate(random_parameters<double>(config, 1), config, std::span<const PrefixExample>(examples));
  CHECK(report.example_count == 3);
  CHECK(report.buckets[0].count == 1);
  CHECK(report.buckets[1].count == 1);
  CHECK(report.buckets[2].count == 1);
  CHECK_THROWS_AS(evaluate(random_parameters<double>(config, 1), config, std::span<const PrefixExample>()), DataError);
}

TEST_CASE("evaluate matches ranks from single forward passes") {
  const auto config = small_config(12);
  const auto params = random_parameters<double>(config, 7);
  const auto examples = expand_prefixes(miasrec::testing::random_corpus(15, 12, 8));
  const auto ranks = rank_examples(params, config, std::span<const PrefixExample>(examples));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto r = forward(examples[i], params, config);
    CHECK(ranks[i] == sort_rank(r.scores, examples[i].target));
  }
}

TEST_CASE("popularity baseline") {
  SessionCorpus two;
  two.vocabulary.add("a");
  two.vocabulary.add("b");
  two.sessions.push_back({"s", {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2}, 0});
  const auto scores = popularity_baseline(two);
  CHECK(scores[0] == 1.0);
  CHECK(scores[1] == -1.0);
  CHECK(rank_target(scores, 1) == 1);

  SessionCorpus flat;
  for (const char* id : {"a", "b", "c"}) flat.vocabulary.add(id);
  flat.sessions.push_back({"s", {1, 2, 3}, 0});
  const auto zero = popularity_baseline(flat);
  CHECK(zero.isZero());
  CHECK(rank_target(zero, 3) == 3);

  const auto corpus = miasrec::testing::random_corpus(300, 100, 9, 2, 20);
  const auto pop = popularity_baseline(corpus);
  CHECK(pop.maxCoeff() <= 1.0);
  CHECK(pop.minCoeff() >= -1.0);
  std::vector<int> counts(100, 0);
  for (const auto& s : corpus.sessions)
    for (const auto v : s.items) ++counts[static_cast<std::size_t>(v - 1)];
  std::vector<int> order(100);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)]; });
  for (int pos = 0; pos < 100; ++pos) CHECK(rank_target(pop, order[static_cast<std::size_t>(pos)] + 1) == pos + 1);
}

TEST_CASE("aggregate_seeds") {
  std::mt19937_64 rng(10);
  const auto one = random_report(rng);
  const std::vector<MetricsReport> single{one};
  const auto same = aggregate_seeds(single);
  CHECK(same.overall == one.overall);
  CHECK(same.buckets == one.buckets);

  std::vector<MetricsReport> three(3, one);
  const double values[] = {0.50, 0.52, 0.54};
  for (int i = 0; i < 3; ++i) three[static_cast<std::size_t>(i)].overall[2].recall = values[i];
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto agg = aggregate_seeds(three, seeds);
  CHECK(agg.at(20).recall == doctest::Approx(0.52));
  CHECK(agg.stddev[2].recall == doctest::Approx(0.02));
  CHECK(agg.seeds == seeds);
  CHECK(agg.per_seed.size() == 3);
  CHECK(agg.per_seed[1][2].recall == 0.52);

  std::vector<MetricsReport> randoms{random_report(rng), random_report(rng), random_report(rng)};
  const auto mean = aggregate_seeds(randoms);
  for (std::size_t c = 0; c < 3; ++c) {
    const double r = (randoms[0].overall[c].recall + randoms[1].overall[c].recall + randoms[2].overall[c].recall) / 3.0;
    const double m = (randoms[0].overall[c].mrr + randoms[1].overall[c].mrr + randoms[2].overall[c].mrr) / 3.0;
    CHECK(mean.overall[c].recall == doctest::Approx(r).epsilon(1e-12));
    CHECK(mean.overall[c].mrr == doctest::Approx(m).epsilon(1e-12));
    for (std::size_t b = 0; b < 6; ++b) {
      const double br = (randoms[0].buckets[b].metrics[c].recall + randoms[1].buckets[b].metrics[c].recall +
                         randoms[2].buckets[b].metrics[c].recall) / 3.0;
      CHECK(mean.buckets[b].metrics[c].recall == doctest::Approx(br).epsilon(1e-12));
    }
  }

  auto odd = one;
  odd.cutoffs = {1, 2, 3};
  std::vector<MetricsReport> mismatched{one, odd};
  CHECK_THROWS_AS(aggregate_seeds(mismatched), DataError);
  CHECK_THROWS(aggregate_seeds(std::span<const MetricsReport>()));
}

TEST_CASE("report JSON schema") {
  std::mt19937_64 rng(11);
  const auto j = random_report(rng).to_json();
  CHECK(j.at("cutoffs") == nlohmann::json({5, 10, 20}));
  CHECK(j.at("overall").contains("recall@20"));
  CHECK(j.at("overall").contains("mrr@5"));
  CHECK(j.at("buckets").size() == 6);
  CHECK(j.at("buckets")[5].at("max_length").is_null());
  CHECK(j.at("buckets")[0].at("label") == "1");
}
