#include <cmath>
#include <random>
#include <string>

#include "doctest.h"
#include "miasrec/model.hpp"
#include "support/gradient_check.hpp"
#include "support/synthetic.hpp"

using namespace miasrec;
using miasrec::testing::random_parameters;
using miasrec::testing::small_config;

TEST_CASE("end-to-end gradient on the three-item toy") {
  const auto report = miasrec::testing::toy_gradient_check();
  for (const auto& table : report.tables) {
    INFO(table.name << " checked " << table.checked << " rel " << table.relative_error);
    CHECK(table.checked > 0);
    CHECK(table.relative_error <= 1e-3);
  }
  CHECK(report.tables.size() == 21);
}

TEST_CASE("gradient check across configurations") {
  auto base = small_config(6, 4, 2);
  base.num_layers = 2;
  const auto corpus = miasrec::testing::random_corpus(6, 6, 31, 2, 6);
  const auto examples = expand_prefixes(corpus);
  for (const char* mode : {"entmax", "mean", "last:2"}) {
    for (const bool pe : {true, false}) {
      auto config = base;
      config.intent_mode = IntentMode::parse(mode);
      config.use_position_embedding = pe;
      config.use_frequency_embedding = !pe;
      config.beta = pe ? 0.0 : 1.0;
      const auto params = random_parameters<double>(config, 32);
      const auto report = miasrec::testing::gradient_check(examples, params, config);
      for (const auto& table : report.tables) {
        INFO(std::string(mode) << " pe=" << pe << " " << table.name << " rel " << table.relative_error);
        CHECK(table.relative_error <= 1e-3);
      }
    }
  }
}

TEST_CASE("gradient with dropout matches the same masks replayed") {
  auto config = small_config(5, 4, 2);
  config.dropout = 0.3;
  const auto corpus = miasrec::testing::random_corpus(4, 5, 33, 3, 5);
  const auto examples = expand_prefixes(corpus);
  std::vector<std::uint64_t> seeds(examples.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = 900 + i;
  const auto params = random_parameters<double>(config, 34);
  const auto report = miasrec::testing::gradient_check(examples, params, config, seeds);
  for (const auto& table : report.tables) {
    INFO(table.name << " rel " << table.relative_error);
    CHECK(table.relative_error <= 1e-3);
  }
}

TEST_CASE("float and double gradients agree") {
  const auto config = small_config(8, 8, 2);
  const auto corpus = miasrec::testing::random_corpus(10, 8, 35);
  const auto examples = expand_prefixes(corpus);
  const auto pd = random_parameters<double>(config, 36, 0.2);
  const auto pf = pd.cast<float>();
  auto gd = ModelParameters<double>::zeros(config);
  auto gf = ModelParameters<float>::zeros(config);
  const double ld = accumulate_loss<double>(examples, pd, config, &gd);
  const double lf = accumulate_loss<float>(examples, pf, config, &gf);
  CHECK(lf == doctest::Approx(ld).epsilon(1e-4));
  const auto gfd = gf.cast<double>();
  std::vector<double> diffs, norms;
  gd.for_each_tensor([&](const std::string&, const auto& t) { norms.push_back(t.norm()); });
  std::size_t i = 0;
  std::vector<const double*> ptrs;
  gfd.for_each_tensor([&](const std::string&, const auto& t) { ptrs.push_back(t.data()); });
  gd.for_each_tensor([&](const std::string& name, const auto& t) {
    double diff = 0.0;
    for (Eigen::Index k = 0; k < t.size(); ++k) diff += std::pow(t.data()[k] - ptrs[i][k], 2);
    INFO(name);
    CHECK(std::sqrt(diff) <= 1e-3 * std::max(norms[i], 1.0));
    ++i;
  });
}
