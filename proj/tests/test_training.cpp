#include <filesystem>
#include <random>

#include "doctest.h"
#include "miasrec/errors.hpp"
#include "miasrec/evaluation.hpp"
#include "miasrec/training.hpp"
#include "support/synthetic.hpp"

using namespace miasrec;
using miasrec::testing::random_parameters;
using miasrec::testing::small_config;

namespace {

bool same_parameters(const ModelParameters<float>& a, const ModelParameters<float>& b) {
  std::vector<const float*> other;
  b.for_each_tensor([&](const std::string&, const auto& t) { other.push_back(t.data()); });
  bool same = true;
  std::size_t i = 0;
  a.for_each_tensor([&](const std::string&, const auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) same = same && t.data()[k] == other[i][k];
    ++i;
  });
  return same;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("miasrec_training_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Replays a fixed validation sequence.
Validator<float> scripted(std::vector<double> values) {
  return [values](const ModelParameters<float>&, int epoch) {
    const auto i = static_cast<std::size_t>(epoch - 1);
    return std::pair{i < values.size() ? values[i] : values.back(), 0.0};
  };
}

std::vector<PrefixExample> small_examples(int sessions = 12, int vocab = 10, std::uint64_t seed = 1) {
  return expand_prefixes(miasrec::testing::random_corpus(sessions, vocab, seed, 2, 6));
}

}  // namespace

TEST_CASE("seed streams are distinct and reproducible") {
  const auto a = set_seed(42);
  const auto b = set_seed(42);
  const auto c = set_seed(43);
  CHECK(a.init_seed() == b.init_seed());
  CHECK(a.init_seed() != c.init_seed());
  CHECK(a.shuffle_seed(1) != a.shuffle_seed(2));
  CHECK(a.dropout_seed(1, 0) != a.dropout_seed(1, 1));
  CHECK(a.dropout_seed(1, 0) != a.dropout_seed(2, 0));
  CHECK(a.init_seed() != a.shuffle_seed(0));
}

TEST_CASE("early stopping: three consecutive decreases") {
  EarlyStopping s(3);
  CHECK_FALSE(s.update(0.30));
  CHECK_FALSE(s.update(0.29));
  CHECK_FALSE(s.update(0.28));
  CHECK(s.update(0.27));
  CHECK(s.best_epoch() == 1);
  CHECK(s.best_value() == 0.30);
}

TEST_CASE("early stopping: streak resets on ties and increases") {
  EarlyStopping s(3);
  for (const double v : {0.1, 0.2, 0.15, 0.14, 0.14, 0.13, 0.12, 0.125, 0.11, 0.10}) CHECK_FALSE(s.update(v));
  CHECK(s.update(0.09));
  CHECK(s.best_epoch() == 2);

  EarlyStopping t(3);
  for (const double v : {0.5, 0.5, 0.5}) CHECK_FALSE(t.update(v));
  CHECK(t.best_epoch() == 1);

  // Decreasing against the previous epoch even while above an earlier low still counts.
  EarlyStopping u(3);
  for (const double v : {0.1, 0.4, 0.3, 0.2}) CHECK_FALSE(u.update(v));
  CHECK(u.update(0.15));
  CHECK(u.best_epoch() == 2);

  const auto restored = EarlyStopping::from_json(u.to_json());
  CHECK(restored.best_epoch() == u.best_epoch());
  CHECK(restored.decrease_streak() == u.decrease_streak());
  CHECK(restored.should_stop());
}

TEST_CASE("early stopping never fires before the fourth epoch") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    EarlyStopping s(3);
    for (int epoch = 1; epoch <= 10; ++epoch) {
      const bool stop = s.update(unit(rng));
      if (epoch < 4) CHECK_FALSE(stop);
      if (stop) break;
    }
  }
}

TEST_CASE("training halts on the scripted sequence and restores the best epoch") {
  const auto examples = small_examples();
  const auto config = small_config(10);
  TrainOptions options;
  options.batch_size = 8;
  ModelParameters<float> after_first;
  TrainHooks<float> hooks;
  hooks.validate = scripted({0.30, 0.29, 0.28, 0.27, 0.5, 0.6});
  hooks.on_epoch_end = [&](const TrainState<float>& s) {
    if (s.epoch() == 1) after_first = s.params;
  };
  const auto result = train<float>(examples, {}, config, options, 3, hooks);
  CHECK(result.history.size() == 4);
  CHECK(result.early_stopped);
  CHECK(result.best_epoch == 1);
  CHECK(same_parameters(result.best_params, after_first));
  for (std::size_t i = 0; i < result.history.size(); ++i) CHECK(result.history[i].epoch == static_cast<int>(i + 1));
  CHECK(result.history[3].val_mrr20 == 0.27);
}

TEST_CASE("epoch cap ends training") {
  const auto examples = small_examples();
  const auto config = small_config(10);
  TrainOptions options;
  options.max_epochs = 3;
  TrainHooks<float> hooks;
  hooks.validate = scripted({0.1, 0.2, 0.3});
  const auto result = train<float>(examples, {}, config, options, 3, hooks);
  CHECK(result.history.size() == 3);
  CHECK_FALSE(result.early_stopped);
  CHECK(result.best_epoch == 3);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const auto examples = small_examples();
  auto config = small_config(10);
  config.dropout = 0.2;
  TrainOptions options;
  options.learning_rate = 0.0;
  options.batch_size = 5;
  auto state = initial_state<float>(config, options, 9);
  const auto before = state.params;
  for (int e = 0; e < 3; ++e) train_epoch(state, std::span<const PrefixExample>(examples), config, options);
  CHECK(same_parameters(state.params, before));
  CHECK(state.adam.step == 3 * static_cast<std::int64_t>(batches_per_epoch(examples.size(), 5)));
}

TEST_CASE("batches per epoch") {
  CHECK(batches_per_epoch(1, 1024) == 1);
  CHECK(batches_per_epoch(1024, 1024) == 1);
  CHECK(batches_per_epoch(1025, 1024) == 2);
  CHECK(batches_per_epoch(5000, 1024) == 5);
  const auto examples = small_examples();
  const auto config = small_config(10);
  for (const std::size_t batch : {std::size_t{1}, std::size_t{4}, std::size_t{7}, std::size_t{1024}}) {
    TrainOptions options;
    options.batch_size = batch;
    auto state = initial_state<float>(config, options, 1);
    train_epoch(state, std::span<const PrefixExample>(examples), config, options);
    CHECK(state.adam.step == static_cast<std::int64_t>((examples.size() + batch - 1) / batch));
  }
}

TEST_CASE("same seed reproduces, different seeds differ") {
  const auto examples = small_examples();
  auto config = small_config(10);
  config.dropout = 0.1;
  TrainOptions options;
  options.batch_size = 6;
  auto a = initial_state<float>(config, options, 5);
  auto b = initial_state<float>(config, options, 5);
  auto c = initial_state<float>(config, options, 6);
  CHECK(same_parameters(a.params, b.params));
  CHECK_FALSE(same_parameters(a.params, c.params));
  const double la = train_epoch(a, std::span<const PrefixExample>(examples), config, options);
  const double lb = train_epoch(b, std::span<const PrefixExample>(examples), config, options);
  CHECK(std::abs(la - lb) <= 1e-6);
  CHECK(same_parameters(a.params, b.params));
}

TEST_CASE("one small optimizer step decreases the loss of a single example") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> item(1, 12);
  for (int trial = 0; trial < 10; ++trial) {
    auto config = small_config(12, 8, 2);
    config.tau = 0.07;
    auto params = random_parameters<double>(config, 70 + static_cast<std::uint64_t>(trial), 0.3);
    std::vector<ItemIndex> prefix(static_cast<std::size_t>(1 + trial % 6));
    for (auto& v : prefix) v = item(rng);
    const std::vector<PrefixExample> one{make_prefix_example(prefix, item(rng))};
    auto grads = ModelParameters<double>::zeros(config);
    const double before = accumulate_loss<double>(one, params, config, &grads);
    AdamState<double> adam{ModelParameters<double>::zeros(config), ModelParameters<double>::zeros(config), 0};
    TrainOptions options;
    options.learning_rate = 1e-4;
    adam_step(params, grads, adam, options);
    const double after = accumulate_loss<double>(one, params, config, nullptr);
    CHECK(after < before);
  }
}

TEST_CASE("adam moments follow their parameters") {
  const auto config = small_config(6);
  TrainOptions options;
  const auto state = initial_state<float>(config, options, 1);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes, moments;
  state.params.for_each_tensor([&](const std::string&, const auto& t) { shapes.emplace_back(t.rows(), t.cols()); });
  state.adam.second.for_each_tensor([&](const std::string&, const auto& t) { moments.emplace_back(t.rows(), t.cols()); });
  CHECK(shapes == moments);
}

TEST_CASE("non-finite loss aborts naming the batch") {
  const auto examples = small_examples();
  const auto config = small_config(10);
  TrainOptions options;
  options.batch_size = 4;
  auto state = initial_state<float>(config, options, 1);
  state.params.item(0, 0) = std::numeric_limits<float>::quiet_NaN();
  state.params.item.row(0).setConstant(std::numeric_limits<float>::quiet_NaN());
  try {
    train_epoch(state, std::span<const PrefixExample>(examples), config, options);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("epoch 1, batch ") != std::string::npos);
    CHECK(e.code() == ExitCode::kNumerical);
  }
}

TEST_CASE("interrupted training resumes to the same result") {
  TempDir dir;
  const auto examples = small_examples(20, 10, 3);
  const auto val = small_examples(5, 10, 4);
  auto config = small_config(10);
  config.dropout = 0.1;
  TrainOptions options;
  options.batch_size = 16;
  options.max_epochs = 6;

  const auto full = train<float>(examples, val, config, options, 11);

  auto state = initial_state<float>(config, options, 11);
  TrainHooks<float> hooks;
  hooks.epoch_budget = 2;
  train<float>(examples, val, config, options, 11, hooks, &state);
  CHECK(state.epoch() == 2);
  const auto path = dir.path / "state.bin";
  save_train_state(path, state, config, options);
  auto resumed = load_train_state<float>(path, config, options);
  const auto rest = train<float>(examples, val, config, options, 11, {}, &resumed);

  REQUIRE(rest.history.size() == full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    CHECK(rest.history[i].train_loss == full.history[i].train_loss);
    CHECK(rest.history[i].val_mrr20 == full.history[i].val_mrr20);
  }
  CHECK(rest.best_epoch == full.best_epoch);
  CHECK(same_parameters(rest.best_params, full.best_params));

  auto other = config;
  other.tau = 0.9;
  CHECK_THROWS_AS(load_train_state<float>(path, other, options), ConfigError);
  auto other_options = options;
  other_options.learning_rate = 0.5;
  CHECK_THROWS_AS(load_train_state<float>(path, config, other_options), ConfigError);
}

TEST_CASE("a memorisable corpus is learned") {
  const auto corpus = miasrec::testing::deterministic_transition_corpus(60, 15, 5, 4, 8);
  const auto examples = expand_prefixes(corpus);
  auto config = small_config(15, 16, 2);
  config.tau = 0.07;
  config.dropout = 0.0;
  TrainOptions options;
  options.batch_size = 32;
  options.learning_rate = 1e-2;
  options.max_epochs = 40;
  TrainHooks<float> hooks;
  hooks.validate = [&](const ModelParameters<float>& p, int) {
    EvaluationOptions eval;
    eval.cutoffs = {1, 20};
    const auto r = evaluate(p, config, std::span<const PrefixExample>(examples), eval);
    return std::pair{r.at(20).mrr, r.at(1).recall};
  };
  const auto result = train<float>(examples, {}, config, options, 1, hooks);
  double best_recall1 = 0.0;
  for (const auto& h : result.history) best_recall1 = std::max(best_recall1, h.val_recall20);
  CHECK(result.history.front().train_loss > result.history.back().train_loss);
  CHECK(best_recall1 >= 0.9);
}
