#include "miasrec/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "miasrec/checkpoint.hpp"
#include "miasrec/errors.hpp"
#include "miasrec/evaluation.hpp"

namespace miasrec {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ a) ^ b);
}

}  // namespace

std::uint64_t SeedContext::init_seed() const { return derive(seed, 1); }
std::uint64_t SeedContext::shuffle_seed(int epoch) const { return derive(seed, 2, static_cast<std::uint64_t>(epoch)); }
std::uint64_t SeedContext::dropout_seed(int epoch, std::size_t example) const {
  return derive(seed, 3, static_cast<std::uint64_t>(epoch), example);
}

SeedContext set_seed(std::uint64_t seed) { return SeedContext{seed}; }

nlohmann::json TrainOptions::to_json() const {
  return {{"batch_size", batch_size},   {"learning_rate", learning_rate}, {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},   {"adam_epsilon", adam_epsilon},   {"max_epochs", max_epochs},
          {"patience", patience}};
}

std::size_t batches_per_epoch(std::size_t examples, std::size_t batch_size) {
  return (examples + batch_size - 1) / batch_size;
}

bool EarlyStopping::update(double value) {
  ++epochs_;
  last_improved_ = epochs_ == 1 || value > best_value_;
  if (last_improved_) {
    best_value_ = value;
    best_epoch_ = epochs_;
  }
  streak_ = (epochs_ > 1 && value < previous_) ? streak_ + 1 : 0;
  previous_ = value;
  return should_stop();
}

nlohmann::json EarlyStopping::to_json() const {
  return {{"patience", patience_}, {"epochs", epochs_},     {"best_epoch", best_epoch_},      {"best_value", best_value_},
          {"previous", previous_}, {"streak", streak_},     {"last_improved", last_improved_}};
}

EarlyStopping EarlyStopping::from_json(const nlohmann::json& j) {
  EarlyStopping s(j.at("patience").get<int>());
  s.epochs_ = j.at("epochs").get<int>();
  s.best_epoch_ = j.at("best_epoch").get<int>();
  s.best_value_ = j.at("best_value").get<double>();
  s.previous_ = j.at("previous").get<double>();
  s.streak_ = j.at("streak").get<int>();
  s.last_improved_ = j.at("last_improved").get<bool>();
  return s;
}

template <typename Scalar>
void adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grads, AdamState<Scalar>& state,
               const TrainOptions& options) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.adam_beta1, t);
  const double correction2 = 1.0 - std::pow(options.adam_beta2, t);
  const auto b1 = static_cast<Scalar>(options.adam_beta1);
  const auto b2 = static_cast<Scalar>(options.adam_beta2);
  const auto step = static_cast<Scalar>(options.learning_rate / correction1);
  const auto root2 = static_cast<Scalar>(std::sqrt(correction2));
  const auto eps = static_cast<Scalar>(options.adam_epsilon);

  std::vector<Scalar*> p_data, m_data, v_data;
  std::vector<const Scalar*> g_data;
  std::vector<Eigen::Index> sizes;
  params.for_each_tensor([&](const std::string&, auto& t) {
    p_data.push_back(t.data());
    sizes.push_back(t.size());
  });
  grads.for_each_tensor([&](const std::string&, const auto& t) { g_data.push_back(t.data()); });
  state.first.for_each_tensor([&](const std::string&, auto& t) { m_data.push_back(t.data()); });
  state.second.for_each_tensor([&](const std::string&, auto& t) { v_data.push_back(t.data()); });

  for (std::size_t i = 0; i < sizes.size(); ++i) {
    Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> p(p_data[i], sizes[i]);
    Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> g(g_data[i], sizes[i]);
    Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> m(m_data[i], sizes[i]);
    Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> v(v_data[i], sizes[i]);
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p -= step * m / (v.sqrt() / root2 + eps);
  }
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_mrr20", val_mrr20}, {"val_r20", val_recall20}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  return {j.at("epoch").get<int>(), j.at("train_loss").get<double>(), j.at("val_mrr20").get<double>(),
          j.at("val_r20").get<double>()};
}

template <typename Scalar>
TrainState<Scalar> initial_state(const ModelConfig& config, const TrainOptions& options, std::uint64_t seed) {
  TrainState<Scalar> state;
  state.seed = seed;
  state.params = ModelParameters<Scalar>::initialize(config, set_seed(seed).init_seed());
  state.best_params = state.params;
  state.adam.first = ModelParameters<Scalar>::zeros(config);
  state.adam.second = ModelParameters<Scalar>::zeros(config);
  state.stopping = EarlyStopping(options.patience);
  return state;
}

template <typename Scalar>
void save_train_state(const std::filesystem::path& path, const TrainState<Scalar>& state, const ModelConfig& config,
                      const TrainOptions& options) {
  TensorArchive archive;
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : state.history) history.push_back(r.to_json());
  archive.meta = {{"kind", "miasrec-train-state"},
                  {"model", config.to_json()},
                  {"train", options.to_json()},
                  {"seed", state.seed},
                  {"adam_step", state.adam.step},
                  {"stopping", state.stopping.to_json()},
                  {"history", history},
                  {"finished", state.finished}};
  store_parameters(archive, "param/", state.params);
  store_parameters(archive, "best/", state.best_params);
  store_parameters(archive, "adam_m/", state.adam.first);
  store_parameters(archive, "adam_v/", state.adam.second);
  archive.save(path);
}

template <typename Scalar>
TrainState<Scalar> load_train_state(const std::filesystem::path& path, const ModelConfig& config,
                                    const TrainOptions& options) {
  const auto archive = TensorArchive::load(path);
  if (archive.meta.value("kind", std::string()) != "miasrec-train-state") {
    throw DataError(path.string() + " is not a training state file");
  }
  if (ModelConfig::from_json(archive.meta.at("model")) != config) {
    throw ConfigError("training state " + path.string() + " was written with a different model config");
  }
  if (archive.meta.at("train") != options.to_json()) {
    throw ConfigError("training state " + path.string() + " was written with different training options");
  }
  TrainState<Scalar> state;
  state.seed = archive.meta.at("seed").get<std::uint64_t>();
  state.adam.step = archive.meta.at("adam_step").get<std::int64_t>();
  state.stopping = EarlyStopping::from_json(archive.meta.at("stopping"));
  for (const auto& r : archive.meta.at("history")) state.history.push_back(EpochRecord::from_json(r));
  state.finished = archive.meta.at("finished").get<bool>();
  state.params = restore_parameters<Scalar>(archive, "param/", config);
  state.best_params = restore_parameters<Scalar>(archive, "best/", config);
  state.adam.first = restore_parameters<Scalar>(archive, "adam_m/", config);
  state.adam.second = restore_parameters<Scalar>(archive, "adam_v/", config);
  return state;
}

template <typename Scalar>
double train_epoch(TrainState<Scalar>& state, std::span<const PrefixExample> examples, const ModelConfig& config,
                   const TrainOptions& options) {
  if (examples.empty()) throw DataError("training set is empty");
  if (options.batch_size == 0) throw ConfigError("batch_size must be positive");
  const int epoch = state.epoch() + 1;
  const auto seeds = set_seed(state.seed);

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 engine(seeds.shuffle_seed(epoch));
  std::shuffle(order.begin(), order.end(), engine);

  auto grads = ModelParameters<Scalar>::zeros(config);
  std::vector<PrefixExample> batch;
  std::vector<std::uint64_t> dropout_seeds;
  double total = 0.0;
  const bool use_dropout = config.dropout > 0.0;
  const auto batches = batches_per_epoch(examples.size(), options.batch_size);
  for (std::size_t b = 0; b < batches; ++b) {
    const auto first = b * options.batch_size;
    const auto count = std::min(options.batch_size, examples.size() - first);
    batch.clear();
    dropout_seeds.clear();
    for (std::size_t i = first; i < first + count; ++i) {
      batch.push_back(examples[order[i]]);
      if (use_dropout) dropout_seeds.push_back(seeds.dropout_seed(epoch, order[i]));
    }
    grads.set_zero();
    double batch_loss = 0.0;
    try {
      BatchOptions batch_options;
      batch_options.dropout_seeds = dropout_seeds;
      batch_options.chunk_size = options.chunk_size;
      batch_loss = accumulate_loss(std::span<const PrefixExample>(batch), state.params, config, &grads, batch_options);
    } catch (const NumericalError& e) {
      throw NumericalError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) + ": " + e.what());
    }
    const auto scale = static_cast<Scalar>(1.0 / static_cast<double>(count));
    grads.for_each_tensor([&](const std::string&, auto& t) { t *= scale; });
    if (!grads.all_finite()) {
      throw NumericalError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) + ": non-finite gradient");
    }
    adam_step(state.params, grads, state.adam, options);
    total += batch_loss;
  }
  return total / static_cast<double>(examples.size());
}

template <typename Scalar>
TrainResult<Scalar> train(std::span<const PrefixExample> train_examples, std::span<const PrefixExample> val_examples,
                          const ModelConfig& config, const TrainOptions& options, std::uint64_t seed,
                          const TrainHooks<Scalar>& hooks, TrainState<Scalar>* state) {
  config.validate();
  TrainState<Scalar> local;
  if (!state) {
    local = initial_state<Scalar>(config, options, seed);
    state = &local;
  }
  Validator<Scalar> validate = hooks.validate;
  if (!validate) {
    if (val_examples.empty()) throw DataError("validation set is empty");
    validate = [&](const ModelParameters<Scalar>& params, int) {
      EvaluationOptions eval;
      eval.cutoffs = {20};
      const auto report = evaluate(params, config, val_examples, eval);
      return std::pair{report.at(20).mrr, report.at(20).recall};
    };
  }

  int run = 0;
  while (!state->finished) {
    if (hooks.epoch_budget > 0 && run >= hooks.epoch_budget) break;
    EpochRecord record;
    record.epoch = state->epoch() + 1;
    record.train_loss = train_epoch(*state, train_examples, config, options);
    std::tie(record.val_mrr20, record.val_recall20) = validate(state->params, record.epoch);
    state->history.push_back(record);
    const bool stop = state->stopping.update(record.val_mrr20);
    if (state->stopping.last_improved()) state->best_params = state->params;
    if (stop || state->epoch() >= options.max_epochs) state->finished = true;
    ++run;
    if (hooks.on_epoch_end) hooks.on_epoch_end(*state);
  }

  TrainResult<Scalar> result;
  result.best_params = state->best_params;
  result.history = state->history;
  result.best_epoch = state->stopping.best_epoch();
  result.early_stopped = state->stopping.should_stop();
  return result;
}

#define MIASREC_INSTANTIATE(S)                                                                                      \
  template void adam_step<S>(ModelParameters<S>&, const ModelParameters<S>&, AdamState<S>&, const TrainOptions&);  \
  template TrainState<S> initial_state<S>(const ModelConfig&, const TrainOptions&, std::uint64_t);                 \
  template void save_train_state<S>(const std::filesystem::path&, const TrainState<S>&, const ModelConfig&,        \
                                    const TrainOptions&);                                                          \
  template TrainState<S> load_train_state<S>(const std::filesystem::path&, const ModelConfig&, const TrainOptions&); \
  template double train_epoch<S>(TrainState<S>&, std::span<const PrefixExample>, const ModelConfig&,              \
                                 const TrainOptions&);                                                             \
  template TrainResult<S> train<S>(std::span<const PrefixExample>, std::span<const PrefixExample>,                 \
                                   const ModelConfig&, const TrainOptions&, std::uint64_t, const TrainHooks<S>&,   \
                                   TrainState<S>*);

MIASREC_INSTANTIATE(float)
MIASREC_INSTANTIATE(double)

#undef MIASREC_INSTANTIATE

}  // namespace miasrec
