#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "miasrec/model.hpp"

namespace miasrec {

// Every random draw of a run derives from one seed.
struct SeedContext {
  std::uint64_t seed = 0;

  std::uint64_t init_seed() const;
  std::uint64_t shuffle_seed(int epoch) const;
  std::uint64_t dropout_seed(int epoch, std::size_t example) const;
};

SeedContext set_seed(std::uint64_t seed);

struct TrainOptions {
  std::size_t batch_size = 1024;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int max_epochs = 200;
  // Stop after this many consecutive epoch-over-epoch decreases of val MRR@20.
  int patience = 3;
  std::size_t chunk_size = 256;

  nlohmann::json to_json() const;
};

std::size_t batches_per_epoch(std::size_t examples, std::size_t batch_size);

// Tracks the validation metric. The best epoch is the first one reaching
// the maximum; a stop is signalled once the metric has decreased against
// the previous epoch `patience` times in a row.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience = 3) : patience_(patience) {}

  // Records the metric of the next epoch. Returns true when training should stop.
  bool update(double value);

  int epochs_seen() const { return epochs_; }
  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_value_; }
  bool last_improved() const { return last_improved_; }
  int decrease_streak() const { return streak_; }
  bool should_stop() const { return streak_ >= patience_; }

  nlohmann::json to_json() const;
  static EarlyStopping from_json(const nlohmann::json& j);

 private:
  int patience_;
  int epochs_ = 0;
  int best_epoch_ = 0;
  double best_value_ = 0.0;
  double previous_ = 0.0;
  int streak_ = 0;
  bool last_improved_ = false;
};

template <typename Scalar>
struct AdamState {
  ModelParameters<Scalar> first;
  ModelParameters<Scalar> second;
  std::int64_t step = 0;
};

template <typename Scalar>
void adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grads, AdamState<Scalar>& state,
               const TrainOptions& options);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_mrr20 = 0.0;
  double val_recall20 = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

template <typename Scalar>
struct TrainState {
  ModelParameters<Scalar> params;
  ModelParameters<Scalar> best_params;
  AdamState<Scalar> adam;
  EarlyStopping stopping;
  std::vector<EpochRecord> history;
  std::uint64_t seed = 0;
  bool finished = false;

  int epoch() const { return static_cast<int>(history.size()); }
};

template <typename Scalar>
TrainState<Scalar> initial_state(const ModelConfig& config, const TrainOptions& options, std::uint64_t seed);

// Resumable training state: parameters, best parameters, optimizer moments,
// stopping bookkeeping, and history.
template <typename Scalar>
void save_train_state(const std::filesystem::path& path, const TrainState<Scalar>& state, const ModelConfig& config,
                      const TrainOptions& options);
template <typename Scalar>
TrainState<Scalar> load_train_state(const std::filesystem::path& path, const ModelConfig& config,
                                    const TrainOptions& options);

// One pass over `examples` in a seeded shuffled order. Returns the mean loss.
template <typename Scalar>
double train_epoch(TrainState<Scalar>& state, std::span<const PrefixExample> examples, const ModelConfig& config,
                   const TrainOptions& options);

// (MRR@20, Recall@20) of a parameter set on the validation data.
template <typename Scalar>
using Validator = std::function<std::pair<double, double>(const ModelParameters<Scalar>&, int epoch)>;

template <typename Scalar>
struct TrainHooks {
  // Replaces validation on `val_examples` when set.
  Validator<Scalar> validate;
  std::function<void(const TrainState<Scalar>&)> on_epoch_end;
  // Return after this many epochs in this call (0 = no limit); the state is
  // left resumable.
  int epoch_budget = 0;
};

template <typename Scalar>
struct TrainResult {
  ModelParameters<Scalar> best_params;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool early_stopped = false;
};

template <typename Scalar>
TrainResult<Scalar> train(std::span<const PrefixExample> train_examples, std::span<const PrefixExample> val_examples,
                          const ModelConfig& config, const TrainOptions& options, std::uint64_t seed,
                          const TrainHooks<Scalar>& hooks = {}, TrainState<Scalar>* state = nullptr);

}  // namespace miasrec
