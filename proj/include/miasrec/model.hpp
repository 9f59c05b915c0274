#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "miasrec/entmax.hpp"
#include "miasrec/sessions.hpp"
#include "miasrec/types.hpp"

namespace miasrec {

// How session representations are chosen from the intent candidates.
struct IntentMode {
  enum class Kind { kEntmax, kMean, kLast };
  Kind kind = Kind::kEntmax;
  int last_k = 1;

  static IntentMode parse(std::string_view text);  // "entmax" | "mean" | "last:<k>"
  std::string to_string() const;
  bool operator==(const IntentMode&) const = default;
};

struct ModelConfig {
  int num_items = 0;
  int dim = 100;
  int max_len = 50;
  int num_layers = 1;
  int num_heads = 2;
  double alpha = 1.5;
  double beta = 0.7;
  double tau = 0.07;
  double dropout = 0.1;
  bool use_position_embedding = true;
  bool use_frequency_embedding = true;
  IntentMode intent_mode;

  // Throws ConfigError on violated invariants.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct AttentionBlock {
  Matrix<Scalar> query, key, value, output;  // d x d, applied as X * W
  RowVector<Scalar> query_bias, key_bias, value_bias, output_bias;
  Matrix<Scalar> ffn_in;   // d x 4d
  RowVector<Scalar> ffn_in_bias;
  Matrix<Scalar> ffn_out;  // 4d x d
  RowVector<Scalar> ffn_out_bias;
  RowVector<Scalar> norm1_scale, norm1_offset, norm2_scale, norm2_offset;
};

template <typename Scalar>
struct ModelParameters {
  Matrix<Scalar> item;       // n x d, shared by input embedding and decoder
  Matrix<Scalar> position;   // (max_len + 1) x d, row 0 is the mean token
  Matrix<Scalar> frequency;  // (max_len + 1) x d, row 0 is the mean token
  Matrix<Scalar> gate;       // d x 2d
  Vector<Scalar> intent;     // d
  std::vector<AttentionBlock<Scalar>> blocks;

  // Parameters with the shapes implied by `config`, all zero.
  static ModelParameters zeros(const ModelConfig& config);
  // Normal(0, 0.02) weights, unit layer-norm scales, zero biases.
  static ModelParameters initialize(const ModelConfig& config, std::uint64_t seed);

  // Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void for_each_tensor(F&& f);
  template <typename F>
  void for_each_tensor(F&& f) const;

  template <typename Other>
  ModelParameters<Other> cast() const;

  void set_zero();
  bool all_finite() const;
  std::size_t parameter_count() const;
  // Throws DataError naming the first tensor whose shape disagrees with `config`.
  void check_shapes(const ModelConfig& config) const;
};

template <typename Scalar>
template <typename F>
void ModelParameters<Scalar>::for_each_tensor(F&& f) {
  f(std::string("item"), item);
  f(std::string("position"), position);
  f(std::string("frequency"), frequency);
  f(std::string("gate"), gate);
  f(std::string("intent"), intent);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const auto p = "block" + std::to_string(l) + ".";
    f(p + "query", b.query);
    f(p + "query_bias", b.query_bias);
    f(p + "key", b.key);
    f(p + "key_bias", b.key_bias);
    f(p + "value", b.value);
    f(p + "value_bias", b.value_bias);
    f(p + "output", b.output);
    f(p + "output_bias", b.output_bias);
    f(p + "norm1_scale", b.norm1_scale);
    f(p + "norm1_offset", b.norm1_offset);
    f(p + "ffn_in", b.ffn_in);
    f(p + "ffn_in_bias", b.ffn_in_bias);
    f(p + "ffn_out", b.ffn_out);
    f(p + "ffn_out_bias", b.ffn_out_bias);
    f(p + "norm2_scale", b.norm2_scale);
    f(p + "norm2_offset", b.norm2_offset);
  }
}

template <typename Scalar>
template <typename F>
void ModelParameters<Scalar>::for_each_tensor(F&& f) const {
  const_cast<ModelParameters*>(this)->for_each_tensor(
      [&](const std::string& name, const auto& tensor) { f(name, tensor); });
}

template <typename Scalar>
template <typename Other>
ModelParameters<Other> ModelParameters<Scalar>::cast() const {
  struct Source {
    const Scalar* data;
    Eigen::Index rows;
    Eigen::Index cols;
  };
  std::vector<Source> sources;
  for_each_tensor([&](const std::string&, const auto& t) { sources.push_back({t.data(), t.rows(), t.cols()}); });
  ModelParameters<Other> out;
  out.blocks.resize(blocks.size());
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, auto& t) {
    const auto& src = sources[i++];
    t.resize(src.rows, src.cols);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<Other>(src.data[k]);
  });
  return out;
}

// Random source for dropout. A null source means evaluation mode.
class DropoutSource {
 public:
  explicit DropoutSource(std::uint64_t seed) : engine_(seed) {}
  // Inverted-dropout mask of the given shape: entries are 0 or 1 / (1 - rate).
  template <typename Scalar>
  Matrix<Scalar> mask(Eigen::Index rows, Eigen::Index cols, double rate);

 private:
  std::mt19937_64 engine_;
};

template <typename Scalar>
Matrix<Scalar> DropoutSource::mask(Eigen::Index rows, Eigen::Index cols, double rate) {
  Matrix<Scalar> m(rows, cols);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const Scalar keep = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(engine_) < rate ? Scalar(0) : keep;
  return m;
}

template <typename Scalar>
struct IntentSet {
  Vector<Scalar> gamma;                   // weights over the |s| + 1 candidates, mean token last
  std::vector<Eigen::Index> selected;     // rows with gamma > 0, ascending
  Matrix<Scalar> representations;         // k x d, row r = gamma[selected[r]] * o[selected[r]]
  std::optional<SparseDistribution<Scalar>> distribution;  // set in entmax mode

  Eigen::Index k() const { return static_cast<Eigen::Index>(selected.size()); }
};

// Row-normalised copy of the item table, reused across a batch.
template <typename Scalar>
struct NormalizedItems {
  Matrix<Scalar> rows;    // n x d
  Vector<Scalar> norms;   // max(||v_j||, eps)

  static NormalizedItems compute(const Matrix<Scalar>& item);
};

inline constexpr double kNormEpsilon = 1e-12;

// --- Per-stage operations ----------------------------------------------------

// Input rows for the prefix followed by the mean token, (|s| + 1) x d.
// `item_rows`, when given, receives the raw item embeddings and the mean
// embedding in the same row order.
template <typename Scalar>
Matrix<Scalar> embed_inputs(const PrefixExample& example, const ModelParameters<Scalar>& params,
                            const ModelConfig& config, DropoutSource* dropout = nullptr,
                            Matrix<Scalar>* item_rows = nullptr);

// Bidirectional self-attention encoder. Rows where `valid` is false are
// excluded as keys and zeroed in the output; an empty mask means all valid.
template <typename Scalar>
Matrix<Scalar> encode(const Matrix<Scalar>& inputs, const ModelParameters<Scalar>& params,
                      const ModelConfig& config, const std::vector<bool>& valid = {},
                      DropoutSource* dropout = nullptr);

template <typename Scalar>
Matrix<Scalar> highway(const Matrix<Scalar>& contextual, const Matrix<Scalar>& item_rows,
                       const Matrix<Scalar>& gate);

template <typename Scalar>
IntentSet<Scalar> select_intents(const Matrix<Scalar>& intents, const ModelParameters<Scalar>& params,
                                 const ModelConfig& config);

// One cosine score distribution per selected representation, k x n.
template <typename Scalar>
Matrix<Scalar> decode(const IntentSet<Scalar>& intents, const NormalizedItems<Scalar>& items);

template <typename Scalar>
Vector<Scalar> aggregate(const Matrix<Scalar>& distributions, double beta);

// Temperature-scaled full-catalogue cross entropy; `target` is 1-based.
template <typename Scalar>
double loss(const Vector<Scalar>& scores, ItemIndex target, double tau);

enum class Mode { kTrain, kEval };

template <typename Scalar>
struct ForwardResult {
  Vector<Scalar> scores;          // aggregated, length n
  Matrix<Scalar> distributions;   // k x n
  IntentSet<Scalar> intents;
  Matrix<Scalar> intent_candidates;  // o rows, (|s| + 1) x d
};

template <typename Scalar>
ForwardResult<Scalar> forward(const PrefixExample& example, const ModelParameters<Scalar>& params,
                              const ModelConfig& config, Mode mode = Mode::kEval,
                              DropoutSource* dropout = nullptr);

// --- Batched training / inference -------------------------------------------

struct BatchOptions {
  // Dropout seeds, one per example; empty means evaluation mode.
  std::span<const std::uint64_t> dropout_seeds;
  // Examples processed per decode GEMM.
  std::size_t chunk_size = 256;
};

// Sum of losses over `examples`. When `gradients` is non-null, the gradient
// of the summed loss is added into it.
template <typename Scalar>
double accumulate_loss(std::span<const PrefixExample> examples, const ModelParameters<Scalar>& params,
                       const ModelConfig& config, ModelParameters<Scalar>* gradients,
                       const BatchOptions& options = {});

// Aggregated eval-mode scores for each example, written row by row to `sink`.
template <typename Scalar, typename Sink>
void score_batch(std::span<const PrefixExample> examples, const ModelParameters<Scalar>& params,
                 const ModelConfig& config, Sink&& sink, std::size_t chunk_size = 256);

namespace detail {
// Eval-mode scores for a chunk of examples, one row each.
template <typename Scalar>
Matrix<Scalar> score_chunk(std::span<const PrefixExample> examples, const ModelParameters<Scalar>& params,
                           const ModelConfig& config, const NormalizedItems<Scalar>& items);
}  // namespace detail

template <typename Scalar, typename Sink>
void score_batch(std::span<const PrefixExample> examples, const ModelParameters<Scalar>& params,
                 const ModelConfig& config, Sink&& sink, std::size_t chunk_size) {
  const auto items = NormalizedItems<Scalar>::compute(params.item);
  for (std::size_t first = 0; first < examples.size(); first += chunk_size) {
    const auto count = std::min(chunk_size, examples.size() - first);
    const auto scores = detail::score_chunk(examples.subspan(first, count), params, config, items);
    for (std::size_t i = 0; i < count; ++i) sink(first + i, scores.row(static_cast<Eigen::Index>(i)));
  }
}

}  // namespace miasrec
