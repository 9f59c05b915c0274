#include "miasrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "miasrec/errors.hpp"

namespace miasrec {

// --- Configuration -----------------------------------------------------------

IntentMode IntentMode::parse(std::string_view text) {
  if (text == "entmax") return {Kind::kEntmax, 1};
  if (text == "mean") return {Kind::kMean, 1};
  if (text.starts_with("last:")) {
    const auto digits = std::string(text.substr(5));
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(digits, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != digits.size() || digits.empty()) throw ConfigError("bad intent mode '" + std::string(text) + "'");
    if (k < 1) throw ConfigError("intent mode last:k requires k >= 1");
    return {Kind::kLast, k};
  }
  throw ConfigError("unknown intent mode '" + std::string(text) + "' (expected entmax, mean, or last:k)");
}

std::string IntentMode::to_string() const {
  switch (kind) {
    case Kind::kEntmax:
      return "entmax";
    case Kind::kMean:
      return "mean";
    case Kind::kLast:
      return "last:" + std::to_string(last_k);
  }
  return "entmax";
}

void ModelConfig::validate() const {
  if (num_items < 1) throw ConfigError("num_items must be positive");
  if (dim < 1) throw ConfigError("dim must be positive");
  if (num_heads < 1 || dim % num_heads != 0) throw ConfigError("dim must be divisible by num_heads");
  if (num_layers < 1) throw ConfigError("num_layers must be positive");
  if (max_len < 1) throw ConfigError("max_len must be positive");
  if (!(alpha >= 1.0)) throw ConfigError("alpha must be >= 1");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (intent_mode.kind == IntentMode::Kind::kLast && intent_mode.last_k < 1) {
    throw ConfigError("intent mode last:k requires k >= 1");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_items", num_items},
          {"dim", dim},
          {"max_len", max_len},
          {"num_layers", num_layers},
          {"num_heads", num_heads},
          {"alpha", alpha},
          {"beta", beta},
          {"tau", tau},
          {"dropout", dropout},
          {"use_position_embedding", use_position_embedding},
          {"use_frequency_embedding", use_frequency_embedding},
          {"intent_mode", intent_mode.to_string()}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_items = j.at("num_items").get<int>();
    c.dim = j.value("dim", c.dim);
    c.max_len = j.value("max_len", c.max_len);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.tau = j.value("tau", c.tau);
    c.dropout = j.value("dropout", c.dropout);
    c.use_position_embedding = j.value("use_position_embedding", c.use_position_embedding);
    c.use_frequency_embedding = j.value("use_frequency_embedding", c.use_frequency_embedding);
    c.intent_mode = IntentMode::parse(j.value("intent_mode", std::string("entmax")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

// --- Parameters --------------------------------------------------------------

template <typename Scalar>
ModelParameters<Scalar> ModelParameters<Scalar>::zeros(const ModelConfig& config) {
  config.validate();
  const Eigen::Index d = config.dim;
  const Eigen::Index table = config.max_len + 1;
  ModelParameters p;
  p.item = Matrix<Scalar>::Zero(config.num_items, d);
  p.position = Matrix<Scalar>::Zero(table, d);
  p.frequency = Matrix<Scalar>::Zero(table, d);
  p.gate = Matrix<Scalar>::Zero(d, 2 * d);
  p.intent = Vector<Scalar>::Zero(d);
  p.blocks.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& b : p.blocks) {
    b.query = b.key = b.value = b.output = Matrix<Scalar>::Zero(d, d);
    b.query_bias = b.key_bias = b.value_bias = b.output_bias = RowVector<Scalar>::Zero(d);
    b.ffn_in = Matrix<Scalar>::Zero(d, 4 * d);
    b.ffn_in_bias = RowVector<Scalar>::Zero(4 * d);
    b.ffn_out = Matrix<Scalar>::Zero(4 * d, d);
    b.ffn_out_bias = RowVector<Scalar>::Zero(d);
    b.norm1_scale = b.norm1_offset = b.norm2_scale = b.norm2_offset = RowVector<Scalar>::Zero(d);
  }
  return p;
}

template <typename Scalar>
ModelParameters<Scalar> ModelParameters<Scalar>::initialize(const ModelConfig& config, std::uint64_t seed) {
  auto p = zeros(config);
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto fill = [&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(normal(engine));
  };
  fill(p.item);
  fill(p.position);
  fill(p.frequency);
  fill(p.gate);
  fill(p.intent);
  for (auto& b : p.blocks) {
    fill(b.query);
    fill(b.key);
    fill(b.value);
    fill(b.output);
    fill(b.ffn_in);
    fill(b.ffn_out);
    b.norm1_scale.setOnes();
    b.norm2_scale.setOnes();
  }
  return p;
}

template <typename Scalar>
void ModelParameters<Scalar>::set_zero() {
  for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
}

template <typename Scalar>
bool ModelParameters<Scalar>::all_finite() const {
  bool finite = true;
  for_each_tensor([&](const std::string&, const auto& t) { finite = finite && t.allFinite(); });
  return finite;
}

template <typename Scalar>
std::size_t ModelParameters<Scalar>::parameter_count() const {
  std::size_t count = 0;
  for_each_tensor([&](const std::string&, const auto& t) { count += static_cast<std::size_t>(t.size()); });
  return count;
}

template <typename Scalar>
void ModelParameters<Scalar>::check_shapes(const ModelConfig& config) const {
  const auto expected = zeros(config);
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> want;
  expected.for_each_tensor([&](const std::string& name, const auto& t) { want.emplace_back(name, t.rows(), t.cols()); });
  std::size_t i = 0;
  for_each_tensor([&](const std::string& name, const auto& t) {
    if (i >= want.size()) throw DataError("unexpected tensor " + name);
    const auto& [wname, rows, cols] = want[i++];
    if (name != wname || t.rows() != rows || t.cols() != cols) {
      throw DataError("tensor " + name + " has shape " + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                      ", config requires " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  });
  if (i != want.size()) throw DataError("parameter set has " + std::to_string(i) + " tensors, config requires " + std::to_string(want.size()));
}

template <typename Scalar>
NormalizedItems<Scalar> NormalizedItems<Scalar>::compute(const Matrix<Scalar>& item) {
  NormalizedItems out;
  out.norms = item.rowwise().norm().cwiseMax(static_cast<Scalar>(kNormEpsilon));
  out.rows = out.norms.cwiseInverse().asDiagonal() * item;
  return out;
}

// --- Forward building blocks with caches -------------------------------------

namespace {

constexpr double kLayerNormEpsilon = 1e-12;

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;
  Vector<Scalar> inv_std;
};

template <typename Scalar>
struct BlockCache {
  Matrix<Scalar> input, q, k, v;
  std::vector<Matrix<Scalar>> probs;
  Matrix<Scalar> context;
  Matrix<Scalar> attn_mask;
  LayerNormCache<Scalar> norm1;
  Matrix<Scalar> y1;
  Matrix<Scalar> ffn_pre;
  Matrix<Scalar> ffn_act;
  Matrix<Scalar> ffn_mask;
  LayerNormCache<Scalar> norm2;
};

template <typename Scalar>
struct SequenceCache {
  std::vector<Eigen::Index> item_index;  // item table row per prefix position
  std::vector<int> positions;
  std::vector<int> frequencies;
  Matrix<Scalar> item_rows;   // raw item embeddings then the mean embedding
  Matrix<Scalar> input_mask;
  std::vector<bool> valid;
  std::vector<BlockCache<Scalar>> blocks;
  Matrix<Scalar> contextual;
  Matrix<Scalar> gate_input;
  Matrix<Scalar> gate_values;
  Matrix<Scalar> intents;
  IntentSet<Scalar> selection;
  Matrix<Scalar> unit;        // k x d, normalised selected representations
  Vector<Scalar> unit_norms;  // k, max(||h||, eps)
};

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const RowVector<Scalar>& scale, const RowVector<Scalar>& offset,
                          LayerNormCache<Scalar>* cache) {
  const auto d = static_cast<Scalar>(x.cols());
  const Vector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  const Vector<Scalar> var = centered.rowwise().squaredNorm() / d;
  const Vector<Scalar> inv_std = (var.array() + static_cast<Scalar>(kLayerNormEpsilon)).rsqrt().matrix();
  Matrix<Scalar> normalized = inv_std.asDiagonal() * centered;
  Matrix<Scalar> out = (normalized.array().rowwise() * scale.array()).rowwise() + offset.array();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dout, const RowVector<Scalar>& scale,
                                   const LayerNormCache<Scalar>& cache, RowVector<Scalar>& dscale,
                                   RowVector<Scalar>& doffset) {
  const auto d = static_cast<Scalar>(dout.cols());
  dscale += dout.cwiseProduct(cache.normalized).colwise().sum();
  doffset += dout.colwise().sum();
  const Matrix<Scalar> dnorm = dout.array().rowwise() * scale.array();
  const Vector<Scalar> mean_d = dnorm.rowwise().sum() / d;
  const Vector<Scalar> mean_dx = dnorm.cwiseProduct(cache.normalized).rowwise().sum() / d;
  Matrix<Scalar> dx = dnorm.colwise() - mean_d;
  dx -= mean_dx.asDiagonal() * cache.normalized;
  return cache.inv_std.asDiagonal() * dx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return static_cast<Scalar>(0.5) * x * (Scalar(1) + std::erf(x * static_cast<Scalar>(M_SQRT1_2)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = static_cast<Scalar>(0.5) * (Scalar(1) + std::erf(x * static_cast<Scalar>(M_SQRT1_2)));
  const Scalar pdf = std::exp(static_cast<Scalar>(-0.5) * x * x) * static_cast<Scalar>(0.3989422804014327);
  return cdf + x * pdf;
}

template <typename Scalar>
Matrix<Scalar> block_forward(const Matrix<Scalar>& x, const AttentionBlock<Scalar>& block, const ModelConfig& config,
                             const std::vector<bool>& valid, DropoutSource* dropout, BlockCache<Scalar>& cache) {
  const Eigen::Index len = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index heads = config.num_heads;
  const Eigen::Index head_dim = d / heads;
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  const bool use_dropout = dropout != nullptr && config.dropout > 0.0;

  cache.input = x;
  cache.q.noalias() = x * block.query;
  cache.q.rowwise() += block.query_bias;
  cache.k.noalias() = x * block.key;
  cache.k.rowwise() += block.key_bias;
  cache.v.noalias() = x * block.value;
  cache.v.rowwise() += block.value_bias;

  cache.context.resize(len, d);
  cache.probs.resize(static_cast<std::size_t>(heads));
  for (Eigen::Index h = 0; h < heads; ++h) {
    auto& p = cache.probs[static_cast<std::size_t>(h)];
    p.noalias() = cache.q.middleCols(h * head_dim, head_dim) * cache.k.middleCols(h * head_dim, head_dim).transpose();
    p *= scale;
    for (Eigen::Index j = 0; j < len; ++j)
      if (!valid[static_cast<std::size_t>(j)]) p.col(j).setConstant(-std::numeric_limits<Scalar>::infinity());
    for (Eigen::Index i = 0; i < len; ++i) {
      auto row = p.row(i);
      const Scalar top = row.maxCoeff();
      row = (row.array() - top).exp();
      row /= row.sum();
    }
    cache.context.middleCols(h * head_dim, head_dim).noalias() = p * cache.v.middleCols(h * head_dim, head_dim);
  }

  Matrix<Scalar> attn = cache.context * block.output;
  attn.rowwise() += block.output_bias;
  if (use_dropout) {
    cache.attn_mask = dropout->mask<Scalar>(len, d, config.dropout);
    attn = attn.cwiseProduct(cache.attn_mask);
  } else {
    cache.attn_mask.resize(0, 0);
  }
  cache.y1 = layer_norm<Scalar>(x + attn, block.norm1_scale, block.norm1_offset, &cache.norm1);

  cache.ffn_pre.noalias() = cache.y1 * block.ffn_in;
  cache.ffn_pre.rowwise() += block.ffn_in_bias;
  cache.ffn_act = cache.ffn_pre.unaryExpr([](Scalar v) { return gelu(v); });
  Matrix<Scalar> ffn = cache.ffn_act * block.ffn_out;
  ffn.rowwise() += block.ffn_out_bias;
  if (use_dropout) {
    cache.ffn_mask = dropout->mask<Scalar>(len, d, config.dropout);
    ffn = ffn.cwiseProduct(cache.ffn_mask);
  } else {
    cache.ffn_mask.resize(0, 0);
  }
  return layer_norm<Scalar>(cache.y1 + ffn, block.norm2_scale, block.norm2_offset, &cache.norm2);
}

template <typename Scalar>
Matrix<Scalar> block_backward(const Matrix<Scalar>& dout, const AttentionBlock<Scalar>& block,
                              const ModelConfig& config, const BlockCache<Scalar>& cache,
                              AttentionBlock<Scalar>& grad) {
  const Eigen::Index d = dout.cols();
  const Eigen::Index heads = config.num_heads;
  const Eigen::Index head_dim = d / heads;
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  // Second sub-layer.
  Matrix<Scalar> dres2 = layer_norm_backward<Scalar>(dout, block.norm2_scale, cache.norm2, grad.norm2_scale, grad.norm2_offset);
  Matrix<Scalar> dffn = cache.ffn_mask.size() ? Matrix<Scalar>(dres2.cwiseProduct(cache.ffn_mask)) : dres2;
  grad.ffn_out.noalias() += cache.ffn_act.transpose() * dffn;
  grad.ffn_out_bias += dffn.colwise().sum();
  Matrix<Scalar> dpre = dffn * block.ffn_out.transpose();
  dpre = dpre.cwiseProduct(cache.ffn_pre.unaryExpr([](Scalar v) { return gelu_derivative(v); }));
  grad.ffn_in.noalias() += cache.y1.transpose() * dpre;
  grad.ffn_in_bias += dpre.colwise().sum();
  Matrix<Scalar> dy1 = dres2;
  dy1.noalias() += dpre * block.ffn_in.transpose();

  // First sub-layer.
  Matrix<Scalar> dres1 = layer_norm_backward<Scalar>(dy1, block.norm1_scale, cache.norm1, grad.norm1_scale, grad.norm1_offset);
  Matrix<Scalar> dattn = cache.attn_mask.size() ? Matrix<Scalar>(dres1.cwiseProduct(cache.attn_mask)) : dres1;
  grad.output.noalias() += cache.context.transpose() * dattn;
  grad.output_bias += dattn.colwise().sum();
  const Matrix<Scalar> dcontext = dattn * block.output.transpose();

  Matrix<Scalar> dq(dout.rows(), d);
  Matrix<Scalar> dk(dout.rows(), d);
  Matrix<Scalar> dv(dout.rows(), d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const auto& p = cache.probs[static_cast<std::size_t>(h)];
    const auto dctx_h = dcontext.middleCols(h * head_dim, head_dim);
    const Matrix<Scalar> dp = dctx_h * cache.v.middleCols(h * head_dim, head_dim).transpose();
    dv.middleCols(h * head_dim, head_dim).noalias() = p.transpose() * dctx_h;
    const Vector<Scalar> row_dot = dp.cwiseProduct(p).rowwise().sum();
    Matrix<Scalar> ds = p.cwiseProduct(dp.colwise() - row_dot);
    ds *= scale;
    dq.middleCols(h * head_dim, head_dim).noalias() = ds * cache.k.middleCols(h * head_dim, head_dim);
    dk.middleCols(h * head_dim, head_dim).noalias() = ds.transpose() * cache.q.middleCols(h * head_dim, head_dim);
  }
  grad.query.noalias() += cache.input.transpose() * dq;
  grad.query_bias += dq.colwise().sum();
  grad.key.noalias() += cache.input.transpose() * dk;
  grad.key_bias += dk.colwise().sum();
  grad.value.noalias() += cache.input.transpose() * dv;
  grad.value_bias += dv.colwise().sum();

  Matrix<Scalar> dx = dres1;
  dx.noalias() += dq * block.query.transpose();
  dx.noalias() += dk * block.key.transpose();
  dx.noalias() += dv * block.value.transpose();
  return dx;
}

template <typename Scalar>
Matrix<Scalar> embed_forward(const PrefixExample& example, const ModelParameters<Scalar>& params,
                             const ModelConfig& config, DropoutSource* dropout, SequenceCache<Scalar>& cache) {
  const auto len = static_cast<Eigen::Index>(example.prefix.size());
  if (len < 1 || len > config.max_len) {
    throw std::out_of_range("prefix length " + std::to_string(len) + " outside [1, " + std::to_string(config.max_len) + "]");
  }
  if (example.positions.size() != example.prefix.size() || example.frequencies.size() != example.prefix.size()) {
    throw std::invalid_argument("prefix annotations do not match prefix length");
  }
  const Eigen::Index d = params.item.cols();
  const Eigen::Index table = params.position.rows();

  cache.item_index.resize(static_cast<std::size_t>(len));
  cache.positions = example.positions;
  cache.frequencies = example.frequencies;
  cache.item_rows.resize(len + 1, d);
  Matrix<Scalar> x(len + 1, d);
  for (Eigen::Index i = 0; i < len; ++i) {
    const auto s = static_cast<std::size_t>(i);
    const ItemIndex item = example.prefix[s];
    if (item < 1 || item > params.item.rows()) throw std::out_of_range("item index " + std::to_string(item) + " out of range");
    const int pos = example.positions[s];
    const int freq = example.frequencies[s];
    if (pos < 1 || pos >= table) throw std::out_of_range("position index " + std::to_string(pos) + " out of range");
    if (freq < 1 || freq >= table) throw std::out_of_range("frequency index " + std::to_string(freq) + " out of range");
    cache.item_index[s] = item - 1;
    cache.item_rows.row(i) = params.item.row(item - 1);
    x.row(i) = cache.item_rows.row(i);
    if (config.use_position_embedding) x.row(i) += params.position.row(pos);
    if (config.use_frequency_embedding) x.row(i) += params.frequency.row(freq);
  }
  cache.item_rows.row(len) = cache.item_rows.topRows(len).colwise().mean();
  x.row(len) = cache.item_rows.row(len);
  if (config.use_position_embedding) x.row(len) += params.position.row(0);
  if (config.use_frequency_embedding) x.row(len) += params.frequency.row(0);

  if (dropout != nullptr && config.dropout > 0.0) {
    cache.input_mask = dropout->mask<Scalar>(len + 1, d, config.dropout);
    x = x.cwiseProduct(cache.input_mask);
  } else {
    cache.input_mask.resize(0, 0);
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> encode_forward(const Matrix<Scalar>& x, const ModelParameters<Scalar>& params, const ModelConfig& config,
                              const std::vector<bool>& valid, DropoutSource* dropout,
                              std::vector<BlockCache<Scalar>>& caches) {
  caches.resize(params.blocks.size());
  Matrix<Scalar> h = x;
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    h = block_forward(h, params.blocks[l], config, valid, dropout, caches[l]);
  }
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    if (!valid[static_cast<std::size_t>(i)]) h.row(i).setZero();
  return h;
}

template <typename Scalar>
Matrix<Scalar> highway_forward(const Matrix<Scalar>& contextual, const Matrix<Scalar>& item_rows,
                               const Matrix<Scalar>& gate, Matrix<Scalar>* gate_input, Matrix<Scalar>* gate_values) {
  if (contextual.rows() != item_rows.rows() || contextual.cols() != item_rows.cols() ||
      gate.rows() != contextual.cols() || gate.cols() != 2 * contextual.cols()) {
    throw std::invalid_argument("highway: shape mismatch");
  }
  const Eigen::Index d = contextual.cols();
  Matrix<Scalar> joined(contextual.rows(), 2 * d);
  joined.leftCols(d) = item_rows;
  joined.rightCols(d) = contextual;
  Matrix<Scalar> g = joined * gate.transpose();
  g = g.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
  Matrix<Scalar> out = g.cwiseProduct(item_rows) + (Matrix<Scalar>::Ones(g.rows(), g.cols()) - g).cwiseProduct(contextual);
  if (gate_input) *gate_input = std::move(joined);
  if (gate_values) *gate_values = std::move(g);
  return out;
}

template <typename Scalar>
void normalize_selection(SequenceCache<Scalar>& cache) {
  const auto& reps = cache.selection.representations;
  cache.unit_norms.resize(reps.rows());
  cache.unit.resize(reps.rows(), reps.cols());
  for (Eigen::Index r = 0; r < reps.rows(); ++r) {
    const Scalar norm = reps.row(r).norm();
    if (norm == Scalar(0)) throw NumericalError("decode: zero-norm session representation");
    cache.unit_norms[r] = std::max(norm, static_cast<Scalar>(kNormEpsilon));
    cache.unit.row(r) = reps.row(r) / cache.unit_norms[r];
  }
}

// Embedding through normalised selected representations.
template <typename Scalar>
void sequence_forward(const PrefixExample& example, const ModelParameters<Scalar>& params, const ModelConfig& config,
                      DropoutSource* dropout, SequenceCache<Scalar>& cache) {
  const Matrix<Scalar> x = embed_forward(example, params, config, dropout, cache);
  cache.valid.assign(static_cast<std::size_t>(x.rows()), true);
  cache.contextual = encode_forward(x, params, config, cache.valid, dropout, cache.blocks);
  cache.intents = highway_forward(cache.contextual, cache.item_rows, params.gate, &cache.gate_input, &cache.gate_values);
  cache.selection = select_intents(cache.intents, params, config);
  normalize_selection(cache);
}

template <typename Scalar>
void sequence_backward(const Matrix<Scalar>& dunit, const ModelParameters<Scalar>& params, const ModelConfig& config,
                       const SequenceCache<Scalar>& cache, ModelParameters<Scalar>& grad) {
  const auto& sel = cache.selection;
  const Eigen::Index rows = cache.intents.rows();
  const Eigen::Index d = cache.intents.cols();
  const Eigen::Index len = rows - 1;

  // Through normalisation and the gamma scaling.
  Matrix<Scalar> dintents = Matrix<Scalar>::Zero(rows, d);
  Vector<Scalar> dgamma = Vector<Scalar>::Zero(rows);
  for (Eigen::Index r = 0; r < sel.k(); ++r) {
    const Eigen::Index i = sel.selected[static_cast<std::size_t>(r)];
    const auto unit = cache.unit.row(r);
    const RowVector<Scalar> dunit_r = dunit.row(r);
    RowVector<Scalar> drep = (dunit_r - unit * unit.dot(dunit_r)) / cache.unit_norms[r];
    dgamma[i] = drep.dot(cache.intents.row(i));
    dintents.row(i) += sel.gamma[i] * drep;
  }
  if (sel.distribution) {
    const Vector<Scalar> dscores = entmax_grad(*sel.distribution, dgamma);
    grad.intent.noalias() += cache.intents.transpose() * dscores;
    dintents.noalias() += dscores * params.intent.transpose();
  }

  // Highway.
  const auto& g = cache.gate_values;
  Matrix<Scalar> ditem_rows = g.cwiseProduct(dintents);
  Matrix<Scalar> dcontextual = dintents - ditem_rows;
  Matrix<Scalar> dgate_pre = dintents.cwiseProduct(cache.item_rows - cache.contextual);
  dgate_pre = dgate_pre.cwiseProduct(g).cwiseProduct(Matrix<Scalar>::Ones(g.rows(), g.cols()) - g);
  grad.gate.noalias() += dgate_pre.transpose() * cache.gate_input;
  const Matrix<Scalar> djoined = dgate_pre * params.gate;
  ditem_rows += djoined.leftCols(d);
  dcontextual += djoined.rightCols(d);

  // Encoder.
  Matrix<Scalar> dx = std::move(dcontextual);
  for (std::size_t l = params.blocks.size(); l-- > 0;) {
    dx = block_backward(dx, params.blocks[l], config, cache.blocks[l], grad.blocks[l]);
  }
  if (cache.input_mask.size()) dx = dx.cwiseProduct(cache.input_mask);

  // Embedding scatter.
  for (Eigen::Index i = 0; i < len; ++i) {
    const auto s = static_cast<std::size_t>(i);
    grad.item.row(cache.item_index[s]) += dx.row(i) + ditem_rows.row(i);
    if (config.use_position_embedding) grad.position.row(cache.positions[s]) += dx.row(i);
    if (config.use_frequency_embedding) grad.frequency.row(cache.frequencies[s]) += dx.row(i);
  }
  const RowVector<Scalar> dmean = (dx.row(len) + ditem_rows.row(len)) / static_cast<Scalar>(len);
  for (Eigen::Index i = 0; i < len; ++i) grad.item.row(cache.item_index[static_cast<std::size_t>(i)]) += dmean;
  if (config.use_position_embedding) grad.position.row(0) += dx.row(len);
  if (config.use_frequency_embedding) grad.frequency.row(0) += dx.row(len);
}

// Aggregated scores for one example from its k decoded rows; optionally
// records which row supplied each column's maximum.
template <typename Scalar, typename Rows>
Vector<Scalar> aggregate_rows(const Rows& rows, double beta, std::vector<Eigen::Index>* argmax) {
  const Eigen::Index k = rows.rows();
  const Eigen::Index n = rows.cols();
  if (k < 1) throw std::invalid_argument("aggregate: no distributions");
  Vector<Scalar> out(n);
  if (argmax) argmax->assign(static_cast<std::size_t>(n), 0);
  const Scalar b = static_cast<Scalar>(beta);
  const Scalar mean_weight = static_cast<Scalar>((1.0 - beta) / static_cast<double>(k));
  for (Eigen::Index j = 0; j < n; ++j) {
    Scalar best = rows(0, j);
    Scalar sum = rows(0, j);
    Eigen::Index best_row = 0;
    for (Eigen::Index r = 1; r < k; ++r) {
      const Scalar v = rows(r, j);
      sum += v;
      if (v > best) {
        best = v;
        best_row = r;
      }
    }
    out[j] = b * best + mean_weight * sum;
    if (argmax) (*argmax)[static_cast<std::size_t>(j)] = best_row;
  }
  return out;
}

template <typename Scalar>
void normalize_backward(const Matrix<Scalar>& dunit, const NormalizedItems<Scalar>& items, Matrix<Scalar>& dtable) {
  const Vector<Scalar> dots = dunit.cwiseProduct(items.rows).rowwise().sum();
  Matrix<Scalar> d = dunit - dots.asDiagonal() * items.rows;
  dtable.noalias() += items.norms.cwiseInverse().asDiagonal() * d;
}

}  // namespace

// --- Public per-stage operations ---------------------------------------------

template <typename Scalar>
Matrix<Scalar> embed_inputs(const PrefixExample& example, const ModelParameters<Scalar>& params,
                            const ModelConfig& config, DropoutSource* dropout, Matrix<Scalar>* item_rows) {
  SequenceCache<Scalar> cache;
  auto x = embed_forward(example, params, config, dropout, cache);
  if (item_rows) *item_rows = std::move(cache.item_rows);
  return x;
}

template <typename Scalar>
Matrix<Scalar> encode(const Matrix<Scalar>& inputs, const ModelParameters<Scalar>& params, const ModelConfig& config,
                      const std::vector<bool>& valid, DropoutSource* dropout) {
  if (!valid.empty() && valid.size() != static_cast<std::size_t>(inputs.rows())) {
    throw std::invalid_argument("encode: mask length does not match input rows");
  }
  const std::vector<bool> mask = valid.empty() ? std::vector<bool>(static_cast<std::size_t>(inputs.rows()), true) : valid;
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("encode: every row is masked");
  }
  std::vector<BlockCache<Scalar>> caches;
  return encode_forward(inputs, params, config, mask, dropout, caches);
}

template <typename Scalar>
Matrix<Scalar> highway(const Matrix<Scalar>& contextual, const Matrix<Scalar>& item_rows, const Matrix<Scalar>& gate) {
  return highway_forward<Scalar>(contextual, item_rows, gate, nullptr, nullptr);
}

template <typename Scalar>
IntentSet<Scalar> select_intents(const Matrix<Scalar>& intents, const ModelParameters<Scalar>& params,
                                 const ModelConfig& config) {
  const Eigen::Index rows = intents.rows();
  if (rows < 2) throw std::invalid_argument("select_intents: need at least one item row and the mean row");
  IntentSet<Scalar> set;
  set.gamma = Vector<Scalar>::Zero(rows);
  switch (config.intent_mode.kind) {
    case IntentMode::Kind::kEntmax: {
      const Vector<Scalar> scores = intents * params.intent;
      auto dist = entmax(scores, config.alpha);
      set.gamma = dist.probabilities;
      set.selected = dist.support;
      set.distribution = std::move(dist);
      break;
    }
    case IntentMode::Kind::kMean:
      set.gamma[rows - 1] = Scalar(1);
      set.selected = {rows - 1};
      break;
    case IntentMode::Kind::kLast: {
      const Eigen::Index items = rows - 1;
      const Eigen::Index k = std::min<Eigen::Index>(config.intent_mode.last_k, items);
      for (Eigen::Index i = items - k; i < items; ++i) {
        set.gamma[i] = static_cast<Scalar>(1.0 / static_cast<double>(k));
        set.selected.push_back(i);
      }
      break;
    }
  }
  set.representations.resize(set.k(), intents.cols());
  for (Eigen::Index r = 0; r < set.k(); ++r) {
    const auto i = set.selected[static_cast<std::size_t>(r)];
    set.representations.row(r) = set.gamma[i] * intents.row(i);
  }
  return set;
}

template <typename Scalar>
Matrix<Scalar> decode(const IntentSet<Scalar>& intents, const NormalizedItems<Scalar>& items) {
  if (intents.k() < 1) throw std::invalid_argument("decode: empty intent set");
  SequenceCache<Scalar> cache;
  cache.selection = intents;
  normalize_selection(cache);
  return cache.unit * items.rows.transpose();
}

template <typename Scalar>
Vector<Scalar> aggregate(const Matrix<Scalar>& distributions, double beta) {
  return aggregate_rows<Scalar>(distributions, beta, nullptr);
}

template <typename Scalar>
double loss(const Vector<Scalar>& scores, ItemIndex target, double tau) {
  if (target < 1 || target > scores.size()) throw std::out_of_range("loss: target out of range");
  if (!(tau > 0.0)) throw std::invalid_argument("loss: tau must be positive");
  const Eigen::VectorXd logits = scores.template cast<double>() / tau;
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  return lse - logits[target - 1];
}

template <typename Scalar>
ForwardResult<Scalar> forward(const PrefixExample& example, const ModelParameters<Scalar>& params,
                              const ModelConfig& config, Mode mode, DropoutSource* dropout) {
  SequenceCache<Scalar> cache;
  sequence_forward(example, params, config, mode == Mode::kTrain ? dropout : nullptr, cache);
  const auto items = NormalizedItems<Scalar>::compute(params.item);
  ForwardResult<Scalar> out;
  out.distributions = cache.unit * items.rows.transpose();
  out.scores = aggregate_rows<Scalar>(out.distributions, config.beta, nullptr);
  out.intents = std::move(cache.selection);
  out.intent_candidates = std::move(cache.intents);
  return out;
}

// --- Batched ------------------------------------------------------------------

template <typename Scalar>
double accumulate_loss(std::span<const PrefixExample> examples, const ModelParameters<Scalar>& params,
                       const ModelConfig& config, ModelParameters<Scalar>* gradients, const BatchOptions& options) {
  const bool train = !options.dropout_seeds.empty();
  if (train && options.dropout_seeds.size() != examples.size()) {
    throw std::invalid_argument("accumulate_loss: one dropout seed per example required");
  }
  const auto items = NormalizedItems<Scalar>::compute(params.item);
  const Eigen::Index n = params.item.rows();
  const Eigen::Index d = params.item.cols();
  Matrix<Scalar> dunit_items;
  if (gradients) dunit_items = Matrix<Scalar>::Zero(n, d);

  double total = 0.0;
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk_size);
  std::vector<SequenceCache<Scalar>> caches;
  for (std::size_t first = 0; first < examples.size(); first += chunk) {
    const auto count = std::min(chunk, examples.size() - first);
    caches.assign(count, {});
    std::vector<Eigen::Index> offsets(count + 1, 0);
    for (std::size_t e = 0; e < count; ++e) {
      std::optional<DropoutSource> source;
      if (train) source.emplace(options.dropout_seeds[first + e]);
      sequence_forward(examples[first + e], params, config, source ? &*source : nullptr, caches[e]);
      offsets[e + 1] = offsets[e] + caches[e].unit.rows();
    }
    Matrix<Scalar> unit(offsets[count], d);
    for (std::size_t e = 0; e < count; ++e) unit.middleRows(offsets[e], caches[e].unit.rows()) = caches[e].unit;
    Matrix<Scalar> decoded(unit.rows(), n);
    decoded.noalias() = unit * items.rows.transpose();

    Matrix<Scalar> ddecoded;
    if (gradients) ddecoded = Matrix<Scalar>::Zero(unit.rows(), n);
    std::vector<Eigen::Index> argmax;
    for (std::size_t e = 0; e < count; ++e) {
      const auto k = offsets[e + 1] - offsets[e];
      const auto rows = decoded.middleRows(offsets[e], k);
      const Vector<Scalar> scores = aggregate_rows<Scalar>(rows, config.beta, gradients ? &argmax : nullptr);
      const ItemIndex target = examples[first + e].target;
      const double value = loss(scores, target, config.tau);
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at example " + std::to_string(first + e));
      }
      total += value;
      if (!gradients) continue;

      // d loss / d scores = (softmax(scores / tau) - onehot) / tau
      Eigen::VectorXd logits = scores.template cast<double>() / config.tau;
      logits = (logits.array() - logits.maxCoeff()).exp();
      logits /= logits.sum();
      logits[target - 1] -= 1.0;
      logits /= config.tau;
      const Vector<Scalar> dscores = logits.template cast<Scalar>();
      const Scalar mean_weight = static_cast<Scalar>((1.0 - config.beta) / static_cast<double>(k));
      auto drows = ddecoded.middleRows(offsets[e], k);
      for (Eigen::Index r = 0; r < k; ++r) drows.row(r) = mean_weight * dscores.transpose();
      const Scalar b = static_cast<Scalar>(config.beta);
      for (Eigen::Index j = 0; j < n; ++j) drows(argmax[static_cast<std::size_t>(j)], j) += b * dscores[j];
    }
    if (!gradients) continue;

    const Matrix<Scalar> dunit = ddecoded * items.rows;
    dunit_items.noalias() += ddecoded.transpose() * unit;
    for (std::size_t e = 0; e < count; ++e) {
      const auto k = offsets[e + 1] - offsets[e];
      sequence_backward<Scalar>(dunit.middleRows(offsets[e], k), params, config, caches[e], *gradients);
    }
  }
  if (gradients) normalize_backward(dunit_items, items, gradients->item);
  return total;
}

namespace detail {

template <typename Scalar>
Matrix<Scalar> score_chunk(std::span<const PrefixExample> examples, const ModelParameters<Scalar>& params,
                           const ModelConfig& config, const NormalizedItems<Scalar>& items) {
  const Eigen::Index d = params.item.cols();
  std::vector<SequenceCache<Scalar>> caches(examples.size());
  std::vector<Eigen::Index> offsets(examples.size() + 1, 0);
  for (std::size_t e = 0; e < examples.size(); ++e) {
    sequence_forward(examples[e], params, config, nullptr, caches[e]);
    offsets[e + 1] = offsets[e] + caches[e].unit.rows();
  }
  Matrix<Scalar> unit(offsets.back(), d);
  for (std::size_t e = 0; e < examples.size(); ++e) unit.middleRows(offsets[e], caches[e].unit.rows()) = caches[e].unit;
  Matrix<Scalar> decoded(unit.rows(), items.rows.rows());
  decoded.noalias() = unit * items.rows.transpose();
  Matrix<Scalar> out(static_cast<Eigen::Index>(examples.size()), items.rows.rows());
  for (std::size_t e = 0; e < examples.size(); ++e) {
    out.row(static_cast<Eigen::Index>(e)) =
        aggregate_rows<Scalar>(decoded.middleRows(offsets[e], offsets[e + 1] - offsets[e]), config.beta, nullptr).transpose();
  }
  return out;
}

}  // namespace detail

#define MIASREC_INSTANTIATE(S)                                                                                      \
  template struct ModelParameters<S>;                                                                               \
  template struct NormalizedItems<S>;                                                                               \
  template Matrix<S> embed_inputs<S>(const PrefixExample&, const ModelParameters<S>&, const ModelConfig&,           \
                                     DropoutSource*, Matrix<S>*);                                                   \
  template Matrix<S> encode<S>(const Matrix<S>&, const ModelParameters<S>&, const ModelConfig&,                     \
                               const std::vector<bool>&, DropoutSource*);                                           \
  template Matrix<S> highway<S>(const Matrix<S>&, const Matrix<S>&, const Matrix<S>&);                              \
  template IntentSet<S> select_intents<S>(const Matrix<S>&, const ModelParameters<S>&, const ModelConfig&);         \
  template Matrix<S> decode<S>(const IntentSet<S>&, const NormalizedItems<S>&);                                     \
  template Vector<S> aggregate<S>(const Matrix<S>&, double);                                                        \
  template double loss<S>(const Vector<S>&, ItemIndex, double);                                                     \
  template ForwardResult<S> forward<S>(const PrefixExample&, const ModelParameters<S>&, const ModelConfig&, Mode,   \
                                       DropoutSource*);                                                             \
  template double accumulate_loss<S>(std::span<const PrefixExample>, const ModelParameters<S>&, const ModelConfig&, \
                                     ModelParameters<S>*, const BatchOptions&);                                     \
  template Matrix<S> detail::score_chunk<S>(std::span<const PrefixExample>, const ModelParameters<S>&,              \
                                            const ModelConfig&, const NormalizedItems<S>&);

MIASREC_INSTANTIATE(float)
MIASREC_INSTANTIATE(double)

#undef MIASREC_INSTANTIATE

}  // namespace miasrec
