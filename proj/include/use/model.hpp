#pragma once

// The sequence model: behavior embeddings, a stack of pre-norm retention
// blocks, a final layer norm, and linear heads for future-behavior and
// next-behavior prediction.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "use/io.hpp"
#include "use/retention.hpp"
#include "use/tensor.hpp"

namespace use {

struct ModelConfig {
  int vocab_size = 66;  // 64 behaviors + pad + new_session
  int num_layers = 2;
  int num_heads = 2;
  int hidden_size = 32;
  int ffn_size = 128;
  int num_predicted = 64;  // N, behaviors of interest
  int future_window = 16;  // W
  int max_seq_len = 256;
  int chunk_len = 64;
  bool clm_head = true;
  bool normalized_retention = false;

  int head_dim() const { return hidden_size / num_heads; }
  RetentionConfig retention() const { return {num_heads, head_dim(), normalized_retention}; }

  // Throws ConfigError naming the first invalid field.
  void validate() const;

  std::string serialize() const;
  static ModelConfig parse(std::string_view text);

  // 12 layers, 8 heads, hidden 768, intermediate 3072, W = 100.
  static ModelConfig large();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct BlockWeights {
  T ln1_gain, ln1_bias;
  RetentionWeights<T> retention;
  T ln2_gain, ln2_bias;
  T ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Model weights, generic over storage (Matrix for parameters, Tensor for a
// graph binding). The declared field order is the serialization order.
template <typename T>
struct Weights {
  T embedding;
  std::vector<BlockWeights<T>> blocks;
  T final_gain, final_bias;
  T fbp_w, fbp_b;
  T clm_w, clm_b;
};

template <typename T>
Weights<T> weights_layout(const ModelConfig& config) {
  Weights<T> w;
  w.blocks.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& b : w.blocks) {
    b.retention.wq.resize(static_cast<std::size_t>(config.num_heads));
    b.retention.wk.resize(static_cast<std::size_t>(config.num_heads));
    b.retention.wv.resize(static_cast<std::size_t>(config.num_heads));
  }
  return w;
}

// Calls f(name, field) for every weight in declared order.
template <typename W, typename F>
void visit_weights(W& w, const ModelConfig& config, F&& f) {
  f(std::string("embedding"), w.embedding);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    f(p + "ln1_gain", b.ln1_gain);
    f(p + "ln1_bias", b.ln1_bias);
    for (std::size_t h = 0; h < b.retention.wq.size(); ++h) {
      f(p + "wq." + std::to_string(h), b.retention.wq[h]);
      f(p + "wk." + std::to_string(h), b.retention.wk[h]);
      f(p + "wv." + std::to_string(h), b.retention.wv[h]);
    }
    f(p + "wo", b.retention.wo);
    f(p + "ln2_gain", b.ln2_gain);
    f(p + "ln2_bias", b.ln2_bias);
    f(p + "ffn_w1", b.ffn_w1);
    f(p + "ffn_b1", b.ffn_b1);
    f(p + "ffn_w2", b.ffn_w2);
    f(p + "ffn_b2", b.ffn_b2);
  }
  f(std::string("final_gain"), w.final_gain);
  f(std::string("final_bias"), w.final_bias);
  f(std::string("fbp_w"), w.fbp_w);
  f(std::string("fbp_b"), w.fbp_b);
  if (config.clm_head) {
    f(std::string("clm_w"), w.clm_w);
    f(std::string("clm_b"), w.clm_b);
  }
}

enum class WeightRole { Gain, Bias, Matrix };

inline WeightRole weight_role(std::string_view name) {
  if (name.ends_with("_gain")) return WeightRole::Gain;
  if (name.ends_with("_b") || name.ends_with("_bias") || name.ends_with("_b1") || name.ends_with("_b2")) {
    return WeightRole::Bias;
  }
  return WeightRole::Matrix;
}

template <typename Scalar>
struct Parameters {
  ModelConfig config;
  Weights<Matrix<Scalar>> weights;

  template <typename Other>
  Parameters<Other> cast() const {
    Parameters<Other> out{config, weights_layout<Matrix<Other>>(config)};
    std::vector<const Matrix<Scalar>*> src;
    visit_weights(weights, config, [&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    visit_weights(out.weights, config, [&](const std::string&, Matrix<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_weights(weights, config, [&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }
};

// Expected shape of every weight, in declared order.
inline std::vector<std::pair<std::string, Shape>> weight_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  auto w = weights_layout<Shape>(c);
  const Index d = c.hidden_size;
  w.embedding = {c.vocab_size, d};
  for (auto& b : w.blocks) {
    b.ln1_gain = b.ln1_bias = b.ln2_gain = b.ln2_bias = {1, d};
    for (std::size_t h = 0; h < b.retention.wq.size(); ++h) {
      b.retention.wq[h] = b.retention.wk[h] = b.retention.wv[h] = {d, c.head_dim()};
    }
    b.retention.wo = {d, d};
    b.ffn_w1 = {d, c.ffn_size};
    b.ffn_b1 = {1, c.ffn_size};
    b.ffn_w2 = {c.ffn_size, d};
    b.ffn_b2 = {1, d};
  }
  w.final_gain = w.final_bias = {1, d};
  w.fbp_w = {d, c.num_predicted};
  w.fbp_b = {1, c.num_predicted};
  w.clm_w = {d, c.vocab_size};
  w.clm_b = {1, c.vocab_size};
  visit_weights(w, c, [&](const std::string& name, const Shape& s) { out.emplace_back(name, s); });
  return out;
}

// Matrices ~ N(0, 0.02), biases 0, layer-norm gains 1.
template <typename Scalar>
Parameters<Scalar> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters<Scalar> p{config, weights_layout<Matrix<Scalar>>(config)};
  const auto shapes = weight_shapes(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  std::size_t i = 0;
  visit_weights(p.weights, config, [&](const std::string& name, Matrix<Scalar>& m) {
    const Shape s = shapes[i++].second;
    switch (weight_role(name)) {
      case WeightRole::Gain: m = Matrix<Scalar>::Ones(s.rows, s.cols); break;
      case WeightRole::Bias: m = Matrix<Scalar>::Zero(s.rows, s.cols); break;
      case WeightRole::Matrix:
        m.resize(s.rows, s.cols);
        for (Index r = 0; r < s.rows; ++r) {
          for (Index c = 0; c < s.cols; ++c) m(r, c) = static_cast<Scalar>(normal(rng));
        }
        break;
    }
  });
  return p;
}

// Content hash over the config and every weight value (row-major).
template <typename Scalar>
std::uint64_t fingerprint(const Parameters<Scalar>& p) {
  Fnv1a h;
  h.update(p.config.serialize());
  visit_weights(p.weights, p.config, [&](const std::string&, const Matrix<Scalar>& m) {
    h.update_value(static_cast<std::int64_t>(m.rows()));
    h.update_value(static_cast<std::int64_t>(m.cols()));
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) h.update_value(m(r, c));
    }
  });
  return h.digest();
}

void save_params(const Parameters<float>& params, const std::filesystem::path& path);
// When expected is given, a file declaring a different config is rejected.
Parameters<float> load_params(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

template <typename Scalar>
Weights<Tensor<Scalar>> bind_weights(Graph<Scalar>& graph, const Parameters<Scalar>& params, bool trainable) {
  auto out = weights_layout<Tensor<Scalar>>(params.config);
  std::vector<const Matrix<Scalar>*> src;
  visit_weights(params.weights, params.config, [&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
  std::size_t i = 0;
  visit_weights(out, params.config, [&](const std::string&, Tensor<Scalar>& t) { t = graph.leaf(*src[i++], trainable); });
  return out;
}

// Per-layer retention states plus bookkeeping.
template <typename Scalar>
struct ModelState {
  std::vector<LayerState<Scalar>> layers;
  std::int64_t tokens_processed = 0;
  std::uint64_t fingerprint = 0;
};

template <typename Scalar>
ModelState<Scalar> zero_model_state(const ModelConfig& config, std::uint64_t fp) {
  ModelState<Scalar> s;
  s.fingerprint = fp;
  s.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : s.layers) {
    layer.heads.assign(static_cast<std::size_t>(config.num_heads),
                       HeadState<Scalar>::zero(config.head_dim(), config.head_dim()));
  }
  return s;
}

// Hidden states for ids on a bound graph. With state_in the block continues
// from that state; state_out, when given, receives the per-layer states after
// the block (tokens_processed and fingerprint are left to the caller).
template <typename Scalar>
Tensor<Scalar> forward_hidden(const Weights<Tensor<Scalar>>& w, const ModelConfig& config, std::span<const int> ids,
                              const std::type_identity_t<ModelState<Scalar>>* state_in = nullptr,
                              std::type_identity_t<ModelState<Scalar>>* state_out = nullptr) {
  if (ids.empty()) throw EmptyInputError("forward: empty behavior sequence");
  if (state_in && state_in->layers.size() != w.blocks.size()) {
    throw ConfigError("model state has " + std::to_string(state_in->layers.size()) + " layers, model has " +
                      std::to_string(w.blocks.size()));
  }
  if (state_out) state_out->layers.assign(w.blocks.size(), {});
  const RetentionConfig rc = config.retention();
  Tensor<Scalar> x = gather_rows(w.embedding, ids);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const Tensor<Scalar> h = layer_norm(x, b.ln1_gain, b.ln1_bias);
    x = x + multi_head_retention(h, b.retention, rc, state_in ? &state_in->layers[l] : nullptr,
                                 state_out ? &state_out->layers[l] : nullptr);
    const Tensor<Scalar> h2 = layer_norm(x, b.ln2_gain, b.ln2_bias);
    x = x + affine(gelu(affine(h2, b.ffn_w1, b.ffn_b1)), b.ffn_w2, b.ffn_b2);
  }
  return layer_norm(x, w.final_gain, w.final_bias);
}

template <typename Scalar>
Tensor<Scalar> fbp_logits(const Weights<Tensor<Scalar>>& w, const Tensor<Scalar>& hidden) {
  return affine(hidden, w.fbp_w, w.fbp_b);
}

template <typename Scalar>
Tensor<Scalar> clm_logits(const Weights<Tensor<Scalar>>& w, const ModelConfig& config, const Tensor<Scalar>& hidden) {
  if (!config.clm_head) throw ConfigError("model was configured without a next-behavior head");
  return affine(hidden, w.clm_w, w.clm_b);
}

// Mean of the unmasked rows of hidden; valid(r) marks row r as real input.
template <typename Scalar>
RowVector<Scalar> embed(const Matrix<Scalar>& hidden, const Eigen::Array<bool, Eigen::Dynamic, 1>& valid) {
  if (valid.size() != hidden.rows()) throw DimensionError("embed: mask length differs from hidden rows");
  RowVector<Scalar> acc = RowVector<Scalar>::Zero(hidden.cols());
  Index n = 0;
  for (Index r = 0; r < hidden.rows(); ++r) {
    if (valid(r)) {
      acc += hidden.row(r);
      ++n;
    }
  }
  if (n == 0) throw EmptyInputError("embed: every position is masked");
  return acc / static_cast<Scalar>(n);
}

template <typename Scalar>
RowVector<Scalar> embed(const Matrix<Scalar>& hidden) {
  if (hidden.rows() == 0) throw EmptyInputError("embed: no hidden states");
  return hidden.colwise().mean();
}

// An immutable parameter snapshot with its cached fingerprint; the entry point
// for inference.
template <typename Scalar>
class Model {
 public:
  explicit Model(Parameters<Scalar> params) : params_(std::move(params)), fingerprint_(use::fingerprint(params_)) {
    params_.config.validate();
  }

  const ModelConfig& config() const { return params_.config; }
  const Parameters<Scalar>& parameters() const { return params_; }
  std::uint64_t fingerprint() const { return fingerprint_; }

  ModelState<Scalar> initial_state() const { return zero_model_state<Scalar>(config(), fingerprint_); }

  Matrix<Scalar> forward_parallel(std::span<const int> ids) const {
    check_length(ids.size());
    Graph<Scalar> g(false);
    const auto w = bind_weights(g, params_, false);
    return forward_hidden(w, config(), ids).value();
  }

  // Sequences may differ in length; each result has that sequence's rows.
  std::vector<Matrix<Scalar>> forward_parallel(const std::vector<std::vector<int>>& batch) const {
    Graph<Scalar> g(false);
    const auto w = bind_weights(g, params_, false);
    std::vector<Matrix<Scalar>> out;
    out.reserve(batch.size());
    for (const auto& ids : batch) {
      check_length(ids.size());
      out.push_back(forward_hidden(w, config(), std::span<const int>(ids)).value());
    }
    return out;
  }

  struct ChunkOutput {
    Matrix<Scalar> hidden;
    ModelState<Scalar> state;
  };

  ChunkOutput forward_chunkwise(std::span<const int> chunk, const ModelState<Scalar>& state) const {
    if (chunk.empty()) throw EmptyInputError("forward_chunkwise: empty chunk");
    check_state(state);
    check_length(chunk.size());
    Graph<Scalar> g(false);
    const auto w = bind_weights(g, params_, false);
    ChunkOutput out;
    out.hidden = forward_hidden(w, config(), chunk, &state, &out.state).value();
    out.state.tokens_processed = state.tokens_processed + static_cast<std::int64_t>(chunk.size());
    out.state.fingerprint = fingerprint_;
    return out;
  }

  // Runs ids through the chunkwise path in blocks of config().chunk_len.
  ChunkOutput forward_stream(std::span<const int> ids, const ModelState<Scalar>& state) const {
    if (ids.empty()) throw EmptyInputError("forward_stream: empty input");
    check_state(state);
    Graph<Scalar> g(false);
    const auto w = bind_weights(g, params_, false);
    ChunkOutput out;
    out.state = state;
    out.hidden.resize(static_cast<Index>(ids.size()), config().hidden_size);
    const std::size_t step = static_cast<std::size_t>(config().chunk_len);
    for (std::size_t start = 0; start < ids.size(); start += step) {
      const auto chunk = ids.subspan(start, std::min(step, ids.size() - start));
      ModelState<Scalar> next;
      const Tensor<Scalar> h = forward_hidden(w, config(), chunk, &out.state, &next);
      out.hidden.middleRows(static_cast<Index>(start), static_cast<Index>(chunk.size())) = h.value();
      next.tokens_processed = out.state.tokens_processed + static_cast<std::int64_t>(chunk.size());
      next.fingerprint = fingerprint_;
      out.state = std::move(next);
    }
    return out;
  }

  Matrix<Scalar> fbp_logits(const Matrix<Scalar>& hidden) const {
    Matrix<Scalar> out = hidden * params_.weights.fbp_w;
    out.rowwise() += params_.weights.fbp_b.row(0);
    return out;
  }

  Matrix<Scalar> clm_logits(const Matrix<Scalar>& hidden) const {
    if (!config().clm_head) throw ConfigError("model was configured without a next-behavior head");
    Matrix<Scalar> out = hidden * params_.weights.clm_w;
    out.rowwise() += params_.weights.clm_b.row(0);
    return out;
  }

  void check_state(const ModelState<Scalar>& state) const {
    if (state.fingerprint != fingerprint_) {
      throw StaleStateError("state was produced by parameters " + to_hex(state.fingerprint) + ", model is " +
                            to_hex(fingerprint_));
    }
  }

 private:
  void check_length(std::size_t n) const {
    if (n > static_cast<std::size_t>(config().max_seq_len)) {
      throw LengthError("sequence of " + std::to_string(n) + " exceeds max_seq_len " +
                        std::to_string(config().max_seq_len));
    }
  }

  Parameters<Scalar> params_;
  std::uint64_t fingerprint_;
};

}  // namespace use
