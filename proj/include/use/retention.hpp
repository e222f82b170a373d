#pragma once

// Retention in its three interchangeable execution forms.
//
//   parallel   O = (Q K^T (.) D) V,           D[n,m] = gamma^(n-m) for n >= m
//   recurrent  S_n = gamma S_{n-1} + k_n^T v_n,  o_n = q_n S_n
//   chunkwise  parallel inside a chunk, plus the decayed carry-in state
//
// All three produce the same outputs; the chunkwise form is what lets a
// stored state absorb new tokens at a cost independent of history length.

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "use/tensor.hpp"

namespace use {

template <typename Scalar>
void check_decay(Scalar gamma) {
  if (!(gamma > Scalar(0) && gamma < Scalar(1))) {
    throw ConfigError("retention decay must lie strictly inside (0, 1), got " + std::to_string(static_cast<double>(gamma)));
  }
}

// Decay of head h: 1 - 2^-(5 + h).
inline double head_decay(int head) { return 1.0 - std::ldexp(1.0, -(5 + head)); }

// Per-head recurrent memory, d_k x d_v.
template <typename Scalar>
struct HeadState {
  Matrix<Scalar> s;

  static HeadState zero(Index key_dim, Index value_dim) { return {Matrix<Scalar>::Zero(key_dim, value_dim)}; }
};

template <typename Scalar>
struct LayerState {
  std::vector<HeadState<Scalar>> heads;
};

template <typename Scalar>
Matrix<Scalar> decay_mask(Index length, Scalar gamma) {
  Vector<Scalar> powers(length);
  for (Index j = 0; j < length; ++j) powers(j) = std::pow(gamma, static_cast<Scalar>(j));
  Matrix<Scalar> d = Matrix<Scalar>::Zero(length, length);
  for (Index m = 0; m < length; ++m) d.col(m).tail(length - m) = powers.head(length - m);
  return d;
}

namespace detail {

template <typename Scalar>
void check_qkv(const Matrix<Scalar>& q, const Matrix<Scalar>& k, const Matrix<Scalar>& v) {
  if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols()) {
    throw DimensionError("retention: q " + shape_of(q).str() + ", k " + shape_of(k).str() + ", v " +
                         shape_of(v).str() + " are incompatible");
  }
}

// gamma^1 .. gamma^rows as a column.
template <typename Scalar>
Vector<Scalar> decay_powers(Index rows, Scalar gamma) {
  Vector<Scalar> p(rows);
  for (Index i = 0; i < rows; ++i) p(i) = std::pow(gamma, static_cast<Scalar>(i + 1));
  return p;
}

}  // namespace detail

template <typename Scalar>
Matrix<Scalar> retention_parallel(const Matrix<Scalar>& q, const Matrix<Scalar>& k, const Matrix<Scalar>& v,
                                  Scalar gamma) {
  check_decay(gamma);
  detail::check_qkv(q, k, v);
  if (q.rows() == 0) throw EmptyInputError("retention_parallel: empty sequence");
  const Matrix<Scalar> scores = (q * k.transpose()).cwiseProduct(decay_mask(q.rows(), gamma));
  return scores * v;
}

template <typename Scalar>
struct RecurrentStep {
  RowVector<Scalar> output;
  HeadState<Scalar> state;
};

template <typename Scalar>
RecurrentStep<Scalar> retention_recurrent_step(const RowVector<Scalar>& q, const RowVector<Scalar>& k,
                                               const RowVector<Scalar>& v, const HeadState<Scalar>& state,
                                               Scalar gamma) {
  check_decay(gamma);
  if (q.size() != k.size() || state.s.rows() != k.size() || state.s.cols() != v.size()) {
    throw DimensionError("retention_recurrent_step: state " + shape_of(state.s).str() + " vs k " +
                         std::to_string(k.size()) + ", v " + std::to_string(v.size()));
  }
  RecurrentStep<Scalar> step;
  step.state.s = gamma * state.s + k.transpose() * v;
  step.output = q * step.state.s;
  return step;
}

template <typename Scalar>
struct ChunkResult {
  Matrix<Scalar> output;
  HeadState<Scalar> state;
};

// State after absorbing a chunk: gamma^C S_in + sum_m gamma^(C-m) k_m^T v_m.
template <typename Scalar>
HeadState<Scalar> retention_state_update(const Matrix<Scalar>& k, const Matrix<Scalar>& v,
                                         const HeadState<Scalar>& state_in, Scalar gamma) {
  const Index c = k.rows();
  Vector<Scalar> weights(c);
  for (Index m = 0; m < c; ++m) weights(m) = std::pow(gamma, static_cast<Scalar>(c - 1 - m));
  HeadState<Scalar> out;
  out.s = std::pow(gamma, static_cast<Scalar>(c)) * state_in.s + k.transpose() * weights.asDiagonal() * v;
  return out;
}

template <typename Scalar>
ChunkResult<Scalar> retention_chunkwise(const Matrix<Scalar>& q, const Matrix<Scalar>& k, const Matrix<Scalar>& v,
                                        const HeadState<Scalar>& state_in, Scalar gamma) {
  check_decay(gamma);
  detail::check_qkv(q, k, v);
  if (q.rows() == 0) throw EmptyInputError("retention_chunkwise: empty chunk");
  if (state_in.s.rows() != k.cols() || state_in.s.cols() != v.cols()) {
    throw DimensionError("retention_chunkwise: state " + shape_of(state_in.s).str() + " for d_k=" +
                         std::to_string(k.cols()) + ", d_v=" + std::to_string(v.cols()));
  }
  ChunkResult<Scalar> r;
  r.output = (q * k.transpose()).cwiseProduct(decay_mask(q.rows(), gamma)) * v;
  r.output.noalias() += detail::decay_powers(q.rows(), gamma).asDiagonal() * (q * state_in.s);
  r.state = retention_state_update(k, v, state_in, gamma);
  return r;
}

// Differentiable single-head retention with an optional carried-in state.
// The state is treated as a constant; when state_out is given it receives the
// state after this block.
template <typename Scalar>
Tensor<Scalar> retention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                         std::type_identity_t<Scalar> gamma,
                         const std::type_identity_t<HeadState<Scalar>>* state_in = nullptr,
                         std::type_identity_t<HeadState<Scalar>>* state_out = nullptr) {
  auto& g = detail::same_graph(q, k, "retention");
  const Index dk = k.shape().cols;
  const Index dv = v.shape().cols;
  const HeadState<Scalar> carry = state_in ? *state_in : HeadState<Scalar>::zero(dk, dv);
  ChunkResult<Scalar> r = retention_chunkwise(q.value(), k.value(), v.value(), carry, gamma);
  if (state_out) *state_out = std::move(r.state);
  return g.record(std::move(r.output), "retention", {q, k, v},
                  [q, k, v, gamma, s_in = carry.s](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
                    const Index c = q.shape().rows;
                    const Matrix<Scalar> mask = decay_mask(c, gamma);
                    if (v.requires_grad()) {
                      g.accumulate(v, (q.value() * k.value().transpose()).cwiseProduct(mask).transpose() * dout);
                    }
                    const Matrix<Scalar> d_scores = (dout * v.value().transpose()).cwiseProduct(mask);
                    if (q.requires_grad()) {
                      Matrix<Scalar> dq = d_scores * k.value();
                      dq.noalias() += detail::decay_powers(c, gamma).asDiagonal() * (dout * s_in.transpose());
                      g.accumulate(q, dq);
                    }
                    if (k.requires_grad()) g.accumulate(k, d_scores.transpose() * q.value());
                  });
}

struct RetentionConfig {
  int num_heads = 1;
  int head_dim = 1;
  // Reserved for a group-normalized variant of the head outputs; only the
  // plain form is implemented.
  bool normalized = false;

  double decay(int head) const { return head_decay(head); }
};

// Projection weights of one retention sublayer, generic over storage so the
// same layout serves plain matrices and graph tensors.
template <typename T>
struct RetentionWeights {
  std::vector<T> wq;  // per head, d x head_dim
  std::vector<T> wk;
  std::vector<T> wv;
  T wo;  // d x d
};

// Multi-head retention over x (T x d). Each head projects, runs retention
// with its own decay, and the concatenated heads pass through wo.
template <typename Scalar>
Tensor<Scalar> multi_head_retention(const Tensor<Scalar>& x, const RetentionWeights<Tensor<Scalar>>& w,
                                    const RetentionConfig& config,
                                    const std::type_identity_t<LayerState<Scalar>>* state_in = nullptr,
                                    std::type_identity_t<LayerState<Scalar>>* state_out = nullptr) {
  if (config.normalized) throw ConfigError("normalized retention variant is reserved and not available");
  const Index d = x.shape().cols;
  if (config.num_heads <= 0 || d % config.num_heads != 0 || d / config.num_heads != config.head_dim) {
    throw ConfigError("hidden size " + std::to_string(d) + " not divisible into " + std::to_string(config.num_heads) +
                      " heads of " + std::to_string(config.head_dim));
  }
  if (static_cast<int>(w.wq.size()) != config.num_heads || w.wk.size() != w.wq.size() || w.wv.size() != w.wq.size()) {
    throw ConfigError("retention weights carry " + std::to_string(w.wq.size()) + " heads, config expects " +
                      std::to_string(config.num_heads));
  }
  if (state_in && static_cast<int>(state_in->heads.size()) != config.num_heads) {
    throw ConfigError("layer state has " + std::to_string(state_in->heads.size()) + " heads, config expects " +
                      std::to_string(config.num_heads));
  }
  if (state_out) state_out->heads.assign(static_cast<std::size_t>(config.num_heads), {});
  const Scalar key_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(config.head_dim));
  std::vector<Tensor<Scalar>> heads;
  heads.reserve(static_cast<std::size_t>(config.num_heads));
  for (int h = 0; h < config.num_heads; ++h) {
    const auto hs = static_cast<std::size_t>(h);
    const Tensor<Scalar> q = matmul(x, w.wq[hs]);
    const Tensor<Scalar> k = scale(matmul(x, w.wk[hs]), key_scale);
    const Tensor<Scalar> v = matmul(x, w.wv[hs]);
    heads.push_back(retention(q, k, v, static_cast<Scalar>(config.decay(h)), state_in ? &state_in->heads[hs] : nullptr,
                              state_out ? &state_out->heads[hs] : nullptr));
  }
  const Tensor<Scalar> joined = heads.size() == 1 ? heads.front() : concat_cols(heads);
  return matmul(joined, w.wo);
}

}  // namespace use
