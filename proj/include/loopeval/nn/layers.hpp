#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "loopeval/nn/tensor.hpp"

namespace loopeval::nn {

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Linear: y = x W (+ b), W shaped [in, out].
// ---------------------------------------------------------------------------

template <typename Real>
std::vector<Real> linear_forward(std::span<const Real> x, const ParamTensor<Real>& weight,
                                 const ParamTensor<Real>* bias);

/// Row-wise application to a [n, in] matrix.
template <typename Real>
Matrix<Real> linear_forward(const Matrix<Real>& x, const ParamTensor<Real>& weight,
                            const ParamTensor<Real>* bias);

/// Accumulates dW, db and (when dx is non-empty) adds the input gradient into dx.
template <typename Real>
void linear_backward(std::span<const Real> x, ParamTensor<Real>& weight, ParamTensor<Real>* bias,
                     std::span<const Real> dy, std::span<Real> dx);

// ---------------------------------------------------------------------------
// Layer normalization over a single vector.
// ---------------------------------------------------------------------------

template <typename Real>
struct LayerNormCache {
  std::vector<Real> xhat;
  Real rstd = 0;
};

template <typename Real>
std::vector<Real> layernorm_forward(std::span<const Real> x, const ParamTensor<Real>& gain,
                                    const ParamTensor<Real>* bias, Real eps,
                                    LayerNormCache<Real>* cache = nullptr);

template <typename Real>
void layernorm_backward(const LayerNormCache<Real>& cache, ParamTensor<Real>& gain,
                        ParamTensor<Real>* bias, std::span<const Real> dy, std::span<Real> dx);

// ---------------------------------------------------------------------------
// GELU, exact erf form.
// ---------------------------------------------------------------------------

template <typename Real>
Real gelu(Real x);

template <typename Real>
Real gelu_derivative(Real x);

// ---------------------------------------------------------------------------
// Softmax restricted to positions where mask == 1.
// ---------------------------------------------------------------------------

/// Throws ConfigError when no position is unmasked.
template <typename Real>
std::vector<Real> masked_softmax(std::span<const Real> logits, std::span<const std::uint8_t> mask);

/// Vector-Jacobian product of masked_softmax given its output probabilities.
template <typename Real>
std::vector<Real> masked_softmax_backward(std::span<const Real> probs, std::span<const Real> dprobs);

// ---------------------------------------------------------------------------
// Low-rank attention pooling: weights = masked_softmax(H K q), pooled = weights^T H.
// ---------------------------------------------------------------------------

template <typename Real>
struct AttentionPoolCache {
  std::vector<Real> weights;    // length L
  std::vector<Real> key_query;  // K q, length d
};

template <typename Real>
std::vector<Real> attention_pool(const Matrix<Real>& hidden, std::span<const std::uint8_t> mask,
                                 const ParamTensor<Real>& keys, const ParamTensor<Real>& query,
                                 AttentionPoolCache<Real>* cache = nullptr);

/// Accumulates gradients into keys/query; adds into dhidden when it is non-null.
template <typename Real>
void attention_pool_backward(const Matrix<Real>& hidden, const AttentionPoolCache<Real>& cache,
                             ParamTensor<Real>& keys, ParamTensor<Real>& query,
                             std::span<const Real> dpooled, Matrix<Real>* dhidden);

// ---------------------------------------------------------------------------
// Multi-layer GRU (update gate z, reset gate r, candidate n), zero initial state.
//
//   r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//   z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
//   n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//   h' = (1 - z) * n + z * h
//
// Gate blocks are laid out [r | z | n] along the 3H axis.
// ---------------------------------------------------------------------------

template <typename Real>
struct GruLayerParams {
  ParamTensor<Real> w_ih;  // [in, 3H]
  ParamTensor<Real> w_hh;  // [H, 3H]
  ParamTensor<Real> b_ih;  // [3H]
  ParamTensor<Real> b_hh;  // [3H]
};

template <typename Real>
struct GruParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::vector<GruLayerParams<Real>> layers;

  GruParams() = default;
  GruParams(const std::string& prefix, std::size_t input_dim, std::size_t hidden_dim,
            std::size_t num_layers);

  void collect(ParamRefs<Real>& out);
  void collect(ConstParamRefs<Real>& out) const;
  static std::size_t count(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_layers);
};

template <typename Real>
struct GruStepCache {
  std::vector<Real> x, h_prev, r, z, n, hn;
};

template <typename Real>
struct GruCache {
  std::vector<std::vector<GruStepCache<Real>>> layers;  // [layer][t]
};

/// Runs the stack over inputs and returns the top layer's final hidden state.
template <typename Real>
std::vector<Real> gru_forward(const std::vector<std::vector<Real>>& inputs, const GruParams<Real>& params,
                              GruCache<Real>* cache = nullptr);

/// Backpropagates dh_final through time; returns gradients w.r.t. each input vector.
template <typename Real>
std::vector<std::vector<Real>> gru_backward(const GruCache<Real>& cache, GruParams<Real>& params,
                                            std::span<const Real> dh_final);

// ---------------------------------------------------------------------------
// Inverted dropout.
// ---------------------------------------------------------------------------

/// Returns per-element multipliers (0 or 1/(1-p)); all ones when not training or p == 0.
template <typename Real>
std::vector<Real> dropout_mask(std::size_t n, Real p, bool training, Rng* rng);

template <typename Real>
std::vector<Real> dropout(std::span<const Real> x, Real p, bool training, Rng* rng,
                          std::vector<Real>* mask_out = nullptr);

// ---------------------------------------------------------------------------
// Initializers.
// ---------------------------------------------------------------------------

template <typename Real>
void init_normal(ParamTensor<Real>& p, Real stddev, Rng& rng);

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
template <typename Real>
void init_fan_in(ParamTensor<Real>& p, std::size_t fan_in, Rng& rng);

template <typename Real>
void init_constant(ParamTensor<Real>& p, Real value);

}  // namespace loopeval::nn
