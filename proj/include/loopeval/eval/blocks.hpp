#pragma once

#include <optional>
#include <string>
#include <vector>

#include "loopeval/features/records.hpp"
#include "loopeval/nn/layers.hpp"

namespace loopeval::eval {

using nn::Matrix;
using nn::ParamTensor;
using nn::Rng;

inline constexpr double kLayerNormEps = 1e-5;

/// A record's loop states expanded to compute precision.
template <typename Real>
struct DenseRecord {
  std::vector<Matrix<Real>> steps;  // each [seq_len, hidden]
  std::vector<std::uint8_t> mask;

  std::size_t hidden() const { return steps.empty() ? 0 : steps.front().cols; }
};

template <typename Real>
DenseRecord<Real> to_dense(const features::LoopStateRecord& record);

/// Per-step masked mean in compute precision, [steps, hidden].
template <typename Real>
Matrix<Real> mean_pool_dense(const DenseRecord<Real>& record);

/// Shared low-rank attention pool (keys [d, r] without bias, query [r]).
template <typename Real>
struct PoolBlock {
  ParamTensor<Real> keys;
  ParamTensor<Real> query;

  PoolBlock() = default;
  PoolBlock(std::size_t hidden, std::size_t rank);
  void init(Rng& rng);
  void collect(nn::ParamRefs<Real>& out);
  void collect(nn::ConstParamRefs<Real>& out) const;
};

/// LN (with bias) -> Linear -> GELU -> Dropout -> Linear -> scalar.
template <typename Real>
struct ScorerBlock {
  ParamTensor<Real> ln_gain, ln_bias, fc1_w, fc1_b, fc2_w, fc2_b;
  Real dropout_rate = 0;

  struct Tape {
    std::vector<Real> input;
    nn::LayerNormCache<Real> ln;
    std::vector<Real> normed, pre_act, keep, hidden;
  };

  ScorerBlock() = default;
  ScorerBlock(std::size_t in, std::size_t width, Real dropout);
  void init(Rng& rng);
  void collect(nn::ParamRefs<Real>& out);
  void collect(nn::ConstParamRefs<Real>& out) const;
  static std::size_t count(std::size_t in, std::size_t width);

  Real forward(std::span<const Real> x, bool training, Rng* rng, Tape* tape) const;
  std::vector<Real> backward(const Tape& tape, Real dscore);
};

/// Projection -> multi-layer GRU over steps -> concat(final hidden, last projection) -> scorer.
template <typename Real>
struct SequenceHead {
  ParamTensor<Real> proj_w;
  std::optional<ParamTensor<Real>> proj_b;
  nn::GruParams<Real> gru;
  ScorerBlock<Real> scorer;

  struct Tape {
    std::vector<std::vector<Real>> inputs;
    std::vector<std::vector<Real>> projected;
    nn::GruCache<Real> gru;
    typename ScorerBlock<Real>::Tape scorer;
  };

  SequenceHead() = default;
  SequenceHead(std::size_t in, std::size_t proj_dim, bool proj_bias, std::size_t gru_layers, std::size_t gru_hidden,
               std::size_t scorer_hidden, Real dropout);
  void init(Rng& rng);
  void collect(nn::ParamRefs<Real>& out);
  void collect(nn::ConstParamRefs<Real>& out) const;
  static std::size_t count(std::size_t in, std::size_t proj_dim, bool proj_bias, std::size_t gru_layers,
                           std::size_t gru_hidden, std::size_t scorer_hidden);

  /// The per-step projections (GRU inputs) for the given normalized step vectors.
  std::vector<std::vector<Real>> project(const std::vector<std::vector<Real>>& inputs) const;

  Real forward(std::vector<std::vector<Real>> inputs, bool training, Rng* rng, Tape* tape) const;
  /// Returns gradients w.r.t. the head inputs.
  std::vector<std::vector<Real>> backward(const Tape& tape, Real dscore);
};

}  // namespace loopeval::eval
