#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "loopeval/eval/blocks.hpp"

namespace loopeval::eval {

enum class Architecture { pairwise, pointwise_v2, calibrated, pointwise_v1, linear };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& s);

struct PairwiseConfig {
  std::size_t d_in = 2048;
  std::size_t pool_rank = 128;
  std::size_t proj_dim = 512;
  std::size_t gru_layers = 2;
  std::size_t gru_hidden = 512;
  std::size_t scorer_hidden = 256;
  double dropout_rate = 0.1;
  bool ln_bias = false;
  bool proj_bias = false;
  // Normalize each side before subtracting: LN(c) - LN(r) instead of LN(c - r).
  bool pre_diff_norm = false;

  void validate() const;
  nlohmann::json to_json() const;
  static PairwiseConfig from_json(const nlohmann::json& j);
};

struct PointwiseV2Config {
  std::size_t d_in = 2048;
  std::size_t pool_rank = 128;
  std::size_t proj_dim = 512;
  std::size_t gru_layers = 2;
  std::size_t gru_hidden = 512;
  std::size_t scorer_hidden = 256;
  double dropout_rate = 0.1;
  bool ln_bias = true;
  bool proj_bias = false;

  void validate() const;
  nlohmann::json to_json() const;
  static PointwiseV2Config from_json(const nlohmann::json& j);
};

struct PointwiseV1Config {
  std::size_t d_in = 2048;
  std::size_t steps = 4;
  std::size_t hidden = 512;

  void validate() const;
  nlohmann::json to_json() const;
  static PointwiseV1Config from_json(const nlohmann::json& j);
};

struct LinearConfig {
  std::size_t d_in = 2048;
  std::size_t steps = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static LinearConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------

/// Shared attention pool per step on both inputs, LN(c_t - r_t) without bias, projection, GRU
/// over steps, skip from the last projection, scorer. Positive scores prefer the first argument.
template <typename Real>
class PairwiseEvaluator {
 public:
  static constexpr bool kPairwise = true;
  using Config = PairwiseConfig;

  struct Tape {
    const DenseRecord<Real>* first = nullptr;
    const DenseRecord<Real>* second = nullptr;
    std::vector<nn::AttentionPoolCache<Real>> pool_first, pool_second;
    std::vector<nn::LayerNormCache<Real>> ln_diff, ln_first, ln_second;
    typename SequenceHead<Real>::Tape head;
  };

  PairwiseEvaluator() = default;
  PairwiseEvaluator(const PairwiseConfig& config, std::uint64_t init_seed);

  const PairwiseConfig& config() const { return config_; }
  Architecture architecture() const { return Architecture::pairwise; }

  Real score(const DenseRecord<Real>& first, const DenseRecord<Real>& second, bool training, Rng* rng,
             Tape* tape = nullptr) const;
  void backward(const Tape& tape, Real dscore);

  /// The GRU input sequence (one projected vector per loop step).
  std::vector<std::vector<Real>> projected_differences(const DenseRecord<Real>& first,
                                                       const DenseRecord<Real>& second) const;

  nn::ParamRefs<Real> parameters();
  nn::ConstParamRefs<Real> parameters() const;
  static std::size_t count_parameters(const PairwiseConfig& config);

 private:
  std::vector<std::vector<Real>> normalized_steps(const DenseRecord<Real>& first, const DenseRecord<Real>& second,
                                                  Tape* tape) const;

  PairwiseConfig config_;
  PoolBlock<Real> pool_;
  ParamTensor<Real> ln_gain_;
  std::optional<ParamTensor<Real>> ln_bias_;
  SequenceHead<Real> head_;
};

/// Single-response variant: pool -> LN (bias allowed) -> projection -> GRU -> skip -> scorer.
template <typename Real>
class PointwiseV2Evaluator {
 public:
  static constexpr bool kPairwise = false;
  using Config = PointwiseV2Config;

  struct Tape {
    const DenseRecord<Real>* record = nullptr;
    std::vector<nn::AttentionPoolCache<Real>> pool;
    std::vector<nn::LayerNormCache<Real>> ln;
    typename SequenceHead<Real>::Tape head;
  };

  PointwiseV2Evaluator() = default;
  PointwiseV2Evaluator(const PointwiseV2Config& config, std::uint64_t init_seed, bool calibrated = false);

  const PointwiseV2Config& config() const { return config_; }
  Architecture architecture() const { return calibrated_ ? Architecture::calibrated : Architecture::pointwise_v2; }

  Real score(const DenseRecord<Real>& record, bool training, Rng* rng, Tape* tape = nullptr) const;
  void backward(const Tape& tape, Real dscore);

  nn::ParamRefs<Real> parameters();
  nn::ConstParamRefs<Real> parameters() const;
  static std::size_t count_parameters(const PointwiseV2Config& config);

 private:
  PointwiseV2Config config_;
  bool calibrated_ = false;
  PoolBlock<Real> pool_;
  ParamTensor<Real> ln_gain_;
  std::optional<ParamTensor<Real>> ln_bias_;
  SequenceHead<Real> head_;
};

/// Two-layer GELU MLP on the step-major concatenation of mean-pooled states.
template <typename Real>
class PointwiseV1Evaluator {
 public:
  static constexpr bool kPairwise = false;
  using Config = PointwiseV1Config;

  struct Tape {
    std::vector<Real> input, pre_act, hidden;
  };

  PointwiseV1Evaluator() = default;
  PointwiseV1Evaluator(const PointwiseV1Config& config, std::uint64_t init_seed);

  const PointwiseV1Config& config() const { return config_; }
  Architecture architecture() const { return Architecture::pointwise_v1; }

  Real score(const DenseRecord<Real>& record, bool training, Rng* rng, Tape* tape = nullptr) const;
  void backward(const Tape& tape, Real dscore);

  nn::ParamRefs<Real> parameters();
  nn::ConstParamRefs<Real> parameters() const;
  static std::size_t count_parameters(const PointwiseV1Config& config);

  ParamTensor<Real>& fc1_weight() { return fc1_w_; }
  ParamTensor<Real>& fc1_bias() { return fc1_b_; }
  ParamTensor<Real>& fc2_weight() { return fc2_w_; }
  ParamTensor<Real>& fc2_bias() { return fc2_b_; }

 private:
  PointwiseV1Config config_;
  ParamTensor<Real> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

/// Single linear layer on concatenated mean-pooled states.
template <typename Real>
class LinearEvaluator {
 public:
  static constexpr bool kPairwise = false;
  using Config = LinearConfig;

  struct Tape {
    std::vector<Real> input;
  };

  LinearEvaluator() = default;
  LinearEvaluator(const LinearConfig& config, std::uint64_t init_seed);

  const LinearConfig& config() const { return config_; }
  Architecture architecture() const { return Architecture::linear; }

  Real score(const DenseRecord<Real>& record, bool training, Rng* rng, Tape* tape = nullptr) const;
  void backward(const Tape& tape, Real dscore);

  nn::ParamRefs<Real> parameters();
  nn::ConstParamRefs<Real> parameters() const;
  static std::size_t count_parameters(const LinearConfig& config);

  ParamTensor<Real>& weight() { return w_; }
  ParamTensor<Real>& bias() { return b_; }

 private:
  LinearConfig config_;
  ParamTensor<Real> w_, b_;
};

// ---------------------------------------------------------------------------

using AnyEvaluator = std::variant<PairwiseEvaluator<float>, PointwiseV2Evaluator<float>, PointwiseV1Evaluator<float>,
                                  LinearEvaluator<float>>;

Architecture architecture_of(const AnyEvaluator& evaluator);
nlohmann::json config_json(const AnyEvaluator& evaluator);
bool is_pairwise(const AnyEvaluator& evaluator);
nn::ParamRefs<float> parameters_of(AnyEvaluator& evaluator);
nn::ConstParamRefs<float> parameters_of(const AnyEvaluator& evaluator);

/// Builds an evaluator of the tagged architecture from a JSON config (missing keys take defaults).
AnyEvaluator make_evaluator(Architecture arch, const nlohmann::json& config, std::uint64_t init_seed);

/// Exact learnable-parameter count for a tagged architecture and config.
std::size_t count_parameters(Architecture arch, const nlohmann::json& config);

/// Scores a pair with the first argument in front: pairwise f(first, second), pointwise s(first) - s(second).
float score_pair(const AnyEvaluator& evaluator, const features::LoopStateRecord& first,
                 const features::LoopStateRecord& second);

}  // namespace loopeval::eval
