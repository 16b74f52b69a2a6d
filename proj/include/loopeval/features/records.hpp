#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "loopeval/nn/tensor.hpp"

namespace loopeval::features {

enum class Role : std::uint8_t { chosen = 0, rejected = 1 };
enum class LabelSource : std::uint8_t { human = 0, synthetic = 1 };

std::uint16_t float_to_half_bits(float value);
float half_bits_to_float(std::uint16_t bits);

/// One response's per-loop-step hidden states, stored as float16 bit patterns in
/// [step][position][feature] order, plus its left-padded attention mask.
struct LoopStateRecord {
  std::string example_id;
  Role role = Role::chosen;
  std::uint32_t steps = 0;
  std::uint32_t seq_len = 0;
  std::uint32_t hidden = 0;
  std::vector<std::uint16_t> states;
  std::vector<std::uint8_t> mask;
  std::uint32_t token_count = 0;
  // Loop steps the producer actually ran; slots past this repeat the last produced state.
  std::uint32_t true_steps = 0;

  LoopStateRecord() = default;
  LoopStateRecord(std::uint32_t steps, std::uint32_t seq_len, std::uint32_t hidden);

  std::size_t offset(std::size_t step, std::size_t pos) const { return (step * seq_len + pos) * hidden; }
  float value(std::size_t step, std::size_t pos, std::size_t k) const {
    return half_bits_to_float(states[offset(step, pos) + k]);
  }
  void set(std::size_t step, std::size_t pos, std::size_t k, float v) {
    states[offset(step, pos) + k] = float_to_half_bits(v);
  }

  /// Marks the trailing `count` positions as real tokens.
  void set_left_padded_mask(std::uint32_t count);

  /// Fills slots [produced, steps) with copies of slot produced-1 and records produced in true_steps.
  void repeat_last_state(std::uint32_t produced);

  /// Dense [seq_len, hidden] view of one loop step.
  template <typename Real>
  nn::Matrix<Real> step_matrix(std::size_t step) const;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  bool operator==(const LoopStateRecord&) const = default;
};

struct PreferencePair {
  std::string prompt_id;
  LoopStateRecord chosen;
  LoopStateRecord rejected;
  LabelSource label_source = LabelSource::synthetic;

  void validate() const;
  bool operator==(const PreferencePair&) const = default;
};

/// Per-step mean over unmasked positions, computed in float32. Result is [steps, hidden].
nn::Matrix<float> mean_pool(const LoopStateRecord& record);

/// Step-major concatenation of a [steps, hidden] matrix.
std::vector<float> concat_pooled(const nn::Matrix<float>& pooled);

}  // namespace loopeval::features
