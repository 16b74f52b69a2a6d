#include "loopeval/features/records.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace loopeval::features {

std::uint16_t float_to_half_bits(float value) { return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value)); }

float half_bits_to_float(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

LoopStateRecord::LoopStateRecord(std::uint32_t t, std::uint32_t l, std::uint32_t d)
    : steps(t), seq_len(l), hidden(d), states(std::size_t(t) * l * d, 0), mask(l, 0), true_steps(t) {}

void LoopStateRecord::set_left_padded_mask(std::uint32_t count) {
  if (count > seq_len) throw ConfigError("token count exceeds sequence length");
  std::fill(mask.begin(), mask.end(), 0);
  std::fill(mask.end() - count, mask.end(), 1);
  token_count = count;
}

void LoopStateRecord::repeat_last_state(std::uint32_t produced) {
  if (produced == 0 || produced > steps) throw ConfigError("produced step count outside [1, steps]");
  const std::size_t slot = std::size_t(seq_len) * hidden;
  for (std::uint32_t t = produced; t < steps; ++t) {
    std::copy_n(states.begin() + (produced - 1) * slot, slot, states.begin() + t * slot);
  }
  true_steps = produced;
}

template <typename Real>
nn::Matrix<Real> LoopStateRecord::step_matrix(std::size_t step) const {
  nn::Matrix<Real> m(seq_len, hidden);
  const std::uint16_t* src = states.data() + offset(step, 0);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<Real>(half_bits_to_float(src[i]));
  return m;
}

template nn::Matrix<float> LoopStateRecord::step_matrix<float>(std::size_t) const;
template nn::Matrix<double> LoopStateRecord::step_matrix<double>(std::size_t) const;

void LoopStateRecord::validate() const {
  const std::string who = "record '" + example_id + "'";
  if (steps < 1) throw ConfigError(who + ": needs at least one loop step");
  if (states.size() != std::size_t(steps) * seq_len * hidden) throw ConfigError(who + ": state buffer size mismatch");
  if (mask.size() != seq_len) throw ConfigError(who + ": mask length mismatch");
  if (true_steps < 1 || true_steps > steps) throw ConfigError(who + ": true step count outside [1, steps]");
  std::uint32_t ones = 0;
  bool seen_one = false;
  for (auto m : mask) {
    if (m > 1) throw ConfigError(who + ": mask entries must be 0 or 1");
    if (m == 1) {
      seen_one = true;
      ++ones;
    } else if (seen_one) {
      throw ConfigError(who + ": mask is not left-padded");
    }
  }
  if (ones != token_count) throw ConfigError(who + ": token_count disagrees with mask");
  for (auto bits : states) {
    if ((bits & 0x7c00u) == 0x7c00u) throw ConfigError(who + ": non-finite state value");
  }
}

void PreferencePair::validate() const {
  chosen.validate();
  rejected.validate();
  if (chosen.role != Role::chosen || rejected.role != Role::rejected) {
    throw ConfigError("pair '" + prompt_id + "': roles are not chosen/rejected");
  }
  if (chosen.steps != rejected.steps || chosen.hidden != rejected.hidden || chosen.seq_len != rejected.seq_len) {
    throw ConfigError("pair '" + prompt_id + "': chosen and rejected shapes differ");
  }
}

nn::Matrix<float> mean_pool(const LoopStateRecord& record) {
  if (record.token_count == 0) throw ConfigError("mean_pool: record '" + record.example_id + "' is fully masked");
  nn::Matrix<float> pooled(record.steps, record.hidden);
  for (std::size_t t = 0; t < record.steps; ++t) {
    auto out = pooled.row(t);
    for (std::size_t pos = 0; pos < record.seq_len; ++pos) {
      if (!record.mask[pos]) continue;
      const std::uint16_t* src = record.states.data() + record.offset(t, pos);
      for (std::size_t k = 0; k < record.hidden; ++k) out[k] += half_bits_to_float(src[k]);
    }
    for (auto& v : out) v /= static_cast<float>(record.token_count);
  }
  return pooled;
}

std::vector<float> concat_pooled(const nn::Matrix<float>& pooled) { return pooled.data; }

}  // namespace loopeval::features
