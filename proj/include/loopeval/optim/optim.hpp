#pragma once

#include <cstdint>
#include <vector>

#include "loopeval/nn/tensor.hpp"

namespace loopeval::optim {

struct AdamWHyper {
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter plus the step counter.
class AdamW {
 public:
  AdamW(const nn::ParamRefs<float>& params, AdamWHyper hyper);

  /// One decoupled-weight-decay Adam update. Throws NumericError naming a parameter with a
  /// non-finite gradient before touching any value.
  void step(double lr);

  std::int64_t step_count() const { return step_; }
  const AdamWHyper& hyper() const { return hyper_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

 private:
  nn::ParamRefs<float> params_;
  AdamWHyper hyper_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t step_ = 0;
};

/// Linear warmup from 0 to lr_max, then cosine decay to lr_min at total_steps.
double cosine_warmup_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double lr_max,
                        double lr_min);

/// Scales all gradients so their global L2 norm is at most max_norm; returns the applied scale.
double clip_grad_norm(const nn::ParamRefs<float>& params, double max_norm);

double global_grad_norm(const nn::ParamRefs<float>& params);

}  // namespace loopeval::optim
