#include "loopeval/optim/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace loopeval::optim {

AdamW::AdamW(const nn::ParamRefs<float>& params, AdamWHyper hyper) : params_(params), hyper_(hyper) {
  for (const auto* p : params_) {
    m_.emplace_back(p->size(), 0.0f);
    v_.emplace_back(p->size(), 0.0f);
  }
}

void AdamW::step(double lr) {
  if (lr < 0) throw ConfigError("adamw: negative learning rate");
  for (const auto* p : params_) {
    for (float g : p->grad) {
      if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in parameter '" + p->name + "'");
    }
  }
  ++step_;
  const double b1 = hyper_.beta1;
  const double b2 = hyper_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - lr * hyper_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g * g);
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      const double w = static_cast<double>(p.values[i]) * decay;
      p.values[i] = static_cast<float>(w - lr * m_hat / (std::sqrt(v_hat) + hyper_.eps));
    }
  }
}

double cosine_warmup_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double lr_max,
                        double lr_min) {
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("cosine_warmup_lr: warmup_steps must be in [0, total_steps)");
  }
  if (step < 0 || step > total_steps) throw ConfigError("cosine_warmup_lr: step outside [0, total_steps]");
  if (step < warmup_steps) return lr_max * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_grad_norm(const nn::ParamRefs<float>& params) {
  double sum = 0;
  for (const auto* p : params) {
    for (float g : p->grad) sum += static_cast<double>(g) * g;
  }
  return std::sqrt(sum);
}

double clip_grad_norm(const nn::ParamRefs<float>& params, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  for (auto* p : params) {
    for (auto& g : p->grad) g = static_cast<float>(g * scale);
  }
  return scale;
}

}  // namespace loopeval::optim
