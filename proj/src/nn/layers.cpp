#include "loopeval/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace loopeval::nn {

template <typename Real>
ParamTensor<Real>::ParamTensor(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t count = 1;
  for (auto dim : shape) count *= dim;
  values.assign(count, Real(0));
  grad.assign(count, Real(0));
}

template <typename Real>
void ParamTensor<Real>::zero_grad() {
  std::fill(grad.begin(), grad.end(), Real(0));
}

template <typename Real>
bool ParamTensor<Real>::all_finite() const {
  auto finite = [](Real v) { return std::isfinite(v); };
  return std::all_of(values.begin(), values.end(), finite) && std::all_of(grad.begin(), grad.end(), finite);
}

template <typename Real>
void require_finite(const ParamRefs<Real>& params) {
  for (const auto* p : params) {
    if (!p->all_finite()) throw NumericError("non-finite value or gradient in parameter '" + p->name + "'");
  }
}

// ---------------------------------------------------------------------------

template <typename Real>
std::vector<Real> linear_forward(std::span<const Real> x, const ParamTensor<Real>& weight,
                                 const ParamTensor<Real>* bias) {
  if (weight.shape.size() != 2 || weight.rows() != x.size()) {
    throw ConfigError("linear '" + weight.name + "': input has " + std::to_string(x.size()) +
                      " features, weight expects " + std::to_string(weight.rows()));
  }
  const std::size_t out = weight.cols();
  if (bias && bias->size() != out) throw ConfigError("linear '" + weight.name + "': bias size mismatch");
  std::vector<Real> y(out, Real(0));
  if (bias) std::copy(bias->values.begin(), bias->values.end(), y.begin());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real xi = x[i];
    if (xi == Real(0)) continue;
    const Real* w = weight.values.data() + i * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * w[j];
  }
  return y;
}

template <typename Real>
Matrix<Real> linear_forward(const Matrix<Real>& x, const ParamTensor<Real>& weight, const ParamTensor<Real>* bias) {
  Matrix<Real> y(x.rows, weight.cols());
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto row = linear_forward<Real>(x.row(r), weight, bias);
    std::copy(row.begin(), row.end(), y.row(r).begin());
  }
  return y;
}

template <typename Real>
void linear_backward(std::span<const Real> x, ParamTensor<Real>& weight, ParamTensor<Real>* bias,
                     std::span<const Real> dy, std::span<Real> dx) {
  const std::size_t out = weight.cols();
  if (dy.size() != out || x.size() != weight.rows()) throw ConfigError("linear_backward: shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    Real* g = weight.grad.data() + i * out;
    const Real xi = x[i];
    for (std::size_t j = 0; j < out; ++j) g[j] += xi * dy[j];
  }
  if (bias) {
    for (std::size_t j = 0; j < out; ++j) bias->grad[j] += dy[j];
  }
  if (!dx.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Real* w = weight.values.data() + i * out;
      Real acc = 0;
      for (std::size_t j = 0; j < out; ++j) acc += w[j] * dy[j];
      dx[i] += acc;
    }
  }
}

// ---------------------------------------------------------------------------

template <typename Real>
std::vector<Real> layernorm_forward(std::span<const Real> x, const ParamTensor<Real>& gain,
                                    const ParamTensor<Real>* bias, Real eps, LayerNormCache<Real>* cache) {
  const std::size_t n = x.size();
  if (n == 0) throw ConfigError("layernorm: empty input");
  if (gain.size() != n || (bias && bias->size() != n)) {
    throw ConfigError("layernorm '" + gain.name + "': expected " + std::to_string(gain.size()) + " features, got " +
                      std::to_string(n));
  }
  Real mean = 0;
  for (Real v : x) mean += v;
  mean /= Real(n);
  Real var = 0;
  for (Real v : x) var += (v - mean) * (v - mean);
  var /= Real(n);
  const Real rstd = Real(1) / std::sqrt(var + eps);

  std::vector<Real> xhat(n);
  std::vector<Real> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * gain.values[i];
    if (bias) y[i] += bias->values[i];
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

template <typename Real>
void layernorm_backward(const LayerNormCache<Real>& cache, ParamTensor<Real>& gain, ParamTensor<Real>* bias,
                        std::span<const Real> dy, std::span<Real> dx) {
  const std::size_t n = cache.xhat.size();
  Real mean_g = 0;
  Real mean_gx = 0;
  std::vector<Real> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    gain.grad[i] += dy[i] * cache.xhat[i];
    if (bias) bias->grad[i] += dy[i];
    g[i] = dy[i] * gain.values[i];
    mean_g += g[i];
    mean_gx += g[i] * cache.xhat[i];
  }
  mean_g /= Real(n);
  mean_gx /= Real(n);
  if (!dx.empty()) {
    for (std::size_t i = 0; i < n; ++i) dx[i] += cache.rstd * (g[i] - mean_g - cache.xhat[i] * mean_gx);
  }
}

// ---------------------------------------------------------------------------

template <typename Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
}

template <typename Real>
Real gelu_derivative(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
  const Real pdf = std::exp(Real(-0.5) * x * x) * Real(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------

template <typename Real>
std::vector<Real> masked_softmax(std::span<const Real> logits, std::span<const std::uint8_t> mask) {
  if (logits.size() != mask.size()) throw ConfigError("masked_softmax: logits/mask length mismatch");
  Real max_logit = -std::numeric_limits<Real>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      max_logit = std::max(max_logit, logits[i]);
      any = true;
    }
  }
  if (!any) throw ConfigError("masked_softmax: every position is masked");
  std::vector<Real> p(logits.size(), Real(0));
  Real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      p[i] = std::exp(logits[i] - max_logit);
      sum += p[i];
    }
  }
  for (auto& v : p) v /= sum;
  return p;
}

template <typename Real>
std::vector<Real> masked_softmax_backward(std::span<const Real> probs, std::span<const Real> dprobs) {
  Real dot = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * dprobs[i];
  std::vector<Real> dlogits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) dlogits[i] = probs[i] * (dprobs[i] - dot);
  return dlogits;
}

// ---------------------------------------------------------------------------

// Logits are H (K q); forming K q first keeps the cost at O(d r + L d).
template <typename Real>
std::vector<Real> attention_pool(const Matrix<Real>& hidden, std::span<const std::uint8_t> mask,
                                 const ParamTensor<Real>& keys, const ParamTensor<Real>& query,
                                 AttentionPoolCache<Real>* cache) {
  const std::size_t d = hidden.cols;
  const std::size_t rank = query.size();
  if (keys.rows() != d || keys.cols() != rank) {
    throw ConfigError("attention_pool: keys shaped [" + std::to_string(keys.rows()) + "," +
                      std::to_string(keys.cols()) + "] for hidden size " + std::to_string(d) + " and rank " +
                      std::to_string(rank));
  }
  if (rank > d) throw ConfigError("attention_pool: rank exceeds hidden size");
  if (mask.size() != hidden.rows) throw ConfigError("attention_pool: mask length mismatch");

  std::vector<Real> kq(d, Real(0));
  for (std::size_t i = 0; i < d; ++i) {
    const Real* k = keys.values.data() + i * rank;
    Real acc = 0;
    for (std::size_t j = 0; j < rank; ++j) acc += k[j] * query.values[j];
    kq[i] = acc;
  }
  std::vector<Real> logits(hidden.rows, Real(0));
  for (std::size_t t = 0; t < hidden.rows; ++t) {
    if (!mask[t]) continue;
    auto h = hidden.row(t);
    Real acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += h[i] * kq[i];
    logits[t] = acc;
  }
  auto weights = masked_softmax<Real>(logits, mask);
  std::vector<Real> pooled(d, Real(0));
  for (std::size_t t = 0; t < hidden.rows; ++t) {
    const Real w = weights[t];
    if (w == Real(0)) continue;
    auto h = hidden.row(t);
    for (std::size_t i = 0; i < d; ++i) pooled[i] += w * h[i];
  }
  if (cache) {
    cache->weights = std::move(weights);
    cache->key_query = std::move(kq);
  }
  return pooled;
}

template <typename Real>
void attention_pool_backward(const Matrix<Real>& hidden, const AttentionPoolCache<Real>& cache,
                             ParamTensor<Real>& keys, ParamTensor<Real>& query, std::span<const Real> dpooled,
                             Matrix<Real>* dhidden) {
  const std::size_t d = hidden.cols;
  const std::size_t rank = query.size();
  const std::size_t len = hidden.rows;

  std::vector<Real> dweights(len, Real(0));
  for (std::size_t t = 0; t < len; ++t) {
    if (cache.weights[t] == Real(0)) continue;
    auto h = hidden.row(t);
    Real acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += h[i] * dpooled[i];
    dweights[t] = acc;
  }
  auto dlogits = masked_softmax_backward<Real>(cache.weights, dweights);

  // g = sum_t dlogit_t H_t is the gradient w.r.t. K q.
  std::vector<Real> g(d, Real(0));
  for (std::size_t t = 0; t < len; ++t) {
    const Real dl = dlogits[t];
    if (dl == Real(0)) continue;
    auto h = hidden.row(t);
    for (std::size_t i = 0; i < d; ++i) g[i] += dl * h[i];
  }
  for (std::size_t i = 0; i < d; ++i) {
    Real* gk = keys.grad.data() + i * rank;
    const Real* k = keys.values.data() + i * rank;
    for (std::size_t j = 0; j < rank; ++j) {
      gk[j] += g[i] * query.values[j];
      query.grad[j] += k[j] * g[i];
    }
  }
  if (dhidden) {
    for (std::size_t t = 0; t < len; ++t) {
      auto dh = dhidden->row(t);
      const Real w = cache.weights[t];
      const Real dl = dlogits[t];
      for (std::size_t i = 0; i < d; ++i) dh[i] += w * dpooled[i] + dl * cache.key_query[i];
    }
  }
}

// ---------------------------------------------------------------------------

template <typename Real>
GruParams<Real>::GruParams(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t num_layers)
    : input_dim(in), hidden_dim(hidden) {
  if (num_layers == 0) throw ConfigError("gru: at least one layer required");
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t layer_in = l == 0 ? in : hidden;
    const std::string p = prefix + ".l" + std::to_string(l);
    layers.push_back({ParamTensor<Real>(p + ".w_ih", {layer_in, 3 * hidden}),
                      ParamTensor<Real>(p + ".w_hh", {hidden, 3 * hidden}), ParamTensor<Real>(p + ".b_ih", {3 * hidden}),
                      ParamTensor<Real>(p + ".b_hh", {3 * hidden})});
  }
}

template <typename Real>
void GruParams<Real>::collect(ParamRefs<Real>& out) {
  for (auto& l : layers) {
    out.push_back(&l.w_ih);
    out.push_back(&l.w_hh);
    out.push_back(&l.b_ih);
    out.push_back(&l.b_hh);
  }
}

template <typename Real>
void GruParams<Real>::collect(ConstParamRefs<Real>& out) const {
  for (const auto& l : layers) {
    out.push_back(&l.w_ih);
    out.push_back(&l.w_hh);
    out.push_back(&l.b_ih);
    out.push_back(&l.b_hh);
  }
}

template <typename Real>
std::size_t GruParams<Real>::count(std::size_t in, std::size_t hidden, std::size_t num_layers) {
  std::size_t total = 0;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t layer_in = l == 0 ? in : hidden;
    total += 3 * hidden * (layer_in + hidden + 2);
  }
  return total;
}

namespace {

template <typename Real>
Real sigmoid(Real x) {
  return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
}

}  // namespace

template <typename Real>
std::vector<std::vector<Real>> run_gru_layer(const std::vector<std::vector<Real>>& inputs,
                                             const GruLayerParams<Real>& p, std::size_t hidden,
                                             std::vector<GruStepCache<Real>>* cache) {
  std::vector<Real> h(hidden, Real(0));
  std::vector<std::vector<Real>> outputs;
  outputs.reserve(inputs.size());
  for (const auto& x : inputs) {
    auto gi = linear_forward<Real>(x, p.w_ih, &p.b_ih);
    auto gh = linear_forward<Real>(h, p.w_hh, &p.b_hh);
    GruStepCache<Real> step;
    step.r.resize(hidden);
    step.z.resize(hidden);
    step.n.resize(hidden);
    step.hn.resize(hidden);
    std::vector<Real> h_next(hidden);
    for (std::size_t k = 0; k < hidden; ++k) {
      const Real r = sigmoid(gi[k] + gh[k]);
      const Real z = sigmoid(gi[hidden + k] + gh[hidden + k]);
      const Real hn = gh[2 * hidden + k];
      const Real n = std::tanh(gi[2 * hidden + k] + r * hn);
      step.r[k] = r;
      step.z[k] = z;
      step.n[k] = n;
      step.hn[k] = hn;
      h_next[k] = (Real(1) - z) * n + z * h[k];
    }
    if (cache) {
      step.x = x;
      step.h_prev = h;
      cache->push_back(std::move(step));
    }
    h = std::move(h_next);
    outputs.push_back(h);
  }
  return outputs;
}

template <typename Real>
std::vector<Real> gru_forward(const std::vector<std::vector<Real>>& inputs, const GruParams<Real>& params,
                              GruCache<Real>* cache) {
  if (inputs.empty()) throw ConfigError("gru_forward: empty input sequence");
  for (const auto& x : inputs) {
    if (x.size() != params.input_dim) throw ConfigError("gru_forward: input width mismatch");
  }
  if (cache) {
    cache->layers.clear();
    cache->layers.resize(params.layers.size());
  }
  std::vector<std::vector<Real>> seq = inputs;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    seq = run_gru_layer<Real>(seq, params.layers[l], params.hidden_dim, cache ? &cache->layers[l] : nullptr);
  }
  return seq.back();
}

template <typename Real>
std::vector<std::vector<Real>> gru_backward(const GruCache<Real>& cache, GruParams<Real>& params,
                                            std::span<const Real> dh_final) {
  const std::size_t hidden = params.hidden_dim;
  const std::size_t steps = cache.layers.front().size();
  // Gradient flowing into each layer's output at each step; only the top layer's last step is seeded.
  std::vector<std::vector<Real>> dout(steps, std::vector<Real>(hidden, Real(0)));
  std::copy(dh_final.begin(), dh_final.end(), dout.back().begin());

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    auto& p = params.layers[li];
    const auto& lc = cache.layers[li];
    const std::size_t in = p.w_ih.rows();
    std::vector<std::vector<Real>> dinputs(steps, std::vector<Real>(in, Real(0)));
    std::vector<Real> dh_next(hidden, Real(0));
    for (std::size_t t = steps; t-- > 0;) {
      const auto& s = lc[t];
      std::vector<Real> di(3 * hidden);
      std::vector<Real> dgh(3 * hidden);
      std::vector<Real> dh_prev(hidden);
      for (std::size_t k = 0; k < hidden; ++k) {
        const Real dh = dout[t][k] + dh_next[k];
        const Real dn = dh * (Real(1) - s.z[k]);
        const Real dz = dh * (s.h_prev[k] - s.n[k]);
        dh_prev[k] = dh * s.z[k];
        const Real da_n = dn * (Real(1) - s.n[k] * s.n[k]);
        const Real da_z = dz * s.z[k] * (Real(1) - s.z[k]);
        const Real dr = da_n * s.hn[k];
        const Real da_r = dr * s.r[k] * (Real(1) - s.r[k]);
        di[k] = da_r;
        di[hidden + k] = da_z;
        di[2 * hidden + k] = da_n;
        dgh[k] = da_r;
        dgh[hidden + k] = da_z;
        dgh[2 * hidden + k] = da_n * s.r[k];
      }
      linear_backward<Real>(s.x, p.w_ih, &p.b_ih, di, dinputs[t]);
      linear_backward<Real>(s.h_prev, p.w_hh, &p.b_hh, dgh, dh_prev);
      dh_next = std::move(dh_prev);
    }
    dout = std::move(dinputs);
  }
  return dout;
}

// ---------------------------------------------------------------------------

template <typename Real>
std::vector<Real> dropout_mask(std::size_t n, Real p, bool training, Rng* rng) {
  if (p < Real(0) || p >= Real(1)) throw ConfigError("dropout: rate must be in [0, 1)");
  std::vector<Real> mask(n, Real(1));
  if (!training || p == Real(0)) return mask;
  if (!rng) throw ConfigError("dropout: training mode requires a generator");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const Real scale = Real(1) / (Real(1) - p);
  for (auto& m : mask) m = keep(*rng) ? scale : Real(0);
  return mask;
}

template <typename Real>
std::vector<Real> dropout(std::span<const Real> x, Real p, bool training, Rng* rng, std::vector<Real>* mask_out) {
  auto mask = dropout_mask<Real>(x.size(), p, training, rng);
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
  if (mask_out) *mask_out = std::move(mask);
  return y;
}

// ---------------------------------------------------------------------------

template <typename Real>
void init_normal(ParamTensor<Real>& p, Real stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : p.values) v = static_cast<Real>(dist(rng));
}

template <typename Real>
void init_fan_in(ParamTensor<Real>& p, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.values) v = static_cast<Real>(dist(rng));
}

template <typename Real>
void init_constant(ParamTensor<Real>& p, Real value) {
  std::fill(p.values.begin(), p.values.end(), value);
}

// ---------------------------------------------------------------------------

#define LOOPEVAL_INSTANTIATE(Real)                                                                              \
  template struct ParamTensor<Real>;                                                                           \
  template void require_finite<Real>(const ParamRefs<Real>&);                                                  \
  template std::vector<Real> linear_forward<Real>(std::span<const Real>, const ParamTensor<Real>&,             \
                                                  const ParamTensor<Real>*);                                   \
  template Matrix<Real> linear_forward<Real>(const Matrix<Real>&, const ParamTensor<Real>&,                    \
                                             const ParamTensor<Real>*);                                        \
  template void linear_backward<Real>(std::span<const Real>, ParamTensor<Real>&, ParamTensor<Real>*,           \
                                      std::span<const Real>, std::span<Real>);                                 \
  template std::vector<Real> layernorm_forward<Real>(std::span<const Real>, const ParamTensor<Real>&,          \
                                                     const ParamTensor<Real>*, Real, LayerNormCache<Real>*);   \
  template void layernorm_backward<Real>(const LayerNormCache<Real>&, ParamTensor<Real>&, ParamTensor<Real>*,  \
                                         std::span<const Real>, std::span<Real>);                              \
  template Real gelu<Real>(Real);                                                                              \
  template Real gelu_derivative<Real>(Real);                                                                   \
  template std::vector<Real> masked_softmax<Real>(std::span<const Real>, std::span<const std::uint8_t>);       \
  template std::vector<Real> masked_softmax_backward<Real>(std::span<const Real>, std::span<const Real>);      \
  template std::vector<Real> attention_pool<Real>(const Matrix<Real>&, std::span<const std::uint8_t>,          \
                                                  const ParamTensor<Real>&, const ParamTensor<Real>&,          \
                                                  AttentionPoolCache<Real>*);                                  \
  template void attention_pool_backward<Real>(const Matrix<Real>&, const AttentionPoolCache<Real>&,            \
                                              ParamTensor<Real>&, ParamTensor<Real>&, std::span<const Real>,   \
                                              Matrix<Real>*);                                                  \
  template struct GruParams<Real>;                                                                             \
  template std::vector<Real> gru_forward<Real>(const std::vector<std::vector<Real>>&, const GruParams<Real>&,   \
                                               GruCache<Real>*);                                               \
  template std::vector<std::vector<Real>> gru_backward<Real>(const GruCache<Real>&, GruParams<Real>&,          \
                                                             std::span<const Real>);                           \
  template std::vector<Real> dropout_mask<Real>(std::size_t, Real, bool, Rng*);                                \
  template std::vector<Real> dropout<Real>(std::span<const Real>, Real, bool, Rng*, std::vector<Real>*);       \
  template void init_normal<Real>(ParamTensor<Real>&, Real, Rng&);                                             \
  template void init_fan_in<Real>(ParamTensor<Real>&, std::size_t, Rng&);                                      \
  template void init_constant<Real>(ParamTensor<Real>&, Real);

LOOPEVAL_INSTANTIATE(float)
LOOPEVAL_INSTANTIATE(double)

#undef LOOPEVAL_INSTANTIATE

}  // namespace loopeval::nn
