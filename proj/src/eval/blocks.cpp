#include "loopeval/eval/blocks.hpp"

namespace loopeval::eval {

template <typename Real>
DenseRecord<Real> to_dense(const features::LoopStateRecord& record) {
  DenseRecord<Real> out;
  out.steps.reserve(record.steps);
  for (std::size_t t = 0; t < record.steps; ++t) out.steps.push_back(record.step_matrix<Real>(t));
  out.mask = record.mask;
  return out;
}

template <typename Real>
Matrix<Real> mean_pool_dense(const DenseRecord<Real>& record) {
  Matrix<Real> pooled(record.steps.size(), record.hidden());
  std::size_t count = 0;
  for (auto m : record.mask) count += m;
  if (count == 0) throw ConfigError("mean pool: record is fully masked");
  for (std::size_t t = 0; t < record.steps.size(); ++t) {
    auto out = pooled.row(t);
    for (std::size_t pos = 0; pos < record.mask.size(); ++pos) {
      if (!record.mask[pos]) continue;
      auto h = record.steps[t].row(pos);
      for (std::size_t k = 0; k < h.size(); ++k) out[k] += h[k];
    }
    for (auto& v : out) v /= Real(count);
  }
  return pooled;
}

// ---------------------------------------------------------------------------

template <typename Real>
PoolBlock<Real>::PoolBlock(std::size_t hidden, std::size_t rank)
    : keys("pool.keys", {hidden, rank}), query("pool.query", {rank}) {
  if (rank == 0 || rank > hidden) throw ConfigError("pool rank must be in [1, hidden]");
}

template <typename Real>
void PoolBlock<Real>::init(Rng& rng) {
  nn::init_normal(keys, Real(0.02), rng);
  nn::init_normal(query, Real(0.02), rng);
}

template <typename Real>
void PoolBlock<Real>::collect(nn::ParamRefs<Real>& out) {
  out.push_back(&keys);
  out.push_back(&query);
}

template <typename Real>
void PoolBlock<Real>::collect(nn::ConstParamRefs<Real>& out) const {
  out.push_back(&keys);
  out.push_back(&query);
}

// ---------------------------------------------------------------------------

template <typename Real>
ScorerBlock<Real>::ScorerBlock(std::size_t in, std::size_t width, Real dropout)
    : ln_gain("scorer.ln.gain", {in}),
      ln_bias("scorer.ln.bias", {in}),
      fc1_w("scorer.fc1.weight", {in, width}),
      fc1_b("scorer.fc1.bias", {width}),
      fc2_w("scorer.fc2.weight", {width, 1}),
      fc2_b("scorer.fc2.bias", {1}),
      dropout_rate(dropout) {}

template <typename Real>
void ScorerBlock<Real>::init(Rng& rng) {
  nn::init_constant(ln_gain, Real(1));
  nn::init_constant(ln_bias, Real(0));
  nn::init_fan_in(fc1_w, fc1_w.rows(), rng);
  nn::init_fan_in(fc1_b, fc1_w.rows(), rng);
  nn::init_fan_in(fc2_w, fc2_w.rows(), rng);
  nn::init_fan_in(fc2_b, fc2_w.rows(), rng);
}

template <typename Real>
void ScorerBlock<Real>::collect(nn::ParamRefs<Real>& out) {
  for (auto* p : {&ln_gain, &ln_bias, &fc1_w, &fc1_b, &fc2_w, &fc2_b}) out.push_back(p);
}

template <typename Real>
void ScorerBlock<Real>::collect(nn::ConstParamRefs<Real>& out) const {
  for (const auto* p : {&ln_gain, &ln_bias, &fc1_w, &fc1_b, &fc2_w, &fc2_b}) out.push_back(p);
}

template <typename Real>
std::size_t ScorerBlock<Real>::count(std::size_t in, std::size_t width) {
  return 2 * in + in * width + width + width + 1;
}

template <typename Real>
Real ScorerBlock<Real>::forward(std::span<const Real> x, bool training, Rng* rng, Tape* tape) const {
  nn::LayerNormCache<Real> ln;
  auto normed = nn::layernorm_forward<Real>(x, ln_gain, &ln_bias, Real(kLayerNormEps), &ln);
  auto pre = nn::linear_forward<Real>(normed, fc1_w, &fc1_b);
  auto keep = nn::dropout_mask<Real>(pre.size(), dropout_rate, training, rng);
  std::vector<Real> hidden(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) hidden[i] = nn::gelu(pre[i]) * keep[i];
  const Real score = nn::linear_forward<Real>(hidden, fc2_w, &fc2_b)[0];
  if (tape) {
    tape->input.assign(x.begin(), x.end());
    tape->ln = std::move(ln);
    tape->normed = std::move(normed);
    tape->pre_act = std::move(pre);
    tape->keep = std::move(keep);
    tape->hidden = std::move(hidden);
  }
  return score;
}

template <typename Real>
std::vector<Real> ScorerBlock<Real>::backward(const Tape& tape, Real dscore) {
  const std::size_t width = tape.hidden.size();
  std::vector<Real> dhidden(width, Real(0));
  const Real dy[1] = {dscore};
  nn::linear_backward<Real>(tape.hidden, fc2_w, &fc2_b, dy, dhidden);
  std::vector<Real> dpre(width);
  for (std::size_t i = 0; i < width; ++i) dpre[i] = dhidden[i] * tape.keep[i] * nn::gelu_derivative(tape.pre_act[i]);
  std::vector<Real> dnormed(tape.normed.size(), Real(0));
  nn::linear_backward<Real>(tape.normed, fc1_w, &fc1_b, dpre, dnormed);
  std::vector<Real> dx(tape.input.size(), Real(0));
  nn::layernorm_backward<Real>(tape.ln, ln_gain, &ln_bias, dnormed, dx);
  return dx;
}

// ---------------------------------------------------------------------------

template <typename Real>
SequenceHead<Real>::SequenceHead(std::size_t in, std::size_t proj_dim, bool proj_bias, std::size_t gru_layers,
                                 std::size_t gru_hidden, std::size_t scorer_hidden, Real dropout)
    : proj_w("proj.weight", {in, proj_dim}),
      gru("gru", proj_dim, gru_hidden, gru_layers),
      scorer(gru_hidden + proj_dim, scorer_hidden, dropout) {
  if (proj_bias) proj_b.emplace("proj.bias", std::vector<std::size_t>{proj_dim});
}

template <typename Real>
void SequenceHead<Real>::init(Rng& rng) {
  nn::init_fan_in(proj_w, proj_w.rows(), rng);
  if (proj_b) nn::init_fan_in(*proj_b, proj_w.rows(), rng);
  // PyTorch-style GRU init: every tensor uniform in +-1/sqrt(hidden).
  for (auto& layer : gru.layers) {
    for (auto* p : {&layer.w_ih, &layer.w_hh, &layer.b_ih, &layer.b_hh}) nn::init_fan_in(*p, gru.hidden_dim, rng);
  }
  scorer.init(rng);
}

template <typename Real>
void SequenceHead<Real>::collect(nn::ParamRefs<Real>& out) {
  out.push_back(&proj_w);
  if (proj_b) out.push_back(&*proj_b);
  gru.collect(out);
  scorer.collect(out);
}

template <typename Real>
void SequenceHead<Real>::collect(nn::ConstParamRefs<Real>& out) const {
  out.push_back(&proj_w);
  if (proj_b) out.push_back(&*proj_b);
  gru.collect(out);
  scorer.collect(out);
}

template <typename Real>
std::size_t SequenceHead<Real>::count(std::size_t in, std::size_t proj_dim, bool proj_bias, std::size_t gru_layers,
                                      std::size_t gru_hidden, std::size_t scorer_hidden) {
  return in * proj_dim + (proj_bias ? proj_dim : 0) + nn::GruParams<Real>::count(proj_dim, gru_hidden, gru_layers) +
         ScorerBlock<Real>::count(gru_hidden + proj_dim, scorer_hidden);
}

template <typename Real>
std::vector<std::vector<Real>> SequenceHead<Real>::project(const std::vector<std::vector<Real>>& inputs) const {
  std::vector<std::vector<Real>> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) out.push_back(nn::linear_forward<Real>(x, proj_w, proj_b ? &*proj_b : nullptr));
  return out;
}

template <typename Real>
Real SequenceHead<Real>::forward(std::vector<std::vector<Real>> inputs, bool training, Rng* rng, Tape* tape) const {
  auto projected = project(inputs);
  nn::GruCache<Real> gru_cache;
  auto final_hidden = nn::gru_forward<Real>(projected, gru, tape ? &gru_cache : nullptr);
  std::vector<Real> combined = std::move(final_hidden);
  combined.insert(combined.end(), projected.back().begin(), projected.back().end());
  typename ScorerBlock<Real>::Tape scorer_tape;
  const Real score = scorer.forward(combined, training, rng, tape ? &scorer_tape : nullptr);
  if (tape) {
    tape->inputs = std::move(inputs);
    tape->projected = std::move(projected);
    tape->gru = std::move(gru_cache);
    tape->scorer = std::move(scorer_tape);
  }
  return score;
}

template <typename Real>
std::vector<std::vector<Real>> SequenceHead<Real>::backward(const Tape& tape, Real dscore) {
  auto dcombined = scorer.backward(tape.scorer, dscore);
  const std::size_t hidden = gru.hidden_dim;
  auto dproj = nn::gru_backward<Real>(tape.gru, gru, std::span<const Real>(dcombined.data(), hidden));
  auto& last = dproj.back();
  for (std::size_t i = 0; i < last.size(); ++i) last[i] += dcombined[hidden + i];
  std::vector<std::vector<Real>> dinputs;
  dinputs.reserve(tape.inputs.size());
  for (std::size_t t = 0; t < tape.inputs.size(); ++t) {
    std::vector<Real> dx(tape.inputs[t].size(), Real(0));
    nn::linear_backward<Real>(tape.inputs[t], proj_w, proj_b ? &*proj_b : nullptr, dproj[t], dx);
    dinputs.push_back(std::move(dx));
  }
  return dinputs;
}

template struct PoolBlock<float>;
template struct PoolBlock<double>;
template struct ScorerBlock<float>;
template struct ScorerBlock<double>;
template struct SequenceHead<float>;
template struct SequenceHead<double>;
template DenseRecord<float> to_dense<float>(const features::LoopStateRecord&);
template DenseRecord<double> to_dense<double>(const features::LoopStateRecord&);
template Matrix<float> mean_pool_dense<float>(const DenseRecord<float>&);
template Matrix<double> mean_pool_dense<double>(const DenseRecord<double>&);

}  // namespace loopeval::eval
