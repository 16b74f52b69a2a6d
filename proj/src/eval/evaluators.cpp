#include "loopeval/eval/evaluators.hpp"

namespace loopeval::eval {

using nlohmann::json;

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::pairwise: return "pairwise";
    case Architecture::pointwise_v2: return "pointwise_v2";
    case Architecture::calibrated: return "calibrated";
    case Architecture::pointwise_v1: return "pointwise_v1";
    case Architecture::linear: return "linear";
  }
  return "unknown";
}

Architecture architecture_from_string(const std::string& s) {
  for (auto a : {Architecture::pairwise, Architecture::pointwise_v2, Architecture::calibrated,
                 Architecture::pointwise_v1, Architecture::linear}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown architecture '" + s + "'");
}

namespace {

void require_positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string(name) + " must be positive");
}

void require_dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rate must be in [0, 1)");
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void PairwiseConfig::validate() const {
  require_positive(d_in, "d_in");
  require_positive(pool_rank, "pool_rank");
  require_positive(proj_dim, "proj_dim");
  require_positive(gru_layers, "gru_layers");
  require_positive(gru_hidden, "gru_hidden");
  require_positive(scorer_hidden, "scorer_hidden");
  if (pool_rank > d_in) throw ConfigError("pool_rank must not exceed d_in");
  require_dropout(dropout_rate);
  // A bias after the subtraction gives the model a pair-independent constant it can fall back on.
  if (ln_bias) throw ConfigError("the difference LayerNorm must not carry a bias in the pairwise evaluator");
}

json PairwiseConfig::to_json() const {
  return {{"d_in", d_in},           {"pool_rank", pool_rank},         {"proj_dim", proj_dim},
          {"gru_layers", gru_layers}, {"gru_hidden", gru_hidden},     {"scorer_hidden", scorer_hidden},
          {"dropout", dropout_rate},  {"ln_bias", ln_bias},           {"proj_bias", proj_bias},
          {"pre_diff_norm", pre_diff_norm}};
}

PairwiseConfig PairwiseConfig::from_json(const json& j) {
  PairwiseConfig c;
  read_opt(j, "d_in", c.d_in);
  read_opt(j, "pool_rank", c.pool_rank);
  read_opt(j, "proj_dim", c.proj_dim);
  read_opt(j, "gru_layers", c.gru_layers);
  read_opt(j, "gru_hidden", c.gru_hidden);
  read_opt(j, "scorer_hidden", c.scorer_hidden);
  read_opt(j, "dropout", c.dropout_rate);
  read_opt(j, "ln_bias", c.ln_bias);
  read_opt(j, "proj_bias", c.proj_bias);
  read_opt(j, "pre_diff_norm", c.pre_diff_norm);
  return c;
}

void PointwiseV2Config::validate() const {
  require_positive(d_in, "d_in");
  require_positive(pool_rank, "pool_rank");
  require_positive(proj_dim, "proj_dim");
  require_positive(gru_layers, "gru_layers");
  require_positive(gru_hidden, "gru_hidden");
  require_positive(scorer_hidden, "scorer_hidden");
  if (pool_rank > d_in) throw ConfigError("pool_rank must not exceed d_in");
  require_dropout(dropout_rate);
}

json PointwiseV2Config::to_json() const {
  return {{"d_in", d_in},           {"pool_rank", pool_rank},     {"proj_dim", proj_dim},
          {"gru_layers", gru_layers}, {"gru_hidden", gru_hidden}, {"scorer_hidden", scorer_hidden},
          {"dropout", dropout_rate},  {"ln_bias", ln_bias},       {"proj_bias", proj_bias}};
}

PointwiseV2Config PointwiseV2Config::from_json(const json& j) {
  PointwiseV2Config c;
  read_opt(j, "d_in", c.d_in);
  read_opt(j, "pool_rank", c.pool_rank);
  read_opt(j, "proj_dim", c.proj_dim);
  read_opt(j, "gru_layers", c.gru_layers);
  read_opt(j, "gru_hidden", c.gru_hidden);
  read_opt(j, "scorer_hidden", c.scorer_hidden);
  read_opt(j, "dropout", c.dropout_rate);
  read_opt(j, "ln_bias", c.ln_bias);
  read_opt(j, "proj_bias", c.proj_bias);
  return c;
}

void PointwiseV1Config::validate() const {
  require_positive(d_in, "d_in");
  require_positive(steps, "steps");
  require_positive(hidden, "hidden");
}

json PointwiseV1Config::to_json() const { return {{"d_in", d_in}, {"steps", steps}, {"hidden", hidden}}; }

PointwiseV1Config PointwiseV1Config::from_json(const json& j) {
  PointwiseV1Config c;
  read_opt(j, "d_in", c.d_in);
  read_opt(j, "steps", c.steps);
  read_opt(j, "hidden", c.hidden);
  return c;
}

void LinearConfig::validate() const {
  require_positive(d_in, "d_in");
  require_positive(steps, "steps");
}

json LinearConfig::to_json() const { return {{"d_in", d_in}, {"steps", steps}}; }

LinearConfig LinearConfig::from_json(const json& j) {
  LinearConfig c;
  read_opt(j, "d_in", c.d_in);
  read_opt(j, "steps", c.steps);
  return c;
}

namespace {

template <typename Real>
void check_record(const DenseRecord<Real>& r, std::size_t d_in) {
  if (r.steps.empty()) throw ConfigError("record has no loop steps");
  if (r.hidden() != d_in) {
    throw ConfigError("record hidden size " + std::to_string(r.hidden()) + " does not match evaluator d_in " +
                      std::to_string(d_in));
  }
}

template <typename Real>
std::vector<Real> concat_mean_pooled(const DenseRecord<Real>& r, std::size_t steps, std::size_t d_in) {
  check_record(r, d_in);
  if (r.steps.size() != steps) {
    throw ConfigError("record has " + std::to_string(r.steps.size()) + " steps, evaluator expects " +
                      std::to_string(steps));
  }
  return mean_pool_dense(r).data;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pairwise

template <typename Real>
PairwiseEvaluator<Real>::PairwiseEvaluator(const PairwiseConfig& config, std::uint64_t init_seed)
    : config_(config),
      pool_(config.d_in, config.pool_rank),
      ln_gain_("diff_ln.gain", {config.d_in}),
      head_(config.d_in, config.proj_dim, config.proj_bias, config.gru_layers, config.gru_hidden,
            config.scorer_hidden, Real(config.dropout_rate)) {
  config_.validate();
  Rng rng(init_seed);
  pool_.init(rng);
  nn::init_constant(ln_gain_, Real(1));
  head_.init(rng);
}

template <typename Real>
std::vector<std::vector<Real>> PairwiseEvaluator<Real>::normalized_steps(const DenseRecord<Real>& first,
                                                                         const DenseRecord<Real>& second,
                                                                         Tape* tape) const {
  check_record(first, config_.d_in);
  check_record(second, config_.d_in);
  if (first.steps.size() != second.steps.size()) throw ConfigError("paired records differ in step count");
  const std::size_t T = first.steps.size();
  const Real eps = Real(kLayerNormEps);
  const ParamTensor<Real>* bias = ln_bias_ ? &*ln_bias_ : nullptr;
  std::vector<std::vector<Real>> out;
  out.reserve(T);
  if (tape) {
    tape->pool_first.resize(T);
    tape->pool_second.resize(T);
    if (config_.pre_diff_norm) {
      tape->ln_first.resize(T);
      tape->ln_second.resize(T);
    } else {
      tape->ln_diff.resize(T);
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    auto pa = nn::attention_pool<Real>(first.steps[t], first.mask, pool_.keys, pool_.query,
                                       tape ? &tape->pool_first[t] : nullptr);
    auto pb = nn::attention_pool<Real>(second.steps[t], second.mask, pool_.keys, pool_.query,
                                       tape ? &tape->pool_second[t] : nullptr);
    std::vector<Real> v(pa.size());
    if (config_.pre_diff_norm) {
      auto na = nn::layernorm_forward<Real>(pa, ln_gain_, bias, eps, tape ? &tape->ln_first[t] : nullptr);
      auto nb = nn::layernorm_forward<Real>(pb, ln_gain_, bias, eps, tape ? &tape->ln_second[t] : nullptr);
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = na[k] - nb[k];
    } else {
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = pa[k] - pb[k];
      v = nn::layernorm_forward<Real>(v, ln_gain_, bias, eps, tape ? &tape->ln_diff[t] : nullptr);
    }
    out.push_back(std::move(v));
  }
  return out;
}

template <typename Real>
Real PairwiseEvaluator<Real>::score(const DenseRecord<Real>& first, const DenseRecord<Real>& second, bool training,
                                    Rng* rng, Tape* tape) const {
  auto steps = normalized_steps(first, second, tape);
  if (tape) {
    tape->first = &first;
    tape->second = &second;
  }
  return head_.forward(std::move(steps), training, rng, tape ? &tape->head : nullptr);
}

template <typename Real>
void PairwiseEvaluator<Real>::backward(const Tape& tape, Real dscore) {
  auto dsteps = head_.backward(tape.head, dscore);
  ParamTensor<Real>* bias = ln_bias_ ? &*ln_bias_ : nullptr;
  const std::size_t d = config_.d_in;
  for (std::size_t t = 0; t < dsteps.size(); ++t) {
    std::vector<Real> da(d, Real(0)), db(d, Real(0));
    if (config_.pre_diff_norm) {
      std::vector<Real> neg(dsteps[t].size());
      for (std::size_t k = 0; k < neg.size(); ++k) neg[k] = -dsteps[t][k];
      nn::layernorm_backward<Real>(tape.ln_first[t], ln_gain_, bias, dsteps[t], da);
      nn::layernorm_backward<Real>(tape.ln_second[t], ln_gain_, bias, neg, db);
    } else {
      nn::layernorm_backward<Real>(tape.ln_diff[t], ln_gain_, bias, dsteps[t], da);
      for (std::size_t k = 0; k < d; ++k) db[k] = -da[k];
    }
    nn::attention_pool_backward<Real>(tape.first->steps[t], tape.pool_first[t], pool_.keys, pool_.query, da, nullptr);
    nn::attention_pool_backward<Real>(tape.second->steps[t], tape.pool_second[t], pool_.keys, pool_.query, db,
                                      nullptr);
  }
}

template <typename Real>
std::vector<std::vector<Real>> PairwiseEvaluator<Real>::projected_differences(const DenseRecord<Real>& first,
                                                                              const DenseRecord<Real>& second) const {
  return head_.project(normalized_steps(first, second, nullptr));
}

template <typename Real>
nn::ParamRefs<Real> PairwiseEvaluator<Real>::parameters() {
  nn::ParamRefs<Real> out;
  pool_.collect(out);
  out.push_back(&ln_gain_);
  if (ln_bias_) out.push_back(&*ln_bias_);
  head_.collect(out);
  return out;
}

template <typename Real>
nn::ConstParamRefs<Real> PairwiseEvaluator<Real>::parameters() const {
  nn::ConstParamRefs<Real> out;
  pool_.collect(out);
  out.push_back(&ln_gain_);
  if (ln_bias_) out.push_back(&*ln_bias_);
  head_.collect(out);
  return out;
}

template <typename Real>
std::size_t PairwiseEvaluator<Real>::count_parameters(const PairwiseConfig& c) {
  c.validate();
  return c.d_in * c.pool_rank + c.pool_rank + c.d_in +
         SequenceHead<Real>::count(c.d_in, c.proj_dim, c.proj_bias, c.gru_layers, c.gru_hidden, c.scorer_hidden);
}

// ---------------------------------------------------------------------------
// Pointwise v2

template <typename Real>
PointwiseV2Evaluator<Real>::PointwiseV2Evaluator(const PointwiseV2Config& config, std::uint64_t init_seed,
                                                 bool calibrated)
    : config_(config),
      calibrated_(calibrated),
      pool_(config.d_in, config.pool_rank),
      ln_gain_("ln.gain", {config.d_in}),
      head_(config.d_in, config.proj_dim, config.proj_bias, config.gru_layers, config.gru_hidden,
            config.scorer_hidden, Real(config.dropout_rate)) {
  config_.validate();
  if (config_.ln_bias) ln_bias_.emplace("ln.bias", std::vector<std::size_t>{config.d_in});
  Rng rng(init_seed);
  pool_.init(rng);
  nn::init_constant(ln_gain_, Real(1));
  if (ln_bias_) nn::init_constant(*ln_bias_, Real(0));
  head_.init(rng);
}

template <typename Real>
Real PointwiseV2Evaluator<Real>::score(const DenseRecord<Real>& record, bool training, Rng* rng, Tape* tape) const {
  check_record(record, config_.d_in);
  const std::size_t T = record.steps.size();
  const ParamTensor<Real>* bias = ln_bias_ ? &*ln_bias_ : nullptr;
  if (tape) {
    tape->record = &record;
    tape->pool.assign(T, {});
    tape->ln.assign(T, {});
  }
  std::vector<std::vector<Real>> steps;
  steps.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    auto p = nn::attention_pool<Real>(record.steps[t], record.mask, pool_.keys, pool_.query,
                                      tape ? &tape->pool[t] : nullptr);
    steps.push_back(nn::layernorm_forward<Real>(p, ln_gain_, bias, Real(kLayerNormEps), tape ? &tape->ln[t] : nullptr));
  }
  return head_.forward(std::move(steps), training, rng, tape ? &tape->head : nullptr);
}

template <typename Real>
void PointwiseV2Evaluator<Real>::backward(const Tape& tape, Real dscore) {
  auto dsteps = head_.backward(tape.head, dscore);
  ParamTensor<Real>* bias = ln_bias_ ? &*ln_bias_ : nullptr;
  for (std::size_t t = 0; t < dsteps.size(); ++t) {
    std::vector<Real> dp(config_.d_in, Real(0));
    nn::layernorm_backward<Real>(tape.ln[t], ln_gain_, bias, dsteps[t], dp);
    nn::attention_pool_backward<Real>(tape.record->steps[t], tape.pool[t], pool_.keys, pool_.query, dp, nullptr);
  }
}

template <typename Real>
nn::ParamRefs<Real> PointwiseV2Evaluator<Real>::parameters() {
  nn::ParamRefs<Real> out;
  pool_.collect(out);
  out.push_back(&ln_gain_);
  if (ln_bias_) out.push_back(&*ln_bias_);
  head_.collect(out);
  return out;
}

template <typename Real>
nn::ConstParamRefs<Real> PointwiseV2Evaluator<Real>::parameters() const {
  nn::ConstParamRefs<Real> out;
  pool_.collect(out);
  out.push_back(&ln_gain_);
  if (ln_bias_) out.push_back(&*ln_bias_);
  head_.collect(out);
  return out;
}

template <typename Real>
std::size_t PointwiseV2Evaluator<Real>::count_parameters(const PointwiseV2Config& c) {
  c.validate();
  return c.d_in * c.pool_rank + c.pool_rank + c.d_in * (c.ln_bias ? 2 : 1) +
         SequenceHead<Real>::count(c.d_in, c.proj_dim, c.proj_bias, c.gru_layers, c.gru_hidden, c.scorer_hidden);
}

// ---------------------------------------------------------------------------
// Pointwise v1

template <typename Real>
PointwiseV1Evaluator<Real>::PointwiseV1Evaluator(const PointwiseV1Config& config, std::uint64_t init_seed)
    : config_(config),
      fc1_w_("mlp.fc1.weight", {config.steps * config.d_in, config.hidden}),
      fc1_b_("mlp.fc1.bias", {config.hidden}),
      fc2_w_("mlp.fc2.weight", {config.hidden, 1}),
      fc2_b_("mlp.fc2.bias", {1}) {
  config_.validate();
  Rng rng(init_seed);
  nn::init_fan_in(fc1_w_, fc1_w_.rows(), rng);
  nn::init_fan_in(fc1_b_, fc1_w_.rows(), rng);
  nn::init_fan_in(fc2_w_, fc2_w_.rows(), rng);
  nn::init_fan_in(fc2_b_, fc2_w_.rows(), rng);
}

template <typename Real>
Real PointwiseV1Evaluator<Real>::score(const DenseRecord<Real>& record, bool, Rng*, Tape* tape) const {
  auto input = concat_mean_pooled(record, config_.steps, config_.d_in);
  auto pre = nn::linear_forward<Real>(input, fc1_w_, &fc1_b_);
  std::vector<Real> hidden(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) hidden[i] = nn::gelu(pre[i]);
  const Real s = nn::linear_forward<Real>(hidden, fc2_w_, &fc2_b_)[0];
  if (tape) {
    tape->input = std::move(input);
    tape->pre_act = std::move(pre);
    tape->hidden = std::move(hidden);
  }
  return s;
}

template <typename Real>
void PointwiseV1Evaluator<Real>::backward(const Tape& tape, Real dscore) {
  std::vector<Real> dh(tape.hidden.size(), Real(0));
  const Real dy[1] = {dscore};
  nn::linear_backward<Real>(tape.hidden, fc2_w_, &fc2_b_, dy, dh);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= nn::gelu_derivative(tape.pre_act[i]);
  nn::linear_backward<Real>(tape.input, fc1_w_, &fc1_b_, dh, {});
}

template <typename Real>
nn::ParamRefs<Real> PointwiseV1Evaluator<Real>::parameters() {
  return {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_};
}

template <typename Real>
nn::ConstParamRefs<Real> PointwiseV1Evaluator<Real>::parameters() const {
  return {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_};
}

template <typename Real>
std::size_t PointwiseV1Evaluator<Real>::count_parameters(const PointwiseV1Config& c) {
  c.validate();
  return c.steps * c.d_in * c.hidden + c.hidden + c.hidden + 1;
}

// ---------------------------------------------------------------------------
// Linear

template <typename Real>
LinearEvaluator<Real>::LinearEvaluator(const LinearConfig& config, std::uint64_t init_seed)
    : config_(config), w_("linear.weight", {config.steps * config.d_in, 1}), b_("linear.bias", {1}) {
  config_.validate();
  Rng rng(init_seed);
  nn::init_fan_in(w_, w_.rows(), rng);
  nn::init_fan_in(b_, w_.rows(), rng);
}

template <typename Real>
Real LinearEvaluator<Real>::score(const DenseRecord<Real>& record, bool, Rng*, Tape* tape) const {
  auto input = concat_mean_pooled(record, config_.steps, config_.d_in);
  const Real s = nn::linear_forward<Real>(input, w_, &b_)[0];
  if (tape) tape->input = std::move(input);
  return s;
}

template <typename Real>
void LinearEvaluator<Real>::backward(const Tape& tape, Real dscore) {
  const Real dy[1] = {dscore};
  nn::linear_backward<Real>(tape.input, w_, &b_, dy, {});
}

template <typename Real>
nn::ParamRefs<Real> LinearEvaluator<Real>::parameters() {
  return {&w_, &b_};
}

template <typename Real>
nn::ConstParamRefs<Real> LinearEvaluator<Real>::parameters() const {
  return {&w_, &b_};
}

template <typename Real>
std::size_t LinearEvaluator<Real>::count_parameters(const LinearConfig& c) {
  c.validate();
  return c.steps * c.d_in + 1;
}

template class PairwiseEvaluator<float>;
template class PairwiseEvaluator<double>;
template class PointwiseV2Evaluator<float>;
template class PointwiseV2Evaluator<double>;
template class PointwiseV1Evaluator<float>;
template class PointwiseV1Evaluator<double>;
template class LinearEvaluator<float>;
template class LinearEvaluator<double>;

// ---------------------------------------------------------------------------

Architecture architecture_of(const AnyEvaluator& evaluator) {
  return std::visit([](const auto& e) { return e.architecture(); }, evaluator);
}

json config_json(const AnyEvaluator& evaluator) {
  return std::visit([](const auto& e) { return e.config().to_json(); }, evaluator);
}

bool is_pairwise(const AnyEvaluator& evaluator) {
  return std::visit([](const auto& e) { return std::decay_t<decltype(e)>::kPairwise; }, evaluator);
}

nn::ParamRefs<float> parameters_of(AnyEvaluator& evaluator) {
  return std::visit([](auto& e) { return e.parameters(); }, evaluator);
}

nn::ConstParamRefs<float> parameters_of(const AnyEvaluator& evaluator) {
  return std::visit([](const auto& e) { return e.parameters(); }, evaluator);
}

AnyEvaluator make_evaluator(Architecture arch, const json& config, std::uint64_t init_seed) {
  switch (arch) {
    case Architecture::pairwise:
      return PairwiseEvaluator<float>(PairwiseConfig::from_json(config), init_seed);
    case Architecture::pointwise_v2:
      return PointwiseV2Evaluator<float>(PointwiseV2Config::from_json(config), init_seed, false);
    case Architecture::calibrated:
      return PointwiseV2Evaluator<float>(PointwiseV2Config::from_json(config), init_seed, true);
    case Architecture::pointwise_v1:
      return PointwiseV1Evaluator<float>(PointwiseV1Config::from_json(config), init_seed);
    case Architecture::linear:
      return LinearEvaluator<float>(LinearConfig::from_json(config), init_seed);
  }
  throw ConfigError("unknown architecture");
}

std::size_t count_parameters(Architecture arch, const json& config) {
  switch (arch) {
    case Architecture::pairwise:
      return PairwiseEvaluator<float>::count_parameters(PairwiseConfig::from_json(config));
    case Architecture::pointwise_v2:
    case Architecture::calibrated:
      return PointwiseV2Evaluator<float>::count_parameters(PointwiseV2Config::from_json(config));
    case Architecture::pointwise_v1:
      return PointwiseV1Evaluator<float>::count_parameters(PointwiseV1Config::from_json(config));
    case Architecture::linear:
      return LinearEvaluator<float>::count_parameters(LinearConfig::from_json(config));
  }
  throw ConfigError("unknown architecture");
}

float score_pair(const AnyEvaluator& evaluator, const features::LoopStateRecord& first,
                 const features::LoopStateRecord& second) {
  const auto a = to_dense<float>(first);
  const auto b = to_dense<float>(second);
  return std::visit(
      [&](const auto& e) -> float {
        if constexpr (std::decay_t<decltype(e)>::kPairwise) {
          return e.score(a, b, false, nullptr);
        } else {
          return e.score(a, false, nullptr) - e.score(b, false, nullptr);
        }
      },
      evaluator);
}

}  // namespace loopeval::eval
