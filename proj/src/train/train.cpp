#include "loopeval/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "loopeval/eval/checkpoint.hpp"
#include "loopeval/optim/optim.hpp"

namespace loopeval::train {

using nlohmann::json;

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::pairwise_swap: return "pairwise_swap";
    case LossKind::pointwise_ranking: return "pointwise_ranking";
    case LossKind::calibrated: return "calibrated";
    case LossKind::pairwise_fixed_no_reg: return "pairwise_fixed_no_reg";
  }
  return "unknown";
}

LossKind loss_kind_from_string(const std::string& s) {
  for (auto k : {LossKind::pairwise_swap, LossKind::pointwise_ranking, LossKind::calibrated,
                 LossKind::pairwise_fixed_no_reg}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown loss kind '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(lr_max > 0 && lr_max <= 1)) throw ConfigError("lr_max must be in (0, 1]");
  if (!(lr_min >= 0 && lr_min <= lr_max)) throw ConfigError("lr_min must be in [0, lr_max]");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(weight_decay >= 0 && weight_decay < 1)) throw ConfigError("weight_decay must be in [0, 1)");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (!(swap_prob >= 0 && swap_prob <= 1)) throw ConfigError("swap_prob must be in [0, 1]");
  if (!(l2_score_coeff >= 0)) throw ConfigError("l2_score_coeff must be non-negative");
  if (accumulation_steps == 0) throw ConfigError("accumulation_steps must be positive");
}

json TrainConfig::to_json() const {
  return {{"lr_max", lr_max},
          {"lr_min", lr_min},
          {"warmup_steps", warmup_steps},
          {"batch_size", batch_size},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"epochs", epochs},
          {"swap_prob", swap_prob},
          {"l2_score_coeff", l2_score_coeff},
          {"accumulation_steps", accumulation_steps},
          {"seed", seed},
          {"loss", to_string(loss)}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.epochs = j.value("epochs", c.epochs);
  c.swap_prob = j.value("swap_prob", c.swap_prob);
  c.l2_score_coeff = j.value("l2_score_coeff", c.l2_score_coeff);
  c.accumulation_steps = j.value("accumulation_steps", c.accumulation_steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------

template <typename Real>
Real neg_log_sigmoid(Real x) {
  // -log sigmoid(x) = softplus(-x)
  return std::max(-x, Real(0)) + std::log1p(std::exp(-std::abs(x)));
}

namespace {

template <typename Real>
Real sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace

template <typename Real>
LossGrad<Real> pairwise_loss(Real score, int target, Real l2_coeff) {
  if (target != 1 && target != -1) throw ConfigError("pairwise_loss: target must be +1 or -1");
  const Real t = Real(target);
  LossGrad<Real> out;
  out.value = neg_log_sigmoid(t * score) + l2_coeff * score * score;
  out.d_first = -t * sigmoid(-t * score) + Real(2) * l2_coeff * score;
  return out;
}

template <typename Real>
LossGrad<Real> pointwise_ranking_loss(Real s_chosen, Real s_rejected) {
  const Real m = s_chosen - s_rejected;
  const Real g = -sigmoid(-m);
  return {neg_log_sigmoid(m), g, -g};
}

template <typename Real>
LossGrad<Real> calibrated_loss(Real s_chosen, Real s_rejected) {
  auto out = pointwise_ranking_loss(s_chosen, s_rejected);
  // BCE(sigmoid(s), 1) = softplus(-s); BCE(sigmoid(s), 0) = softplus(s)
  out.value += neg_log_sigmoid(s_chosen) + neg_log_sigmoid(-s_rejected);
  out.d_first += -sigmoid(-s_chosen);
  out.d_second += sigmoid(s_rejected);
  return out;
}

template float neg_log_sigmoid<float>(float);
template double neg_log_sigmoid<double>(double);
template LossGrad<float> pairwise_loss<float>(float, int, float);
template LossGrad<double> pairwise_loss<double>(double, int, double);
template LossGrad<float> pointwise_ranking_loss<float>(float, float);
template LossGrad<double> pointwise_ranking_loss<double>(double, double);
template LossGrad<float> calibrated_loss<float>(float, float);
template LossGrad<double> calibrated_loss<double>(double, double);

// ---------------------------------------------------------------------------

std::vector<OrderedPair> swap_batch(std::size_t batch_size, nn::Rng& rng, double swap_prob) {
  if (!(swap_prob >= 0 && swap_prob <= 1)) throw ConfigError("swap_prob must be in [0, 1]");
  std::bernoulli_distribution coin(swap_prob);
  std::vector<OrderedPair> out(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const bool s = coin(rng);
    out[i] = {i, s, s ? -1 : 1};
  }
  return out;
}

double deflated_accuracy(std::span<const double> scores, std::span<const int> targets) {
  if (scores.size() != targets.size()) throw ConfigError("deflated_accuracy: length mismatch");
  if (scores.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((scores[i] > 0 && targets[i] > 0) || (scores[i] < 0 && targets[i] < 0)) ++correct;
  }
  return double(correct) / double(scores.size());
}

json ScoreStats::to_json() const {
  return {{"mean", mean}, {"std", std},           {"min", min},
          {"max", max},   {"positive_rate", positive_rate}, {"zero_count", zero_count}};
}

ScoreStats score_stats(std::span<const double> scores) {
  ScoreStats s;
  if (scores.empty()) return s;
  const double n = double(scores.size());
  s.min = *std::min_element(scores.begin(), scores.end());
  s.max = *std::max_element(scores.begin(), scores.end());
  s.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double ss = 0;
  std::size_t pos = 0;
  for (double v : scores) {
    ss += (v - s.mean) * (v - s.mean);
    if (v > 0) ++pos;
    if (v == 0) ++s.zero_count;
  }
  s.std = std::sqrt(ss / n);
  s.positive_rate = double(pos) / n;
  return s;
}

json FixedOrderResult::to_json() const {
  return {{"n", n}, {"accuracy", accuracy}, {"stats", stats.to_json()}};
}

FixedOrderResult fixed_order_eval(const eval::AnyEvaluator& evaluator,
                                  const std::vector<features::PreferencePair>& pairs) {
  if (pairs.empty()) throw ConfigError("fixed_order_eval: empty dataset");
  FixedOrderResult r;
  r.n = pairs.size();
  r.scores.reserve(pairs.size());
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    const double s = eval::score_pair(evaluator, p.chosen, p.rejected);
    if (s > 0) ++correct;
    r.scores.push_back(s);
  }
  r.accuracy = double(correct) / double(r.n);
  r.stats = score_stats(r.scores);
  return r;
}

FixedOrderResult fixed_order_eval(const eval::AnyEvaluator& evaluator, const features::ChunkSource& data) {
  FixedOrderResult r;
  std::size_t correct = 0;
  for (std::size_t c = 0; c < data.chunk_count(); ++c) {
    const auto chunk = data.load(c);
    for (const auto& p : chunk.pairs) {
      const double s = eval::score_pair(evaluator, p.chosen, p.rejected);
      if (s > 0) ++correct;
      r.scores.push_back(s);
    }
  }
  if (r.scores.empty()) throw ConfigError("fixed_order_eval: empty dataset");
  r.n = r.scores.size();
  r.accuracy = double(correct) / double(r.n);
  r.stats = score_stats(r.scores);
  return r;
}

json EpochMetrics::to_json() const {
  return {{"epoch", epoch},
          {"mean_loss", mean_loss},
          {"deflated_train_acc", deflated_train_acc},
          {"fixed_order_eval_acc", std::isnan(fixed_order_eval_acc) ? json(nullptr) : json(fixed_order_eval_acc)},
          {"lr_first", lr_first},
          {"lr_last", lr_last},
          {"eval_stats", eval_stats.to_json()},
          {"inversion_warning", inversion_warning}};
}

// ---------------------------------------------------------------------------

namespace {

bool loss_is_pairwise(LossKind k) { return k == LossKind::pairwise_swap || k == LossKind::pairwise_fixed_no_reg; }

struct BatchOutcome {
  double loss_sum = 0;
  std::vector<double> presented_scores;
  std::vector<int> targets;
};

template <typename Model>
BatchOutcome run_batch(Model& model, const std::vector<features::PreferencePair>& batch, const TrainConfig& cfg,
                       double grad_scale, nn::Rng& rng) {
  BatchOutcome out;
  const bool fixed = cfg.loss == LossKind::pairwise_fixed_no_reg;
  const auto order = swap_batch(batch.size(), rng, fixed ? 0.0 : cfg.swap_prob);
  const float l2 = fixed ? 0.0f : float(cfg.l2_score_coeff);
  for (const auto& o : order) {
    const auto& pair = batch[o.index];
    const auto chosen = eval::to_dense<float>(pair.chosen);
    const auto rejected = eval::to_dense<float>(pair.rejected);
    double presented = 0;
    LossGrad<float> lg;
    if constexpr (Model::kPairwise) {
      const auto& first = o.swapped ? rejected : chosen;
      const auto& second = o.swapped ? chosen : rejected;
      typename Model::Tape tape;
      const float s = model.score(first, second, true, &rng, &tape);
      lg = pairwise_loss<float>(s, o.target, l2);
      if (std::isfinite(lg.value)) model.backward(tape, lg.d_first * float(grad_scale));
      presented = s;
    } else {
      typename Model::Tape tc, tr;
      const float sc = model.score(chosen, true, &rng, &tc);
      const float sr = model.score(rejected, true, &rng, &tr);
      lg = cfg.loss == LossKind::calibrated ? calibrated_loss<float>(sc, sr) : pointwise_ranking_loss<float>(sc, sr);
      if (std::isfinite(lg.value)) {
        model.backward(tc, lg.d_first * float(grad_scale));
        model.backward(tr, lg.d_second * float(grad_scale));
      }
      presented = o.swapped ? double(sr) - double(sc) : double(sc) - double(sr);
    }
    if (!std::isfinite(lg.value)) {
      throw NumericError("non-finite loss on pair '" + pair.prompt_id + "' (score " + std::to_string(presented) +
                         ")");
    }
    out.loss_sum += lg.value;
    out.presented_scores.push_back(presented);
    out.targets.push_back(o.target);
  }
  return out;
}

std::string epoch_stem(std::size_t epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
  return s.str();
}

}  // namespace

TrainResult train(const TrainConfig& config, eval::AnyEvaluator model, const features::ChunkSource& train_data,
                  const features::ChunkSource* eval_data, const TrainOptions& options) {
  config.validate();
  const bool pairwise_model = eval::is_pairwise(model);
  if (pairwise_model != loss_is_pairwise(config.loss)) {
    throw ConfigError("loss '" + to_string(config.loss) + "' does not fit architecture '" +
                      eval::to_string(eval::architecture_of(model)) + "'");
  }

  TrainResult result;
  if (options.run_dir) {
    std::filesystem::create_directories(*options.run_dir);
    json echo = {{"train", config.to_json()},
                 {"architecture", eval::to_string(eval::architecture_of(model))},
                 {"model", eval::config_json(model)}};
    std::ofstream(*options.run_dir / "config.json") << echo.dump(2) << '\n';
  }
  if (config.epochs == 0) {
    result.checkpoints.push_back({0, model});
    return result;
  }

  const std::size_t n_train = train_data.pair_count();
  if (n_train == 0) throw ConfigError("training data is empty");
  const std::size_t batches = (n_train + config.batch_size - 1) / config.batch_size;
  const std::size_t steps_per_epoch = (batches + config.accumulation_steps - 1) / config.accumulation_steps;
  const auto total_steps = std::int64_t(steps_per_epoch * config.epochs);
  if (config.warmup_steps >= total_steps) {
    throw ConfigError("warmup_steps (" + std::to_string(config.warmup_steps) +
                      ") must be below the total optimizer steps (" + std::to_string(total_steps) + ")");
  }

  auto params = eval::parameters_of(model);
  nn::zero_grads(params);
  optim::AdamW opt(params, {config.lr_max, config.lr_min, config.weight_decay});
  nn::Rng rng(config.seed);
  std::int64_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    double loss_sum = 0;
    std::vector<double> presented;
    std::vector<int> targets;
    std::size_t pending_batches = 0;
    bool first_step = true;

    auto optimizer_step = [&] {
      optim::clip_grad_norm(params, config.clip_norm);
      const double lr = optim::cosine_warmup_lr(step, total_steps, config.warmup_steps, config.lr_max, config.lr_min);
      opt.step(lr);
      nn::zero_grads(params);
      ++step;
      if (first_step) m.lr_first = lr;
      first_step = false;
      m.lr_last = lr;
      pending_batches = 0;
    };

    auto process = [&](const std::vector<features::PreferencePair>& batch) {
      const double scale = 1.0 / (double(batch.size()) * double(config.accumulation_steps));
      auto outcome = std::visit([&](auto& mdl) { return run_batch(mdl, batch, config, scale, rng); }, model);
      loss_sum += outcome.loss_sum;
      presented.insert(presented.end(), outcome.presented_scores.begin(), outcome.presented_scores.end());
      targets.insert(targets.end(), outcome.targets.begin(), outcome.targets.end());
      if (++pending_batches == config.accumulation_steps) optimizer_step();
    };

    std::vector<std::size_t> chunk_order(train_data.chunk_count());
    std::iota(chunk_order.begin(), chunk_order.end(), 0);
    std::shuffle(chunk_order.begin(), chunk_order.end(), rng);
    std::deque<features::PreferencePair> pending;
    for (auto ci : chunk_order) {
      features::FeatureChunk chunk;
      try {
        chunk = train_data.load(ci);
      } catch (const features::ChunkFormatError& e) {
        throw features::ChunkFormatError(e.kind(), train_data.describe(ci) + ": " + e.what());
      }
      std::shuffle(chunk.pairs.begin(), chunk.pairs.end(), rng);
      for (auto& p : chunk.pairs) pending.push_back(std::move(p));
      while (pending.size() >= config.batch_size) {
        std::vector<features::PreferencePair> batch(std::make_move_iterator(pending.begin()),
                                                    std::make_move_iterator(pending.begin() + config.batch_size));
        pending.erase(pending.begin(), pending.begin() + config.batch_size);
        process(batch);
      }
    }
    if (!pending.empty()) {
      std::vector<features::PreferencePair> batch(std::make_move_iterator(pending.begin()),
                                                  std::make_move_iterator(pending.end()));
      pending.clear();
      process(batch);
    }
    if (pending_batches > 0) optimizer_step();

    m.mean_loss = loss_sum / double(presented.size());
    m.deflated_train_acc = deflated_accuracy(presented, targets);
    m.fixed_order_eval_acc = std::numeric_limits<double>::quiet_NaN();
    if (eval_data) {
      const auto fo = fixed_order_eval(model, *eval_data);
      m.fixed_order_eval_acc = fo.accuracy;
      m.eval_stats = fo.stats;
    }
    if (!result.metrics.empty()) {
      const auto& prev = result.metrics.back();
      m.inversion_warning = m.deflated_train_acc > prev.deflated_train_acc &&
                            m.fixed_order_eval_acc < prev.fixed_order_eval_acc;
    }

    result.checkpoints.push_back({epoch, model});
    result.metrics.push_back(m);
    if (options.run_dir) {
      json meta = {{"epoch", epoch}, {"seed", config.seed}, {"train", config.to_json()}};
      eval::save_checkpoint(model, *options.run_dir / epoch_stem(epoch), meta);
      write_metrics_csv(result.metrics, *options.run_dir / "metrics.csv");
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  return result;
}

std::vector<std::size_t> inversion_epochs(const std::vector<EpochMetrics>& metrics, double min_drop) {
  std::vector<std::size_t> out;
  double peak_eval = -1, max_deflated = -1;
  for (const auto& m : metrics) {
    peak_eval = std::max(peak_eval, m.fixed_order_eval_acc);
    max_deflated = std::max(max_deflated, m.deflated_train_acc);
    if (m.deflated_train_acc >= max_deflated && peak_eval - m.fixed_order_eval_acc >= min_drop) out.push_back(m.epoch);
  }
  return out;
}

namespace {
constexpr const char* kCsvHeader =
    "epoch,loss,deflated_acc,fixed_order_acc,lr_first,lr_last,score_mean,score_std,score_min,score_max,"
    "positive_rate,inversion_warning";
}

void write_metrics_csv(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << kCsvHeader << '\n' << std::setprecision(10);
  for (const auto& m : metrics) {
    out << m.epoch << ',' << m.mean_loss << ',' << m.deflated_train_acc << ',' << m.fixed_order_eval_acc << ','
        << m.lr_first << ',' << m.lr_last << ',' << m.eval_stats.mean << ',' << m.eval_stats.std << ','
        << m.eval_stats.min << ',' << m.eval_stats.max << ',' << m.eval_stats.positive_rate << ','
        << (m.inversion_warning ? 1 : 0) << '\n';
  }
}

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing metrics file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kCsvHeader) throw ConfigError("unexpected metrics header in " + path.string());
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 12) throw ConfigError("malformed metrics row in " + path.string());
    EpochMetrics m;
    m.epoch = std::stoul(f[0]);
    m.mean_loss = std::stod(f[1]);
    m.deflated_train_acc = std::stod(f[2]);
    m.fixed_order_eval_acc = std::stod(f[3]);
    m.lr_first = std::stod(f[4]);
    m.lr_last = std::stod(f[5]);
    m.eval_stats.mean = std::stod(f[6]);
    m.eval_stats.std = std::stod(f[7]);
    m.eval_stats.min = std::stod(f[8]);
    m.eval_stats.max = std::stod(f[9]);
    m.eval_stats.positive_rate = std::stod(f[10]);
    m.inversion_warning = f[11] == "1";
    out.push_back(m);
  }
  return out;
}

namespace {
std::string pct(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << v * 100 << '%';
  return s.str();
}
}  // namespace

std::string format_epoch_table(const std::vector<EpochMetrics>& metrics) {
  std::ostringstream s;
  s << std::left << std::setw(7) << "Epoch" << std::setw(21) << "Deflated Train Acc" << "Fixed-Order Eval Acc\n";
  for (const auto& m : metrics) {
    s << std::setw(7) << m.epoch << std::setw(21) << pct(m.deflated_train_acc) << pct(m.fixed_order_eval_acc);
    if (m.inversion_warning) s << "   WARNING: swap metric rose while held-out accuracy fell";
    s << '\n';
  }
  return s.str();
}

}  // namespace loopeval::train
