#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopeval/eval/evaluators.hpp"
#include "loopeval/features/chunk_io.hpp"

namespace loopeval::train {

enum class LossKind { pairwise_swap, pointwise_ranking, calibrated, pairwise_fixed_no_reg };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);

struct TrainConfig {
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  std::int64_t warmup_steps = 200;
  std::size_t batch_size = 32;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t epochs = 5;
  double swap_prob = 0.5;
  double l2_score_coeff = 1e-4;
  std::size_t accumulation_steps = 1;  // optimizer step every k batches
  std::uint64_t seed = 0;
  LossKind loss = LossKind::pairwise_swap;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Losses. Each returns the value and its derivative w.r.t. the input score(s).

template <typename Real>
struct LossGrad {
  Real value = 0;
  Real d_first = 0;
  Real d_second = 0;
};

/// -log sigmoid(x), stable for large |x|.
template <typename Real>
Real neg_log_sigmoid(Real x);

/// -log sigmoid(target * score) + l2 * score^2; gradient in d_first.
template <typename Real>
LossGrad<Real> pairwise_loss(Real score, int target, Real l2_coeff);

/// -log sigmoid(s_chosen - s_rejected).
template <typename Real>
LossGrad<Real> pointwise_ranking_loss(Real s_chosen, Real s_rejected);

/// Ranking term plus BCE(sigmoid(s_chosen), 1) plus BCE(sigmoid(s_rejected), 0), equal weights.
template <typename Real>
LossGrad<Real> calibrated_loss(Real s_chosen, Real s_rejected);

// ---------------------------------------------------------------------------

struct OrderedPair {
  std::size_t index = 0;  // into the batch
  bool swapped = false;
  int target = 1;
};

/// Per pair, with probability swap_prob, present (rejected, chosen) with target -1.
std::vector<OrderedPair> swap_batch(std::size_t batch_size, nn::Rng& rng, double swap_prob);

/// Fraction with sign(score) == target; zero scores count as wrong.
double deflated_accuracy(std::span<const double> scores, std::span<const int> targets);

struct ScoreStats {
  double mean = 0;
  double std = 0;
  double min = 0;
  double max = 0;
  double positive_rate = 0;
  std::size_t zero_count = 0;

  nlohmann::json to_json() const;
};

ScoreStats score_stats(std::span<const double> scores);

struct FixedOrderResult {
  std::size_t n = 0;
  double accuracy = 0;
  ScoreStats stats;
  std::vector<double> scores;  // chosen always in front

  nlohmann::json to_json() const;
};

/// Chosen always first; correct when the score (pairwise) or s_c - s_r (pointwise) is positive.
FixedOrderResult fixed_order_eval(const eval::AnyEvaluator& evaluator, const features::ChunkSource& data);
FixedOrderResult fixed_order_eval(const eval::AnyEvaluator& evaluator,
                                  const std::vector<features::PreferencePair>& pairs);

// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double deflated_train_acc = 0;
  double fixed_order_eval_acc = 0;  // NaN without eval data
  double lr_first = 0;
  double lr_last = 0;
  ScoreStats eval_stats;
  bool inversion_warning = false;  // swap metric rose while fixed-order accuracy fell

  nlohmann::json to_json() const;
};

struct EpochCheckpoint {
  std::size_t epoch = 0;
  eval::AnyEvaluator evaluator;
};

struct TrainResult {
  std::vector<EpochCheckpoint> checkpoints;
  std::vector<EpochMetrics> metrics;
};

struct TrainOptions {
  std::optional<std::filesystem::path> run_dir;           // config.json, epoch checkpoints, metrics.csv
  std::function<void(const EpochMetrics&)> on_epoch;      // progress hook
};

/// Runs the epoch loop. Deterministic under config.seed; with 0 epochs returns the initial model.
TrainResult train(const TrainConfig& config, eval::AnyEvaluator model, const features::ChunkSource& train_data,
                  const features::ChunkSource* eval_data, const TrainOptions& options = {});

/// Epochs where fixed-order eval sits at least min_drop below its running peak while the swap
/// metric is at its running maximum.
std::vector<std::size_t> inversion_epochs(const std::vector<EpochMetrics>& metrics, double min_drop);

void write_metrics_csv(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path);
std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path);

/// The two-column epoch table (swap metric vs fixed-order), one row per epoch.
std::string format_epoch_table(const std::vector<EpochMetrics>& metrics);

}  // namespace loopeval::train
