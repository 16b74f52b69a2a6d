#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "loopeval/eval/evaluators.hpp"
#include "loopeval/features/records.hpp"
#include "loopeval/train/train.hpp"

namespace loopeval::diag {

enum class Correlation { pearson, spearman };

inline constexpr double kConstantOutputRel = 1e-3;
inline constexpr double kOrderInsensitiveFlipRate = 0.05;
inline constexpr double kOrderInsensitiveRho = -0.5;

struct FlipReport {
  std::size_t n = 0;
  double sign_flip_rate = 0;
  std::size_t tie_count = 0;  // pairs where either score is exactly zero
  std::optional<double> correlation;
  Correlation correlation_kind = Correlation::pearson;
  double mean_sum = 0;
  double normal_mean = 0, normal_std = 0, normal_min = 0, normal_max = 0;
  double flipped_mean = 0, flipped_std = 0, flipped_min = 0, flipped_max = 0;
  bool constant_output = false;   // std(normal) < 1e-3 * (|mean| + 1e-6)
  bool order_insensitive = false; // flip rate <= 5% and no strong negative correlation
  bool degenerate = false;
  std::string degeneracy_reason;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Core of the flip test over already computed scores (normal = f(c, r), flipped = f(r, c)).
FlipReport flip_report(std::span<const double> normal, std::span<const double> flipped,
                       Correlation kind = Correlation::pearson);

using PairScorer = std::function<double(const features::LoopStateRecord&, const features::LoopStateRecord&)>;

FlipReport flip_test(const PairScorer& scorer, const std::vector<features::PreferencePair>& pairs,
                     Correlation kind = Correlation::pearson);
FlipReport flip_test(const eval::AnyEvaluator& evaluator, const std::vector<features::PreferencePair>& pairs,
                     Correlation kind = Correlation::pearson);

double pearson(std::span<const double> a, std::span<const double> b, bool* defined = nullptr);
double spearman(std::span<const double> a, std::span<const double> b, bool* defined = nullptr);

// ---------------------------------------------------------------------------

struct CrossEpochRow {
  std::size_t epoch = 0;
  double fixed_order_acc = 0;
  FlipReport flip;
};

std::vector<CrossEpochRow> cross_epoch_flip(const std::vector<train::EpochCheckpoint>& checkpoints,
                                            const std::vector<features::PreferencePair>& pairs,
                                            Correlation kind = Correlation::pearson);

/// Columns: epoch, fixed_order_acc, correlation, sign_flip_rate, mean_sum.
std::string cross_epoch_csv(const std::vector<CrossEpochRow>& rows);
std::string cross_epoch_text(const std::vector<CrossEpochRow>& rows);
nlohmann::json cross_epoch_json(const std::vector<CrossEpochRow>& rows);

// ---------------------------------------------------------------------------

struct ProbeFit {
  Eigen::VectorXd weights;
  double intercept = 0;
  int iterations = 0;
  bool converged = false;
  double final_gradient_norm = 0;
  double train_accuracy = 0;

  double decision(const Eigen::Ref<const Eigen::VectorXd>& x) const { return weights.dot(x) + intercept; }
};

/// L2-regularized logistic regression, full batch L-BFGS. Objective is the mean log loss plus
/// 0.5 * (regularization / n) * |w|^2; the intercept is not penalized.
ProbeFit fit_logistic_probe(const Eigen::MatrixXd& X, const std::vector<int>& y, double regularization);

/// Fraction of rows whose predicted class (decision > 0 -> 1) matches y.
double probe_accuracy(const ProbeFit& fit, const Eigen::MatrixXd& X, const std::vector<int>& y);

enum class ProbeMode { pairwise_diff, independent };
enum class FeatureSource { final_step, all_steps_concat };

std::string to_string(ProbeMode mode);
std::string to_string(FeatureSource source);
ProbeMode probe_mode_from_string(const std::string& s);
FeatureSource feature_source_from_string(const std::string& s);

struct ProbeOptions {
  FeatureSource source = FeatureSource::final_step;
  double train_fraction = 0.6;  // pair-level split, by index
  double regularization_scale = 1e-4;  // regularization = scale * n_train_rows
};

struct ProbeReport {
  ProbeMode mode = ProbeMode::pairwise_diff;
  FeatureSource source = FeatureSource::final_step;
  std::size_t n_train_rows = 0;
  std::size_t n_test_rows = 0;
  double train_acc = 0;
  double test_acc = 0;
  double flipped_test_acc = 0;
  double weight_norm = 0;
  double intercept = 0;
  int iterations = 0;
  bool converged = false;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

std::vector<double> record_features(const features::LoopStateRecord& record, FeatureSource source);

ProbeReport pairwise_probe(const std::vector<features::PreferencePair>& pairs, const ProbeOptions& options = {});
ProbeReport independent_probe(const std::vector<features::PreferencePair>& pairs, const ProbeOptions& options = {});

// ---------------------------------------------------------------------------

struct ShortcutReport {
  std::size_t n = 0;
  double chosen_mean_tokens = 0;
  double rejected_mean_tokens = 0;
  double longer_is_chosen_acc = 0;
  std::vector<double> larger_norm_is_chosen_acc;  // per loop step
  std::vector<double> mean_activation_ratio;      // per loop step, chosen / rejected

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Ties (equal lengths or equal norms) earn half credit.
ShortcutReport shortcut_analysis(const std::vector<features::PreferencePair>& pairs);

}  // namespace loopeval::diag
