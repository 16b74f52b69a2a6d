#include "loopeval/diag/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <ceres/ceres.h>

namespace loopeval::diag {

using nlohmann::json;

namespace {

struct Moments {
  double mean = 0, std = 0, min = 0, max = 0;
};

Moments moments(std::span<const double> v) {
  Moments m;
  if (v.empty()) return m;
  m.min = *std::min_element(v.begin(), v.end());
  m.max = *std::max_element(v.begin(), v.end());
  if (m.min == m.max) {
    m.mean = m.min;  // summing can leave a rounding residue
    return m;
  }
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / double(v.size()));
  return m;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * double(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

std::string signed_fmt(double v, int prec = 2) {
  std::ostringstream s;
  s << std::showpos << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

}  // namespace

double pearson(std::span<const double> a, std::span<const double> b, bool* defined) {
  if (a.size() != b.size()) throw ConfigError("correlation: length mismatch");
  const auto ma = moments(a), mb = moments(b);
  if (a.size() < 2 || ma.std == 0 || mb.std == 0) {
    if (defined) *defined = false;
    return 0.0;
  }
  double cov = 0;
  for (std::size_t i = 0; i < a.size(); ++i) cov += (a[i] - ma.mean) * (b[i] - mb.mean);
  cov /= double(a.size());
  if (defined) *defined = true;
  return std::clamp(cov / (ma.std * mb.std), -1.0, 1.0);
}

double spearman(std::span<const double> a, std::span<const double> b, bool* defined) {
  if (a.size() != b.size()) throw ConfigError("correlation: length mismatch");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb, defined);
}

FlipReport flip_report(std::span<const double> normal, std::span<const double> flipped, Correlation kind) {
  if (normal.empty()) throw ConfigError("flip test: no pairs");
  if (normal.size() != flipped.size()) throw ConfigError("flip test: normal/flipped length mismatch");
  FlipReport r;
  r.n = normal.size();
  r.correlation_kind = kind;
  std::size_t flips = 0;
  double sum = 0;
  for (std::size_t i = 0; i < r.n; ++i) {
    if (normal[i] == 0 || flipped[i] == 0) {
      ++r.tie_count;
    } else if ((normal[i] > 0) != (flipped[i] > 0)) {
      ++flips;
    }
    sum += normal[i] + flipped[i];
  }
  r.sign_flip_rate = double(flips) / double(r.n);
  r.mean_sum = sum / double(r.n);
  const auto mn = moments(normal), mf = moments(flipped);
  r.normal_mean = mn.mean, r.normal_std = mn.std, r.normal_min = mn.min, r.normal_max = mn.max;
  r.flipped_mean = mf.mean, r.flipped_std = mf.std, r.flipped_min = mf.min, r.flipped_max = mf.max;

  bool defined = false;
  const double rho = kind == Correlation::pearson ? pearson(normal, flipped, &defined) : spearman(normal, flipped, &defined);
  if (defined) r.correlation = rho;

  r.constant_output = mn.std < kConstantOutputRel * (std::abs(mn.mean) + 1e-6);
  r.order_insensitive =
      r.sign_flip_rate <= kOrderInsensitiveFlipRate && (!r.correlation || *r.correlation > kOrderInsensitiveRho);
  r.degenerate = r.constant_output || r.order_insensitive;
  std::vector<std::string> why;
  if (r.constant_output) why.push_back("constant output (std " + fmt(mn.std, 6) + ", mean " + fmt(mn.mean) + ")");
  if (r.order_insensitive) {
    why.push_back("order-insensitive (sign flip rate " + fmt(r.sign_flip_rate, 3) + ", correlation " +
                  (r.correlation ? fmt(*r.correlation, 3) : std::string("undefined")) + ")");
  }
  for (std::size_t i = 0; i < why.size(); ++i) r.degeneracy_reason += (i ? "; " : "") + why[i];
  return r;
}

json FlipReport::to_json() const {
  return {{"n", n},
          {"sign_flip_rate", sign_flip_rate},
          {"tie_count", tie_count},
          {"correlation", correlation ? json(*correlation) : json(nullptr)},
          {"correlation_kind", correlation_kind == Correlation::pearson ? "pearson" : "spearman"},
          {"mean_sum", mean_sum},
          {"normal", {{"mean", normal_mean}, {"std", normal_std}, {"min", normal_min}, {"max", normal_max}}},
          {"flipped", {{"mean", flipped_mean}, {"std", flipped_std}, {"min", flipped_min}, {"max", flipped_max}}},
          {"constant_output", constant_output},
          {"order_insensitive", order_insensitive},
          {"degenerate", degenerate},
          {"degeneracy_reason", degeneracy_reason}};
}

std::string FlipReport::to_text() const {
  std::ostringstream s;
  s << "Flip test (n=" << n << ")\n";
  s << "  sign flip rate      " << fmt(sign_flip_rate * 100, 1) << "%  (ties " << tie_count << ")\n";
  s << "  correlation (" << (correlation_kind == Correlation::pearson ? "pearson" : "spearman") << ") "
    << (correlation ? fmt(*correlation, 3) : std::string("undefined")) << '\n';
  s << "  mean sum            " << signed_fmt(mean_sum) << '\n';
  s << "  normal range        [" << signed_fmt(normal_min) << ", " << signed_fmt(normal_max) << "]\n";
  s << "  flipped range       [" << signed_fmt(flipped_min) << ", " << signed_fmt(flipped_max) << "]\n";
  s << "  degenerate          " << (degenerate ? "YES: " + degeneracy_reason : std::string("no")) << '\n';
  return s.str();
}

FlipReport flip_test(const PairScorer& scorer, const std::vector<features::PreferencePair>& pairs, Correlation kind) {
  if (pairs.empty()) throw ConfigError("flip test: no pairs");
  std::vector<double> normal, flipped;
  normal.reserve(pairs.size());
  flipped.reserve(pairs.size());
  for (const auto& p : pairs) {
    normal.push_back(scorer(p.chosen, p.rejected));
    flipped.push_back(scorer(p.rejected, p.chosen));
  }
  return flip_report(normal, flipped, kind);
}

FlipReport flip_test(const eval::AnyEvaluator& evaluator, const std::vector<features::PreferencePair>& pairs,
                     Correlation kind) {
  return flip_test(
      [&](const features::LoopStateRecord& a, const features::LoopStateRecord& b) {
        return double(eval::score_pair(evaluator, a, b));
      },
      pairs, kind);
}

// ---------------------------------------------------------------------------

std::vector<CrossEpochRow> cross_epoch_flip(const std::vector<train::EpochCheckpoint>& checkpoints,
                                            const std::vector<features::PreferencePair>& pairs, Correlation kind) {
  if (checkpoints.empty()) throw ConfigError("cross-epoch flip: no checkpoints");
  std::vector<CrossEpochRow> rows;
  for (const auto& ck : checkpoints) {
    std::vector<double> normal, flipped;
    std::size_t correct = 0;
    for (const auto& p : pairs) {
      const double s = eval::score_pair(ck.evaluator, p.chosen, p.rejected);
      if (s > 0) ++correct;
      normal.push_back(s);
      flipped.push_back(eval::score_pair(ck.evaluator, p.rejected, p.chosen));
    }
    CrossEpochRow row;
    row.epoch = ck.epoch;
    row.fixed_order_acc = pairs.empty() ? 0.0 : double(correct) / double(pairs.size());
    row.flip = flip_report(normal, flipped, kind);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string cross_epoch_csv(const std::vector<CrossEpochRow>& rows) {
  std::ostringstream s;
  s << "epoch,fixed_order_acc,correlation,sign_flip_rate,mean_sum\n" << std::setprecision(10);
  for (const auto& r : rows) {
    s << r.epoch << ',' << r.fixed_order_acc << ',';
    if (r.flip.correlation) s << *r.flip.correlation;
    s << ',' << r.flip.sign_flip_rate << ',' << r.flip.mean_sum << '\n';
  }
  return s.str();
}

std::string cross_epoch_text(const std::vector<CrossEpochRow>& rows) {
  std::ostringstream s;
  s << std::left << std::setw(7) << "Epoch" << std::setw(10) << "Acc" << std::setw(8) << "rho" << std::setw(8)
    << "Flip" << "Mean sum\n";
  for (const auto& r : rows) {
    s << std::setw(7) << r.epoch << std::setw(10) << (fmt(r.fixed_order_acc * 100, 1) + "%") << std::setw(8)
      << (r.flip.correlation ? fmt(*r.flip.correlation, 2) : std::string("n/a")) << std::setw(8)
      << (fmt(r.flip.sign_flip_rate * 100, 0) + "%") << signed_fmt(r.flip.mean_sum) << '\n';
  }
  return s.str();
}

json cross_epoch_json(const std::vector<CrossEpochRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"epoch", r.epoch}, {"fixed_order_acc", r.fixed_order_acc}, {"flip", r.flip.to_json()}});
  return out;
}

// ---------------------------------------------------------------------------

namespace {

class LogisticObjective : public ceres::FirstOrderFunction {
 public:
  LogisticObjective(const Eigen::MatrixXd& X, const std::vector<int>& y, double lambda)
      : X_(X), y_(y.size()), lambda_(lambda) {
    for (std::size_t i = 0; i < y.size(); ++i) y_[Eigen::Index(i)] = y[i] ? 1.0 : -1.0;
  }

  bool Evaluate(const double* params, double* cost, double* gradient) const override {
    const Eigen::Index d = X_.cols();
    Eigen::Map<const Eigen::VectorXd> w(params, d);
    const double b = params[d];
    const double n = double(X_.rows());
    const Eigen::VectorXd margin = (X_ * w).array() + b;
    double loss = 0;
    Eigen::VectorXd coef(X_.rows());
    for (Eigen::Index i = 0; i < X_.rows(); ++i) {
      const double z = y_[i] * margin[i];
      loss += std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z)));
      const double s = z >= 0 ? std::exp(-z) / (1 + std::exp(-z)) : 1 / (1 + std::exp(z));  // sigmoid(-z)
      coef[i] = -y_[i] * s / n;
    }
    *cost = loss / n + 0.5 * (lambda_ / n) * w.squaredNorm();
    if (gradient) {
      Eigen::Map<Eigen::VectorXd> g(gradient, d + 1);
      g.head(d) = X_.transpose() * coef + (lambda_ / n) * w;
      g[d] = coef.sum();
    }
    return std::isfinite(*cost);
  }

  int NumParameters() const override { return int(X_.cols()) + 1; }

 private:
  const Eigen::MatrixXd& X_;
  Eigen::VectorXd y_;
  double lambda_;
};

}  // namespace

ProbeFit fit_logistic_probe(const Eigen::MatrixXd& X, const std::vector<int>& y, double regularization) {
  if (std::size_t(X.rows()) != y.size()) throw ConfigError("probe: feature/label count mismatch");
  if (!(regularization >= 0)) throw ConfigError("probe: regularization must be non-negative");
  const auto positives = std::count_if(y.begin(), y.end(), [](int v) { return v != 0; });
  const auto negatives = std::ptrdiff_t(y.size()) - positives;
  if (positives < 2 || negatives < 2) throw ConfigError("probe: need at least two examples of each class");

  std::vector<double> params(std::size_t(X.cols()) + 1, 0.0);
  ceres::GradientProblem problem(new LogisticObjective(X, y, regularization));
  ceres::GradientProblemSolver::Options options;
  options.line_search_direction_type = ceres::LBFGS;
  options.max_num_iterations = 500;
  options.gradient_tolerance = 1e-6;
  options.function_tolerance = 1e-14;
  options.parameter_tolerance = 1e-14;
  options.logging_type = ceres::SILENT;
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(options, problem, params.data(), &summary);

  ProbeFit fit;
  fit.weights = Eigen::Map<Eigen::VectorXd>(params.data(), X.cols());
  fit.intercept = params.back();
  fit.iterations = int(summary.iterations.size()) - 1;
  std::vector<double> grad(params.size());
  double cost = 0;
  LogisticObjective(X, y, regularization).Evaluate(params.data(), &cost, grad.data());
  fit.final_gradient_norm = Eigen::Map<Eigen::VectorXd>(grad.data(), Eigen::Index(grad.size())).lpNorm<Eigen::Infinity>();
  fit.converged = fit.final_gradient_norm < 1e-6 || summary.termination_type == ceres::CONVERGENCE;
  fit.train_accuracy = probe_accuracy(fit, X, y);
  return fit;
}

double probe_accuracy(const ProbeFit& fit, const Eigen::MatrixXd& X, const std::vector<int>& y) {
  if (X.rows() == 0) return 0.0;
  const Eigen::VectorXd margin = (X * fit.weights).array() + fit.intercept;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    if ((margin[i] > 0) == (y[std::size_t(i)] != 0)) ++correct;
  }
  return double(correct) / double(X.rows());
}

std::string to_string(ProbeMode mode) { return mode == ProbeMode::pairwise_diff ? "pairwise_diff" : "independent"; }

std::string to_string(FeatureSource source) {
  return source == FeatureSource::final_step ? "final_step" : "all_steps_concat";
}

ProbeMode probe_mode_from_string(const std::string& s) {
  if (s == "pairwise_diff" || s == "pairwise") return ProbeMode::pairwise_diff;
  if (s == "independent") return ProbeMode::independent;
  throw ConfigError("unknown probe mode '" + s + "'");
}

FeatureSource feature_source_from_string(const std::string& s) {
  if (s == "final_step") return FeatureSource::final_step;
  if (s == "all_steps_concat") return FeatureSource::all_steps_concat;
  throw ConfigError("unknown feature source '" + s + "'");
}

std::vector<double> record_features(const features::LoopStateRecord& record, FeatureSource source) {
  const auto pooled = features::mean_pool(record);
  if (source == FeatureSource::final_step) {
    const auto row = pooled.row(pooled.rows - 1);
    return {row.begin(), row.end()};
  }
  return {pooled.data.begin(), pooled.data.end()};
}

namespace {

struct ProbeData {
  Eigen::MatrixXd X;
  std::vector<int> y;
};

ProbeData stack(const std::vector<std::vector<double>>& rows, std::vector<int> labels) {
  ProbeData d;
  const Eigen::Index cols = rows.empty() ? 0 : Eigen::Index(rows.front().size());
  d.X.resize(Eigen::Index(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.X.row(Eigen::Index(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), cols);
  }
  d.y = std::move(labels);
  return d;
}

std::size_t split_point(std::size_t n, double fraction) {
  if (!(fraction > 0 && fraction < 1)) throw ConfigError("probe: train_fraction must be in (0, 1)");
  const auto k = std::size_t(std::llround(double(n) * fraction));
  if (k < 2 || n - k < 1) throw ConfigError("probe: too few pairs for a train/test split");
  return k;
}

template <typename Builder>
ProbeReport run_probe(ProbeMode mode, const std::vector<features::PreferencePair>& pairs, const ProbeOptions& opt,
                      Builder build) {
  const std::size_t k = split_point(pairs.size(), opt.train_fraction);
  std::vector<std::vector<double>> train_rows, test_rows;
  std::vector<int> train_y, test_y;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i < k) {
      build(pairs[i], train_rows, train_y);
    } else {
      build(pairs[i], test_rows, test_y);
    }
  }
  const auto tr = stack(train_rows, train_y);
  const auto te = stack(test_rows, test_y);
  const auto fit = fit_logistic_probe(tr.X, tr.y, opt.regularization_scale * double(tr.X.rows()));
  ProbeReport r;
  r.mode = mode;
  r.source = opt.source;
  r.n_train_rows = std::size_t(tr.X.rows());
  r.n_test_rows = std::size_t(te.X.rows());
  r.train_acc = fit.train_accuracy;
  r.test_acc = probe_accuracy(fit, te.X, te.y);
  r.flipped_test_acc = 1.0 - r.test_acc;
  r.weight_norm = fit.weights.norm();
  r.intercept = fit.intercept;
  r.iterations = fit.iterations;
  r.converged = fit.converged;
  return r;
}

}  // namespace

ProbeReport pairwise_probe(const std::vector<features::PreferencePair>& pairs, const ProbeOptions& options) {
  return run_probe(ProbeMode::pairwise_diff, pairs, options,
                   [&](const features::PreferencePair& p, auto& rows, auto& labels) {
                     const auto c = record_features(p.chosen, options.source);
                     const auto r = record_features(p.rejected, options.source);
                     std::vector<double> diff(c.size());
                     for (std::size_t j = 0; j < c.size(); ++j) diff[j] = c[j] - r[j];
                     rows.push_back(diff);
                     labels.push_back(1);
                     for (auto& v : diff) v = -v;
                     rows.push_back(std::move(diff));
                     labels.push_back(0);
                   });
}

ProbeReport independent_probe(const std::vector<features::PreferencePair>& pairs, const ProbeOptions& options) {
  return run_probe(ProbeMode::independent, pairs, options,
                   [&](const features::PreferencePair& p, auto& rows, auto& labels) {
                     rows.push_back(record_features(p.chosen, options.source));
                     labels.push_back(1);
                     rows.push_back(record_features(p.rejected, options.source));
                     labels.push_back(0);
                   });
}

json ProbeReport::to_json() const {
  return {{"mode", to_string(mode)},
          {"feature_source", to_string(source)},
          {"n_train_rows", n_train_rows},
          {"n_test_rows", n_test_rows},
          {"train_acc", train_acc},
          {"test_acc", test_acc},
          {"flipped_test_acc", flipped_test_acc},
          {"weight_norm", weight_norm},
          {"intercept", intercept},
          {"iterations", iterations},
          {"converged", converged}};
}

std::string ProbeReport::to_text() const {
  std::ostringstream s;
  s << "Linear probe: " << to_string(mode) << " on " << to_string(source) << '\n';
  s << "  rows train/test     " << n_train_rows << " / " << n_test_rows << '\n';
  s << "  train accuracy      " << fmt(train_acc * 100, 2) << "%\n";
  s << "  test accuracy       " << fmt(test_acc * 100, 2) << "%\n";
  s << "  flipped accuracy    " << fmt(flipped_test_acc * 100, 2) << "%\n";
  s << "  |w|, intercept      " << fmt(weight_norm) << ", " << fmt(intercept) << '\n';
  s << "  L-BFGS iterations   " << iterations << (converged ? " (converged)" : " (not converged)") << '\n';
  return s.str();
}

// ---------------------------------------------------------------------------

ShortcutReport shortcut_analysis(const std::vector<features::PreferencePair>& pairs) {
  if (pairs.empty()) throw ConfigError("shortcut analysis: no pairs");
  ShortcutReport r;
  r.n = pairs.size();
  const std::size_t T = pairs.front().chosen.steps;
  r.larger_norm_is_chosen_acc.assign(T, 0.0);
  std::vector<double> act_c(T, 0.0), act_r(T, 0.0);
  double longer = 0;

  auto mean_abs = [](const features::LoopStateRecord& rec, std::size_t t) {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t pos = 0; pos < rec.seq_len; ++pos) {
      if (!rec.mask[pos]) continue;
      for (std::size_t k = 0; k < rec.hidden; ++k) sum += std::abs(double(rec.value(t, pos, k)));
      count += rec.hidden;
    }
    return count ? sum / double(count) : 0.0;
  };

  for (const auto& p : pairs) {
    if (p.chosen.steps != T || p.rejected.steps != T) throw ConfigError("shortcut analysis: mixed step counts");
    r.chosen_mean_tokens += p.chosen.token_count;
    r.rejected_mean_tokens += p.rejected.token_count;
    if (p.chosen.token_count > p.rejected.token_count) {
      longer += 1;
    } else if (p.chosen.token_count == p.rejected.token_count) {
      longer += 0.5;
    }
    const auto pc = features::mean_pool(p.chosen);
    const auto pr = features::mean_pool(p.rejected);
    for (std::size_t t = 0; t < T; ++t) {
      double nc = 0, nr = 0;
      for (float v : pc.row(t)) nc += double(v) * v;
      for (float v : pr.row(t)) nr += double(v) * v;
      r.larger_norm_is_chosen_acc[t] += nc > nr ? 1.0 : (nc == nr ? 0.5 : 0.0);
      act_c[t] += mean_abs(p.chosen, t);
      act_r[t] += mean_abs(p.rejected, t);
    }
  }
  const double n = double(r.n);
  r.chosen_mean_tokens /= n;
  r.rejected_mean_tokens /= n;
  r.longer_is_chosen_acc = longer / n;
  for (std::size_t t = 0; t < T; ++t) {
    r.larger_norm_is_chosen_acc[t] /= n;
    r.mean_activation_ratio.push_back(act_c[t] == act_r[t] ? 1.0 : act_c[t] / act_r[t]);
  }
  return r;
}

json ShortcutReport::to_json() const {
  return {{"n", n},
          {"chosen_mean_tokens", chosen_mean_tokens},
          {"rejected_mean_tokens", rejected_mean_tokens},
          {"longer_is_chosen_acc", longer_is_chosen_acc},
          {"larger_norm_is_chosen_acc", larger_norm_is_chosen_acc},
          {"mean_activation_ratio", mean_activation_ratio}};
}

std::string ShortcutReport::to_text() const {
  std::ostringstream s;
  s << "Structural shortcut analysis (n=" << n << ")\n";
  s << "  mean tokens chosen/rejected  " << fmt(chosen_mean_tokens, 1) << " / " << fmt(rejected_mean_tokens, 1) << '\n';
  s << "  longer = chosen              " << fmt(longer_is_chosen_acc * 100, 1) << "%\n";
  s << "  step  larger-norm=chosen  activation ratio\n";
  for (std::size_t t = 0; t < larger_norm_is_chosen_acc.size(); ++t) {
    s << "  " << std::left << std::setw(6) << t + 1 << std::setw(20) << (fmt(larger_norm_is_chosen_acc[t] * 100, 1) + "%")
      << fmt(mean_activation_ratio[t]) << '\n';
  }
  return s.str();
}

}  // namespace loopeval::diag
