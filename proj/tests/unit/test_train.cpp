#include <cmath>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "grad_cases.hpp"
#include "loopeval/optim/optim.hpp"
#include "loopeval/synth/synth.hpp"
#include "loopeval/train/train.hpp"
#include "test_data.hpp"

using namespace loopeval;
using namespace loopeval::train;

namespace {
double nls(double x) { return std::log1p(std::exp(-x)); }  // -log sigmoid(x), fine for moderate x
}

TEST(Loss, PairwiseValues) {
  EXPECT_NEAR(pairwise_loss<double>(0, 1, 1e-4).value, std::log(2.0), 1e-15);
  EXPECT_NEAR(pairwise_loss<double>(10, 1, 1e-4).value, nls(10) + 1e-4 * 100, 1e-15);
  EXPECT_NEAR(pairwise_loss<double>(10, 1, 1e-4).value, 0.010045, 1e-6);
  EXPECT_NEAR(pairwise_loss<double>(-3, 1, 0).value, nls(-3), 1e-14);
  EXPECT_TRUE(std::isfinite(pairwise_loss<float>(-200.f, 1, 0).value));
  EXPECT_NEAR(pairwise_loss<float>(-200.f, 1, 0).value, 200.f, 1e-3f);
  EXPECT_THROW(pairwise_loss<double>(1, 0, 0), ConfigError);
}

TEST(Loss, PairwiseSymmetry) {
  for (double s : {-7.5, -1.0, 0.0, 0.3, 4.0, 30.0}) {
    EXPECT_EQ(pairwise_loss<double>(s, 1, 1e-4).value, pairwise_loss<double>(-s, -1, 1e-4).value);
    EXPECT_EQ(pairwise_loss<float>(float(s), 1, 1e-4f).value, pairwise_loss<float>(float(-s), -1, 1e-4f).value);
  }
}

TEST(Loss, RankingValues) {
  EXPECT_NEAR(pointwise_ranking_loss<double>(1.3, 1.3).value, std::log(2.0), 1e-15);
  EXPECT_NEAR(pointwise_ranking_loss<double>(12, 2).value, 4.54e-5, 1e-7);
  for (double a : {-2.0, 0.0, 1.5})
    for (double b : {-1.0, 0.5, 3.0}) {
      const double sum = pointwise_ranking_loss<double>(a, b).value + pointwise_ranking_loss<double>(b, a).value;
      EXPECT_GT(sum, 2 * std::log(2.0));
    }
  EXPECT_NEAR(pointwise_ranking_loss<double>(0.7, 0.7).value * 2, 2 * std::log(2.0), 1e-15);
}

TEST(Loss, CalibratedValues) {
  EXPECT_NEAR(calibrated_loss<double>(0, 0).value, 3 * std::log(2.0), 1e-15);
  EXPECT_NEAR(calibrated_loss<double>(0, 0).value, 2.079, 1e-3);
  EXPECT_NEAR(calibrated_loss<double>(1, -1).value, nls(2) + nls(1) + nls(1), 1e-14);
  EXPECT_LT(calibrated_loss<double>(40, -40).value, 1e-15);
}

TEST(Loss, GradientsPassGradCheck) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (bool l2 : {true, false}) {
      EXPECT_TRUE(gradcases::pairwise_loss_case<double>(seed, l2).passed);
      EXPECT_TRUE(gradcases::pairwise_loss_case<float>(seed, l2).passed);
    }
    for (bool cal : {true, false}) {
      EXPECT_TRUE(gradcases::ranking_loss_case<double>(seed, cal).passed);
      EXPECT_TRUE(gradcases::ranking_loss_case<float>(seed, cal).passed);
    }
  }
}

TEST(Swap, Extremes) {
  nn::Rng rng(1);
  for (const auto& o : swap_batch(50, rng, 0.0)) {
    EXPECT_FALSE(o.swapped);
    EXPECT_EQ(o.target, 1);
  }
  for (const auto& o : swap_batch(50, rng, 1.0)) {
    EXPECT_TRUE(o.swapped);
    EXPECT_EQ(o.target, -1);
  }
  EXPECT_THROW(swap_batch(3, rng, 1.2), ConfigError);
}

TEST(Swap, BinomialFraction) {
  nn::Rng rng(5);
  const auto b = swap_batch(10000, rng, 0.5);
  std::size_t swapped = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].index, i);
    swapped += b[i].swapped;
  }
  EXPECT_NEAR(swapped / 10000.0, 0.5, 0.02);
  nn::Rng again(5);
  const auto b2 = swap_batch(10000, again, 0.5);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b[i].swapped, b2[i].swapped);
}

TEST(Deflated, Examples) {
  const std::vector<double> s = {2, -1, 0.5};
  const std::vector<int> t = {1, -1, -1};
  EXPECT_NEAR(deflated_accuracy(s, t), 2.0 / 3, 1e-15);
  const std::vector<double> z = {0, 0};
  const std::vector<int> tz = {1, -1};
  EXPECT_EQ(deflated_accuracy(z, tz), 0.0);
  EXPECT_THROW(deflated_accuracy(s, tz), ConfigError);
}

TEST(Deflated, ConstantScorerUnderSwapIsChance) {
  nn::Rng rng(8);
  const auto b = swap_batch(10000, rng, 0.5);
  std::vector<double> scores(b.size(), 13.0);
  std::vector<int> targets;
  for (const auto& o : b) targets.push_back(o.target);
  EXPECT_NEAR(deflated_accuracy(scores, targets), 0.5, 0.02);
}

TEST(Deflated, PositiveBiasNeverInflates) {
  // score(first, second) = s_true + bias; presenting a pair swapped negates s_true only.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0, 2);
  for (int trial = 0; trial < 200; ++trial) {
    const double bias = u(rng);
    const std::size_t count = 50 + rng() % 200;
    nn::Rng srng(rng());
    const auto order = swap_batch(count, srng, 0.5);
    std::vector<double> fixed, presented;
    std::vector<int> targets, ones;
    for (std::size_t i = 0; i < count; ++i) {
      const double s_true = n(rng) + 0.3;
      fixed.push_back(s_true + bias);
      ones.push_back(1);
      presented.push_back(order[i].swapped ? -s_true + bias : s_true + bias);
      targets.push_back(order[i].target);
    }
    EXPECT_LE(deflated_accuracy(presented, targets), deflated_accuracy(fixed, ones)) << trial;
  }
}

TEST(Stats, PopulationMoments) {
  const std::vector<double> s = {1, 3, -2, 0};
  const auto st = score_stats(s);
  EXPECT_DOUBLE_EQ(st.mean, 0.5);
  EXPECT_NEAR(st.std, std::sqrt((0.25 + 6.25 + 6.25 + 0.25) / 4), 1e-15);
  EXPECT_EQ(st.min, -2);
  EXPECT_EQ(st.max, 3);
  EXPECT_EQ(st.positive_rate, 0.5);
  EXPECT_EQ(st.zero_count, 1u);
}

// ---------------------------------------------------------------------------

namespace {

eval::PairwiseConfig tiny_model() {
  eval::PairwiseConfig c;
  c.d_in = 16;
  c.pool_rank = 4;
  c.proj_dim = 8;
  c.gru_hidden = 8;
  c.scorer_hidden = 8;
  c.dropout_rate = 0.1;
  return c;
}

synth::SynthDataset tiny_data(std::size_t n = 64, synth::Mode mode = synth::Mode::relational, double delta = 0.15) {
  synth::SynthSpec s;
  s.delta = delta;
  s.n_pairs = n;
  s.hidden = 16;
  s.seq_len = 8;
  s.steps = 3;
  s.response_span = 4;
  s.mode = mode;
  return synth::generate(s);
}

eval::AnyEvaluator constant_pairwise(float value) {
  eval::PairwiseEvaluator<float> m(tiny_model(), 1);
  for (auto* p : m.parameters()) std::fill(p->values.begin(), p->values.end(), 0.f);
  for (auto* p : m.parameters())
    if (p->name == "scorer.fc2.bias") p->values[0] = value;
  return m;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.lr_max = 3e-3;
  c.warmup_steps = 2;
  c.batch_size = 8;
  c.epochs = 2;
  c.seed = 11;
  return c;
}

}  // namespace

TEST(FixedOrder, ConstantScorerLooksPerfect) {
  const auto d = tiny_data(40);
  const auto r = fixed_order_eval(constant_pairwise(13.f), d.pairs);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_NEAR(r.stats.mean, 13.0, 1e-6);
  EXPECT_NEAR(r.stats.std, 0.0, 1e-6);
  EXPECT_EQ(r.n, 40u);
  EXPECT_THROW(fixed_order_eval(constant_pairwise(1.f), std::vector<features::PreferencePair>{}), ConfigError);
}

TEST(FixedOrder, PlantedDirectionScorerIsPerfectOnNoiselessData) {
  synth::SynthSpec s;
  s.n_pairs = 50;
  s.hidden = 16;
  s.seq_len = 8;
  s.steps = 2;
  s.response_span = 4;
  s.sigma_noise = 0;
  s.delta = 0.5;
  const auto d = synth::generate(s);
  eval::LinearEvaluator<float> lin({16, 2}, 1);
  for (auto* p : lin.parameters()) {
    if (p->name == "linear.weight")
      for (std::size_t i = 0; i < p->size(); ++i) p->values[i] = d.truth.direction[i % 16];
    if (p->name == "linear.bias") p->values[0] = 0.3f;
  }
  const auto r = fixed_order_eval(eval::AnyEvaluator(lin), d.pairs);
  EXPECT_EQ(r.accuracy, 1.0);
  const auto src = features::MemoryChunkSource::from_pairs(d.pairs, 7);
  EXPECT_EQ(fixed_order_eval(eval::AnyEvaluator(lin), src).scores, r.scores);
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
  const auto d = tiny_data(16);
  const auto src = features::MemoryChunkSource::from_pairs(d.pairs, 8);
  auto cfg = quick_config();
  cfg.epochs = 0;
  const eval::AnyEvaluator init = eval::PairwiseEvaluator<float>(tiny_model(), 4);
  const auto r = train::train(cfg, init, src, nullptr);
  EXPECT_TRUE(r.metrics.empty());
  ASSERT_EQ(r.checkpoints.size(), 1u);
  EXPECT_EQ(r.checkpoints[0].epoch, 0u);
  const auto a = eval::parameters_of(init);
  const auto b = eval::parameters_of(r.checkpoints[0].evaluator);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->values, b[i]->values);
}

TEST(Train, BitwiseDeterministic) {
  const auto d = tiny_data(48);
  const auto src = features::MemoryChunkSource::from_pairs(d.pairs, 10);
  const auto ev = features::MemoryChunkSource::from_pairs(tiny_data(16).pairs, 10);
  const auto cfg = quick_config();
  const auto r1 = train::train(cfg, eval::PairwiseEvaluator<float>(tiny_model(), 4), src, &ev);
  const auto r2 = train::train(cfg, eval::PairwiseEvaluator<float>(tiny_model(), 4), src, &ev);
  ASSERT_EQ(r1.checkpoints.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    const auto a = eval::parameters_of(r1.checkpoints[e].evaluator);
    const auto b = eval::parameters_of(r2.checkpoints[e].evaluator);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->values, b[i]->values) << a[i]->name;
    EXPECT_EQ(r1.metrics[e].mean_loss, r2.metrics[e].mean_loss);
  }
  auto other = cfg;
  other.seed = 12;
  const auto r3 = train::train(other, eval::PairwiseEvaluator<float>(tiny_model(), 4), src, &ev);
  EXPECT_NE(eval::parameters_of(r3.checkpoints[1].evaluator)[0]->values,
            eval::parameters_of(r1.checkpoints[1].evaluator)[0]->values);
}

TEST(Train, RunDirectoryLayout) {
  const auto dir = testdata::fresh_dir("train_run");
  const auto d = tiny_data(32);
  const auto src = features::MemoryChunkSource::from_pairs(d.pairs, 10);
  TrainOptions opt;
  opt.run_dir = dir;
  std::size_t seen = 0;
  opt.on_epoch = [&](const EpochMetrics&) { ++seen; };
  const auto r = train::train(quick_config(), eval::PairwiseEvaluator<float>(tiny_model(), 4), src, &src, opt);
  EXPECT_EQ(seen, 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_001.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_002.lsw"));
  const auto back = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_NEAR(back[1].fixed_order_eval_acc, r.metrics[1].fixed_order_eval_acc, 1e-9);
  EXPECT_NEAR(back[0].lr_first, r.metrics[0].lr_first, 1e-15);
  // 4 batches per epoch, 8 optimizer steps in total
  EXPECT_EQ(r.metrics[0].lr_first, 0.0);
  EXPECT_DOUBLE_EQ(r.metrics[0].lr_last, optim::cosine_warmup_lr(3, 8, 2, 3e-3, 1e-6));
  EXPECT_DOUBLE_EQ(r.metrics[1].lr_last, optim::cosine_warmup_lr(7, 8, 2, 3e-3, 1e-6));
}

TEST(Train, LearnsPlantedSignal) {
  const auto d = tiny_data(400, synth::Mode::absolute, 0.3);
  const auto split = synth::split_pairs(d.pairs, 0.75);
  const auto src = features::MemoryChunkSource::from_pairs(split.first, 50);
  const auto ev = features::MemoryChunkSource::from_pairs(split.second, 50);
  auto cfg = quick_config();
  cfg.epochs = 3;
  cfg.lr_max = 1e-2;
  cfg.warmup_steps = 5;
  cfg.loss = LossKind::pointwise_ranking;
  const auto r = train::train(cfg, eval::LinearEvaluator<float>({16, 3}, 2), src, &ev);
  EXPECT_GT(r.metrics.back().fixed_order_eval_acc, 0.85);
}

TEST(Train, ErrorPaths) {
  const auto d = tiny_data(16);
  const auto src = features::MemoryChunkSource::from_pairs(d.pairs, 8);
  auto cfg = quick_config();
  cfg.loss = LossKind::pointwise_ranking;
  EXPECT_THROW(train::train(cfg, eval::PairwiseEvaluator<float>(tiny_model(), 1), src, nullptr), ConfigError);
  cfg.loss = LossKind::pairwise_swap;
  EXPECT_THROW(train::train(cfg, eval::LinearEvaluator<float>({16, 3}, 1), src, nullptr), ConfigError);
  cfg.warmup_steps = 4;  // 2 epochs x 2 batches
  EXPECT_THROW(train::train(cfg, eval::PairwiseEvaluator<float>(tiny_model(), 1), src, nullptr), ConfigError);
  cfg.warmup_steps = 1;
  cfg.swap_prob = 2;
  EXPECT_THROW(train::train(cfg, eval::PairwiseEvaluator<float>(tiny_model(), 1), src, nullptr), ConfigError);
}

TEST(Train, NonFiniteLossAborts) {
  const auto d = tiny_data(16);
  const auto src = features::MemoryChunkSource::from_pairs(d.pairs, 8);
  auto model = constant_pairwise(std::numeric_limits<float>::quiet_NaN());
  EXPECT_THROW(train::train(quick_config(), model, src, nullptr), NumericError);
}

TEST(Config, JsonRoundTrip) {
  auto c = quick_config();
  c.loss = LossKind::calibrated;
  c.accumulation_steps = 4;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  const TrainConfig defaults;
  EXPECT_EQ(defaults.lr_max, 1e-4);
  EXPECT_EQ(defaults.warmup_steps, 200);
  EXPECT_EQ(defaults.batch_size, 32u);
  EXPECT_EQ(defaults.swap_prob, 0.5);
  EXPECT_EQ(loss_kind_from_string("pairwise_fixed_no_reg"), LossKind::pairwise_fixed_no_reg);
  EXPECT_THROW(loss_kind_from_string("hinge"), ConfigError);
}

// ---------------------------------------------------------------------------

namespace {
EpochMetrics row(std::size_t epoch, double deflated, double fixed, bool warn = false) {
  EpochMetrics m;
  m.epoch = epoch;
  m.deflated_train_acc = deflated;
  m.fixed_order_eval_acc = fixed;
  m.inversion_warning = warn;
  return m;
}
}  // namespace

TEST(Report, EpochTableGolden) {
  const std::string table = format_epoch_table({row(2, 0.64, 0.952), row(5, 0.699, 0.624, true)});
  EXPECT_NE(table.find("Deflated Train Acc"), std::string::npos);
  EXPECT_NE(table.find("Fixed-Order Eval Acc"), std::string::npos);
  std::istringstream lines(table);
  std::string header, first, second;
  std::getline(lines, header);
  std::getline(lines, first);
  std::getline(lines, second);
  std::istringstream f(first);
  std::string e, a, b;
  f >> e >> a >> b;
  EXPECT_EQ(e + " " + a + " " + b, "2 64.0% 95.2%");
  EXPECT_EQ(second.rfind("5", 0), 0u);
  EXPECT_NE(second.find("69.9%"), std::string::npos);
  EXPECT_NE(second.find("62.4%"), std::string::npos);
  EXPECT_NE(second.find("WARNING"), std::string::npos);
}

TEST(Report, InversionEpochs) {
  const std::vector<EpochMetrics> m = {row(1, 0.60, 0.833), row(2, 0.64, 0.952), row(3, 0.62, 0.895),
                                       row(4, 0.68, 0.672), row(5, 0.699, 0.624)};
  EXPECT_EQ(inversion_epochs(m, 0.05), (std::vector<std::size_t>{4, 5}));
  EXPECT_TRUE(inversion_epochs(m, 0.5).empty());
}

TEST(Report, MetricsCsvRoundTrip) {
  const auto dir = testdata::fresh_dir("train_csv");
  auto a = row(1, 0.5, 0.75);
  a.mean_loss = 0.69;
  a.lr_first = 1e-5;
  a.lr_last = 1e-4;
  a.eval_stats.mean = 1.6445;
  a.eval_stats.std = 0.9972;
  auto b = row(2, 0.6, std::numeric_limits<double>::quiet_NaN(), true);
  write_metrics_csv({a, b}, dir / "metrics.csv");
  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header,
            "epoch,loss,deflated_acc,fixed_order_acc,lr_first,lr_last,score_mean,score_std,score_min,score_max,"
            "positive_rate,inversion_warning");
  const auto back = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].eval_stats.mean, 1.6445);
  EXPECT_EQ(back[0].lr_first, 1e-5);
  EXPECT_TRUE(std::isnan(back[1].fixed_order_eval_acc));
  EXPECT_TRUE(back[1].inversion_warning);
  EXPECT_THROW(read_metrics_csv(dir / "absent.csv"), ConfigError);
}
