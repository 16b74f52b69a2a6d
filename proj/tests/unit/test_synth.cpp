#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include <gtest/gtest.h>
#include <json.hpp>

#include "loopeval/synth/synth.hpp"
#include "test_data.hpp"

using namespace loopeval;
using namespace loopeval::synth;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.n_pairs = 60;
  s.hidden = 16;
  s.seq_len = 12;
  s.steps = 3;
  s.response_span = 5;
  return s;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double projection(const nn::Matrix<float>& pooled, std::size_t step, const std::vector<float>& u) {
  double s = 0;
  for (std::size_t k = 0; k < u.size(); ++k) s += double(pooled(step, k)) * u[k];
  return s;
}

}  // namespace

TEST(Synth, DeterministicBytes) {
  const auto a = testdata::fresh_dir("synth_a");
  const auto b = testdata::fresh_dir("synth_b");
  const auto ma = write_synth_dataset(generate(small_spec()), a, "train", 25);
  write_synth_dataset(generate(small_spec()), b, "train", 25);
  ASSERT_EQ(ma.chunk_files.size(), 3u);
  for (const auto& f : ma.chunk_files) EXPECT_EQ(file_bytes(a / f), file_bytes(b / f));
  EXPECT_EQ(file_bytes(a / "manifest.json"), file_bytes(b / "manifest.json"));
  EXPECT_EQ(file_bytes(a / "truth.json"), file_bytes(b / "truth.json"));
}

TEST(Synth, PairDependsOnlyOnSeedAndIndex) {
  auto s = small_spec();
  const auto big = generate(s);
  s.n_pairs = 10;
  const auto small = generate(s);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(small.pairs[i], big.pairs[i]);
  s.seed = 43;
  EXPECT_NE(generate(s).pairs[0], small.pairs[0]);
}

TEST(Synth, ValidMasksWithVariedLengths) {
  const auto d = generate(small_spec());
  std::set<std::uint32_t> lengths;
  for (const auto& p : d.pairs) {
    EXPECT_NO_THROW(p.validate());
    for (const auto* r : {&p.chosen, &p.rejected}) {
      EXPECT_GE(r->token_count, 6u);
      EXPECT_LE(r->token_count, 12u);
      lengths.insert(r->token_count);
    }
  }
  EXPECT_GE(lengths.size(), 4u);
  double norm = 0;
  for (float v : d.truth.direction) norm += double(v) * v;
  EXPECT_NEAR(norm, 1.0, 1e-6);
}

TEST(Synth, NoiselessRelationalDifferenceLiesAlongDirection) {
  auto s = small_spec();
  s.sigma_noise = 0;
  s.delta = 0.5;
  const auto d = generate(s);
  const auto& u = d.truth.direction;
  for (const auto& p : d.pairs) {
    const auto c = features::mean_pool(p.chosen);
    const auto r = features::mean_pool(p.rejected);
    for (std::size_t t = 0; t < s.steps; ++t) {
      const double along = projection(c, t, u) - projection(r, t, u);
      const double expect = s.delta * (double(s.response_span) / p.chosen.token_count +
                                       double(s.response_span) / p.rejected.token_count);
      // offsets are stored in half precision, so the cancellation is only approximate
      EXPECT_NEAR(along, expect, 0.02);
      EXPECT_GT(along, 0.0);
    }
  }
}

TEST(Synth, AbsoluteModeHasNoSharedOffset) {
  auto s = small_spec();
  s.mode = Mode::absolute;
  s.sigma_noise = 0;
  s.delta = 0.5;
  const auto d = generate(s);
  for (const auto& p : d.pairs) {
    EXPECT_EQ(p.chosen.value(0, 0, 0), 0.0f);
    const auto c = features::mean_pool(p.chosen);
    EXPECT_GT(projection(c, 0, d.truth.direction), 0.0);
  }
}

TEST(Synth, NullModeHasNoSignal) {
  auto s = small_spec();
  s.mode = Mode::null;
  s.sigma_noise = 0;
  const auto d = generate(s);
  for (const auto& p : d.pairs) {
    const auto c = features::mean_pool(p.chosen);
    const auto r = features::mean_pool(p.rejected);
    for (std::size_t i = 0; i < c.data.size(); ++i) EXPECT_NEAR(c.data[i], r.data[i], 1e-6);
  }
}

TEST(Synth, LabelNoiseRate) {
  auto s = small_spec();
  s.n_pairs = 4000;
  s.hidden = 2;
  s.seq_len = 2;
  s.response_span = 1;
  s.steps = 1;
  s.label_noise_rate = 0.3;
  const auto d = generate(s);
  std::size_t swapped = 0;
  for (bool b : d.truth.preferred_is_chosen) swapped += !b;
  EXPECT_NEAR(double(swapped) / 4000, 0.3, 0.025);
}

TEST(Synth, RoleStatisticsMatchInRelationalMode) {
  auto s = small_spec();
  s.n_pairs = 400;
  const auto d = generate(s);
  ASSERT_GE(s.sigma_base, 10 * s.delta);
  double nc = 0, nr = 0;
  for (const auto& p : d.pairs) {
    const auto c = features::mean_pool(p.chosen);
    const auto r = features::mean_pool(p.rejected);
    for (float v : c.data) nc += double(v) * v;
    for (float v : r.data) nr += double(v) * v;
  }
  EXPECT_LT(std::abs(nc - nr) / nc, 0.01);
}

TEST(Synth, SpecValidation) {
  auto s = small_spec();
  s.response_span = 13;
  EXPECT_THROW(generate(s), ConfigError);
  s = small_spec();
  s.label_noise_rate = 0.5;
  EXPECT_THROW(generate(s), ConfigError);
  s = small_spec();
  s.delta = -1;
  EXPECT_THROW(generate(s), ConfigError);
  EXPECT_THROW(mode_from_string("weird"), ConfigError);
  EXPECT_EQ(mode_from_string(to_string(Mode::absolute)), Mode::absolute);
}

TEST(Synth, SplitByIndex) {
  const auto d = generate(small_spec());
  const auto sp = split_pairs(d.pairs, 0.8);
  EXPECT_EQ(sp.first.size(), 48u);
  EXPECT_EQ(sp.second.size(), 12u);
  EXPECT_EQ(sp.second.front(), d.pairs[48]);
  EXPECT_THROW(split_pairs(d.pairs, 1.5), ConfigError);
}

TEST(Synth, ProvenanceInManifest) {
  const auto dir = testdata::fresh_dir("synth_prov");
  const auto d = generate(small_spec());
  write_synth_dataset(d, dir);
  const auto m = features::read_manifest(dir / "manifest.json");
  const auto prov = nlohmann::json::parse(m.provenance_json);
  EXPECT_EQ(prov["spec_hash"], small_spec().hash());
  EXPECT_EQ(prov["spec"]["mode"], "relational");
  auto other = small_spec();
  other.seed = 7;
  EXPECT_NE(other.hash(), small_spec().hash());
}

// --- oracle ----------------------------------------------------------------

TEST(Oracle, NullModeIsChance) {
  auto s = SynthSpec{};
  s.mode = Mode::null;
  EXPECT_NEAR(oracle_accuracy(s, Access::pairwise, 100000), 0.5, 0.01);
  EXPECT_NEAR(oracle_accuracy(s, Access::independent, 100000), 0.5, 0.01);
}

TEST(Oracle, NoiselessAbsoluteIsPerfect) {
  auto s = SynthSpec{};
  s.mode = Mode::absolute;
  s.sigma_base = 0;
  s.sigma_noise = 1e-4;
  EXPECT_NEAR(oracle_accuracy(s, Access::pairwise, 100000), 1.0, 1e-9);
  EXPECT_NEAR(oracle_accuracy(s, Access::independent, 100000), 1.0, 1e-9);
}

TEST(Oracle, RelationalGap) {
  const SynthSpec s;
  const double pw = oracle_accuracy(s, Access::pairwise, 100000);
  const double ind = oracle_accuracy(s, Access::independent, 100000);
  EXPECT_GE(pw - ind, 0.25);
  EXPECT_GT(pw, 0.85);
  EXPECT_LT(ind, 0.6);
}

TEST(Oracle, LabelNoiseCapsAccuracy) {
  auto s = SynthSpec{};
  s.mode = Mode::absolute;
  s.sigma_base = 0;
  s.sigma_noise = 1e-4;
  s.label_noise_rate = 0.2;
  EXPECT_NEAR(oracle_accuracy(s, Access::pairwise, 100000), 0.8, 0.01);
}

TEST(Oracle, IndependentDecreasesWithOffsetScale) {
  auto s = SynthSpec{};
  double prev = 1.0;
  for (double base : {0.0, 0.3, 1.0, 3.0, 10.0}) {
    s.sigma_base = base;
    const double acc = oracle_accuracy(s, Access::independent, 100000);
    EXPECT_LT(acc, prev + 0.005) << base;
    prev = acc;
  }
  EXPECT_LT(prev, 0.53);
}

TEST(Oracle, MatchesEmpiricalRuleOnGeneratedData) {
  // With the generating direction known, the sign of the pooled difference along u is a
  // (suboptimal) pairwise rule; the Bayes oracle must be at least as good.
  SynthSpec s;
  s.n_pairs = 1500;
  const auto d = generate(s);
  std::size_t right = 0;
  for (const auto& p : d.pairs) {
    const auto c = features::mean_pool(p.chosen);
    const auto r = features::mean_pool(p.rejected);
    double sum = 0;
    for (std::size_t t = 0; t < s.steps; ++t) sum += projection(c, t, d.truth.direction) - projection(r, t, d.truth.direction);
    right += sum > 0;
  }
  const double simple = double(right) / s.n_pairs;
  EXPECT_LE(simple, oracle_accuracy(s, Access::pairwise, 100000) + 0.02);
  EXPECT_GT(simple, 0.8);
}
