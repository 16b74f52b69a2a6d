#include "loopeval/synth/synth.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <random>
#include <sstream>

namespace loopeval::synth {

using features::LoopStateRecord;
using features::PreferencePair;
using features::Role;

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::relational: return "relational";
    case Mode::absolute: return "absolute";
    case Mode::null: return "null";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "relational") return Mode::relational;
  if (s == "absolute") return Mode::absolute;
  if (s == "null") return Mode::null;
  throw ConfigError("unknown synth mode '" + s + "'");
}

void SynthSpec::validate() const {
  if (n_pairs == 0) throw ConfigError("synth: n_pairs must be positive");
  if (hidden == 0 || seq_len < 2 || steps == 0) throw ConfigError("synth: hidden, seq_len >= 2 and steps required");
  if (response_span > seq_len) throw ConfigError("synth: response_span exceeds seq_len");
  if (delta < 0 || sigma_base < 0 || sigma_noise < 0) throw ConfigError("synth: scales must be non-negative");
  if (!(label_noise_rate >= 0 && label_noise_rate < 0.5)) throw ConfigError("synth: label_noise_rate must be in [0, 0.5)");
  if (steps > 0xffffu) throw ConfigError("synth: too many steps");
}

std::string SynthSpec::to_json() const {
  nlohmann::json j{{"n_pairs", n_pairs},
                   {"hidden", hidden},
                   {"seq_len", seq_len},
                   {"steps", steps},
                   {"mode", to_string(mode)},
                   {"delta", delta},
                   {"sigma_base", sigma_base},
                   {"sigma_noise", sigma_noise},
                   {"response_span", response_span},
                   {"temporal_ramp", temporal_ramp},
                   {"label_noise_rate", label_noise_rate},
                   {"seed", seed}};
  return j.dump();
}

std::string SynthSpec::hash() const {
  // FNV-1a over the canonical JSON echo.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : to_json()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

namespace {

double ramp_weight(const SynthSpec& spec, std::uint32_t step) {
  return spec.temporal_ramp ? static_cast<double>(step + 1) / spec.steps : 1.0;
}

std::uint32_t min_tokens(const SynthSpec& spec) { return std::max<std::uint32_t>(1, spec.seq_len / 2); }

LoopStateRecord make_record(const SynthSpec& spec, const std::vector<double>& offset, const std::vector<float>& u,
                            double sign, std::uint32_t tokens, std::mt19937_64& rng) {
  LoopStateRecord r(spec.steps, spec.seq_len, spec.hidden);
  r.set_left_padded_mask(tokens);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::uint32_t first_real = spec.seq_len - tokens;
  const std::uint32_t first_signal = spec.seq_len - std::min(spec.response_span, tokens);
  const bool planted = spec.mode != Mode::null && spec.delta > 0;
  for (std::uint32_t t = 0; t < spec.steps; ++t) {
    const double amp = sign * spec.delta * ramp_weight(spec, t);
    for (std::uint32_t pos = 0; pos < spec.seq_len; ++pos) {
      for (std::uint32_t k = 0; k < spec.hidden; ++k) {
        double v = spec.sigma_noise * noise(rng);
        if (pos >= first_real) v += offset[k];
        if (planted && pos >= first_signal) v += amp * u[k];
        r.set(t, pos, k, static_cast<float>(v));
      }
    }
  }
  return r;
}

}  // namespace

SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset out;
  out.spec = spec;

  {
    std::seed_seq seq{spec.seed, std::uint64_t{0x75}};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> u(spec.hidden);
    double norm = 0;
    for (auto& v : u) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double v : u) out.truth.direction.push_back(static_cast<float>(v / norm));
  }

  const bool shared_offset = spec.mode != Mode::absolute;
  out.pairs.reserve(spec.n_pairs);
  for (std::size_t i = 0; i < spec.n_pairs; ++i) {
    std::seed_seq seq{spec.seed, std::uint64_t{0x9a1}, static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::uint32_t> length(min_tokens(spec), spec.seq_len);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution flip(spec.label_noise_rate);

    const std::uint32_t chosen_tokens = length(rng);
    const std::uint32_t rejected_tokens = length(rng);
    std::vector<double> offset(spec.hidden, 0.0);
    if (shared_offset) {
      for (auto& v : offset) v = spec.sigma_base * normal(rng);
    }
    const bool swapped = flip(rng);
    const double chosen_sign = swapped ? -1.0 : 1.0;

    std::ostringstream id;
    id << "synth-" << std::setw(6) << std::setfill('0') << i;
    PreferencePair p;
    p.prompt_id = id.str();
    p.label_source = features::LabelSource::synthetic;
    p.chosen = make_record(spec, offset, out.truth.direction, chosen_sign, chosen_tokens, rng);
    p.chosen.role = Role::chosen;
    p.chosen.example_id = features::record_id(p.prompt_id, Role::chosen);
    p.rejected = make_record(spec, offset, out.truth.direction, -chosen_sign, rejected_tokens, rng);
    p.rejected.role = Role::rejected;
    p.rejected.example_id = features::record_id(p.prompt_id, Role::rejected);

    out.truth.prompt_ids.push_back(p.prompt_id);
    out.truth.preferred_is_chosen.push_back(!swapped);
    out.pairs.push_back(std::move(p));
  }
  return out;
}

void write_ground_truth(const SynthDataset& data, const std::filesystem::path& path) {
  nlohmann::json j;
  j["spec"] = nlohmann::json::parse(data.spec.to_json());
  j["spec_hash"] = data.spec.hash();
  j["direction"] = data.truth.direction;
  auto& labels = j["labels"] = nlohmann::json::array();
  for (std::size_t i = 0; i < data.truth.prompt_ids.size(); ++i) {
    labels.push_back({{"prompt_id", data.truth.prompt_ids[i]}, {"preferred_is_chosen", bool(data.truth.preferred_is_chosen[i])}});
  }
  std::ofstream out(path);
  if (!out) throw features::ChunkFormatError(features::ChunkErrorKind::io, "cannot write " + path.string());
  out << j.dump(1) << "\n";
}

features::DatasetManifest write_synth_dataset(const SynthDataset& data, const std::filesystem::path& dir,
                                              const std::string& split, std::size_t chunk_size) {
  nlohmann::json provenance{{"generator", "synthetic"}, {"spec_hash", data.spec.hash()},
                            {"spec", nlohmann::json::parse(data.spec.to_json())}};
  auto manifest = features::write_dataset(data.pairs, dir, split, provenance.dump(), chunk_size);
  write_ground_truth(data, dir / "truth.json");
  return manifest;
}

Split split_pairs(const std::vector<features::PreferencePair>& pairs, double fraction) {
  if (!(fraction >= 0 && fraction <= 1)) throw ConfigError("split fraction must be in [0, 1]");
  const auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pairs.size())));
  Split s;
  s.first.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(cut));
  s.second.assign(pairs.begin() + static_cast<std::ptrdiff_t>(cut), pairs.end());
  return s;
}

// ---------------------------------------------------------------------------

namespace {

// Projections onto u of the per-step mean-pooled states are a sufficient statistic: components
// orthogonal to u carry no label information. For one response with n tokens,
//   y_t = beta + s * delta * w_t * min(span, n) / n + e_t,   e_t ~ N(0, sigma_noise^2 / n),
// with beta ~ N(0, sigma_base^2) shared by both responses of a pair. The Bayes rule for the
// symmetric two-hypothesis problem is sign(m' Sigma^-1 y), Sigma = D + sigma_base^2 11'.
struct Observation {
  std::vector<double> y;
  std::vector<double> m;      // signal template for "first response is chosen"
  std::vector<double> dinv;   // inverse noise variances
};

double bayes_statistic(const Observation& obs, double base_var) {
  double one_dinv_one = 0;
  double one_dinv_y = 0;
  double one_dinv_m = 0;
  double m_dinv_y = 0;
  for (std::size_t i = 0; i < obs.y.size(); ++i) {
    one_dinv_one += obs.dinv[i];
    one_dinv_y += obs.dinv[i] * obs.y[i];
    one_dinv_m += obs.dinv[i] * obs.m[i];
    m_dinv_y += obs.m[i] * obs.dinv[i] * obs.y[i];
  }
  const double c = base_var / (1.0 + base_var * one_dinv_one);
  return m_dinv_y - c * one_dinv_m * one_dinv_y;
}

}  // namespace

double oracle_accuracy(const SynthSpec& spec, Access access, std::size_t samples, std::uint64_t mc_seed) {
  spec.validate();
  if (samples == 0) throw ConfigError("oracle_accuracy: samples must be positive");
  std::seed_seq seq{spec.seed, mc_seed};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> length(min_tokens(spec), spec.seq_len);
  std::bernoulli_distribution flip(spec.label_noise_rate);
  std::bernoulli_distribution coin(0.5);

  const double base_sd = spec.mode == Mode::absolute ? 0.0 : spec.sigma_base;
  const double delta = spec.mode == Mode::null ? 0.0 : spec.delta;
  const std::size_t steps = spec.steps;

  auto fill = [&](Observation& obs, std::size_t at, double beta, double sign_true, double template_sign) {
    const std::uint32_t n = length(rng);
    const double frac = static_cast<double>(std::min(spec.response_span, n)) / n;
    const double var = std::max(spec.sigma_noise * spec.sigma_noise / n, 1e-24);
    const double sd = std::sqrt(var);
    for (std::size_t t = 0; t < steps; ++t) {
      const double amp = delta * ramp_weight(spec, static_cast<std::uint32_t>(t)) * frac;
      obs.y[at + t] = beta + sign_true * amp + sd * normal(rng);
      obs.m[at + t] = template_sign * amp;
      obs.dinv[at + t] = 1.0 / var;
    }
  };

  double correct = 0;
  const std::size_t width = access == Access::pairwise ? 2 * steps : steps;
  Observation obs{std::vector<double>(width), std::vector<double>(width), std::vector<double>(width)};
  for (std::size_t s = 0; s < samples; ++s) {
    const double beta = base_sd * normal(rng);
    const double chosen_sign = flip(rng) ? -1.0 : 1.0;
    bool predicted_label = false;
    bool stored_label = false;
    double stat = 0;
    if (access == Access::pairwise) {
      // First slot is the stored chosen response; the label asks whether it is preferred.
      fill(obs, 0, beta, chosen_sign, 1.0);
      fill(obs, steps, beta, -chosen_sign, -1.0);
      stat = bayes_statistic(obs, base_sd * base_sd);
      stored_label = true;
    } else {
      const bool is_chosen = coin(rng);
      fill(obs, 0, beta, is_chosen ? chosen_sign : -chosen_sign, 1.0);
      stat = bayes_statistic(obs, base_sd * base_sd);
      stored_label = is_chosen;
    }
    if (stat == 0) {
      correct += 0.5;
      continue;
    }
    predicted_label = stat > 0;
    if (predicted_label == stored_label) correct += 1.0;
  }
  return correct / static_cast<double>(samples);
}

}  // namespace loopeval::synth
