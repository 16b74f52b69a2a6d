#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "loopeval/features/chunk_io.hpp"
#include "loopeval/features/records.hpp"

namespace loopeval::synth {

/// relational: both responses of a pair share a large random offset, preference lives in their difference.
/// absolute: no shared offset, each response carries its own +/- signal.
/// null: no planted signal at all.
enum class Mode { relational, absolute, null };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

struct SynthSpec {
  std::size_t n_pairs = 2000;
  std::uint32_t hidden = 64;
  std::uint32_t seq_len = 32;
  std::uint32_t steps = 4;
  Mode mode = Mode::relational;
  double delta = 0.15;
  double sigma_base = 1.5;
  double sigma_noise = 1.0;
  std::uint32_t response_span = 16;
  bool temporal_ramp = false;
  double label_noise_rate = 0.0;
  std::uint64_t seed = 42;

  void validate() const;
  std::string to_json() const;
  /// Stable hash of the JSON echo, used as dataset provenance.
  std::string hash() const;
};

struct GroundTruth {
  std::vector<float> direction;               // unit vector u
  std::vector<std::string> prompt_ids;
  std::vector<bool> preferred_is_chosen;      // false where label noise swapped the roles
};

struct SynthDataset {
  SynthSpec spec;
  std::vector<features::PreferencePair> pairs;
  GroundTruth truth;
};

/// Deterministic in spec (including seed). Pair i depends only on (seed, i).
SynthDataset generate(const SynthSpec& spec);

/// Writes chunk files, manifest.json and truth.json into dir.
features::DatasetManifest write_synth_dataset(const SynthDataset& data, const std::filesystem::path& dir,
                                              const std::string& split = "synthetic",
                                              std::size_t chunk_size = features::kDefaultChunkSize);

void write_ground_truth(const SynthDataset& data, const std::filesystem::path& path);

/// First `fraction` of pairs (by index) in `first`, the rest in `second`.
struct Split {
  std::vector<features::PreferencePair> first;
  std::vector<features::PreferencePair> second;
};
Split split_pairs(const std::vector<features::PreferencePair>& pairs, double fraction);

// ---------------------------------------------------------------------------

enum class Access { pairwise, independent };

/// Monte-Carlo accuracy of the Bayes-optimal classifier that observes per-step mean-pooled
/// representations (one response for independent access, both for pairwise access) and knows
/// the generating process, scored against the stored (possibly noisy) labels.
double oracle_accuracy(const SynthSpec& spec, Access access, std::size_t samples = 200000,
                       std::uint64_t mc_seed = 0x5eed);

}  // namespace loopeval::synth
