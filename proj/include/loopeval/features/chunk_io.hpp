#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "loopeval/features/records.hpp"

namespace loopeval::features {

//  Chunk layout (little-endian):
//    "LSF1" | u16 version | u16 steps | u32 hidden | u32 seq_len | u8 dtype | u32 pair_count
//    per pair: u16 id_len | id bytes | u8 label_source
//      per role (chosen, rejected): u32 token_count | seq_len mask bytes | steps*seq_len*hidden f16

inline constexpr char kChunkMagic[4] = {'L', 'S', 'F', '1'};
inline constexpr std::uint16_t kChunkVersion = 1;
inline constexpr std::uint8_t kDtypeFloat16 = 1;
inline constexpr std::size_t kDefaultChunkSize = 100;

enum class ChunkErrorKind { bad_magic, bad_version, bad_dtype, truncated, invalid_record, io };

class ChunkFormatError : public std::runtime_error {
 public:
  ChunkFormatError(ChunkErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ChunkErrorKind kind() const { return kind_; }

 private:
  ChunkErrorKind kind_;
};

struct ChunkHeader {
  std::uint16_t version = kChunkVersion;
  std::uint16_t steps = 0;
  std::uint32_t hidden = 0;
  std::uint32_t seq_len = 0;
  std::uint8_t dtype = kDtypeFloat16;
  std::uint32_t pair_count = 0;

  bool operator==(const ChunkHeader&) const = default;
};

struct FeatureChunk {
  ChunkHeader header;
  std::vector<PreferencePair> pairs;

  FeatureChunk() = default;
  FeatureChunk(std::uint16_t steps, std::uint32_t hidden, std::uint32_t seq_len);

  /// Throws ConfigError if any pair disagrees with the header or violates a record invariant.
  void validate(std::size_t max_pairs = kDefaultChunkSize) const;
  bool operator==(const FeatureChunk&) const = default;
};

/// Record ids are not stored in the chunk; they are derived from the prompt id and role.
std::string record_id(const std::string& prompt_id, Role role);

void write_chunk(const FeatureChunk& chunk, std::ostream& out, std::size_t max_pairs = kDefaultChunkSize);
void write_chunk(const FeatureChunk& chunk, const std::filesystem::path& path,
                 std::size_t max_pairs = kDefaultChunkSize);

FeatureChunk read_chunk(std::istream& in);
FeatureChunk read_chunk(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct ShortRun {
  std::string example_id;
  std::uint32_t true_steps = 0;
};

struct DatasetManifest {
  std::string split;
  std::vector<std::string> chunk_files;  // relative to the manifest's directory
  std::vector<std::uint32_t> chunk_pair_counts;
  std::uint64_t total_pairs = 0;
  std::uint16_t steps = 0;
  std::uint32_t hidden = 0;
  std::uint32_t seq_len = 0;
  std::string provenance_json = "{}";  // generator spec echo or extraction metadata
  std::vector<ShortRun> short_runs;

  void validate() const;
};

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Writes pairs as consecutive chunks named `<split>-NNNNN.lsf` plus `manifest.json` under dir.
DatasetManifest write_dataset(const std::vector<PreferencePair>& pairs, const std::filesystem::path& dir,
                              const std::string& split, const std::string& provenance_json,
                              std::size_t chunk_size = kDefaultChunkSize);

// ---------------------------------------------------------------------------

/// Sequential access to a dataset one chunk at a time.
class ChunkSource {
 public:
  virtual ~ChunkSource() = default;
  virtual std::size_t chunk_count() const = 0;
  virtual FeatureChunk load(std::size_t index) const = 0;
  virtual std::string describe(std::size_t index) const = 0;

  std::size_t pair_count() const;
  std::vector<PreferencePair> load_all() const;
};

class MemoryChunkSource : public ChunkSource {
 public:
  explicit MemoryChunkSource(std::vector<FeatureChunk> chunks) : chunks_(std::move(chunks)) {}
  static MemoryChunkSource from_pairs(const std::vector<PreferencePair>& pairs,
                                      std::size_t chunk_size = kDefaultChunkSize);

  std::size_t chunk_count() const override { return chunks_.size(); }
  FeatureChunk load(std::size_t index) const override { return chunks_.at(index); }
  std::string describe(std::size_t index) const override { return "memory chunk " + std::to_string(index); }

 private:
  std::vector<FeatureChunk> chunks_;
};

/// Reads chunk files listed in a manifest; short-run step counts from the manifest are reapplied.
class FileChunkSource : public ChunkSource {
 public:
  explicit FileChunkSource(const std::filesystem::path& manifest_path);

  std::size_t chunk_count() const override { return paths_.size(); }
  FeatureChunk load(std::size_t index) const override;
  std::string describe(std::size_t index) const override { return paths_.at(index).string(); }
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  std::vector<std::filesystem::path> paths_;
};

}  // namespace loopeval::features
