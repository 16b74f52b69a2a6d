#include "loopeval/features/chunk_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace loopeval::features {

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void put_halves(std::ostream& out, const std::vector<std::uint16_t>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 2));
  } else {
    for (auto v : values) put<std::uint16_t>(out, v);
  }
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw ChunkFormatError(ChunkErrorKind::truncated, std::string("truncated chunk: short read in ") + what);
    }
  }

  template <typename T>
  T get(const char* what) {
    unsigned char buf[sizeof(T)];
    bytes(buf, sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
  }

  void halves(std::vector<std::uint16_t>& dst, const char* what) {
    bytes(dst.data(), dst.size() * 2, what);
    if constexpr (std::endian::native != std::endian::little) {
      for (auto& v : dst) v = static_cast<std::uint16_t>((v >> 8) | (v << 8));
    }
  }

 private:
  std::istream& in_;
};

void write_record(std::ostream& out, const LoopStateRecord& r) {
  put<std::uint32_t>(out, r.token_count);
  out.write(reinterpret_cast<const char*>(r.mask.data()), static_cast<std::streamsize>(r.mask.size()));
  put_halves(out, r.states);
}

LoopStateRecord read_record(Reader& in, const ChunkHeader& h, const std::string& prompt_id, Role role) {
  LoopStateRecord r(h.steps, h.seq_len, h.hidden);
  r.example_id = record_id(prompt_id, role);
  r.role = role;
  r.token_count = in.get<std::uint32_t>("token count");
  in.bytes(r.mask.data(), r.mask.size(), "mask");
  in.halves(r.states, "states");
  return r;
}

}  // namespace

FeatureChunk::FeatureChunk(std::uint16_t steps, std::uint32_t hidden, std::uint32_t seq_len) {
  header.steps = steps;
  header.hidden = hidden;
  header.seq_len = seq_len;
}

std::string record_id(const std::string& prompt_id, Role role) {
  return prompt_id + (role == Role::chosen ? ":chosen" : ":rejected");
}

void FeatureChunk::validate(std::size_t max_pairs) const {
  if (header.version != kChunkVersion) throw ConfigError("chunk: unsupported version");
  if (header.dtype != kDtypeFloat16) throw ConfigError("chunk: unsupported dtype");
  if (header.pair_count != pairs.size()) throw ConfigError("chunk: header pair_count disagrees with payload");
  if (pairs.size() > max_pairs) {
    throw ConfigError("chunk: " + std::to_string(pairs.size()) + " pairs exceed chunk size " +
                      std::to_string(max_pairs));
  }
  for (const auto& p : pairs) {
    p.validate();
    if (p.chosen.steps != header.steps || p.chosen.hidden != header.hidden || p.chosen.seq_len != header.seq_len) {
      throw ConfigError("chunk: pair '" + p.prompt_id + "' shape disagrees with header");
    }
    if (p.prompt_id.size() > 0xffffu) throw ConfigError("chunk: prompt id too long");
    if (p.chosen.example_id != record_id(p.prompt_id, Role::chosen) ||
        p.rejected.example_id != record_id(p.prompt_id, Role::rejected)) {
      throw ConfigError("chunk: pair '" + p.prompt_id + "' record ids do not follow <prompt>:<role>");
    }
  }
}

void write_chunk(const FeatureChunk& chunk, std::ostream& out, std::size_t max_pairs) {
  chunk.validate(max_pairs);
  const auto& h = chunk.header;
  out.write(kChunkMagic, 4);
  put<std::uint16_t>(out, h.version);
  put<std::uint16_t>(out, h.steps);
  put<std::uint32_t>(out, h.hidden);
  put<std::uint32_t>(out, h.seq_len);
  put<std::uint8_t>(out, h.dtype);
  put<std::uint32_t>(out, h.pair_count);
  for (const auto& p : chunk.pairs) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(p.prompt_id.size()));
    out.write(p.prompt_id.data(), static_cast<std::streamsize>(p.prompt_id.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.label_source));
    write_record(out, p.chosen);
    write_record(out, p.rejected);
  }
  if (!out) throw ChunkFormatError(ChunkErrorKind::io, "chunk write failed");
}

void write_chunk(const FeatureChunk& chunk, const std::filesystem::path& path, std::size_t max_pairs) {
  std::ostringstream buffer;
  write_chunk(chunk, buffer, max_pairs);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ChunkFormatError(ChunkErrorKind::io, "cannot open " + path.string() + " for writing");
  const auto bytes = buffer.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ChunkFormatError(ChunkErrorKind::io, "write failed: " + path.string());
}

FeatureChunk read_chunk(std::istream& in) {
  Reader r(in);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kChunkMagic, 4) != 0) throw ChunkFormatError(ChunkErrorKind::bad_magic, "bad magic");
  FeatureChunk chunk;
  auto& h = chunk.header;
  h.version = r.get<std::uint16_t>("version");
  if (h.version != kChunkVersion) {
    throw ChunkFormatError(ChunkErrorKind::bad_version, "unsupported version " + std::to_string(h.version));
  }
  h.steps = r.get<std::uint16_t>("steps");
  h.hidden = r.get<std::uint32_t>("hidden");
  h.seq_len = r.get<std::uint32_t>("seq_len");
  h.dtype = r.get<std::uint8_t>("dtype");
  if (h.dtype != kDtypeFloat16) {
    throw ChunkFormatError(ChunkErrorKind::bad_dtype, "unsupported dtype code " + std::to_string(h.dtype));
  }
  h.pair_count = r.get<std::uint32_t>("pair count");
  chunk.pairs.reserve(h.pair_count);
  for (std::uint32_t i = 0; i < h.pair_count; ++i) {
    PreferencePair p;
    const auto id_len = r.get<std::uint16_t>("prompt id length");
    p.prompt_id.resize(id_len);
    r.bytes(p.prompt_id.data(), id_len, "prompt id");
    const auto source = r.get<std::uint8_t>("label source");
    if (source > 1) throw ChunkFormatError(ChunkErrorKind::invalid_record, "invalid label source");
    p.label_source = static_cast<LabelSource>(source);
    p.chosen = read_record(r, h, p.prompt_id, Role::chosen);
    p.rejected = read_record(r, h, p.prompt_id, Role::rejected);
    try {
      p.validate();
    } catch (const ConfigError& e) {
      throw ChunkFormatError(ChunkErrorKind::invalid_record, e.what());
    }
    chunk.pairs.push_back(std::move(p));
  }
  return chunk;
}

FeatureChunk read_chunk(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ChunkFormatError(ChunkErrorKind::io, "cannot open chunk " + path.string());
  try {
    return read_chunk(in);
  } catch (const ChunkFormatError& e) {
    throw ChunkFormatError(e.kind(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

void DatasetManifest::validate() const {
  if (chunk_files.size() != chunk_pair_counts.size()) throw ConfigError("manifest: chunk list/count mismatch");
  std::uint64_t sum = 0;
  for (auto c : chunk_pair_counts) sum += c;
  if (sum != total_pairs) throw ConfigError("manifest: total_pairs disagrees with chunk counts");
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  m.validate();
  nlohmann::json j;
  j["split"] = m.split;
  j["chunks"] = m.chunk_files;
  j["chunk_pair_counts"] = m.chunk_pair_counts;
  j["total_pairs"] = m.total_pairs;
  j["steps"] = m.steps;
  j["hidden"] = m.hidden;
  j["seq_len"] = m.seq_len;
  j["provenance"] = nlohmann::json::parse(m.provenance_json);
  j["short_runs"] = nlohmann::json::array();
  for (const auto& s : m.short_runs) j["short_runs"].push_back({{"example_id", s.example_id}, {"true_steps", s.true_steps}});
  std::ofstream out(path);
  if (!out) throw ChunkFormatError(ChunkErrorKind::io, "cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ChunkFormatError(ChunkErrorKind::io, "cannot open manifest " + path.string());
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.split = j.at("split").get<std::string>();
    m.chunk_files = j.at("chunks").get<std::vector<std::string>>();
    m.chunk_pair_counts = j.at("chunk_pair_counts").get<std::vector<std::uint32_t>>();
    m.total_pairs = j.at("total_pairs").get<std::uint64_t>();
    m.steps = j.at("steps").get<std::uint16_t>();
    m.hidden = j.at("hidden").get<std::uint32_t>();
    m.seq_len = j.at("seq_len").get<std::uint32_t>();
    m.provenance_json = j.value("provenance", nlohmann::json::object()).dump();
    for (const auto& s : j.value("short_runs", nlohmann::json::array())) {
      m.short_runs.push_back({s.at("example_id").get<std::string>(), s.at("true_steps").get<std::uint32_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ChunkFormatError(ChunkErrorKind::invalid_record, path.string() + ": malformed manifest: " + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest write_dataset(const std::vector<PreferencePair>& pairs, const std::filesystem::path& dir,
                              const std::string& split, const std::string& provenance_json, std::size_t chunk_size) {
  if (chunk_size == 0) throw ConfigError("chunk size must be positive");
  if (pairs.empty()) throw ConfigError("write_dataset: no pairs");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.split = split;
  m.steps = static_cast<std::uint16_t>(pairs.front().chosen.steps);
  m.hidden = pairs.front().chosen.hidden;
  m.seq_len = pairs.front().chosen.seq_len;
  m.provenance_json = provenance_json;
  for (std::size_t start = 0; start < pairs.size(); start += chunk_size) {
    const std::size_t end = std::min(pairs.size(), start + chunk_size);
    FeatureChunk chunk(m.steps, m.hidden, m.seq_len);
    chunk.pairs.assign(pairs.begin() + static_cast<std::ptrdiff_t>(start), pairs.begin() + static_cast<std::ptrdiff_t>(end));
    chunk.header.pair_count = static_cast<std::uint32_t>(chunk.pairs.size());
    std::ostringstream name;
    name << split << "-" << std::setw(5) << std::setfill('0') << m.chunk_files.size() << ".lsf";
    write_chunk(chunk, dir / name.str(), chunk_size);
    m.chunk_files.push_back(name.str());
    m.chunk_pair_counts.push_back(chunk.header.pair_count);
    m.total_pairs += chunk.header.pair_count;
    for (const auto& p : chunk.pairs) {
      for (const auto* r : {&p.chosen, &p.rejected}) {
        if (r->true_steps != r->steps) m.short_runs.push_back({r->example_id, r->true_steps});
      }
    }
  }
  write_manifest(m, dir / "manifest.json");
  return m;
}

// ---------------------------------------------------------------------------

std::size_t ChunkSource::pair_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < chunk_count(); ++i) n += load(i).pairs.size();
  return n;
}

std::vector<PreferencePair> ChunkSource::load_all() const {
  std::vector<PreferencePair> all;
  for (std::size_t i = 0; i < chunk_count(); ++i) {
    auto c = load(i);
    for (auto& p : c.pairs) all.push_back(std::move(p));
  }
  return all;
}

MemoryChunkSource MemoryChunkSource::from_pairs(const std::vector<PreferencePair>& pairs, std::size_t chunk_size) {
  std::vector<FeatureChunk> chunks;
  for (std::size_t start = 0; start < pairs.size(); start += chunk_size) {
    const std::size_t end = std::min(pairs.size(), start + chunk_size);
    const auto& first = pairs[start].chosen;
    FeatureChunk c(static_cast<std::uint16_t>(first.steps), first.hidden, first.seq_len);
    c.pairs.assign(pairs.begin() + static_cast<std::ptrdiff_t>(start), pairs.begin() + static_cast<std::ptrdiff_t>(end));
    c.header.pair_count = static_cast<std::uint32_t>(c.pairs.size());
    chunks.push_back(std::move(c));
  }
  return MemoryChunkSource(std::move(chunks));
}

FileChunkSource::FileChunkSource(const std::filesystem::path& manifest_path) : manifest_(read_manifest(manifest_path)) {
  const auto dir = manifest_path.parent_path();
  for (const auto& f : manifest_.chunk_files) paths_.push_back(dir / f);
}

FeatureChunk FileChunkSource::load(std::size_t index) const {
  auto chunk = read_chunk(paths_.at(index));
  if (chunk.header.pair_count != manifest_.chunk_pair_counts.at(index)) {
    throw ChunkFormatError(ChunkErrorKind::invalid_record,
                           paths_[index].string() + ": pair count disagrees with manifest");
  }
  if (!manifest_.short_runs.empty()) {
    for (auto& p : chunk.pairs) {
      for (auto* r : {&p.chosen, &p.rejected}) {
        for (const auto& s : manifest_.short_runs) {
          if (s.example_id == r->example_id) r->true_steps = s.true_steps;
        }
      }
    }
  }
  return chunk;
}

}  // namespace loopeval::features
