#include "loopeval/eval/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace loopeval::eval {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'L', 'S', 'W', '1'};

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

}  // namespace

void save_checkpoint(const AnyEvaluator& evaluator, const std::filesystem::path& stem, const json& metadata) {
  const auto params = parameters_of(evaluator);
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto* p : params) {
    table.push_back({{"name", p->name}, {"shape", p->shape}, {"offset", offset}});
    offset += p->size();
  }
  json head = {{"architecture", to_string(architecture_of(evaluator))},
               {"config", config_json(evaluator)},
               {"tensors", table},
               {"total_values", offset},
               {"metadata", metadata}};
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());

  std::ofstream blob(with_ext(stem, ".lsw"), std::ios::binary);
  if (!blob) throw CheckpointError("cannot write " + with_ext(stem, ".lsw").string());
  blob.write(kMagic, 4);
  blob.write(reinterpret_cast<const char*>(&offset), sizeof offset);
  for (const auto* p : params) {
    blob.write(reinterpret_cast<const char*>(p->values.data()), std::streamsize(p->size() * sizeof(float)));
  }
  if (!blob) throw CheckpointError("write failed for " + with_ext(stem, ".lsw").string());

  std::ofstream meta(with_ext(stem, ".json"));
  if (!meta) throw CheckpointError("cannot write " + with_ext(stem, ".json").string());
  meta << head.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream meta(with_ext(stem, ".json"));
  if (!meta) throw CheckpointError("cannot open " + with_ext(stem, ".json").string());
  json head;
  try {
    head = json::parse(meta);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const auto arch = architecture_from_string(head.at("architecture").get<std::string>());
  LoadedCheckpoint out{make_evaluator(arch, head.at("config"), 0), head.value("metadata", json::object())};

  auto params = parameters_of(out.evaluator);
  const auto& table = head.at("tensors");
  if (table.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(table.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<std::vector<std::size_t>>();
    if (name != params[i]->name) throw CheckpointError("tensor " + std::to_string(i) + " is '" + name +
                                                       "', model expects '" + params[i]->name + "'");
    if (shape != params[i]->shape) throw CheckpointError("shape mismatch for tensor '" + name + "'");
  }

  std::ifstream blob(with_ext(stem, ".lsw"), std::ios::binary);
  if (!blob) throw CheckpointError("cannot open " + with_ext(stem, ".lsw").string());
  char magic[4];
  std::uint64_t total = 0;
  blob.read(magic, 4);
  blob.read(reinterpret_cast<char*>(&total), sizeof total);
  if (!blob || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad weight blob header");
  if (total != total_size<float>(params)) throw CheckpointError("weight blob size does not match model");
  for (auto* p : params) {
    blob.read(reinterpret_cast<char*>(p->values.data()), std::streamsize(p->size() * sizeof(float)));
    if (!blob) throw CheckpointError("truncated weight blob at tensor '" + p->name + "'");
    if (!p->all_finite()) throw CheckpointError("non-finite weights in tensor '" + p->name + "'");
  }
  return out;
}

}  // namespace loopeval::eval
