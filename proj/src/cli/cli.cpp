#include "loopeval/cli/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "loopeval/diag/diagnostics.hpp"
#include "loopeval/eval/checkpoint.hpp"
#include "loopeval/synth/synth.hpp"
#include "loopeval/train/train.hpp"

namespace loopeval::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json RunManifest::to_json() const {
  return {{"subcommand", subcommand},     {"config", config},          {"inputs", inputs},
          {"output", output},             {"seed", seed},              {"tool_version", tool_version},
          {"started_at", started_at},     {"elapsed_seconds", elapsed_seconds}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.subcommand = j.at("subcommand").get<std::string>();
  m.config = j.value("config", json::object());
  m.inputs = j.value("inputs", json::array());
  m.output = j.value("output", std::string());
  m.seed = j.value("seed", std::uint64_t{0});
  m.tool_version = j.value("tool_version", std::string());
  m.started_at = j.value("started_at", std::string());
  m.elapsed_seconds = j.value("elapsed_seconds", 0.0);
  return m;
}

void write_run_manifest(const RunManifest& manifest, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / kRunManifestName);
  if (!out) throw features::ChunkFormatError(features::ChunkErrorKind::io, "cannot write run manifest in " + dir.string());
  out << manifest.to_json().dump(2) << '\n';
}

RunManifest read_run_manifest(const fs::path& dir) {
  std::ifstream in(dir / kRunManifestName);
  if (!in) throw features::ChunkFormatError(features::ChunkErrorKind::io, "no run manifest in " + dir.string());
  return RunManifest::from_json(json::parse(in));
}

namespace {

struct DegenerateModel : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_out(const std::string& flag, const std::string& fallback) {
  return flag.empty() ? output_root() / fallback : fs::path(flag);
}

fs::path manifest_path(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw features::ChunkFormatError(features::ChunkErrorKind::io, "no such dataset: " + data);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw features::ChunkFormatError(features::ChunkErrorKind::io, "cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string pct(double v, int prec = 1) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v * 100 << '%';
  return s.str();
}

std::string signed_num(double v, int prec) {
  std::ostringstream s;
  s << std::showpos << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

/// Wall-clock bookkeeping for the manifest of one invocation.
class RunClock {
 public:
  RunClock() : start_(std::chrono::steady_clock::now()), stamp_(now_iso()) {}
  void finish(RunManifest& m) const {
    m.started_at = stamp_;
    m.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
  std::string stamp_;
};

// ---------------------------------------------------------------------------

struct SynthArgs {
  synth::SynthSpec spec;
  std::string mode = "relational";
  std::size_t chunk_size = features::kDefaultChunkSize;
  double holdout = 0.0;
  std::size_t oracle_samples = 200000;
  std::string out;
};

int cmd_synth(SynthArgs& a, std::ostream& out) {
  RunClock clock;
  a.spec.mode = synth::mode_from_string(a.mode);
  a.spec.validate();
  if (!(a.holdout >= 0 && a.holdout < 1)) throw ConfigError("--holdout must be in [0, 1)");
  const fs::path dir = resolve_out(a.out, "synth-" + a.spec.hash());
  const auto data = synth::generate(a.spec);

  RunManifest rm;
  rm.subcommand = "synth";
  rm.config = json::parse(a.spec.to_json());
  rm.config["chunk_size"] = a.chunk_size;
  rm.config["holdout"] = a.holdout;
  rm.seed = a.spec.seed;
  rm.output = dir.string();

  if (a.holdout > 0) {
    const auto split = synth::split_pairs(data.pairs, 1.0 - a.holdout);
    auto part = [&](const std::vector<features::PreferencePair>& pairs, std::size_t offset) {
      synth::SynthDataset d{a.spec, pairs, {}};
      d.truth.direction = data.truth.direction;
      d.truth.prompt_ids.assign(data.truth.prompt_ids.begin() + long(offset),
                                data.truth.prompt_ids.begin() + long(offset + pairs.size()));
      d.truth.preferred_is_chosen.assign(data.truth.preferred_is_chosen.begin() + long(offset),
                                         data.truth.preferred_is_chosen.begin() + long(offset + pairs.size()));
      return d;
    };
    const auto m1 = synth::write_synth_dataset(part(split.first, 0), dir / "train", "train", a.chunk_size);
    const auto m2 = synth::write_synth_dataset(part(split.second, split.first.size()), dir / "eval", "eval", a.chunk_size);
    out << "wrote " << m1.chunk_files.size() << " train chunks (" << m1.total_pairs << " pairs) and "
        << m2.chunk_files.size() << " eval chunks (" << m2.total_pairs << " pairs) to " << dir.string() << '\n';
  } else {
    const auto m = synth::write_synth_dataset(data, dir, "synthetic", a.chunk_size);
    out << "wrote " << m.chunk_files.size() << " chunks (" << m.total_pairs << " pairs) to " << dir.string() << '\n';
  }
  const double op = synth::oracle_accuracy(a.spec, synth::Access::pairwise, a.oracle_samples);
  const double oi = synth::oracle_accuracy(a.spec, synth::Access::independent, a.oracle_samples);
  out << "oracle accuracy  pairwise " << std::fixed << std::setprecision(4) << op << "  independent " << oi << '\n';
  rm.config["oracle_pairwise"] = op;
  rm.config["oracle_independent"] = oi;
  clock.finish(rm);
  write_run_manifest(rm, dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct ModelArgs {
  std::string arch = "pairwise";
  std::size_t pool_rank = 128;
  std::size_t proj_dim = 512;
  std::size_t gru_layers = 2;
  std::size_t gru_hidden = 512;
  std::size_t scorer_hidden = 256;
  std::size_t mlp_hidden = 512;
  double dropout = 0.1;
  bool proj_bias = false;
  bool pre_diff_norm = false;
  std::uint64_t init_seed = 0;
};

json model_config(const ModelArgs& m, eval::Architecture arch, std::size_t d_in, std::size_t steps) {
  switch (arch) {
    case eval::Architecture::pairwise:
      return {{"d_in", d_in},
              {"pool_rank", std::min(m.pool_rank, d_in)},
              {"proj_dim", m.proj_dim},
              {"gru_layers", m.gru_layers},
              {"gru_hidden", m.gru_hidden},
              {"scorer_hidden", m.scorer_hidden},
              {"dropout", m.dropout},
              {"proj_bias", m.proj_bias},
              {"pre_diff_norm", m.pre_diff_norm}};
    case eval::Architecture::pointwise_v2:
    case eval::Architecture::calibrated:
      return {{"d_in", d_in},
              {"pool_rank", std::min(m.pool_rank, d_in)},
              {"proj_dim", m.proj_dim},
              {"gru_layers", m.gru_layers},
              {"gru_hidden", m.gru_hidden},
              {"scorer_hidden", m.scorer_hidden},
              {"dropout", m.dropout},
              {"proj_bias", m.proj_bias}};
    case eval::Architecture::pointwise_v1:
      return {{"d_in", d_in}, {"steps", steps}, {"hidden", m.mlp_hidden}};
    case eval::Architecture::linear:
      return {{"d_in", d_in}, {"steps", steps}};
  }
  return json::object();
}

struct TrainArgs {
  ModelArgs model;
  train::TrainConfig cfg;
  std::string loss;
  std::string train_data;
  std::string eval_data;
  std::string out;
};

int cmd_train(TrainArgs& a, std::ostream& out) {
  RunClock clock;
  const auto arch = eval::architecture_from_string(a.model.arch);
  if (a.loss.empty()) {
    a.loss = arch == eval::Architecture::pairwise     ? "pairwise_swap"
             : arch == eval::Architecture::calibrated ? "calibrated"
                                                      : "pointwise_ranking";
  }
  a.cfg.loss = train::loss_kind_from_string(a.loss);
  a.cfg.validate();

  const auto train_manifest = manifest_path(a.train_data);
  features::FileChunkSource train_src(train_manifest);
  std::optional<features::FileChunkSource> eval_src;
  if (!a.eval_data.empty()) {
    eval_src.emplace(manifest_path(a.eval_data));
    if (eval_src->manifest().hidden != train_src.manifest().hidden ||
        eval_src->manifest().steps != train_src.manifest().steps) {
      throw DataMismatch("eval data shape differs from training data");
    }
  }
  const auto& tm = train_src.manifest();
  const json mcfg = model_config(a.model, arch, tm.hidden, tm.steps);
  auto model = eval::make_evaluator(arch, mcfg, a.model.init_seed);

  std::ostringstream tag;
  tag << "train-" << a.model.arch << "-" << a.cfg.seed;
  const fs::path dir = resolve_out(a.out, tag.str());
  out << "architecture " << a.model.arch << " (" << eval::count_parameters(arch, mcfg) << " parameters), loss "
      << a.loss << ", " << tm.total_pairs << " training pairs\n";
  out << std::left << std::setw(7) << "Epoch" << std::setw(21) << "Deflated Train Acc" << "Fixed-Order Eval Acc\n";

  train::TrainOptions opts;
  opts.run_dir = dir;
  opts.on_epoch = [&](const train::EpochMetrics& m) {
    out << std::left << std::setw(7) << m.epoch << std::setw(21) << pct(m.deflated_train_acc)
        << (std::isnan(m.fixed_order_eval_acc) ? std::string("n/a") : pct(m.fixed_order_eval_acc)) << '\n';
    if (m.inversion_warning) {
      out << "WARNING: deflated train accuracy rose while fixed-order held-out accuracy fell (epoch " << m.epoch
          << "); select checkpoints on held-out fixed-order accuracy\n";
    }
    out.flush();
  };
  const auto result = train::train(a.cfg, model, train_src, eval_src ? &*eval_src : nullptr, opts);
  if (result.metrics.empty()) {
    eval::save_checkpoint(result.checkpoints.front().evaluator, dir / "epoch_000", {{"epoch", 0}});
  }

  RunManifest rm;
  rm.subcommand = "train";
  rm.config = {{"train", a.cfg.to_json()}, {"architecture", a.model.arch}, {"model", mcfg},
               {"init_seed", a.model.init_seed}};
  rm.inputs = json::array({train_manifest.string()});
  if (eval_src) rm.inputs.push_back(manifest_path(a.eval_data).string());
  rm.seed = a.cfg.seed;
  rm.output = dir.string();
  clock.finish(rm);
  write_run_manifest(rm, dir);
  out << "run directory " << dir.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

void check_compatible(const eval::AnyEvaluator& e, const features::DatasetManifest& m, const std::string& ck) {
  const auto cfg = eval::config_json(e);
  const auto d_in = cfg.at("d_in").get<std::size_t>();
  if (d_in != m.hidden) {
    throw DataMismatch("checkpoint " + ck + " (" + eval::to_string(eval::architecture_of(e)) + ", d_in " +
                      std::to_string(d_in) + ") does not match data hidden size " + std::to_string(m.hidden));
  }
  if (cfg.contains("steps") && cfg.at("steps").get<std::size_t>() != m.steps) {
    throw DataMismatch("checkpoint " + ck + " expects " + std::to_string(cfg.at("steps").get<std::size_t>()) +
                      " loop steps, data has " + std::to_string(m.steps));
  }
}

std::string checkpoint_stem(const std::string& s) {
  fs::path p(s);
  if (p.extension() == ".json" || p.extension() == ".lsw") p.replace_extension();
  return p.string();
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

int cmd_eval(EvalArgs& a, std::ostream& out) {
  RunClock clock;
  const auto stem = checkpoint_stem(a.checkpoint);
  const auto ck = eval::load_checkpoint(stem);
  features::FileChunkSource src(manifest_path(a.data));
  check_compatible(ck.evaluator, src.manifest(), stem);
  const auto r = train::fixed_order_eval(ck.evaluator, src);
  const std::size_t correct = std::size_t(std::llround(r.accuracy * double(r.n)));

  std::ostringstream t;
  t << "Metric          Value\n";
  t << "Test accuracy   " << pct(r.accuracy) << " (" << correct << " / " << r.n << ")\n";
  t << "Average score   " << signed_num(r.stats.mean, 4) << '\n';
  t << "Score std       " << std::fixed << std::setprecision(4) << r.stats.std << '\n';
  t << "Score range     [" << signed_num(r.stats.min, 2) << ", " << signed_num(r.stats.max, 2) << "]\n";
  t << "Positive rate   " << pct(r.stats.positive_rate) << '\n';
  out << t.str();

  const fs::path dir = resolve_out(a.out, "eval-" + fs::path(stem).filename().string());
  fs::create_directories(dir);
  json report = r.to_json();
  report["architecture"] = eval::to_string(eval::architecture_of(ck.evaluator));
  report["checkpoint"] = stem;
  write_json(dir / "eval_report.json", report);
  write_text(dir / "eval_report.txt", t.str());

  RunManifest rm;
  rm.subcommand = "eval";
  rm.inputs = json::array({stem, manifest_path(a.data).string()});
  rm.output = dir.string();
  clock.finish(rm);
  write_run_manifest(rm, dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct FlipArgs {
  std::vector<std::string> checkpoints;
  std::string data;
  std::string out;
  bool rank = false;
  std::size_t limit = 0;
};

int cmd_fliptest(FlipArgs& a, std::ostream& out) {
  RunClock clock;
  features::FileChunkSource src(manifest_path(a.data));
  auto pairs = src.load_all();
  if (a.limit > 0 && pairs.size() > a.limit) pairs.resize(a.limit);
  const auto kind = a.rank ? diag::Correlation::spearman : diag::Correlation::pearson;

  std::vector<train::EpochCheckpoint> cks;
  for (const auto& c : a.checkpoints) {
    const auto stem = checkpoint_stem(c);
    auto loaded = eval::load_checkpoint(stem);
    check_compatible(loaded.evaluator, src.manifest(), stem);
    if (!eval::is_pairwise(loaded.evaluator)) {
      throw ConfigError("flip test needs a pairwise checkpoint; " + stem + " is " +
                        eval::to_string(eval::architecture_of(loaded.evaluator)));
    }
    cks.push_back({loaded.metadata.value("epoch", std::size_t(cks.size() + 1)), std::move(loaded.evaluator)});
  }
  const auto rows = diag::cross_epoch_flip(cks, pairs, kind);

  const fs::path dir = resolve_out(a.out, "fliptest");
  fs::create_directories(dir);
  json report = diag::cross_epoch_json(rows);
  write_json(dir / "fliptest_report.json", report);
  std::string text;
  for (const auto& r : rows) text += "epoch " + std::to_string(r.epoch) + "\n" + r.flip.to_text();
  if (rows.size() > 1) text += "\n" + diag::cross_epoch_text(rows);
  write_text(dir / "fliptest_report.txt", text);
  write_text(dir / "cross_epoch.csv", diag::cross_epoch_csv(rows));
  out << text;

  RunManifest rm;
  rm.subcommand = "fliptest";
  rm.config = {{"correlation", a.rank ? "spearman" : "pearson"}, {"limit", a.limit}};
  rm.inputs = json::array();
  for (const auto& c : a.checkpoints) rm.inputs.push_back(checkpoint_stem(c));
  rm.inputs.push_back(manifest_path(a.data).string());
  rm.output = dir.string();
  clock.finish(rm);
  write_run_manifest(rm, dir);

  for (const auto& r : rows) {
    if (r.flip.degenerate) throw DegenerateModel("epoch " + std::to_string(r.epoch) + ": " + r.flip.degeneracy_reason);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ProbeArgs {
  std::string data;
  std::string mode = "pairwise_diff";
  std::string source = "final_step";
  double train_fraction = 0.6;
  double reg_scale = 1e-4;
  std::string out;
};

int cmd_probe(ProbeArgs& a, std::ostream& out) {
  RunClock clock;
  const auto mode = diag::probe_mode_from_string(a.mode);
  diag::ProbeOptions opt;
  opt.source = diag::feature_source_from_string(a.source);
  opt.train_fraction = a.train_fraction;
  opt.regularization_scale = a.reg_scale;
  features::FileChunkSource src(manifest_path(a.data));
  const auto pairs = src.load_all();
  const auto r = mode == diag::ProbeMode::pairwise_diff ? diag::pairwise_probe(pairs, opt) : diag::independent_probe(pairs, opt);
  const fs::path dir = resolve_out(a.out, "probe-" + diag::to_string(mode));
  fs::create_directories(dir);
  const std::string stem = "probe_" + diag::to_string(mode) + "_" + diag::to_string(opt.source);
  write_json(dir / (stem + ".json"), r.to_json());
  write_text(dir / (stem + ".txt"), r.to_text());
  out << r.to_text();

  RunManifest rm;
  rm.subcommand = "probe";
  rm.config = {{"mode", diag::to_string(mode)}, {"source", a.source}, {"train_fraction", a.train_fraction},
               {"regularization_scale", a.reg_scale}};
  rm.inputs = json::array({manifest_path(a.data).string()});
  rm.output = dir.string();
  clock.finish(rm);
  write_run_manifest(rm, dir);
  return kOk;
}

struct ShortcutArgs {
  std::string data;
  std::string out;
};

int cmd_shortcut(ShortcutArgs& a, std::ostream& out) {
  RunClock clock;
  features::FileChunkSource src(manifest_path(a.data));
  const auto r = diag::shortcut_analysis(src.load_all());
  const fs::path dir = resolve_out(a.out, "shortcut");
  fs::create_directories(dir);
  write_json(dir / "shortcut_report.json", r.to_json());
  write_text(dir / "shortcut_report.txt", r.to_text());
  out << r.to_text();
  RunManifest rm;
  rm.subcommand = "shortcut";
  rm.inputs = json::array({manifest_path(a.data).string()});
  rm.output = dir.string();
  clock.finish(rm);
  write_run_manifest(rm, dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct FigureArgs {
  std::string run;
  std::vector<std::string> reports;  // extra report directories (probe, fliptest, eval)
  std::string out;
};

int cmd_figures(FigureArgs& a, std::ostream& out) {
  RunClock clock;
  const fs::path run(a.run);
  if (!fs::is_directory(run)) throw features::ChunkFormatError(features::ChunkErrorKind::io, "no such run directory: " + a.run);
  const fs::path metrics_path = run / "metrics.csv";
  if (!fs::exists(metrics_path)) {
    throw features::ChunkFormatError(features::ChunkErrorKind::io, "missing metrics: " + metrics_path.string());
  }
  const auto metrics = train::read_metrics_csv(metrics_path);
  if (metrics.empty()) throw features::ChunkFormatError(features::ChunkErrorKind::io, "empty metrics: " + metrics_path.string());
  const fs::path dir = a.out.empty() ? run / "figures" : fs::path(a.out);
  fs::create_directories(dir);

  std::ostringstream f3;
  f3 << "epoch,deflated_train_acc,fixed_order_eval_acc\n" << std::setprecision(10);
  for (const auto& m : metrics) f3 << m.epoch << ',' << m.deflated_train_acc << ',' << m.fixed_order_eval_acc << '\n';
  write_text(dir / "figure3_metric_inversion.csv", f3.str());
  std::vector<std::string> written = {"figure3_metric_inversion.csv"};

  std::vector<fs::path> search = {run};
  for (const auto& r : a.reports) search.emplace_back(r);

  for (const auto& s : search) {
    if (!fs::exists(s / "cross_epoch.csv")) continue;
    std::ifstream in(s / "cross_epoch.csv");
    std::string header, line;
    std::getline(in, header);
    std::ostringstream f2;
    f2 << "epoch,correlation,sign_flip_rate,mean_sum\n";
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
      if (f.size() < 5) continue;
      f2 << f[0] << ',' << f[2] << ',' << f[3] << ',' << f[4] << '\n';
    }
    write_text(dir / "figure2_cross_epoch_flip.csv", f2.str());
    written.push_back("figure2_cross_epoch_flip.csv");
    break;
  }

  std::ostringstream f1;
  f1 << "access_pattern,method,accuracy\n" << std::setprecision(10);
  f1 << "pairwise,evaluator_fixed_order_last_epoch," << metrics.back().fixed_order_eval_acc << '\n';
  for (const auto& s : search) {
    if (!fs::is_directory(s)) continue;
    for (const auto& entry : fs::directory_iterator(s)) {
      const auto name = entry.path().filename().string();
      if (name.rfind("probe_", 0) != 0 || entry.path().extension() != ".json") continue;
      std::ifstream in(entry.path());
      const auto j = json::parse(in);
      const auto mode = j.at("mode").get<std::string>();
      f1 << (mode == "pairwise_diff" ? "pairwise" : "independent") << ",linear_probe_" << j.at("feature_source").get<std::string>()
         << ',' << j.at("test_acc").get<double>() << '\n';
    }
  }
  write_text(dir / "figure1_access_pattern.csv", f1.str());
  written.push_back("figure1_access_pattern.csv");

  for (const auto& w : written) out << "wrote " << (dir / w).string() << '\n';
  RunManifest rm;
  rm.subcommand = "figures";
  rm.inputs = json::array({run.string()});
  for (const auto& r : a.reports) rm.inputs.push_back(r);
  rm.output = dir.string();
  clock.finish(rm);
  write_run_manifest(rm, dir);
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pairwise/pointwise preference evaluators over loop-iteration states"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic loop-state dataset with known ground truth");
  synth_cmd->add_option("--pairs", sa.spec.n_pairs, "Number of preference pairs")->required();
  synth_cmd->add_option("--mode", sa.mode, "relational | absolute | null")->capture_default_str();
  synth_cmd->add_option("--dim", sa.spec.hidden, "Hidden size d")->capture_default_str();
  synth_cmd->add_option("--seq-len", sa.spec.seq_len, "Padded sequence length L")->capture_default_str();
  synth_cmd->add_option("--steps", sa.spec.steps, "Loop steps T")->capture_default_str();
  synth_cmd->add_option("--delta", sa.spec.delta, "Planted signal amplitude")->capture_default_str();
  synth_cmd->add_option("--sigma-base", sa.spec.sigma_base, "Shared per-pair offset scale")->capture_default_str();
  synth_cmd->add_option("--sigma-noise", sa.spec.sigma_noise, "Per-token noise scale")->capture_default_str();
  synth_cmd->add_option("--span", sa.spec.response_span, "Trailing tokens carrying the signal")->capture_default_str();
  synth_cmd->add_flag("--ramp", sa.spec.temporal_ramp, "Signal grows linearly over loop steps");
  synth_cmd->add_option("--label-noise", sa.spec.label_noise_rate, "Fraction of pairs with swapped roles")->capture_default_str();
  synth_cmd->add_option("--seed", sa.spec.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--chunk-size", sa.chunk_size, "Pairs per chunk file")->capture_default_str();
  synth_cmd->add_option("--holdout", sa.holdout, "Fraction written to a separate eval/ split")->capture_default_str();
  synth_cmd->add_option("--oracle-samples", sa.oracle_samples, "Monte-Carlo samples per oracle")->capture_default_str();
  synth_cmd->add_option("--out", sa.out, "Output directory");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train an evaluator on chunked features");
  train_cmd->add_option("--train", ta.train_data, "Training dataset (directory or manifest.json)")->required();
  train_cmd->add_option("--eval", ta.eval_data, "Held-out dataset for fixed-order evaluation");
  train_cmd->add_option("--arch", ta.model.arch, "pairwise | pointwise_v2 | calibrated | pointwise_v1 | linear")
      ->capture_default_str();
  train_cmd->add_option("--loss", ta.loss, "pairwise_swap | pairwise_fixed_no_reg | pointwise_ranking | calibrated");
  train_cmd->add_option("--pool-rank", ta.model.pool_rank)->capture_default_str();
  train_cmd->add_option("--proj-dim", ta.model.proj_dim)->capture_default_str();
  train_cmd->add_option("--gru-layers", ta.model.gru_layers)->capture_default_str();
  train_cmd->add_option("--gru-hidden", ta.model.gru_hidden)->capture_default_str();
  train_cmd->add_option("--scorer-hidden", ta.model.scorer_hidden)->capture_default_str();
  train_cmd->add_option("--mlp-hidden", ta.model.mlp_hidden, "Hidden width of pointwise_v1")->capture_default_str();
  train_cmd->add_option("--dropout", ta.model.dropout)->capture_default_str();
  train_cmd->add_flag("--proj-bias", ta.model.proj_bias);
  train_cmd->add_flag("--pre-diff-norm", ta.model.pre_diff_norm);
  train_cmd->add_option("--init-seed", ta.model.init_seed)->capture_default_str();
  train_cmd->add_option("--lr", ta.cfg.lr_max)->capture_default_str();
  train_cmd->add_option("--lr-min", ta.cfg.lr_min)->capture_default_str();
  train_cmd->add_option("--warmup", ta.cfg.warmup_steps)->capture_default_str();
  train_cmd->add_option("--batch", ta.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--weight-decay", ta.cfg.weight_decay)->capture_default_str();
  train_cmd->add_option("--clip", ta.cfg.clip_norm)->capture_default_str();
  train_cmd->add_option("--epochs", ta.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--swap-prob", ta.cfg.swap_prob)->capture_default_str();
  train_cmd->add_option("--l2", ta.cfg.l2_score_coeff)->capture_default_str();
  train_cmd->add_option("--accum", ta.cfg.accumulation_steps, "Batches per optimizer step")->capture_default_str();
  train_cmd->add_option("--seed", ta.cfg.seed)->capture_default_str();
  train_cmd->add_option("--out", ta.out, "Run directory");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Fixed-order evaluation of a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint stem (epoch_NNN)")->required();
  eval_cmd->add_option("--data", ea.data)->required();
  eval_cmd->add_option("--out", ea.out);

  FlipArgs fa;
  auto* flip_cmd = app.add_subcommand("fliptest", "Flip test over one or more pairwise checkpoints");
  flip_cmd->add_option("--checkpoint", fa.checkpoints, "Checkpoint stem(s)")->required();
  flip_cmd->add_option("--data", fa.data)->required();
  flip_cmd->add_option("--limit", fa.limit, "Use only the first N pairs (0 = all)")->capture_default_str();
  flip_cmd->add_flag("--rank", fa.rank, "Spearman instead of Pearson correlation");
  flip_cmd->add_option("--out", fa.out);

  ProbeArgs pa;
  auto* probe_cmd = app.add_subcommand("probe", "Logistic-regression probe on mean-pooled states");
  probe_cmd->add_option("--data", pa.data)->required();
  probe_cmd->add_option("--mode", pa.mode, "pairwise_diff | independent")->capture_default_str();
  probe_cmd->add_option("--source", pa.source, "final_step | all_steps_concat")->capture_default_str();
  probe_cmd->add_option("--train-fraction", pa.train_fraction)->capture_default_str();
  probe_cmd->add_option("--reg-scale", pa.reg_scale)->capture_default_str();
  probe_cmd->add_option("--out", pa.out);

  ShortcutArgs sca;
  auto* shortcut_cmd = app.add_subcommand("shortcut", "Length / norm / activation shortcut analysis");
  shortcut_cmd->add_option("--data", sca.data)->required();
  shortcut_cmd->add_option("--out", sca.out);

  FigureArgs fga;
  auto* fig_cmd = app.add_subcommand("figures", "Emit plot-data CSVs from a training run");
  fig_cmd->add_option("--run", fga.run, "Training run directory")->required();
  fig_cmd->add_option("--reports", fga.reports, "Additional report directories (probe, fliptest)");
  fig_cmd->add_option("--out", fga.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth_cmd) return cmd_synth(sa, out);
    if (*train_cmd) return cmd_train(ta, out);
    if (*eval_cmd) return cmd_eval(ea, out);
    if (*flip_cmd) return cmd_fliptest(fa, out);
    if (*probe_cmd) return cmd_probe(pa, out);
    if (*shortcut_cmd) return cmd_shortcut(sca, out);
    if (*fig_cmd) return cmd_figures(fga, out);
  } catch (const DegenerateModel& e) {
    err << "degenerate model: " << e.what() << '\n';
    return kDegenerate;
  } catch (const features::ChunkFormatError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const eval::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kData;
  } catch (const DataMismatch& e) {
    err << "mismatch: " << e.what() << '\n';
    return kData;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace loopeval::cli
