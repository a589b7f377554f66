#include "alignlab/workflow.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "alignlab/checkpoint.hpp"
#include "alignlab/errors.hpp"

#ifndef ALIGNLAB_VERSION
#define ALIGNLAB_VERSION "0.0.0"
#endif
#ifndef ALIGNLAB_GIT_REVISION
#define ALIGNLAB_GIT_REVISION "unknown"
#endif

namespace alignlab {

namespace fs = std::filesystem;

namespace {

constexpr Split kAllSplits[] = {Split::train, Split::test_clean, Split::test_noisy, Split::test_accent};

void emit(const Logger& log, const std::string& line) {
  if (log) log(line);
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
  }
  fs::rename(tmp, path);
}

std::size_t train_log_updates(const fs::path& run_dir) {
  std::istringstream in(read_text(run_dir / "train_log.tsv"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += !line.empty();
  return n > 0 ? n - 1 : 0;
}

bool non_empty_dir(const fs::path& dir) { return fs::exists(dir) && !fs::is_empty(dir); }

// Data-shaping part of the config; train refuses data prepared differently.
std::string data_fingerprint(const RunConfig& config) {
  RunConfig probe = RunConfig::toy();
  probe.data.synth = config.data.synth;
  probe.data.sizes = config.data.sizes;
  probe.model.feature_dim = config.data.synth.feature_dim;
  std::string json = to_json(probe);
  // Keep only the synth and sizes blocks.
  const auto a = json.find("\"synth\"");
  const auto b = json.find("\"foundation\"");
  return json.substr(a, b - a);
}

TrainingSet training_set(const DataLayout& layout, const RunConfig& config) {
  const auto manifest = read_manifest(layout.manifest(Split::train));
  const auto features = read_feature_store(layout.features(Split::train));
  return make_training_set(manifest, features, config.model.prompt);
}

void check_data(const DataLayout& layout, const RunConfig& config) {
  if (!fs::exists(layout.synth_json())) {
    throw DataError("no prepared data in " + layout.root.string() + "; run prepare-data first");
  }
  if (read_text(layout.synth_json()) != data_fingerprint(config)) {
    throw ConfigError("data in " + layout.root.string() + " was prepared with different synthesis settings");
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

fs::path DataLayout::manifest(Split split) const {
  return root / "manifests" / (std::string(to_string(split)) + ".tsv");
}

fs::path DataLayout::features(Split split) const {
  return root / "features" / (std::string(to_string(split)) + ".bin");
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("ALIGNLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("ALIGNLAB_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string build_id() { return std::string("alignlab ") + ALIGNLAB_VERSION + " (" + ALIGNLAB_GIT_REVISION + ")"; }

PrepareSummary prepare_data(const RunConfig& config, const fs::path& data_dir, bool force, const Logger& log) {
  config.validate();
  if (non_empty_dir(data_dir)) {
    if (!force) throw ConfigError("data directory " + data_dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(data_dir);
  }
  const DataLayout layout{data_dir};
  const auto manifests = build_manifests(config.data.synth, config.data.sizes);
  const Codebook codebook(config.data.synth);
  PrepareSummary summary;
  for (Split split : kAllSplits) {
    const auto& m = manifests.get(split);
    std::vector<Sample> samples;
    samples.reserve(m.size());
    for (const auto& e : m) {
      samples.push_back(synth_utterance(codebook, e.utt_id, e.transcript, e.seed, perturbation_for(split), ""));
    }
    fs::create_directories(layout.manifest(split).parent_path());
    fs::create_directories(layout.features(split).parent_path());
    write_manifest(layout.manifest(split), m);
    write_feature_store(layout.features(split), samples, config.data.synth.feature_dim);
    summary.utterances[std::string(to_string(split))] = m.size();
  }
  write_text(layout.synth_json(), data_fingerprint(config));
  summary.foundation =
      ensure_foundation(layout.foundation_dir(), config.model, config.data.synth, config.data.foundation, log);
  return summary;
}

std::vector<Sample> load_split(const DataLayout& layout, Split split, const std::string& prompt) {
  const auto manifest = read_manifest(layout.manifest(split));
  const auto features = read_feature_store(layout.features(split));
  std::vector<Sample> out;
  for (const auto& e : manifest) {
    auto it = features.find(e.utt_id);
    if (it == features.end()) throw DataError("no features stored for " + e.utt_id);
    out.push_back(Sample{e.utt_id, it->second, prompt, e.transcript});
  }
  return out;
}

fs::path final_checkpoint(const fs::path& run_dir) {
  const fs::path marker = run_dir / "checkpoints" / "final";
  if (!fs::exists(marker)) throw DataError("run " + run_dir.string() + " has no final checkpoint");
  std::string name = read_text(marker);
  while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
  return run_dir / "checkpoints" / name;
}

TrainOutcome train_run(const RunConfig& config, const TrainRequest& request, const Logger& log) {
  config.validate();
  const DataLayout layout{config.data.dir};
  check_data(layout, config);
  const fs::path ckpt_dir = request.run_dir / "checkpoints";
  if (!request.resume && non_empty_dir(ckpt_dir)) {
    if (!request.force) {
      throw ConfigError("run directory " + request.run_dir.string() +
                        " already has checkpoints; pass --resume or --force");
    }
    fs::remove_all(ckpt_dir);
    fs::remove(request.run_dir / "train_log.tsv");
  }
  fs::create_directories(request.run_dir);
  write_text(request.run_dir / "config.json", to_json(config));
  write_text(request.run_dir / "build.txt", build_id() + "\n");

  const auto data = training_set(layout, config);
  PipelineModel model(config.model, config.seed);
  const auto foundation =
      ensure_foundation(layout.foundation_dir(), config.model, config.data.synth, config.data.foundation, log);
  load_foundation(model, foundation);

  TrainerOptions options;
  options.optim = config.optim;
  options.schedule = config.stages;
  options.seed = config.seed;
  options.run_dir = request.run_dir;
  options.config_json = model_to_json(config.model);
  options.max_updates = config.max_updates;
  options.stop_after_stage = request.stop_after_stage;
  options.on_warning = [&log](const std::string& w) { emit(log, "warning: " + w); };
  Trainer trainer(model, data, options);
  if (request.resume) {
    trainer.resume(read_checkpoint(*request.resume));
    emit(log, "resumed from " + request.resume->string() + " at step " +
                  std::to_string(trainer.state().global_step));
  }
  emit(log, "training " + std::to_string(data.samples.size()) + " utterances, " +
                std::to_string(trainer.planned_updates()) + " planned updates");
  std::size_t last_epoch = trainer.state().global_epoch;
  while (!trainer.state().finished) {
    const auto& st = trainer.state();
    if (request.stop_after_stage && st.stage_index >= *request.stop_after_stage) break;
    trainer.run_stage(st.stage_index);
    const auto& now = trainer.state();
    for (std::size_t e = last_epoch; e < now.global_epoch; ++e) {
      emit(log, "epoch " + std::to_string(e + 1) + " mean loss " + fmt("%.4f", now.epoch_losses[e]));
    }
    last_epoch = now.global_epoch;
  }

  TrainOutcome out;
  out.state = trainer.state();
  out.updates = trainer.state().global_step;
  out.complete = trainer.state().finished;
  out.last_checkpoint = trainer.last_checkpoint();
  return out;
}

PipelineModel model_from_checkpoint(const fs::path& path) {
  const auto data = read_checkpoint(path);
  PipelineModel model(model_from_json(data.config_json), 0);
  load_params(model.registry(), data);
  return model;
}

std::vector<fs::path> decode_run(const RunConfig& config, const fs::path& checkpoint, const fs::path& out_dir,
                                 std::size_t threads, const Logger& log) {
  const DataLayout layout{config.data.dir};
  const auto model = model_from_checkpoint(checkpoint);
  std::vector<fs::path> written;
  fs::create_directories(out_dir);
  for (Split split : config.eval.test_sets) {
    const auto samples = load_split(layout, split, model.config().prompt);
    const auto hyps = decode_all(model, samples, config.eval.max_decode_len, threads);
    const fs::path path = out_dir / (std::string(to_string(split)) + ".txt");
    write_decode_file(path, hyps);
    emit(log, "decoded " + std::to_string(hyps.size()) + " utterances of " + std::string(to_string(split)));
    written.push_back(path);
  }
  return written;
}

ScoreResult score_decodes(const RunConfig& config, const fs::path& decode_dir) {
  const DataLayout layout{config.data.dir};
  std::vector<Hypothesis> hyps;
  Manifest refs;
  for (Split split : config.eval.test_sets) {
    const auto part = read_decode_file(decode_dir / (std::string(to_string(split)) + ".txt"));
    hyps.insert(hyps.end(), part.begin(), part.end());
    const auto m = read_manifest(layout.manifest(split));
    refs.insert(refs.end(), m.begin(), m.end());
  }
  return score_run(hyps, refs, config.eval.normalizer);
}

std::map<std::string, double> read_counts_tsv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::map<std::string, double> out;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string name;
    std::size_t s, i, d, n;
    if (!(row >> name >> s >> i >> d >> n)) throw DataError("malformed counts row in " + path.string());
    if (name == "all") continue;
    if (n == 0) throw DataError("empty reference total in " + path.string());
    out[name] = static_cast<double>(s + i + d) / static_cast<double>(n);
  }
  if (out.empty()) throw DataError("no test sets in " + path.string());
  return out;
}

std::map<std::string, double> full_run(const RunConfig& config, const fs::path& run_dir, std::size_t threads,
                                       const Logger& log) {
  TrainRequest req;
  req.run_dir = run_dir;
  req.force = true;
  train_run(config, req, log);
  const fs::path ckpt = final_checkpoint(run_dir);
  decode_run(config, ckpt, run_dir / "decode", threads, log);
  const auto score = score_decodes(config, run_dir / "decode");
  write_counts_tsv(run_dir / "counts.tsv", score);
  std::map<std::string, double> out;
  for (const auto& [name, c] : score.per_set) out[name] = c.cer();
  std::string line = "scored " + run_dir.filename().string() + ":";
  for (const auto& [name, v] : out) line += " " + name + "=" + fmt("%.4f", v);
  emit(log, line);
  return out;
}

std::string normalization_note(const RunConfig& config) {
  return "CER is computed after normalization (" + config.eval.normalizer.describe() + ").";
}

ExperimentResult run_experiment(const std::string& name, const RunConfig& base, const fs::path& root,
                                std::size_t threads, const Logger& log) {
  RunConfig config = base;
  const DataLayout layout{config.data.dir};
  bool prepared = false;
  try {
    check_data(layout, config);
    prepared = true;
  } catch (const Error&) {
  }
  if (!prepared) {
    config.data.dir = root / "data";
    emit(log, "preparing data in " + config.data.dir.string());
    prepare_data(config, config.data.dir, true, log);
  }

  ExperimentResult result;
  std::vector<RunScores> runs;
  if (name == "projector-compare") {
    for (auto kind : {ProjectorKind::transformer, ProjectorKind::qformer}) {
      RunConfig arm = config;
      arm.model.projector = ProjectorConfig::defaults(kind);
      const std::string label(to_string(kind));
      runs.push_back({label, full_run(arm, root / label, threads, log)});
    }
    result.report = emit_report(runs, "Projector comparison",
                                "Same encoder, LM, data and seed (" + std::to_string(config.seed) +
                                    "); only the projector differs. " + normalization_note(config));
  } else if (name == "encoder-compare") {
    for (auto variant : {EncoderVariant::supervised_analog, EncoderVariant::ssl_analog}) {
      RunConfig arm = config;
      arm.model.encoder = EncoderConfig::defaults(variant);
      const std::string label(to_string(variant));
      runs.push_back({label, full_run(arm, root / label, threads, log)});
    }
    result.report = emit_report(runs, "Encoder comparison",
                                "Same projector, LM, data and seed (" + std::to_string(config.seed) +
                                    "); only the speech encoder differs. " + normalization_note(config));
  } else if (name == "schedule-compare") {
    const StageSchedule staged = config.stages;
    std::ostringstream note;
    note << "Staged schedule vs all groups unfrozen at once, equal update budget, matched seeds.\n\n"
         << "| Seed | staged clean CER% | all-unfrozen clean CER% | updates (staged / all) | staged better |\n"
         << "|---:|---:|---:|---:|:---:|\n";
    for (std::uint64_t k = 0; k < 3; ++k) {
      const std::uint64_t seed = config.seed + k;
      RunConfig a = config;
      a.seed = seed;
      a.stages = staged;
      RunConfig b = a;
      b.stages = StageSchedule::all_unfrozen(staged.total_epochs());
      const std::string sa = "staged-seed" + std::to_string(seed);
      const std::string sb = "all-seed" + std::to_string(seed);
      const auto ca = full_run(a, root / sa, threads, log);
      // Budget of the staged arm caps the other one.
      const std::size_t budget = train_log_updates(root / sa);
      b.max_updates = budget;
      const auto cb = full_run(b, root / sb, threads, log);
      ExperimentResult::SeedRow row{seed, ca.at("test_clean"), cb.at("test_clean"), budget, train_log_updates(root / sb)};
      result.seeds.push_back(row);
      const bool better = row.staged < row.all_unfrozen;
      result.staged_wins += better ? 1 : 0;
      note << "| " << seed << " | " << fmt("%.2f", 100 * row.staged) << " | " << fmt("%.2f", 100 * row.all_unfrozen)
           << " | " << row.staged_updates << " / " << row.all_updates << " | " << (better ? "yes" : "no") << " |\n";
      runs.push_back({sa, ca});
      runs.push_back({sb, cb});
    }
    note << "\nStaged better in " << result.staged_wins << "/3 seeds.\n\n" << normalization_note(config);
    result.report = emit_report(runs, "Schedule comparison", note.str());
  } else {
    throw ConfigError("unknown experiment '" + name + "' (projector-compare, encoder-compare, schedule-compare)");
  }
  write_text(root / "report.md", result.report.markdown);
  write_text(root / "report.tsv", result.report.tsv);
  return result;
}

}  // namespace alignlab
