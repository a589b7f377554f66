#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/eval.hpp"
#include "alignlab/workflow.hpp"

namespace fs = std::filesystem;
using namespace alignlab;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  bool reference_hparams = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run config; missing keys keep their defaults");
  cmd->add_option("--seed", o.seed, "Run seed (overrides the config)");
  cmd->add_option("--data-dir", o.data_dir, "Prepared data directory (overrides data.dir)");
  cmd->add_flag("--reference-hparams", o.reference_hparams,
                "Reference optimizer values (lr 5e-5, warmup 2000, accumulation 14); far too slow for the toy data");
}

RunConfig resolve(const CommonOptions& o) {
  const RunConfig base = o.reference_hparams ? RunConfig::reference() : RunConfig::toy();
  RunConfig c = o.config.empty() ? base : load_run_config(o.config, base);
  if (o.seed) c.seed = *o.seed;
  if (!o.data_dir.empty()) c.data.dir = o.data_dir;
  c.validate();
  return c;
}

void log_line(const std::string& line) { std::cerr << line << std::endl; }

void print_scores(const ScoreResult& score) {
  for (const auto& w : score.warnings) log_line("warning: " + w);
  for (const auto& [name, c] : score.per_set) {
    std::printf("%-12s CER %6.2f%%  (S=%zu I=%zu D=%zu N=%zu)\n", name.c_str(), 100.0 * c.cer(), c.substitutions,
                c.insertions, c.deletions, c.ref_length);
  }
  std::printf("%-12s CER %6.2f%%\n", "all", 100.0 * score.aggregate.cer());
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Staged speech-to-LM alignment on a synthetic corpus"};
  app.require_subcommand(1);

  CommonOptions common;

  auto* prep = app.add_subcommand("prepare-data", "Synthesize manifests, features and foundation checkpoints");
  add_common(prep, common);
  bool force = false;
  prep->add_flag("--force", force, "Overwrite a non-empty data directory");

  auto* train = app.add_subcommand("train", "Run the stage schedule");
  add_common(train, common);
  std::string run_dir;
  std::string schedule = "staged";
  std::string resume;
  std::optional<std::size_t> stop_after;
  train->add_option("--run-dir", run_dir, "Run directory")->required();
  train->add_option("--schedule", schedule, "staged (from the config) or all-unfrozen")
      ->check(CLI::IsMember({"staged", "all-unfrozen"}));
  train->add_option("--resume", resume, "Continue from an epoch checkpoint");
  train->add_option("--stop-after-stage", stop_after, "Stop once this many stages are complete");
  train->add_flag("--force", force, "Discard existing checkpoints in the run directory");

  auto* decode = app.add_subcommand("decode", "Greedy-decode the configured test sets");
  add_common(decode, common);
  std::string checkpoint, out_dir;
  decode->add_option("--run-dir", run_dir, "Run directory; uses its final checkpoint");
  decode->add_option("--checkpoint", checkpoint, "Explicit checkpoint");
  decode->add_option("--out", out_dir, "Output directory (default <run-dir>/decode)");

  auto* score = app.add_subcommand("score", "Score decodes against manifests");
  add_common(score, common);
  std::string decode_file, manifest_file, counts_out;
  score->add_option("--run-dir", run_dir, "Run directory; scores <run-dir>/decode into <run-dir>/counts.tsv");
  score->add_option("--decode", decode_file, "Single decode file");
  score->add_option("--manifest", manifest_file, "Manifest for --decode");
  score->add_option("--out", counts_out, "Counts TSV path");

  auto* report = app.add_subcommand("report", "CER table over scored runs");
  std::vector<std::string> runs;
  std::string title = "CER by test set";
  std::string report_out;
  report->add_option("runs", runs, "Run directories, optionally LABEL=DIR")->required();
  report->add_option("--title", title, "Table title");
  report->add_option("--out", report_out, "Write <out>.md and <out>.tsv instead of printing");

  auto* exp = app.add_subcommand("experiment", "Canned comparison: projector-compare, encoder-compare, schedule-compare");
  add_common(exp, common);
  std::string exp_name;
  exp->add_option("name", exp_name, "Experiment name")
      ->required()
      ->check(CLI::IsMember({"projector-compare", "encoder-compare", "schedule-compare"}));
  exp->add_option("--run-dir", run_dir, "Experiment root directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (prep->parsed()) {
      const RunConfig config = resolve(common);
      const auto summary = prepare_data(config, config.data.dir, force, log_line);
      for (const auto& [split, n] : summary.utterances) std::printf("%-12s %zu utterances\n", split.c_str(), n);
      std::printf("foundation   %s\n             %s\n", summary.foundation.lm.string().c_str(),
                  summary.foundation.encoder.string().c_str());
    } else if (train->parsed()) {
      RunConfig config = resolve(common);
      if (schedule == "all-unfrozen") config.stages = StageSchedule::all_unfrozen(config.stages.total_epochs());
      TrainRequest req;
      req.run_dir = run_dir;
      req.force = force;
      req.stop_after_stage = stop_after;
      if (!resume.empty()) req.resume = fs::path(resume);
      const auto outcome = train_run(config, req, log_line);
      std::printf("updates %zu, last checkpoint %s\n", outcome.updates, outcome.last_checkpoint.string().c_str());
      if (!outcome.complete) {
        log_line("run stopped before the schedule finished");
        return kOther;
      }
    } else if (decode->parsed()) {
      const RunConfig config = resolve(common);
      if (checkpoint.empty() && run_dir.empty()) throw ConfigError("decode needs --run-dir or --checkpoint");
      const fs::path ckpt = checkpoint.empty() ? final_checkpoint(run_dir) : fs::path(checkpoint);
      const fs::path out = !out_dir.empty() ? fs::path(out_dir) : fs::path(run_dir) / "decode";
      if (out_dir.empty() && run_dir.empty()) throw ConfigError("decode --checkpoint needs --out");
      for (const auto& p : decode_run(config, ckpt, out, worker_threads(), log_line)) std::printf("%s\n", p.c_str());
    } else if (score->parsed()) {
      const RunConfig config = resolve(common);
      ScoreResult result;
      fs::path counts;
      if (!decode_file.empty()) {
        if (manifest_file.empty()) throw ConfigError("score --decode needs --manifest");
        const auto hyps = read_decode_file(decode_file);
        result = score_run(hyps, read_manifest(manifest_file), config.eval.normalizer);
        counts = counts_out;
      } else {
        if (run_dir.empty()) throw ConfigError("score needs --run-dir or --decode/--manifest");
        result = score_decodes(config, fs::path(run_dir) / "decode");
        counts = counts_out.empty() ? fs::path(run_dir) / "counts.tsv" : fs::path(counts_out);
      }
      print_scores(result);
      if (!counts.empty()) write_counts_tsv(counts, result);
    } else if (report->parsed()) {
      std::vector<RunScores> scores;
      std::set<std::string> norms;
      for (const auto& r : runs) {
        const auto eq = r.find('=');
        const fs::path dir = eq == std::string::npos ? fs::path(r) : fs::path(r.substr(eq + 1));
        std::string label = eq == std::string::npos ? fs::path(r).lexically_normal().filename().string() : r.substr(0, eq);
        if (label.empty()) label = dir.parent_path().filename().string();
        scores.push_back({label, read_counts_tsv(dir / "counts.tsv")});
        // The run's resolved config records how its CER was normalized.
        if (fs::exists(dir / "config.json")) {
          norms.insert(normalization_note(load_run_config(dir / "config.json")));
        } else {
          norms.insert("Normalization of " + label + " is unknown (no config.json).");
        }
      }
      std::string note;
      for (const auto& n : norms) note += (note.empty() ? "" : " ") + n;
      if (norms.size() > 1) note = "Runs were scored with different normalization. " + note;
      const auto rep = emit_report(scores, title, note);
      if (report_out.empty()) {
        std::fputs(rep.markdown.c_str(), stdout);
      } else {
        write_file(report_out + ".md", rep.markdown);
        write_file(report_out + ".tsv", rep.tsv);
      }
    } else if (exp->parsed()) {
      const RunConfig config = resolve(common);
      const auto result = run_experiment(exp_name, config, run_dir, worker_threads(), log_line);
      std::fputs(result.report.markdown.c_str(), stdout);
    }
  } catch (const ConfigError& e) {
    log_line(std::string("config error: ") + e.what());
    return kConfig;
  } catch (const DataError& e) {
    log_line(std::string("data error: ") + e.what());
    return kData;
  } catch (const NumericError& e) {
    log_line(std::string("numeric error: ") + e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    log_line(std::string("error: ") + e.what());
    return kOther;
  }
  return kOk;
}
