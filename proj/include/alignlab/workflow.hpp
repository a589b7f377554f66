#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "alignlab/eval.hpp"
#include "alignlab/run_config.hpp"

namespace alignlab {

using Logger = std::function<void(const std::string&)>;

// Data directory layout.
struct DataLayout {
  std::filesystem::path root;

  std::filesystem::path manifest(Split split) const;
  std::filesystem::path features(Split split) const;
  std::filesystem::path synth_json() const { return root / "synth.json"; }
  std::filesystem::path foundation_dir() const { return root / "foundation"; }
};

struct PrepareSummary {
  std::map<std::string, std::size_t> utterances;  // per split
  FoundationPaths foundation;
};

// Manifests, feature stores and the foundation checkpoints. A non-empty
// existing directory is refused unless `force`, which clears it first.
PrepareSummary prepare_data(const RunConfig& config, const std::filesystem::path& data_dir, bool force,
                            const Logger& log = {});

// Samples of one split, with the configured prompt.
std::vector<Sample> load_split(const DataLayout& layout, Split split, const std::string& prompt);

struct TrainRequest {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> stop_after_stage;
  bool force = false;
};

struct TrainOutcome {
  TrainState state;
  std::filesystem::path last_checkpoint;
  std::size_t updates = 0;
  bool complete = false;
};

// Builds the model from the foundation checkpoints and runs the schedule.
// The resolved config and a build id are written into the run directory.
TrainOutcome train_run(const RunConfig& config, const TrainRequest& request, const Logger& log = {});

// Final checkpoint of a finished run (from the `final` marker).
std::filesystem::path final_checkpoint(const std::filesystem::path& run_dir);

// Rebuilds a model from any checkpoint written by train_run.
PipelineModel model_from_checkpoint(const std::filesystem::path& path);

// Decodes the configured test sets into <out_dir>/<split>.txt.
std::vector<std::filesystem::path> decode_run(const RunConfig& config, const std::filesystem::path& checkpoint,
                                              const std::filesystem::path& out_dir, std::size_t threads,
                                              const Logger& log = {});

// Scores <decode_dir>/<split>.txt against the data manifests.
ScoreResult score_decodes(const RunConfig& config, const std::filesystem::path& decode_dir);

// Per-set CER fractions from a counts TSV written by write_counts_tsv.
std::map<std::string, double> read_counts_tsv(const std::filesystem::path& path);

// train + decode + score in one run directory; returns per-set CER.
std::map<std::string, double> full_run(const RunConfig& config, const std::filesystem::path& run_dir, std::size_t threads,
                                       const Logger& log = {});

// One sentence naming the CER normalization of `config`, for report notes.
std::string normalization_note(const RunConfig& config);

struct ExperimentResult {
  Report report;
  // schedule-compare only: per-seed clean CER of both arms.
  struct SeedRow {
    std::uint64_t seed;
    double staged;
    double all_unfrozen;
    std::size_t staged_updates;
    std::size_t all_updates;
  };
  std::vector<SeedRow> seeds;
  std::size_t staged_wins = 0;
};

// projector-compare, encoder-compare or schedule-compare under `root`.
ExperimentResult run_experiment(const std::string& name, const RunConfig& config, const std::filesystem::path& root,
                                std::size_t threads, const Logger& log = {});

// Worker count: ALIGNLAB_THREADS if set, else the hardware concurrency.
std::size_t worker_threads();

// Compile-time project version plus the source revision, if known.
std::string build_id();

}  // namespace alignlab
