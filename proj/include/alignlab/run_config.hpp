#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "alignlab/data.hpp"
#include "alignlab/eval.hpp"
#include "alignlab/foundation.hpp"
#include "alignlab/model_config.hpp"
#include "alignlab/optim.hpp"
#include "alignlab/trainer.hpp"

namespace alignlab {

struct DataConfig {
  SynthSpec synth;
  CorpusSizes sizes;
  FoundationSettings foundation;
  // Where prepare-data writes and train/decode read; relative paths resolve
  // against the working directory.
  std::filesystem::path dir = "data";
};

struct EvalConfig {
  std::vector<Split> test_sets{Split::test_clean, Split::test_noisy, Split::test_accent};
  Normalizer normalizer;
  std::size_t max_decode_len = 64;
};

struct RunConfig {
  ModelConfig model;
  StageSchedule stages = StageSchedule::staged();
  OptimSettings optim;
  std::optional<std::size_t> max_updates;
  DataConfig data;
  EvalConfig eval;
  std::uint64_t seed = 1;

  // Small-corpus recipe: short warmup, accumulation of 2, small batches and a
  // higher peak lr so five epochs are enough.
  static RunConfig toy();
  // Optimizer values of the reference recipe; far too slow for the toy corpus.
  static RunConfig reference();

  // Cross-section checks; ConfigError on failure.
  void validate() const;
};

// Strict parse: unknown keys are ConfigError, missing keys keep the value
// from `base`.
RunConfig parse_run_config(const std::string& json_text, const RunConfig& base = RunConfig::toy());
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = RunConfig::toy());

// Fully-resolved config; parse_run_config(to_json(c)) == c.
std::string to_json(const RunConfig& config);
// Model section only; stored in checkpoints.
std::string model_to_json(const ModelConfig& model);
ModelConfig model_from_json(const std::string& json_text);

}  // namespace alignlab
