#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "alignlab/data.hpp"
#include "alignlab/pipeline.hpp"

namespace alignlab {

// Stand-ins for the pretrained models a real system starts from. The decoder
// LM learns to continue a prompt with a copy of a noisy token sequence placed
// in the speech region; the encoder learns the synthetic acoustics either from
// character labels (supervised analog) or by reconstructing clean frames
// from noisy, partly masked input (self-supervised analog). Text is random character strings, never corpus
// transcripts.
struct FoundationSettings {
  std::uint64_t seed = 90210;
  std::size_t min_chars = 3;
  std::size_t max_chars = 20;

  std::size_t lm_updates = 2500;
  std::size_t lm_batch = 8;
  double lm_lr = 4.0e-3;
  double speech_noise_std = 0.3;

  std::size_t encoder_updates = 600;
  std::size_t encoder_batch = 8;
  double encoder_lr = 3.0e-3;
  // Supervised analog: per-utterance noise std drawn from [train noise, this].
  double augment_noise_max = 0.45;
  // Self-supervised analog: fraction of characters whose frames are masked.
  double mask_fraction = 0.3;

  std::size_t lm_warmup = 300;
  std::size_t encoder_warmup = 100;

  // Stable text key of every field; part of the cache key.
  std::string fingerprint() const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains the lm_body group in place. Returns the mean loss of the last 50 updates.
double pretrain_lm(PipelineModel& model, const FoundationSettings& settings, const ProgressFn& progress = {});
// Trains the encoder group in place with the objective of its variant.
double pretrain_encoder(PipelineModel& model, const SynthSpec& spec, const FoundationSettings& settings,
                        const ProgressFn& progress = {});

struct FoundationPaths {
  std::filesystem::path lm;
  std::filesystem::path encoder;
};

// Builds (or reuses) cached foundation checkpoints under `dir`. Files are
// keyed by a hash of everything that shapes them.
FoundationPaths ensure_foundation(const std::filesystem::path& dir, const ModelConfig& config, const SynthSpec& spec,
                                  const FoundationSettings& settings, const ProgressFn& progress = {});

// Copies the foundation lm_body and encoder weights into `model`.
void load_foundation(PipelineModel& model, const FoundationPaths& paths);

}  // namespace alignlab
