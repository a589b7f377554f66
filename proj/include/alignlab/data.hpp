#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "alignlab/pipeline.hpp"
#include "alignlab/tensor.hpp"

namespace alignlab {

struct SynthSpec {
  // Transcript alphabet; each character owns one prototype pattern.
  std::string characters = "abcdefghijklmnopqrstuvwxyz0123456789";
  std::size_t frames_per_char = 4;
  std::size_t feature_dim = 16;
  double noise_std = 0.25;
  // Noise used for the noisy test split.
  double noisy_noise_std = 0.6;
  // Mixing weight a of the accent warp M = (1 - a) I + a Q, Q orthogonal.
  double accent_strength = 0.3;
  // Seeds the codebook and the accent warp; utterance noise has its own seed.
  std::uint64_t seed = 1234;

  // Transcripts are 2..4 words drawn from a lexicon of 2..5-char words.
  std::size_t lexicon_size = 60;
  std::size_t min_word_len = 2;
  std::size_t max_word_len = 5;
  std::size_t min_words = 2;
  std::size_t max_words = 4;

  void validate() const;
  std::size_t pattern_dim() const { return frames_per_char * feature_dim; }
};

enum class Split { train, test_clean, test_noisy, test_accent };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);
inline constexpr Split kTestSplits[] = {Split::test_clean, Split::test_noisy, Split::test_accent};

enum class Perturbation { none, noise, accent };
Perturbation perturbation_for(Split split);

// Per-character prototypes and the accent warp, fixed by the spec seed.
class Codebook {
 public:
  // Throws ConfigError if the prototypes are not separable at noise_std.
  explicit Codebook(const SynthSpec& spec);

  const SynthSpec& spec() const { return spec_; }
  // Row-major [frames_per_char x feature_dim] pattern of one character.
  std::span<const double> prototype(char32_t c) const;
  const std::vector<double>& accent_warp() const { return warp_; }
  double min_pairwise_distance() const { return min_distance_; }
  // 4 * noise_std * sqrt(frames_per_char * feature_dim).
  double separability_bound() const;

 private:
  SynthSpec spec_;
  std::map<char32_t, std::vector<double>> prototypes_;
  std::vector<double> warp_;
  double min_distance_ = 0.0;
};

// Features of one utterance: each character's prototype plus seeded noise,
// optionally passed through the accent warp.
Tensor synth_features(const Codebook& codebook, std::string_view transcript, std::uint64_t seed,
                      Perturbation perturbation = Perturbation::none);
Sample synth_utterance(const Codebook& codebook, const std::string& utt_id, const std::string& transcript,
                       std::uint64_t seed, Perturbation perturbation, const std::string& prompt);

struct ManifestEntry {
  std::string utt_id;
  std::string transcript;
  std::uint64_t seed = 0;
  std::size_t weight = 1;
  Split split = Split::train;
};

using Manifest = std::vector<ManifestEntry>;

struct CorpusSizes {
  std::size_t train = 200;
  // Train entries given the replicated weight; they come first.
  std::size_t replicated = 50;
  std::size_t replicated_weight = 3;
  // Every test split shares one transcript pool of this size.
  std::size_t test = 40;
};

struct CorpusManifests {
  Manifest train;
  Manifest test_clean;
  Manifest test_noisy;
  Manifest test_accent;

  const Manifest& get(Split split) const;
};

// Train and test transcripts are distinct word sequences over one lexicon.
CorpusManifests build_manifests(const SynthSpec& spec, const CorpusSizes& sizes);

// `utt_id<TAB>transcript<TAB>seed<TAB>weight<TAB>split` per line.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
void validate_manifest(const Manifest& manifest);

// Feature store: one flat binary file per split.
//   "ALGNFEAT" u32 version u64 count u64 feature_dim, then per utterance
//   u64 n + utt_id, u64 frames, f64 data[frames * feature_dim]
void write_feature_store(const std::filesystem::path& path, std::span<const Sample> samples, std::size_t feature_dim);
std::map<std::string, Tensor> read_feature_store(const std::filesystem::path& path);

// Sample points of one utterance: frames * feature_dim.
std::size_t sample_points(const ManifestEntry& entry, const SynthSpec& spec);

// Greedy packing in a seeded shuffled order. Each entry index appears
// `weights[i]` times. A batch's cost is its padded size: count * max(points).
// A single entry above the cap is emitted alone and reported in `warnings`.
std::vector<std::vector<std::size_t>> pack_batches(std::span<const std::size_t> points,
                                                   std::span<const std::size_t> weights, std::size_t cap,
                                                   std::uint64_t epoch_seed,
                                                   std::vector<std::string>* warnings = nullptr);

// Greedy packing of entry indices in the given order.
std::vector<std::vector<std::size_t>> pack_in_order(std::span<const std::size_t> order,
                                                    std::span<const std::size_t> points, std::size_t cap,
                                                    std::vector<std::string>* warnings = nullptr);

// Padded cost of a batch of entry indices.
std::size_t batch_cost(std::span<const std::size_t> batch, std::span<const std::size_t> points);

// Uniform integer in [0, n) by rejection; identical on every platform.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n);

}  // namespace alignlab
