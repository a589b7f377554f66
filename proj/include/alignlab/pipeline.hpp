#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "alignlab/components.hpp"
#include "alignlab/model_config.hpp"
#include "alignlab/nn.hpp"

namespace alignlab {

// Encoder + projector + bridge + decoder LM over one parameter registry.
class PipelineModel {
 public:
  PipelineModel(const ModelConfig& config, std::uint64_t seed);
  PipelineModel(const PipelineModel&) = delete;
  PipelineModel& operator=(const PipelineModel&) = delete;
  PipelineModel(PipelineModel&&) = default;
  PipelineModel& operator=(PipelineModel&&) = default;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const ParamRegistry& registry() const { return registry_; }

  const SpeechEncoder& encoder() const { return encoder_; }
  const Projector& projector() const { return projector_; }
  const Bridge& bridge() const { return bridge_; }
  Bridge& bridge() { return bridge_; }
  const DecoderLm& lm() const { return lm_; }
  DecoderLm& lm() { return lm_; }

  // Sets requires_grad on exactly the given groups. lm_body is rejected.
  void set_trainable(const std::set<ParamGroup>& groups);
  const std::set<ParamGroup>& trainable() const { return trainable_; }
  std::vector<NamedParam> trainable_params() const { return registry_.in_groups(trainable_); }
  // Drops every gradient buffer.
  void clear_grads() const;

  // E_s = Linear(Projector(Encoder(S))).
  Tensor speech_embeddings(const Tensor& features) const;

 private:
  ModelConfig config_;
  std::uint64_t seed_;
  ParamRegistry registry_;
  SpeechEncoder encoder_;
  Projector projector_;
  Bridge bridge_;
  DecoderLm lm_;
  std::set<ParamGroup> trainable_;
};

struct Sample {
  std::string utt_id;
  Tensor features;  // [T_s x d_feat]
  std::string prompt;
  std::string transcript;
};

struct RegionSpan {
  Region region;
  std::size_t begin;
  std::size_t end;
  std::size_t size() const { return end - begin; }
};

// One decoder input: the three regions concatenated, plus per-row metadata.
struct RegulatedSequence {
  Tensor embeddings;               // [L x embed_dim]
  std::vector<RegionSpan> spans;   // in sequence order
  std::vector<Region> regions;     // per row
  std::vector<std::size_t> positions;  // per row, counted from its region start
  std::vector<std::size_t> targets;    // next-token id per row, kPad where unused
  std::vector<std::uint8_t> loss_mask;
  // All rows are real; sequences are processed one at a time, so nothing is padded.
  std::vector<std::uint8_t> padding_mask;

  std::size_t length() const { return regions.size(); }
  const RegionSpan& span(Region region) const;
};

// Concatenates speech, prompt and transcript embeddings in `order` and
// appends the eos row. e_p and e_t may be undefined (empty). The loss mask
// covers exactly the rows whose next token is a transcript token or eos.
RegulatedSequence regulate(const Tensor& e_s, const Tensor& e_p, const Tensor& e_t, const Tensor& e_eos,
                           std::span<const std::size_t> transcript_ids,
                           RegionOrder order = RegionOrder::speech_prompt_transcript);

RegulatedSequence regulate_sample(const PipelineModel& model, const Sample& sample);
Tensor sequence_logits(const PipelineModel& model, const RegulatedSequence& seq);

// Token-weighted mean cross-entropy over the transcript rows of every sample.
Tensor forward_loss(const PipelineModel& model, std::span<const Sample> batch);

// Argmax continuation after the speech + prompt prefix; stops at eos or
// after max_len tokens.
std::string greedy_decode(const PipelineModel& model, const Tensor& features, std::string_view prompt,
                          std::size_t max_len);

struct Hypothesis {
  std::string utt_id;
  std::string text;
};

// Decodes every sample; up to `threads` workers, output in input order.
std::vector<Hypothesis> decode_all(const PipelineModel& model, std::span<const Sample> samples, std::size_t max_len,
                                   std::size_t threads = 1);

// `utt_id<TAB>hypothesis` per line.
void write_decode_file(const std::filesystem::path& path, std::span<const Hypothesis> hyps);
std::vector<Hypothesis> read_decode_file(const std::filesystem::path& path);

}  // namespace alignlab
