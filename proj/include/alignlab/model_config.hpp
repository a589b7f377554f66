#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace alignlab {

// Named parameter partitions. Every parameter belongs to exactly one.
enum class ParamGroup { encoder, projector, bridge, lora, lm_body };

std::string_view to_string(ParamGroup group);
ParamGroup parse_param_group(std::string_view name);
std::string describe(const std::set<ParamGroup>& groups);

// Toy analogs of a supervised (wide) and a self-supervised (narrower)
// speech foundation encoder.
enum class EncoderVariant { supervised_analog, ssl_analog };

std::string_view to_string(EncoderVariant variant);
EncoderVariant parse_encoder_variant(std::string_view name);

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::supervised_analog;
  std::size_t out_dim = 40;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t subsampling_factor = 4;
  std::size_t ff_mult = 4;
  std::size_t max_frames = 256;

  static EncoderConfig defaults(EncoderVariant variant);
  void validate() const;
};

enum class ProjectorKind { transformer, qformer };

std::string_view to_string(ProjectorKind kind);
ProjectorKind parse_projector_kind(std::string_view name);

struct ProjectorConfig {
  ProjectorKind kind = ProjectorKind::transformer;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  // qformer only
  std::size_t window_length = 1;
  std::size_t n_queries = 1;
  // Transformer blocks use a narrower feed-forward than the qformer so the
  // two default projectors carry near-equal parameter budgets.
  std::size_t ff_mult = 2;

  static ProjectorConfig defaults(ProjectorKind kind);
  void validate() const;
};

// Wraps the prompt as prefix + prompt + suffix, tokenized like any text.
struct ChatTemplate {
  std::string prefix;
  std::string suffix;
};

struct DecoderLmConfig {
  std::string characters = "abcdefghijklmnopqrstuvwxyz0123456789 :";
  std::size_t embed_dim = 48;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;
  // Positions are counted per region, so this caps each region's length.
  std::size_t max_positions = 128;
  std::optional<ChatTemplate> chat_template;

  void validate() const;
};

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 32.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
  void validate() const;
};

// Order of the three regions in the decoder input.
enum class RegionOrder { speech_prompt_transcript, prompt_speech_transcript };

std::string_view to_string(RegionOrder order);
RegionOrder parse_region_order(std::string_view name);

struct ModelConfig {
  std::size_t feature_dim = 16;
  EncoderConfig encoder;
  ProjectorConfig projector;
  DecoderLmConfig lm;
  LoraConfig lora;
  RegionOrder region_order = RegionOrder::speech_prompt_transcript;
  std::string prompt = "transcribe:";

  void validate() const;
};

}  // namespace alignlab
