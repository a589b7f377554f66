#include "alignlab/model_config.hpp"

#include "alignlab/errors.hpp"
#include "alignlab/vocab.hpp"

namespace alignlab {

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::projector: return "projector";
    case ParamGroup::bridge: return "bridge";
    case ParamGroup::lora: return "lora";
    case ParamGroup::lm_body: return "lm_body";
  }
  return "?";
}

ParamGroup parse_param_group(std::string_view name) {
  for (auto g : {ParamGroup::encoder, ParamGroup::projector, ParamGroup::bridge, ParamGroup::lora, ParamGroup::lm_body}) {
    if (to_string(g) == name) return g;
  }
  throw ConfigError("unknown parameter group '" + std::string(name) + "'");
}

std::string describe(const std::set<ParamGroup>& groups) {
  std::string out;
  for (auto g : groups) {
    if (!out.empty()) out += "+";
    out += to_string(g);
  }
  return out.empty() ? "none" : out;
}

std::string_view to_string(EncoderVariant variant) {
  return variant == EncoderVariant::supervised_analog ? "supervised-analog" : "ssl-analog";
}

EncoderVariant parse_encoder_variant(std::string_view name) {
  if (name == "supervised-analog") return EncoderVariant::supervised_analog;
  if (name == "ssl-analog") return EncoderVariant::ssl_analog;
  throw ConfigError("unknown encoder variant '" + std::string(name) + "'");
}

EncoderConfig EncoderConfig::defaults(EncoderVariant variant) {
  EncoderConfig c;
  c.variant = variant;
  c.out_dim = variant == EncoderVariant::supervised_analog ? 40 : 32;
  return c;
}

void EncoderConfig::validate() const {
  if (out_dim == 0 || n_heads == 0 || out_dim % n_heads != 0) {
    throw ConfigError("encoder out_dim " + std::to_string(out_dim) + " must be divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (subsampling_factor < 1) throw ConfigError("encoder subsampling_factor must be >= 1");
  if (n_layers == 0 || ff_mult == 0 || max_frames == 0) throw ConfigError("encoder sizes must be positive");
}

std::string_view to_string(ProjectorKind kind) { return kind == ProjectorKind::transformer ? "transformer" : "qformer"; }

ProjectorKind parse_projector_kind(std::string_view name) {
  if (name == "transformer") return ProjectorKind::transformer;
  if (name == "qformer") return ProjectorKind::qformer;
  throw ConfigError("unknown projector kind '" + std::string(name) + "'");
}

ProjectorConfig ProjectorConfig::defaults(ProjectorKind kind) {
  ProjectorConfig c;
  c.kind = kind;
  if (kind == ProjectorKind::transformer) {
    c.n_layers = 4;
    c.ff_mult = 2;
  } else {
    c.n_layers = 2;
    c.window_length = 1;
    c.n_queries = 1;
    c.ff_mult = 4;
  }
  return c;
}

void ProjectorConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || ff_mult == 0) throw ConfigError("projector sizes must be positive");
  if (kind == ProjectorKind::qformer && (window_length == 0 || n_queries == 0)) {
    throw ConfigError("qformer window_length and n_queries must be positive");
  }
}

void DecoderLmConfig::validate() const {
  Vocabulary vocab(characters);
  if (vocab.characters().empty()) throw ConfigError("LM vocabulary has no characters");
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
    throw ConfigError("LM embed_dim " + std::to_string(embed_dim) + " must be divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (n_layers == 0 || ff_mult == 0 || max_positions == 0) throw ConfigError("LM sizes must be positive");
  if (chat_template) {
    vocab.encode(chat_template->prefix);
    vocab.encode(chat_template->suffix);
  }
}

void LoraConfig::validate() const {
  if (rank == 0) throw ConfigError("LoRA rank must be positive");
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
}

std::string_view to_string(RegionOrder order) {
  return order == RegionOrder::speech_prompt_transcript ? "speech-prompt-transcript" : "prompt-speech-transcript";
}

RegionOrder parse_region_order(std::string_view name) {
  if (name == "speech-prompt-transcript") return RegionOrder::speech_prompt_transcript;
  if (name == "prompt-speech-transcript") return RegionOrder::prompt_speech_transcript;
  throw ConfigError("unknown region order '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  encoder.validate();
  projector.validate();
  if (encoder.out_dim % projector.n_heads != 0) {
    throw ConfigError("projector n_heads " + std::to_string(projector.n_heads) + " must divide encoder out_dim " +
                      std::to_string(encoder.out_dim));
  }
  lm.validate();
  lora.validate();
  Vocabulary(lm.characters).encode(prompt);
}

}  // namespace alignlab
