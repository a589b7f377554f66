#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "alignlab/model_config.hpp"
#include "alignlab/nn.hpp"
#include "alignlab/vocab.hpp"

namespace alignlab {

// Toy speech encoder: frame stacking by the subsampling factor, a linear
// input map, learned positions, bidirectional blocks, final norm.
class SpeechEncoder {
 public:
  SpeechEncoder(const EncoderConfig& config, std::size_t feature_dim, ParamRegistry& registry, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t output_length(std::size_t frames) const;
  // S[T_s x d_feat] -> H_s[ceil(T_s / factor) x out_dim].
  Tensor encode(const Tensor& features) const;

 private:
  EncoderConfig config_;
  std::size_t feature_dim_;
  Linear input_;
  Tensor positions_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
};

// Maps H_s to a sequence of the same width. The transformer kind keeps the
// length; the qformer kind emits n_queries rows per window of frames.
class Projector {
 public:
  Projector(const ProjectorConfig& config, std::size_t width, ParamRegistry& registry, std::uint64_t seed);

  const ProjectorConfig& config() const { return config_; }
  std::size_t output_length(std::size_t frames) const;
  Tensor project(const Tensor& encoded) const;

 private:
  struct QformerLayer {
    LayerNorm ln_self;
    MultiHeadAttention self_attn;
    LayerNorm ln_cross;
    LayerNorm ln_memory;
    MultiHeadAttention cross_attn;
    LayerNorm ln_ff;
    FeedForward ff;
  };

  Tensor project_transformer(const Tensor& encoded) const;
  Tensor project_qformer(const Tensor& encoded) const;

  ProjectorConfig config_;
  std::size_t width_;
  std::vector<TransformerBlock> blocks_;
  Tensor queries_;
  std::vector<QformerLayer> qformer_layers_;
  LayerNorm final_norm_;
};

// Affine map from the encoder width to the LM embedding width.
class Bridge {
 public:
  Bridge(std::size_t encoder_dim, std::size_t embed_dim, ParamRegistry& registry, std::uint64_t seed);

  std::size_t encoder_dim() const { return encoder_dim_; }
  std::size_t embed_dim() const { return embed_dim_; }
  Linear& linear() { return linear_; }
  // Throws ConfigError when x does not have encoder_dim columns.
  Tensor apply(const Tensor& x) const;

 private:
  std::size_t encoder_dim_;
  std::size_t embed_dim_;
  Linear linear_;
};

// Segment of the decoder input a row belongs to.
enum class Region : std::size_t { speech = 0, prompt = 1, transcript = 2 };
inline constexpr std::size_t kNumRegions = 3;

// Decoder-only character LM. Rows carry a learned segment embedding and a
// position counted from the start of their region. LoRA adapters wrap the
// query and value projections of every attention layer.
class DecoderLm {
 public:
  DecoderLm(const DecoderLmConfig& config, const LoraConfig& lora, ParamRegistry& registry, std::uint64_t seed);

  const DecoderLmConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::size_t embed_dim() const { return config_.embed_dim; }
  std::size_t vocab_size() const { return vocab_.size(); }

  // With LoRA inactive the adapters are skipped entirely.
  void set_lora_active(bool active) { lora_active_ = active; }
  bool lora_active() const { return lora_active_; }

  Tensor embed(std::span<const std::size_t> ids) const;
  // x[L x embed_dim] -> logits[L x V] under a causal mask.
  Tensor forward(const Tensor& x, std::span<const Region> regions, std::span<const std::size_t> positions) const;

  std::vector<std::size_t> template_prefix_ids() const;
  std::vector<std::size_t> template_suffix_ids() const;

 private:
  DecoderLmConfig config_;
  Vocabulary vocab_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  Tensor segment_embedding_;
  std::vector<TransformerBlock> blocks_;
  std::vector<LoraAdapter> lora_q_;
  std::vector<LoraAdapter> lora_v_;
  LayerNorm final_norm_;
  Linear head_;
  bool lora_active_ = true;
};

struct TokenizedText {
  std::vector<std::size_t> ids;
  // Undefined when ids is empty.
  Tensor embeddings;
};

// Character tokenization plus embedding lookup. The chat template, when
// configured and requested, wraps the text.
TokenizedText tokenize_embed(const DecoderLm& lm, std::string_view text, bool apply_template = true);

}  // namespace alignlab
