#include "alignlab/components.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "alignlab/errors.hpp"
#include "alignlab/rng.hpp"

namespace alignlab {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

SpeechEncoder::SpeechEncoder(const EncoderConfig& config, std::size_t feature_dim, ParamRegistry& registry,
                             std::uint64_t seed)
    : config_(config), feature_dim_(feature_dim) {
  config_.validate();
  auto rng = derive_rng(seed, "encoder");
  InitContext ctx{registry, ParamGroup::encoder, rng, "encoder."};
  const std::size_t d = config_.out_dim;
  input_ = Linear::create(ctx.sub("input"), feature_dim * config_.subsampling_factor, d);
  positions_ = ctx.param("positions", Tensor::randn({ceil_div(config_.max_frames, config_.subsampling_factor), d}, 0.1, rng),
                         false);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    blocks_.push_back(TransformerBlock::create(ctx.sub("block" + std::to_string(i)), d, config_.n_heads, config_.ff_mult,
                                               config_.n_layers));
  }
  final_norm_ = LayerNorm::create(ctx.sub("final_norm"), d);
}

std::size_t SpeechEncoder::output_length(std::size_t frames) const {
  return ceil_div(frames, config_.subsampling_factor);
}

Tensor SpeechEncoder::encode(const Tensor& features) const {
  if (!features.defined() || features.numel() == 0) throw DataError("empty utterance: no feature frames");
  if (features.cols() != feature_dim_) {
    throw DimensionError("encoder expects " + std::to_string(feature_dim_) + " feature columns, got " +
                         shape_to_string(features.shape()));
  }
  if (features.rows() > config_.max_frames) {
    throw DataError("utterance has " + std::to_string(features.rows()) + " frames, encoder limit is " +
                    std::to_string(config_.max_frames));
  }
  const std::size_t f = config_.subsampling_factor;
  const std::size_t t_e = output_length(features.rows());
  Tensor stacked = reshape(pad_rows(features, t_e * f), {t_e, f * feature_dim_});
  Tensor h = add(input_(stacked), slice_rows(positions_, 0, t_e));
  for (const auto& block : blocks_) h = block(h, nullptr);
  return final_norm_(h);
}

Projector::Projector(const ProjectorConfig& config, std::size_t width, ParamRegistry& registry, std::uint64_t seed)
    : config_(config), width_(width) {
  config_.validate();
  if (width % config_.n_heads != 0) {
    throw ConfigError("projector n_heads " + std::to_string(config_.n_heads) + " must divide width " +
                      std::to_string(width));
  }
  auto rng = derive_rng(seed, "projector");
  InitContext ctx{registry, ParamGroup::projector, rng, "projector."};
  if (config_.kind == ProjectorKind::transformer) {
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
      blocks_.push_back(TransformerBlock::create(ctx.sub("block" + std::to_string(i)), width, config_.n_heads,
                                                 config_.ff_mult, config_.n_layers));
    }
  } else {
    queries_ = ctx.param("queries", Tensor::randn({config_.n_queries, width}, 1.0, rng), false);
    const double out_gain = 1.0 / std::sqrt(3.0 * static_cast<double>(config_.n_layers));
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
      auto lc = ctx.sub("layer" + std::to_string(i));
      QformerLayer layer;
      layer.ln_self = LayerNorm::create(lc.sub("ln_self"), width);
      layer.self_attn = MultiHeadAttention::create(lc.sub("self_attn"), width, config_.n_heads, out_gain);
      layer.ln_cross = LayerNorm::create(lc.sub("ln_cross"), width);
      layer.ln_memory = LayerNorm::create(lc.sub("ln_memory"), width);
      layer.cross_attn = MultiHeadAttention::create(lc.sub("cross_attn"), width, config_.n_heads, out_gain);
      layer.ln_ff = LayerNorm::create(lc.sub("ln_ff"), width);
      layer.ff = FeedForward::create(lc.sub("ff"), width, width * config_.ff_mult, out_gain);
      qformer_layers_.push_back(std::move(layer));
    }
  }
  final_norm_ = LayerNorm::create(ctx.sub("final_norm"), width);
}

std::size_t Projector::output_length(std::size_t frames) const {
  if (config_.kind == ProjectorKind::transformer) return frames;
  return ceil_div(frames, config_.window_length) * config_.n_queries;
}

Tensor Projector::project(const Tensor& encoded) const {
  if (!encoded.defined() || encoded.numel() == 0) throw DataError("projector input is empty");
  if (encoded.cols() != width_) {
    throw DimensionError("projector expects width " + std::to_string(width_) + ", got " +
                         shape_to_string(encoded.shape()));
  }
  return config_.kind == ProjectorKind::transformer ? project_transformer(encoded) : project_qformer(encoded);
}

Tensor Projector::project_transformer(const Tensor& encoded) const {
  Tensor h = encoded;
  for (const auto& block : blocks_) h = block(h, nullptr);
  return final_norm_(h);
}

Tensor Projector::project_qformer(const Tensor& encoded) const {
  const std::size_t frames = encoded.rows();
  const std::size_t w = config_.window_length;
  const std::size_t nq = config_.n_queries;
  const std::size_t windows = ceil_div(frames, w);
  const std::size_t rows = windows * nq;

  // Queries only see queries and frames of their own window.
  AttentionMask self_mask{rows, rows, std::vector<std::uint8_t>(rows * rows, 0)};
  AttentionMask cross_mask{rows, frames, std::vector<std::uint8_t>(rows * frames, 0)};
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t win = r / nq;
    for (std::size_t c = win * nq; c < (win + 1) * nq; ++c) self_mask.allowed[r * rows + c] = 1;
    for (std::size_t c = win * w; c < std::min(frames, (win + 1) * w); ++c) cross_mask.allowed[r * frames + c] = 1;
  }

  Tensor x = repeat_rows(queries_, windows);
  for (const auto& layer : qformer_layers_) {
    Tensor n = layer.ln_self(x);
    x = add(x, layer.self_attn(n, n, &self_mask));
    x = add(x, layer.cross_attn(layer.ln_cross(x), layer.ln_memory(encoded), &cross_mask));
    x = add(x, layer.ff(layer.ln_ff(x)));
  }
  return final_norm_(x);
}

Bridge::Bridge(std::size_t encoder_dim, std::size_t embed_dim, ParamRegistry& registry, std::uint64_t seed)
    : encoder_dim_(encoder_dim), embed_dim_(embed_dim) {
  auto rng = derive_rng(seed, "bridge");
  InitContext ctx{registry, ParamGroup::bridge, rng, "bridge."};
  linear_ = Linear::create(ctx, encoder_dim, embed_dim);
}

Tensor Bridge::apply(const Tensor& x) const {
  if (!x.defined() || x.cols() != encoder_dim_) {
    throw ConfigError("bridge maps encoder dim " + std::to_string(encoder_dim_) + " to LM embed dim " +
                      std::to_string(embed_dim_) + " but received input " +
                      (x.defined() ? shape_to_string(x.shape()) : std::string("<none>")));
  }
  return linear_(x);
}

DecoderLm::DecoderLm(const DecoderLmConfig& config, const LoraConfig& lora, ParamRegistry& registry,
                     std::uint64_t seed)
    : config_(config), vocab_(config.characters) {
  config_.validate();
  lora.validate();
  const std::size_t d = config_.embed_dim;
  auto rng = derive_rng(seed, "lm");
  InitContext ctx{registry, ParamGroup::lm_body, rng, "lm."};
  token_embedding_ = ctx.param("token_embedding", Tensor::randn({vocab_.size(), d}, 0.5, rng), false);
  position_embedding_ = ctx.param("position_embedding", Tensor::randn({config_.max_positions, d}, 0.1, rng), false);
  segment_embedding_ = ctx.param("segment_embedding", Tensor::randn({kNumRegions, d}, 0.5, rng), false);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    blocks_.push_back(TransformerBlock::create(ctx.sub("block" + std::to_string(i)), d, config_.n_heads, config_.ff_mult,
                                               config_.n_layers));
  }
  final_norm_ = LayerNorm::create(ctx.sub("final_norm"), d);
  // Small head so an untrained model starts near uniform.
  head_ = Linear::create(ctx.sub("head"), d, vocab_.size(), true, 0.1);

  auto lora_rng = derive_rng(seed, "lora");
  InitContext lctx{registry, ParamGroup::lora, lora_rng, "lora."};
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string layer = "block" + std::to_string(i);
    lora_q_.push_back(LoraAdapter::create(lctx.sub(layer + ".q"), d, d, lora));
    lora_v_.push_back(LoraAdapter::create(lctx.sub(layer + ".v"), d, d, lora));
  }
}

Tensor DecoderLm::embed(std::span<const std::size_t> ids) const { return embedding_lookup(token_embedding_, ids); }

Tensor DecoderLm::forward(const Tensor& x, std::span<const Region> regions, std::span<const std::size_t> positions) const {
  if (x.cols() != config_.embed_dim) {
    throw DimensionError("LM expects embed dim " + std::to_string(config_.embed_dim) + ", got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t n = x.rows();
  if (regions.size() != n || positions.size() != n) throw ContractError("region/position ids do not cover the sequence");
  std::vector<std::size_t> segment_ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    segment_ids[i] = static_cast<std::size_t>(regions[i]);
    if (positions[i] >= config_.max_positions) {
      throw DataError("region position " + std::to_string(positions[i]) + " exceeds LM max_positions " +
                      std::to_string(config_.max_positions));
    }
  }
  Tensor h = add(x, add(embedding_lookup(position_embedding_, positions), embedding_lookup(segment_embedding_, segment_ids)));
  const auto mask = AttentionMask::causal(n);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = lora_active_ ? blocks_[i](h, &mask, &lora_q_[i], &lora_v_[i]) : blocks_[i](h, &mask);
  }
  return head_(final_norm_(h));
}

std::vector<std::size_t> DecoderLm::template_prefix_ids() const {
  return config_.chat_template ? vocab_.encode(config_.chat_template->prefix) : std::vector<std::size_t>{};
}

std::vector<std::size_t> DecoderLm::template_suffix_ids() const {
  return config_.chat_template ? vocab_.encode(config_.chat_template->suffix) : std::vector<std::size_t>{};
}

TokenizedText tokenize_embed(const DecoderLm& lm, std::string_view text, bool apply_template) {
  TokenizedText out;
  if (apply_template) out.ids = lm.template_prefix_ids();
  const auto body = lm.vocab().encode(text);
  out.ids.insert(out.ids.end(), body.begin(), body.end());
  if (apply_template) {
    const auto suffix = lm.template_suffix_ids();
    out.ids.insert(out.ids.end(), suffix.begin(), suffix.end());
  }
  if (!out.ids.empty()) out.embeddings = lm.embed(out.ids);
  return out;
}

}  // namespace alignlab
