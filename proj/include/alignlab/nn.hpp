#pragma once

#include <cstddef>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "alignlab/model_config.hpp"
#include "alignlab/ops.hpp"
#include "alignlab/tensor.hpp"

namespace alignlab {

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
  // Weight decay applies to weight matrices only; biases, norms, embeddings
  // and learned queries are excluded.
  bool decay;
};

// Owns the name -> tensor table of a model. Names are unique.
class ParamRegistry {
 public:
  Tensor add(std::string name, Tensor tensor, ParamGroup group, bool decay);

  const std::vector<NamedParam>& all() const { return params_; }
  const NamedParam* find(std::string_view name) const;
  const NamedParam& at(std::string_view name) const;
  std::vector<NamedParam> in_groups(const std::set<ParamGroup>& groups) const;
  // Scalar parameter count of one group.
  std::size_t scalar_count(ParamGroup group) const;
  std::size_t scalar_count() const;

 private:
  std::vector<NamedParam> params_;
};

// Where new parameters go while a component is being built.
struct InitContext {
  ParamRegistry& registry;
  ParamGroup group;
  std::mt19937_64& rng;
  std::string prefix;

  InitContext sub(const std::string& name) const { return InitContext{registry, group, rng, prefix + name + "."}; }
  Tensor param(const std::string& name, Tensor tensor, bool decay) const {
    return registry.add(prefix + name, std::move(tensor), group, decay);
  }
};

struct Linear {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out], may be undefined

  // N(0, (gain / sqrt(in))^2) weights, zero bias.
  static Linear create(const InitContext& ctx, std::size_t in, std::size_t out, bool with_bias = true,
                       double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.cols(); }
  std::size_t out_features() const { return weight.rows(); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(const InitContext& ctx, std::size_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward create(const InitContext& ctx, std::size_t width, std::size_t hidden, double out_gain);
  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
};

// Low-rank update of a frozen linear map: delta W = (alpha / r) * B * A.
struct LoraAdapter {
  Tensor a;  // [r x d_in], small random
  Tensor b;  // [d_out x r], zero at init
  std::size_t rank = 0;
  double alpha = 0.0;

  static LoraAdapter create(const InitContext& ctx, std::size_t d_in, std::size_t d_out, const LoraConfig& config);
  double scaling() const { return alpha / static_cast<double>(rank); }
};

// base(x) + scaling * B (A x). The base weight gets no gradient.
Tensor lora_forward(const LoraAdapter& adapter, const Linear& base, const Tensor& x);

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t n_heads = 1;

  static MultiHeadAttention create(const InitContext& ctx, std::size_t width, std::size_t n_heads, double out_gain);
  // LoRA adapters, when given, wrap the query and value projections.
  Tensor operator()(const Tensor& query_in, const Tensor& key_in, const AttentionMask* mask,
                    const LoraAdapter* lora_q = nullptr, const LoraAdapter* lora_v = nullptr) const;
};

// Pre-norm block: x + attn(ln(x)), then + ff(ln(.)).
struct TransformerBlock {
  LayerNorm ln_attn;
  MultiHeadAttention attn;
  LayerNorm ln_ff;
  FeedForward ff;

  static TransformerBlock create(const InitContext& ctx, std::size_t width, std::size_t n_heads, std::size_t ff_mult,
                                 std::size_t depth);
  Tensor operator()(const Tensor& x, const AttentionMask* mask, const LoraAdapter* lora_q = nullptr,
                    const LoraAdapter* lora_v = nullptr) const;
};

}  // namespace alignlab
