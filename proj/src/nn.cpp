#include "alignlab/nn.hpp"

#include <cmath>

#include "alignlab/errors.hpp"

namespace alignlab {

Tensor ParamRegistry::add(std::string name, Tensor tensor, ParamGroup group, bool decay) {
  if (find(name) != nullptr) throw ContractError("duplicate parameter name " + name);
  params_.push_back(NamedParam{std::move(name), tensor, group, decay});
  return tensor;
}

const NamedParam* ParamRegistry::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const NamedParam& ParamRegistry::at(std::string_view name) const {
  const auto* p = find(name);
  if (p == nullptr) throw ContractError("no parameter named " + std::string(name));
  return *p;
}

std::vector<NamedParam> ParamRegistry::in_groups(const std::set<ParamGroup>& groups) const {
  std::vector<NamedParam> out;
  for (const auto& p : params_) {
    if (groups.count(p.group)) out.push_back(p);
  }
  return out;
}

std::size_t ParamRegistry::scalar_count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.group == group) n += p.tensor.numel();
  }
  return n;
}

std::size_t ParamRegistry::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Linear Linear::create(const InitContext& ctx, std::size_t in, std::size_t out, bool with_bias, double gain) {
  Linear l;
  l.weight = ctx.param("weight", Tensor::randn({out, in}, gain / std::sqrt(static_cast<double>(in)), ctx.rng), true);
  if (with_bias) l.bias = ctx.param("bias", Tensor::zeros({out}), false);
  return l;
}

LayerNorm LayerNorm::create(const InitContext& ctx, std::size_t width) {
  return LayerNorm{ctx.param("gain", Tensor::full({width}, 1.0), false), ctx.param("bias", Tensor::zeros({width}), false)};
}

FeedForward FeedForward::create(const InitContext& ctx, std::size_t width, std::size_t hidden, double out_gain) {
  FeedForward f;
  f.up = Linear::create(ctx.sub("up"), width, hidden);
  f.down = Linear::create(ctx.sub("down"), hidden, width, true, out_gain);
  return f;
}

LoraAdapter LoraAdapter::create(const InitContext& ctx, std::size_t d_in, std::size_t d_out, const LoraConfig& config) {
  config.validate();
  LoraAdapter adapter;
  adapter.rank = config.rank;
  adapter.alpha = config.alpha;
  adapter.a = ctx.param("a", Tensor::randn({config.rank, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)), ctx.rng), true);
  adapter.b = ctx.param("b", Tensor::zeros({d_out, config.rank}), true);
  return adapter;
}

Tensor lora_forward(const LoraAdapter& adapter, const Linear& base, const Tensor& x) {
  if (adapter.rank == 0 || !(adapter.alpha > 0.0)) throw ConfigError("LoRA rank and alpha must be positive");
  if (adapter.a.cols() != base.in_features() || adapter.b.rows() != base.out_features()) {
    throw DimensionError("LoRA adapter " + shape_to_string(adapter.a.shape()) + "/" + shape_to_string(adapter.b.shape()) +
                         " does not fit base weight " + shape_to_string(base.weight.shape()));
  }
  // A trainable base would receive gradient through linear(); use a frozen copy.
  Tensor w = base.weight;
  if (w.requires_grad()) {
    w = base.weight.clone();
    w.set_requires_grad(false);
  }
  Tensor out = linear(x, w, base.bias);
  Tensor delta = linear(linear(x, adapter.a), adapter.b);
  return add(out, scale(delta, adapter.scaling()));
}

MultiHeadAttention MultiHeadAttention::create(const InitContext& ctx, std::size_t width, std::size_t n_heads,
                                              double out_gain) {
  if (width % n_heads != 0) throw ConfigError("attention width not divisible by head count");
  MultiHeadAttention m;
  m.q = Linear::create(ctx.sub("q"), width, width);
  m.k = Linear::create(ctx.sub("k"), width, width);
  m.v = Linear::create(ctx.sub("v"), width, width);
  m.o = Linear::create(ctx.sub("o"), width, width, true, out_gain);
  m.n_heads = n_heads;
  return m;
}

Tensor MultiHeadAttention::operator()(const Tensor& query_in, const Tensor& key_in, const AttentionMask* mask,
                                      const LoraAdapter* lora_q, const LoraAdapter* lora_v) const {
  Tensor qh = lora_q ? lora_forward(*lora_q, q, query_in) : q(query_in);
  Tensor kh = k(key_in);
  Tensor vh = lora_v ? lora_forward(*lora_v, v, key_in) : v(key_in);
  return o(attention(qh, kh, vh, n_heads, mask));
}

TransformerBlock TransformerBlock::create(const InitContext& ctx, std::size_t width, std::size_t n_heads,
                                          std::size_t ff_mult, std::size_t depth) {
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(depth));
  TransformerBlock b;
  b.ln_attn = LayerNorm::create(ctx.sub("ln_attn"), width);
  b.attn = MultiHeadAttention::create(ctx.sub("attn"), width, n_heads, out_gain);
  b.ln_ff = LayerNorm::create(ctx.sub("ln_ff"), width);
  b.ff = FeedForward::create(ctx.sub("ff"), width, width * ff_mult, out_gain);
  return b;
}

Tensor TransformerBlock::operator()(const Tensor& x, const AttentionMask* mask, const LoraAdapter* lora_q,
                                    const LoraAdapter* lora_v) const {
  Tensor normed = ln_attn(x);
  Tensor h = add(x, attn(normed, normed, mask, lora_q, lora_v));
  return add(h, ff(ln_ff(h)));
}

}  // namespace alignlab
