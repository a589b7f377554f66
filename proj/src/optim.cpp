#include "alignlab/optim.hpp"

#include <algorithm>
#include <cmath>

#include "alignlab/bytes.hpp"
#include "alignlab/errors.hpp"

namespace alignlab {

void OptimSettings::validate() const {
  if (!(lr_peak > 0.0)) throw ConfigError("optim.lr_peak must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  if (warmup_steps == 0) throw ConfigError("optim.warmup_steps must be positive");
  if (!(clip_value > 0.0)) throw ConfigError("optim.clip_value must be positive");
  if (accum_steps == 0) throw ConfigError("optim.accum_steps must be positive");
  if (batch_points == 0) throw ConfigError("optim.batch_points must be positive");
}

double lr_at(const OptimSettings& settings, std::size_t step) {
  if (step < 1) throw ContractError("lr_at: step counts from 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(settings.warmup_steps);
  return settings.lr_peak * std::min(s / w, std::sqrt(w / s));
}

void clip_gradients(std::span<const Tensor> params, double clip_value) {
  for (const auto& t : params) {
    if (!t.has_grad()) continue;
    for (double& g : t.mutable_grad()) g = std::clamp(g, -clip_value, clip_value);
  }
}

void clip_gradients(std::span<const NamedParam> params, double clip_value) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.mutable_grad()) g = std::clamp(g, -clip_value, clip_value);
  }
}

double grad_norm(std::span<const NamedParam> params) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

AdamW::AdamW(OptimSettings settings) : settings_(settings) { settings_.validate(); }

void AdamW::reset(std::span<const NamedParam> params) {
  t_ = 0;
  moments_.clear();
  for (const auto& p : params) {
    const auto n = p.tensor.numel();
    moments_[p.name] = Moments{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  }
}

void AdamW::step(std::span<const NamedParam> params, double lr) {
  ++t_;
  const double b1 = settings_.beta1;
  const double b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto it = moments_.find(p.name);
    if (it == moments_.end()) throw ContractError("AdamW has no moments for " + p.name + "; reset() first");
    auto& mom = it->second;
    const auto g = p.tensor.grad();
    Tensor handle = p.tensor;
    auto theta = handle.mutable_data();
    const double wd = p.decay ? settings_.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + settings_.eps)) + lr * wd * theta[i];
    }
  }
}

std::string AdamW::serialize() const {
  ByteWriter out;
  out.put<std::uint64_t>(t_);
  out.put<std::uint64_t>(moments_.size());
  for (const auto& [name, mom] : moments_) {
    out.put_string(name);
    out.put_doubles(mom.m.data(), mom.m.size());
    out.put_doubles(mom.v.data(), mom.v.size());
  }
  return out.take();
}

void AdamW::deserialize(const std::string& bytes) {
  ByteReader r(bytes, "optimizer state");
  t_ = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  moments_.clear();
  for (std::uint64_t k = 0; k < n; ++k) {
    auto name = r.get_string();
    Moments mom;
    mom.m = r.get_doubles();
    mom.v = r.get_doubles();
    if (mom.m.size() != mom.v.size()) r.fail("moment size mismatch for " + name);
    moments_.emplace(std::move(name), std::move(mom));
  }
  if (!r.at_end()) r.fail("trailing bytes");
}

}  // namespace alignlab
