#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "alignlab/nn.hpp"

namespace alignlab {

struct OptimSettings {
  double lr_peak = 5.0e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1.0e-6;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 2000;
  // Element-wise clamp bound.
  double clip_value = 5.0;
  std::size_t accum_steps = 14;
  // Padded sample points per microbatch.
  std::size_t batch_points = 400000;
  // Re-warm the schedule at every stage instead of continuing one counter.
  bool restart_schedule_per_stage = true;

  void validate() const;
};

// lr_peak * min(step / warmup, sqrt(warmup / step)); step counts from 1.
double lr_at(const OptimSettings& settings, std::size_t step);

// Clamps every gradient entry of the given tensors to [-clip, clip].
void clip_gradients(std::span<const Tensor> params, double clip_value);
void clip_gradients(std::span<const NamedParam> params, double clip_value);

// L2 norm over the gradients of all given parameters.
double grad_norm(std::span<const NamedParam> params);

// Decoupled weight decay:
//   theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta
// with wd zero for parameters flagged decay = false. Parameters without a
// gradient buffer are skipped and keep their moments.
class AdamW {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  explicit AdamW(OptimSettings settings = {});

  // Drops all moments and the bias-correction counter; the new trainable set
  // starts from zero moments.
  void reset(std::span<const NamedParam> params);
  void step(std::span<const NamedParam> params, double lr);

  std::uint64_t steps() const { return t_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  const OptimSettings& settings() const { return settings_; }

  std::string serialize() const;
  void deserialize(const std::string& bytes);

 private:
  OptimSettings settings_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace alignlab
