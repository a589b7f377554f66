#include "alignlab/foundation.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>

#include "alignlab/checkpoint.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/optim.hpp"
#include "alignlab/rng.hpp"
#include "alignlab/run_config.hpp"
#include "alignlab/utf8.hpp"
#include "alignlab/vocab.hpp"

namespace alignlab {

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::u32string random_text(const std::u32string& alphabet, const FoundationSettings& s, std::mt19937_64& rng) {
  const std::size_t len = s.min_chars + uniform_below(rng, s.max_chars - s.min_chars + 1);
  std::u32string out;
  for (std::size_t i = 0; i < len; ++i) out.push_back(alphabet[uniform_below(rng, alphabet.size())]);
  return out;
}

// Summed-then-averaged minibatch loss, clipped, one AdamW step.
class MiniLoop {
 public:
  MiniLoop(std::vector<NamedParam> params, double lr, std::size_t warmup, std::size_t total)
      : params_(std::move(params)), optimizer_(settings(lr, warmup)), total_(total) {
    optimizer_.reset(params_);
  }

  void step(const Tensor& batch_loss, std::size_t batch) {
    // Recorded on the caller's tape, which is still alive.
    backward(batch_loss);
    const double inv = 1.0 / static_cast<double>(batch);
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= inv;
    }
    clip_gradients(params_, optimizer_.settings().clip_value);
    ++steps_;
    optimizer_.step(params_, lr_at(optimizer_.settings(), steps_));
    for (const auto& p : params_) p.tensor.clear_grad();
    recent_.push_back(batch_loss.item() * inv);
    if (recent_.size() > 50) recent_.pop_front();
  }

  double recent_mean() const {
    return recent_.empty() ? 0.0 : std::accumulate(recent_.begin(), recent_.end(), 0.0) / recent_.size();
  }
  std::size_t steps() const { return steps_; }
  bool report_due() const { return steps_ % 100 == 0 || steps_ == total_; }

 private:
  static OptimSettings settings(double lr, std::size_t warmup) {
    OptimSettings s;
    s.lr_peak = lr;
    s.warmup_steps = std::max<std::size_t>(warmup, 1);
    return s;
  }

  std::vector<NamedParam> params_;
  AdamW optimizer_;
  std::size_t total_;
  std::size_t steps_ = 0;
  std::deque<double> recent_;
};

void report(const ProgressFn& progress, const char* what, const MiniLoop& loop, std::size_t total) {
  if (!progress || !loop.report_due()) return;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s pretraining %zu/%zu loss %.4f", what, loop.steps(), total,
                loop.recent_mean());
  progress(buf);
}

void set_requires_grad(const std::vector<NamedParam>& params, bool value) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(value);
    t.clear_grad();
  }
}

}  // namespace

std::string FoundationSettings::fingerprint() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "seed=%llu chars=%zu-%zu lm=%zux%zu@%.17g noise=%.17g enc=%zux%zu@%.17g aug=%.17g mask=%.17g warmup=%zu/%zu",
                static_cast<unsigned long long>(seed), min_chars, max_chars, lm_updates, lm_batch, lm_lr,
                speech_noise_std, encoder_updates, encoder_batch, encoder_lr, augment_noise_max, mask_fraction,
                lm_warmup, encoder_warmup);
  return buf;
}

double pretrain_lm(PipelineModel& model, const FoundationSettings& settings, const ProgressFn& progress) {
  if (settings.min_chars < 1 || settings.max_chars < settings.min_chars) {
    throw ConfigError("foundation min_chars/max_chars are inconsistent");
  }
  auto& lm = model.lm();
  const auto body = model.registry().in_groups({ParamGroup::lm_body});
  model.set_trainable({});
  set_requires_grad(body, true);
  const bool lora_was_active = lm.lora_active();
  lm.set_lora_active(false);

  // Every vocabulary character except template punctuation.
  std::u32string alphabet;
  for (char32_t c : utf8::decode(model.config().lm.characters)) {
    if (c != U' ' && c != U':') alphabet.push_back(c);
  }
  const std::size_t eos = Vocabulary::kEos;
  auto rng = derive_rng(settings.seed, "foundation-lm");
  std::normal_distribution<double> normal(0.0, settings.speech_noise_std);

  MiniLoop loop(body, settings.lm_lr, settings.lm_warmup, settings.lm_updates);
  for (std::size_t step = 0; step < settings.lm_updates; ++step) {
    Tape tape;
    Tensor total;
    for (std::size_t b = 0; b < settings.lm_batch; ++b) {
      const auto ids = lm.vocab().encode(utf8::encode(random_text(alphabet, settings, rng)));
      const Tensor e_t = lm.embed(ids);
      std::vector<double> noise(e_t.numel());
      for (auto& v : noise) v = normal(rng);
      const Tensor e_s = add(e_t, Tensor::from(e_t.shape(), std::move(noise)));
      const auto seq = regulate(e_s, tokenize_embed(lm, model.config().prompt, true).embeddings, e_t,
                                lm.embed(std::span<const std::size_t>(&eos, 1)), ids, model.config().region_order);
      const Tensor loss = cross_entropy_masked(sequence_logits(model, seq), seq.targets, seq.loss_mask);
      total = total.defined() ? add(total, loss) : loss;
    }
    loop.step(total, settings.lm_batch);
    report(progress, "lm", loop, settings.lm_updates);
  }
  set_requires_grad(body, false);
  lm.set_lora_active(lora_was_active);
  return loop.recent_mean();
}

double pretrain_encoder(PipelineModel& model, const SynthSpec& spec, const FoundationSettings& settings,
                        const ProgressFn& progress) {
  if (spec.feature_dim != model.config().feature_dim) throw ConfigError("synthesis feature_dim != model feature_dim");
  if (spec.frames_per_char != model.config().encoder.subsampling_factor) {
    throw ConfigError("encoder pretraining needs one encoder frame per character");
  }
  SynthSpec clean_spec = spec;
  clean_spec.noise_std = 0.0;
  const Codebook codebook(clean_spec);
  const auto alphabet = utf8::decode(spec.characters);
  const bool supervised = model.config().encoder.variant == EncoderVariant::supervised_analog;

  // Probe / reconstruction head outside the model registry.
  ParamRegistry scratch;
  auto head_rng = derive_rng(settings.seed, "foundation-head");
  const std::size_t width = model.config().encoder.out_dim;
  const Linear head = Linear::create(InitContext{scratch, ParamGroup::encoder, head_rng, "head."}, width,
                                     supervised ? alphabet.size() : spec.pattern_dim());
  for (const auto& p : scratch.all()) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
  }

  model.set_trainable({ParamGroup::encoder});
  auto params = model.trainable_params();
  for (const auto& p : scratch.all()) params.push_back(p);

  auto rng = derive_rng(settings.seed, supervised ? "foundation-encoder-supervised" : "foundation-encoder-ssl");
  std::uniform_real_distribution<double> sigma_dist(spec.noise_std, std::max(spec.noise_std, settings.augment_noise_max));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;

  MiniLoop loop(params, settings.encoder_lr, settings.encoder_warmup, settings.encoder_updates);
  for (std::size_t step = 0; step < settings.encoder_updates; ++step) {
    Tape tape;
    Tensor total;
    for (std::size_t b = 0; b < settings.encoder_batch; ++b) {
      const auto text = random_text(alphabet, settings, rng);
      const Tensor clean = synth_features(codebook, utf8::encode(text), 0);
      const double sigma = supervised ? sigma_dist(rng) : spec.noise_std;
      std::vector<double> x(clean.data().begin(), clean.data().end());
      for (auto& v : x) v += sigma * normal(rng);
      const std::size_t row = spec.pattern_dim();
      if (!supervised) {
        for (std::size_t c = 0; c < text.size(); ++c) {
          if (unit(rng) < settings.mask_fraction) std::fill(x.begin() + c * row, x.begin() + (c + 1) * row, 0.0);
        }
      }
      const Tensor out = model.encoder().encode(Tensor::from(clean.shape(), std::move(x)));
      const std::vector<std::uint8_t> all(text.size(), 1);
      Tensor loss;
      if (supervised) {
        std::vector<std::size_t> targets;
        for (char32_t c : text) targets.push_back(alphabet.find(c));
        loss = cross_entropy_masked(head(out), targets, all);
      } else {
        loss = mse_masked(head(out), reshape(clean, {text.size(), row}), all);
      }
      total = total.defined() ? add(total, loss) : loss;
    }
    loop.step(total, settings.encoder_batch);
    report(progress, supervised ? "encoder (supervised analog)" : "encoder (ssl analog)", loop,
           settings.encoder_updates);
  }
  model.set_trainable({});
  return loop.recent_mean();
}

FoundationPaths ensure_foundation(const std::filesystem::path& dir, const ModelConfig& config, const SynthSpec& spec,
                                  const FoundationSettings& settings, const ProgressFn& progress) {
  ModelConfig lm_key = config;
  lm_key.encoder = EncoderConfig{};
  lm_key.projector = ProjectorConfig{};
  ModelConfig enc_key = config;
  enc_key.projector = ProjectorConfig{};
  enc_key.lm = DecoderLmConfig{};
  enc_key.prompt.clear();

  char synth[256];
  std::snprintf(synth, sizeof(synth), "%s|%zu|%zu|%.17g|%llu", spec.characters.c_str(), spec.frames_per_char,
                spec.feature_dim, spec.noise_std, static_cast<unsigned long long>(spec.seed));

  FoundationPaths paths;
  paths.lm = dir / ("lm-" + hex(stable_hash(model_to_json(lm_key) + settings.fingerprint())) + ".ckpt");
  paths.encoder = dir / ("encoder-" + std::string(to_string(config.encoder.variant)) + "-" +
                         hex(stable_hash(model_to_json(enc_key) + synth + settings.fingerprint())) + ".ckpt");
  std::filesystem::create_directories(dir);
  if (!std::filesystem::exists(paths.lm)) {
    PipelineModel model(config, settings.seed);
    pretrain_lm(model, settings, progress);
    save_checkpoint(paths.lm, model.registry(), model_to_json(config));
  }
  if (!std::filesystem::exists(paths.encoder)) {
    PipelineModel model(config, settings.seed);
    pretrain_encoder(model, spec, settings, progress);
    save_checkpoint(paths.encoder, model.registry(), model_to_json(config));
  }
  return paths;
}

void load_foundation(PipelineModel& model, const FoundationPaths& paths) {
  load_params(model.registry(), read_checkpoint(paths.lm), {ParamGroup::lm_body});
  load_params(model.registry(), read_checkpoint(paths.encoder), {ParamGroup::encoder});
}

}  // namespace alignlab
