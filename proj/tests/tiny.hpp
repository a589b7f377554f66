#pragma once

#include <string>
#include <vector>

#include "alignlab/data.hpp"
#include "alignlab/model_config.hpp"
#include "alignlab/trainer.hpp"

// Small models and corpora that train in milliseconds.
namespace tiny {

inline alignlab::ModelConfig model_config() {
  using namespace alignlab;
  ModelConfig c;
  c.encoder.out_dim = 16;
  c.encoder.n_layers = 1;
  c.encoder.n_heads = 2;
  c.encoder.ff_mult = 2;
  c.projector.n_layers = 1;
  c.projector.n_heads = 2;
  c.lm.embed_dim = 16;
  c.lm.n_layers = 1;
  c.lm.n_heads = 2;
  c.lm.ff_mult = 2;
  c.lora.rank = 4;
  c.lora.alpha = 8.0;
  c.prompt = "go:";
  return c;
}

inline alignlab::TrainingSet training_set(const std::vector<std::string>& transcripts,
                                          const std::vector<std::size_t>& weights = {}) {
  using namespace alignlab;
  const Codebook codebook{SynthSpec{}};
  TrainingSet set;
  for (std::size_t i = 0; i < transcripts.size(); ++i) {
    auto s = synth_utterance(codebook, "u" + std::to_string(i), transcripts[i], 100 + i, Perturbation::none, "go:");
    set.points.push_back(s.features.numel());
    set.samples.push_back(std::move(s));
    set.weights.push_back(weights.empty() ? 1 : weights[i]);
  }
  return set;
}

}  // namespace tiny
