#include "alignlab/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <set>
#include <thread>

#include "alignlab/errors.hpp"

namespace alignlab {

PipelineModel::PipelineModel(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      seed_(seed),
      encoder_(config_.encoder, config_.feature_dim, registry_, seed),
      projector_(config_.projector, config_.encoder.out_dim, registry_, seed),
      bridge_(config_.encoder.out_dim, config_.lm.embed_dim, registry_, seed),
      lm_(config_.lm, config_.lora, registry_, seed) {
  set_trainable({});
}

void PipelineModel::set_trainable(const std::set<ParamGroup>& groups) {
  if (groups.count(ParamGroup::lm_body)) throw ContractError("lm_body parameters are never trainable");
  for (const auto& p : registry_.all()) {
    Tensor t = p.tensor;
    t.set_requires_grad(groups.count(p.group) != 0);
    t.clear_grad();
  }
  trainable_ = groups;
}

void PipelineModel::clear_grads() const {
  for (const auto& p : registry_.all()) p.tensor.clear_grad();
}

Tensor PipelineModel::speech_embeddings(const Tensor& features) const {
  return bridge_.apply(projector_.project(encoder_.encode(features)));
}

const RegionSpan& RegulatedSequence::span(Region region) const {
  for (const auto& s : spans) {
    if (s.region == region) return s;
  }
  throw ContractError("sequence has no such region");
}

namespace {

RegulatedSequence assemble(const Tensor& e_s, const Tensor& e_p, const Tensor& e_t, const Tensor& e_eos,
                           std::span<const std::size_t> transcript_ids, RegionOrder order) {
  if (!e_s.defined() || e_s.rows() == 0) throw AssemblyError("speech embeddings are empty");
  const std::size_t d = e_s.cols();
  auto check = [d](const Tensor& t, const char* what) {
    if (t.defined() && t.cols() != d) {
      throw AssemblyError(std::string(what) + " embeddings have width " + std::to_string(t.cols()) +
                          ", speech embeddings have width " + std::to_string(d));
    }
  };
  check(e_p, "prompt");
  check(e_t, "transcript");
  check(e_eos, "eos");
  const std::size_t t_rows = e_t.defined() ? e_t.rows() : 0;
  if (t_rows != transcript_ids.size()) throw AssemblyError("transcript ids do not match transcript embeddings");
  if (e_eos.defined() && e_eos.rows() != 1) throw AssemblyError("eos embedding must be a single row");

  RegulatedSequence seq;
  std::vector<Tensor> parts;
  std::size_t cursor = 0;
  auto push = [&](Region region, const Tensor& t, std::size_t extra_rows, const Tensor& extra) {
    const std::size_t n = (t.defined() ? t.rows() : 0) + extra_rows;
    parts.push_back(t);
    if (extra_rows) parts.push_back(extra);
    seq.spans.push_back(RegionSpan{region, cursor, cursor + n});
    for (std::size_t i = 0; i < n; ++i) {
      seq.regions.push_back(region);
      seq.positions.push_back(i);
    }
    cursor += n;
  };
  if (order == RegionOrder::speech_prompt_transcript) {
    push(Region::speech, e_s, 0, {});
    push(Region::prompt, e_p, 0, {});
  } else {
    push(Region::prompt, e_p, 0, {});
    push(Region::speech, e_s, 0, {});
  }
  push(Region::transcript, e_t, e_eos.defined() ? 1 : 0, e_eos);
  seq.embeddings = concat_rows(parts);

  const std::size_t n = seq.length();
  seq.targets.assign(n, Vocabulary::kPad);
  seq.loss_mask.assign(n, 0);
  seq.padding_mask.assign(n, 1);
  const auto& tspan = seq.spans.back();
  for (std::size_t row = tspan.begin; row < tspan.end; ++row) {
    const std::size_t k = row - tspan.begin;
    seq.targets[row - 1] = k < transcript_ids.size() ? transcript_ids[k] : Vocabulary::kEos;
    seq.loss_mask[row - 1] = 1;
  }
  return seq;
}

}  // namespace

RegulatedSequence regulate(const Tensor& e_s, const Tensor& e_p, const Tensor& e_t, const Tensor& e_eos,
                           std::span<const std::size_t> transcript_ids, RegionOrder order) {
  if (!e_eos.defined()) throw AssemblyError("eos embedding is required");
  return assemble(e_s, e_p, e_t, e_eos, transcript_ids, order);
}

RegulatedSequence regulate_sample(const PipelineModel& model, const Sample& sample) {
  const auto& lm = model.lm();
  const auto prompt = tokenize_embed(lm, sample.prompt, true);
  const auto transcript = tokenize_embed(lm, sample.transcript, false);
  const std::size_t eos = Vocabulary::kEos;
  return regulate(model.speech_embeddings(sample.features), prompt.embeddings, transcript.embeddings,
                  lm.embed(std::span<const std::size_t>(&eos, 1)), transcript.ids, model.config().region_order);
}

Tensor sequence_logits(const PipelineModel& model, const RegulatedSequence& seq) {
  return model.lm().forward(seq.embeddings, seq.regions, seq.positions);
}

Tensor forward_loss(const PipelineModel& model, std::span<const Sample> batch) {
  if (batch.empty()) throw ContractError("forward_loss needs a non-empty batch");
  std::vector<RegulatedSequence> seqs;
  std::size_t total = 0;
  for (const auto& sample : batch) {
    if (sample.transcript.empty()) throw DataError("training sample " + sample.utt_id + " has an empty transcript");
    seqs.push_back(regulate_sample(model, sample));
    for (auto m : seqs.back().loss_mask) total += m;
  }
  Tensor loss;
  for (const auto& seq : seqs) {
    std::size_t count = 0;
    for (auto m : seq.loss_mask) count += m;
    Tensor term = scale(cross_entropy_masked(sequence_logits(model, seq), seq.targets, seq.loss_mask),
                        static_cast<double>(count) / static_cast<double>(total));
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

std::string greedy_decode(const PipelineModel& model, const Tensor& features, std::string_view prompt,
                          std::size_t max_len) {
  if (max_len < 1) throw ContractError("greedy_decode needs max_len >= 1");
  const auto& lm = model.lm();
  const Tensor e_s = model.speech_embeddings(features);
  const auto p = tokenize_embed(lm, prompt, true);
  std::vector<std::size_t> out;
  while (out.size() < max_len) {
    Tensor e_t = out.empty() ? Tensor{} : lm.embed(out);
    const auto seq = assemble(e_s, p.embeddings, e_t, Tensor{}, out, model.config().region_order);
    const Tensor logits = sequence_logits(model, seq);
    const std::size_t v = logits.cols();
    const auto row = logits.data().subspan((logits.rows() - 1) * v, v);
    // First maximum wins ties.
    const std::size_t best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == Vocabulary::kEos) break;
    out.push_back(best);
  }
  return lm.vocab().decode(out);
}

std::vector<Hypothesis> decode_all(const PipelineModel& model, std::span<const Sample> samples, std::size_t max_len,
                                   std::size_t threads) {
  std::vector<Hypothesis> out(samples.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < samples.size(); i += stride) {
      out[i] = Hypothesis{samples[i].utt_id, greedy_decode(model, samples[i].features, samples[i].prompt, max_len)};
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, samples.size()));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

void write_decode_file(const std::filesystem::path& path, std::span<const Hypothesis> hyps) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write decode file " + path.string());
  for (const auto& h : hyps) f << h.utt_id << '\t' << h.text << '\n';
  if (!f) throw DataError("failed writing decode file " + path.string());
}

std::vector<Hypothesis> read_decode_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read decode file " + path.string());
  std::vector<Hypothesis> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected utt_id<TAB>hypothesis");
    }
    Hypothesis h{line.substr(0, tab), line.substr(tab + 1)};
    if (!seen.insert(h.utt_id).second) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate utt_id " + h.utt_id);
    }
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace alignlab
