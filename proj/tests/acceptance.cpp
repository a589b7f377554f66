// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Criteria 3, 5, 6 and 8 share one prepared data directory and one
// training run under --work-dir, which is wiped first.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "alignlab/checkpoint.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/eval.hpp"
#include "alignlab/optim.hpp"
#include "alignlab/trainer.hpp"
#include "alignlab/workflow.hpp"
#include "grad_suite.hpp"

namespace fs = std::filesystem;
using namespace alignlab;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pct(double v) { return fmt("%.2f%%", 100.0 * v); }

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read " + p.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void progress(const std::string& line) { std::cerr << "  " << line << std::endl; }

// ---- 1 -------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::size_t n = 0;
  double worst_rel = 0.0, worst_abs = 0.0;
  auto checks = gradcheck::op_checks();
  for (auto& c : gradcheck::composed_checks()) checks.push_back(std::move(c));
  for (const auto& c : checks) {
    const auto r = c.run();
    ++n;
    worst_rel = std::max(worst_rel, r.worst_rel);
    worst_abs = std::max(worst_abs, r.worst_abs);
    if (!r.ok) return {false, c.name + ": " + r.detail};
  }
  const double secs = seconds_since(t0);
  return {secs < 30.0, std::to_string(n) + " checks, worst abs err " + fmt("%.1e", worst_abs) +
                           ", worst rel err past 1e-6 abs " + fmt("%.1e", worst_rel) + " (tol 1e-4), " +
                           fmt("%.3f s", secs)};
}

// ---- 2 -------------------------------------------------------------------

Outcome formula_oracles() {
  const OptimSettings s;
  std::vector<std::string> bad;
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  if (lr_at(s, 2000) != 5.0e-5) bad.push_back("lr_at(2000)");
  if (!close(lr_at(s, 1000), 2.5e-5)) bad.push_back("lr_at(1000)");
  if (!close(lr_at(s, 8000), 2.5e-5)) bad.push_back("lr_at(8000)");

  Tensor g = Tensor::from({3}, {0.0, 0.0, 0.0}, true);
  auto grad = g.mutable_grad();
  grad[0] = 7.2;
  grad[1] = -6.0;
  grad[2] = 3.1;
  const Tensor params[] = {g};
  clip_gradients(params, s.clip_value);
  if (g.grad()[0] != 5.0 || g.grad()[1] != -5.0 || g.grad()[2] != 3.1) bad.push_back("clip");

  if (LoraConfig{}.scaling() != 4.0) bad.push_back("lora scaling");

  PipelineModel model(ModelConfig{}, 21);
  const Codebook codebook{SynthSpec{}};
  const Sample sample = synth_utterance(codebook, "u", "hello", 5, Perturbation::none, "transcribe:");
  const auto seq = regulate_sample(model, sample);
  model.lm().set_lora_active(true);
  const Tensor with = sequence_logits(model, seq);
  model.lm().set_lora_active(false);
  const Tensor without = sequence_logits(model, seq);
  if (!std::equal(with.data().begin(), with.data().end(), without.data().begin(), without.data().end())) {
    bad.push_back("zero-init transparency");
  }
  if (!bad.empty()) {
    std::string d = "failed:";
    for (const auto& b : bad) d += " " + b;
    return {false, d};
  }
  return {true, "lr 5e-5/2.5e-5/2.5e-5, clip {5,-5,3.1}, LoRA scale 4, logits bit-identical with fresh adapters"};
}

// ---- 4 -------------------------------------------------------------------

Outcome accumulation_equivalence() {
  const RunConfig config = RunConfig::toy();
  const Codebook codebook{config.data.synth};
  TrainingSet data;
  // Equal transcript lengths make the token-weighted mean the plain average.
  for (const auto& [id, text] : std::vector<std::pair<std::string, std::string>>{{"a", "abcdef"}, {"b", "xyz123"}}) {
    data.samples.push_back(synth_utterance(codebook, id, text, 3, Perturbation::none, config.model.prompt));
    data.points.push_back(data.samples.back().features.numel());
    data.weights.push_back(1);
  }
  PipelineModel split_model(config.model, 4);
  PipelineModel joint_model(config.model, 4);
  TrainerOptions opt;
  opt.schedule = StageSchedule::all_unfrozen(1);
  opt.optim = config.optim;
  opt.optim.accum_steps = 2;
  Trainer split(split_model, data, opt);
  opt.optim.accum_steps = 1;
  Trainer joint(joint_model, data, opt);
  split.begin_stage(0);
  joint.begin_stage(0);
  const bool first = split.accumulate_step(std::span<const Sample>(&data.samples[0], 1));
  const bool second = split.accumulate_step(std::span<const Sample>(&data.samples[1], 1));
  const bool together = joint.accumulate_step(data.samples);
  if (first || !second || !together) return {false, "update boundaries wrong"};

  // On a fresh optimizer m = (1 - beta1) g and v = (1 - beta2) g^2: both
  // expose the applied gradient before the nonlinear step.
  double worst_g = 0.0, worst_p = 0.0;
  for (const auto& [name, m] : split.optimizer().moments()) {
    const auto& other = joint.optimizer().moments().at(name);
    for (std::size_t i = 0; i < m.m.size(); ++i) {
      worst_g = std::max(worst_g, std::abs(m.m[i] - other.m[i]) / (1.0 - opt.optim.beta1));
    }
  }
  const auto& a = split_model.registry().all();
  const auto& b = joint_model.registry().all();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].tensor.numel(); ++i) {
      worst_p = std::max(worst_p, std::abs(a[k].tensor.data()[i] - b[k].tensor.data()[i]));
    }
  }
  const bool ok = worst_g <= 1e-10 && worst_p <= 1e-10;
  return {ok, "max |dg| " + fmt("%.2e", worst_g) + ", max |dtheta| " + fmt("%.2e", worst_p) + " (tol 1e-10)"};
}

// ---- 7 -------------------------------------------------------------------

std::size_t brute_distance(std::u32string_view a, std::u32string_view b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::size_t sub = brute_distance(a.substr(1), b.substr(1)) + (a[0] == b[0] ? 0 : 1);
  return std::min({sub, brute_distance(a.substr(1), b) + 1, brute_distance(a, b.substr(1)) + 1});
}

Outcome cer_oracle() {
  std::mt19937_64 rng(4242);
  auto random_string = [&rng] {
    std::u32string s(uniform_below(rng, 7), U'a');
    for (auto& c : s) c = static_cast<char32_t>(U'a' + uniform_below(rng, 4));
    return s;
  };
  for (int k = 0; k < 500; ++k) {
    const auto a = random_string();
    const auto b = random_string();
    if (edit_distance(a, b) != brute_distance(a, b) || align(a, b).errors() != brute_distance(a, b)) {
      return {false, "pair " + std::to_string(k) + " disagrees"};
    }
  }
  const Manifest refs{{"u1", "a", 1, 1, Split::test_clean}, {"u2", "abc", 2, 1, Split::test_clean}};
  const std::vector<Hypothesis> hyps{{"u1", "a"}, {"u2", ""}};
  const double micro = score_run(hyps, refs).aggregate.cer();
  return {micro == 0.75, "500 pairs agree; micro-average example " + fmt("%.17g", micro)};
}

// ---- 9 -------------------------------------------------------------------

Outcome batcher_properties() {
  std::mt19937_64 rng(9001);
  std::size_t oversize = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + uniform_below(rng, 30);
    const std::size_t cap = 1 + uniform_below(rng, 200);
    std::vector<std::size_t> points(n), weights(n);
    for (std::size_t i = 0; i < n; ++i) {
      points[i] = 1 + uniform_below(rng, 120);
      weights[i] = 1 + uniform_below(rng, 3);
    }
    const std::uint64_t seed = rng();
    const auto batches = pack_batches(points, weights, cap, seed);
    std::vector<std::size_t> counts(n, 0);
    for (const auto& b : batches) {
      if (b.empty()) return {false, "empty batch in trial " + std::to_string(trial)};
      if (batch_cost(b, points) > cap) {
        if (b.size() > 1) return {false, "cap exceeded in trial " + std::to_string(trial)};
        ++oversize;
      }
      for (auto i : b) ++counts[i];
    }
    if (counts != weights) return {false, "multiset differs from weights in trial " + std::to_string(trial)};
    if (pack_batches(points, weights, cap, seed) != batches) {
      return {false, "packing not deterministic in trial " + std::to_string(trial)};
    }
  }
  return {true, "1000 manifests; " + std::to_string(oversize) + " oversize singletons, no other cap overrun"};
}

// ---- shared training run (3, 5, 6, 8) -------------------------------------

struct Workspace {
  fs::path root;
  RunConfig config;
  std::size_t threads = 1;

  bool ready = false;
  std::string error;
  double prepare_secs = 0.0, pipeline_secs = 0.0;
  fs::path run_dir;
  std::map<std::string, double> cer;

  fs::path data_dir() const { return root / "data"; }

  // prepare-data + train + decode + score with the default toy config.
  void ensure() {
    if (ready || !error.empty()) return;
    try {
      const auto t0 = Clock::now();
      progress("preparing data");
      prepare_data(config, data_dir(), false, progress);
      prepare_secs = seconds_since(t0);
      run_dir = root / "run";
      cer = full_run(config, run_dir, threads, progress);
      pipeline_secs = seconds_since(t0);
      ready = true;
    } catch (const std::exception& e) {
      error = e.what();
    }
  }
};

std::vector<std::vector<std::string>> read_tsv(const fs::path& p) {
  std::istringstream in(read_bytes(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

Outcome convergence(Workspace& ws) {
  ws.ensure();
  if (!ws.ready) return {false, "pipeline failed: " + ws.error};
  const double clean = ws.cer.at("test_clean"), noisy = ws.cer.at("test_noisy"), accent = ws.cer.at("test_accent");

  // Loss at the end of stage 1: mean of its last five logged updates.
  const auto rows = read_tsv(ws.run_dir / "train_log.tsv");
  std::vector<double> stage1;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].at(1) == "1") stage1.push_back(std::stod(rows[i].at(3)));
  }
  const std::size_t tail = std::min<std::size_t>(5, stage1.size());
  double end_loss = 0.0;
  for (std::size_t i = stage1.size() - tail; i < stage1.size(); ++i) end_loss += stage1[i] / tail;
  const PipelineModel probe(ws.config.model, 0);
  const double ln_v = std::log(static_cast<double>(probe.lm().vocab().size()));

  const bool ok = clean <= 0.05 && noisy > clean && accent > clean && end_loss <= 0.7 * ln_v && ws.pipeline_secs < 600.0;
  return {ok, "clean " + pct(clean) + ", noisy " + pct(noisy) + ", accent " + pct(accent) + "; stage-1 end loss " +
                  fmt("%.3f", end_loss) + " vs ln V " + fmt("%.3f", ln_v) + "; " + fmt("%.0f s", ws.pipeline_secs) +
                  " total (" + fmt("%.0f s", ws.prepare_secs) + " data prep)"};
}

Outcome freeze_soundness(Workspace& ws) {
  ws.ensure();
  if (!ws.ready) return {false, "pipeline failed: " + ws.error};
  // Stage-end parameters come from the run's checkpoints; the start state is
  // rebuilt exactly as train_run builds it.
  PipelineModel start(ws.config.model, ws.config.seed);
  load_foundation(start, ensure_foundation(DataLayout{ws.data_dir()}.foundation_dir(), ws.config.model,
                                           ws.config.data.synth, ws.config.data.foundation));
  std::vector<PipelineModel> states;
  states.push_back(std::move(start));
  const auto& stages = ws.config.stages.stages;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    states.push_back(model_from_checkpoint(ws.run_dir / "checkpoints" /
                                           Trainer::checkpoint_name(i + 1, stages[i].epochs)));
  }
  const std::set<ParamGroup> all{ParamGroup::encoder, ParamGroup::projector, ParamGroup::bridge, ParamGroup::lora,
                                 ParamGroup::lm_body};
  for (std::size_t i = 0; i < stages.size(); ++i) {
    std::set<ParamGroup> frozen;
    for (auto g : all) {
      if (!stages[i].groups.count(g)) frozen.insert(g);
    }
    if (serialize_params(states[i].registry(), frozen) != serialize_params(states[i + 1].registry(), frozen)) {
      return {false, "frozen parameters changed during stage " + std::to_string(i + 1)};
    }
    if (serialize_params(states[i].registry(), stages[i].groups) ==
        serialize_params(states[i + 1].registry(), stages[i].groups)) {
      return {false, "stage " + std::to_string(i + 1) + " did not change its trainable groups"};
    }
  }
  if (serialize_params(states.front().registry(), {ParamGroup::lm_body}) !=
      serialize_params(states.back().registry(), {ParamGroup::lm_body})) {
    return {false, "lm_body changed over the run"};
  }
  return {true, std::to_string(stages.size()) + " stages: frozen groups byte-identical, lm_body unchanged end to end"};
}

std::string report_bytes(const fs::path& run_dir) {
  const std::vector<RunScores> scores{{"run", read_counts_tsv(run_dir / "counts.tsv")}};
  const auto r = emit_report(scores, "CER by test set");
  return r.markdown + r.tsv;
}

Outcome determinism_and_resume(Workspace& ws) {
  ws.ensure();
  if (!ws.ready) return {false, "pipeline failed: " + ws.error};
  try {
    const std::string final_ckpt = read_bytes(final_checkpoint(ws.run_dir));
    const std::string report = report_bytes(ws.run_dir);

    // Whole pipeline again, data preparation included.
    RunConfig again = ws.config;
    again.data.dir = ws.root / "data-again";
    progress("re-running the full pipeline");
    prepare_data(again, again.data.dir, false, progress);
    const fs::path rerun = ws.root / "run-again";
    full_run(again, rerun, ws.threads, progress);
    if (read_bytes(final_checkpoint(rerun)) != final_ckpt) return {false, "re-run final checkpoint differs"};
    if (report_bytes(rerun) != report) return {false, "re-run report differs"};

    // Interrupt at every stage boundary, resume, compare with the full run.
    std::string boundaries;
    for (std::size_t k = 1; k < ws.config.stages.stages.size(); ++k) {
      const fs::path dir = ws.root / ("run-stop" + std::to_string(k));
      TrainRequest stop{dir, std::nullopt, k, false};
      const auto partial = train_run(ws.config, stop, progress);
      if (partial.complete) return {false, "run did not stop after stage " + std::to_string(k)};
      TrainRequest resume{dir, partial.last_checkpoint, std::nullopt, false};
      const auto done = train_run(ws.config, resume, progress);
      if (!done.complete) return {false, "resumed run did not finish"};
      if (read_bytes(final_checkpoint(dir)) != final_ckpt) {
        return {false, "resume after stage " + std::to_string(k) + " differs from the uninterrupted run"};
      }
      boundaries += (boundaries.empty() ? "" : ", ") + std::to_string(k);
    }
    return {true, "re-run: final checkpoint and report bit-identical; resume after stage " + boundaries +
                      ": final checkpoint bit-identical"};
  } catch (const std::exception& e) {
    return {false, std::string("error: ") + e.what()};
  }
}

Outcome schedule_comparison(Workspace& ws) {
  ws.ensure();
  if (!ws.ready) return {false, "pipeline failed: " + ws.error};
  try {
    RunConfig config = ws.config;
    config.data.dir = ws.data_dir();
    const auto result = run_experiment("schedule-compare", config, ws.root / "schedule-compare", ws.threads, progress);
    std::string detail;
    for (const auto& s : result.seeds) {
      detail += "seed " + std::to_string(s.seed) + ": staged " + pct(s.staged) + " vs all-unfrozen " +
                pct(s.all_unfrozen) + " (" + std::to_string(s.staged_updates) + "/" +
                std::to_string(s.all_updates) + " updates); ";
      if (s.staged_updates != s.all_updates) return {false, "unequal update budgets: " + detail};
    }
    detail += "staged better in " + std::to_string(result.staged_wins) + "/" + std::to_string(result.seeds.size());
    return {result.staged_wins >= 2, detail};
  } catch (const std::exception& e) {
    return {false, std::string("error: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Scratch directory (wiped)");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  Workspace ws;
  ws.root = fs::absolute(work_dir);
  ws.config = RunConfig::toy();
  ws.config.data.dir = ws.data_dir();
  ws.threads = worker_threads();
  fs::remove_all(ws.root);
  fs::create_directories(ws.root);

  // Cheap, self-contained criteria first; the shared run is built on first use.
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_suite},
      {2, formula_oracles},
      {4, accumulation_equivalence},
      {7, cer_oracle},
      {9, batcher_properties},
      {5, [&ws] { return convergence(ws); }},
      {3, [&ws] { return freeze_soundness(ws); }},
      {8, [&ws] { return determinism_and_resume(ws); }},
      {6, [&ws] { return schedule_comparison(ws); }},
  };
  const char* names[] = {"",          "gradient suite", "formula oracles", "freeze soundness", "accumulation equivalence",
                         "convergence", "staged vs all-unfrozen", "CER oracle", "determinism and resume",
                         "batcher properties"};
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    std::cerr << "criterion " << id << ": " << names[id] << std::endl;
    const auto t0 = Clock::now();
    Outcome r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    if (!r.pass) ++failures;
    std::printf("%s %d %s: %s [%.1f s]\n", r.pass ? "PASS" : "FAIL", id, names[id], r.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
