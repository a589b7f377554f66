#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "alignlab/checkpoint.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/foundation.hpp"
#include "alignlab/optim.hpp"
#include "alignlab/trainer.hpp"
#include "tiny.hpp"

using namespace alignlab;
namespace fs = std::filesystem;

namespace {

OptimSettings fast_optim(std::size_t accum = 1) {
  OptimSettings o;
  o.lr_peak = 1e-2;
  o.warmup_steps = 5;
  o.accum_steps = accum;
  o.batch_points = 400;
  return o;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("alignlab_" + name);
  fs::remove_all(dir);
  return dir;
}

std::vector<std::string> six_transcripts() { return {"abc", "hello", "zz9", "word", "q1w2", "lmnop"}; }

}  // namespace

TEST_CASE("lr schedule oracles") {
  const OptimSettings s;
  CHECK(lr_at(s, 2000) == 5.0e-5);
  CHECK(std::abs(lr_at(s, 1000) - 2.5e-5) <= 1e-12 * 2.5e-5);
  CHECK(std::abs(lr_at(s, 8000) - 2.5e-5) <= 1e-12 * 2.5e-5);
  // Both branches meet at the end of warmup.
  CHECK(s.lr_peak * 2000.0 / 2000.0 == s.lr_peak * std::sqrt(2000.0 / 2000.0));
  CHECK(lr_at(s, 1999) < lr_at(s, 2000));
  CHECK(lr_at(s, 2001) < lr_at(s, 2000));
  CHECK_THROWS_AS(lr_at(s, 0), ContractError);
}

TEST_CASE("value clipping examples") {
  Tensor t = Tensor::from({3}, {0.0, 0.0, 0.0}, true);
  auto g = t.mutable_grad();
  g[0] = 7.2;
  g[1] = -6.0;
  g[2] = 3.1;
  const Tensor params[] = {t};
  clip_gradients(params, 5.0);
  CHECK(t.grad()[0] == 5.0);
  CHECK(t.grad()[1] == -5.0);
  CHECK(t.grad()[2] == 3.1);
}

TEST_CASE("AdamW one step on one parameter") {
  const OptimSettings s;
  for (bool decay : {true, false}) {
    Tensor w = Tensor::from({1}, {0.7}, true);
    w.mutable_grad()[0] = 1.0;
    const std::vector<NamedParam> params{{"w", w, ParamGroup::projector, decay}};
    AdamW opt(s);
    opt.reset(params);
    opt.step(params, s.lr_peak);
    // m = 0.1, v = 0.01; bias correction makes m_hat = v_hat = 1.
    const double expected = 0.7 - s.lr_peak * (1.0 / (1.0 + s.eps)) - (decay ? s.lr_peak * s.weight_decay * 0.7 : 0.0);
    CHECK(std::abs(w.data()[0] - expected) <= 1e-12);
    CHECK(opt.steps() == 1);
  }
}

TEST_CASE("AdamW state round trip") {
  Tensor w = Tensor::from({2}, {0.1, -0.2}, true);
  w.mutable_grad()[0] = 0.5;
  w.mutable_grad()[1] = -1.5;
  const std::vector<NamedParam> params{{"w", w, ParamGroup::lora, true}};
  AdamW a;
  a.reset(params);
  a.step(params, 1e-3);
  AdamW b;
  b.deserialize(a.serialize());
  CHECK(b.steps() == a.steps());
  CHECK(b.moments().at("w").m == a.moments().at("w").m);
  CHECK(b.moments().at("w").v == a.moments().at("w").v);
  CHECK_THROWS_AS(b.deserialize(a.serialize().substr(3)), DataError);
}

TEST_CASE("optimizer settings validation") {
  OptimSettings s;
  s.beta1 = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = OptimSettings{};
  s.accum_steps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("parameters move only on the accumulation boundary") {
  const auto data = tiny::training_set(six_transcripts());
  for (std::size_t accum : {std::size_t{14}, std::size_t{1}}) {
    PipelineModel model(tiny::model_config(), 3);
    TrainerOptions opt;
    opt.optim = fast_optim(accum);
    opt.schedule = StageSchedule::all_unfrozen(1);
    Trainer trainer(model, data, opt);
    trainer.begin_stage(0);
    std::string before = serialize_params(model.registry());
    for (std::size_t k = 1; k <= accum; ++k) {
      const Sample& s = data.samples[k % data.samples.size()];
      const bool updated = trainer.accumulate_step(std::span<const Sample>(&s, 1));
      const std::string after = serialize_params(model.registry());
      if (k < accum) {
        CHECK_FALSE(updated);
        CHECK(after == before);
      } else {
        CHECK(updated);
        CHECK(after != before);
      }
      before = after;
    }
    CHECK(trainer.state().global_step == 1);
  }
}

TEST_CASE("two accumulated microbatches equal one combined batch") {
  // Equal transcript lengths make the token-weighted mean the plain average.
  const auto data = tiny::training_set({"abcd", "wxyz"});
  PipelineModel split_model(tiny::model_config(), 4);
  PipelineModel joint_model(tiny::model_config(), 4);
  TrainerOptions opt;
  opt.schedule = StageSchedule::all_unfrozen(1);
  opt.optim = fast_optim(2);
  Trainer split(split_model, data, opt);
  opt.optim = fast_optim(1);
  Trainer joint(joint_model, data, opt);
  split.begin_stage(0);
  joint.begin_stage(0);

  CHECK_FALSE(split.accumulate_step(std::span<const Sample>(&data.samples[0], 1)));
  CHECK(split.accumulate_step(std::span<const Sample>(&data.samples[1], 1)));
  CHECK(joint.accumulate_step(data.samples));

  // First moments are (1 - beta1) * g on a fresh optimizer, so they expose the applied gradient.
  const double b1 = OptimSettings{}.beta1;
  double worst_grad = 0.0;
  for (const auto& [name, m] : split.optimizer().moments()) {
    const auto& other = joint.optimizer().moments().at(name).m;
    for (std::size_t i = 0; i < m.m.size(); ++i) {
      worst_grad = std::max(worst_grad, std::abs(m.m[i] - other[i]) / (1.0 - b1));
    }
  }
  CHECK(worst_grad <= 1e-10);
  double worst_param = 0.0;
  const auto& a = split_model.registry().all();
  const auto& b = joint_model.registry().all();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].tensor.numel(); ++i) {
      worst_param = std::max(worst_param, std::abs(a[k].tensor.data()[i] - b[k].tensor.data()[i]));
    }
  }
  CHECK(worst_param <= 1e-10);
}

TEST_CASE("a partial window is applied at epoch end") {
  // Six samples, one per microbatch, accumulation of 4: updates after 4 and after the flushed 2.
  const auto data = tiny::training_set(six_transcripts());
  PipelineModel model(tiny::model_config(), 5);
  TrainerOptions opt;
  opt.optim = fast_optim(4);
  opt.optim.batch_points = 1;
  opt.schedule = StageSchedule::all_unfrozen(1);
  Trainer trainer(model, data, opt);
  CHECK(trainer.planned_updates() == 2);
  trainer.run();
  CHECK(trainer.state().global_step == 2);
  CHECK(trainer.state().finished);
}

TEST_CASE("stage freezing is byte exact") {
  const auto data = tiny::training_set(six_transcripts());
  PipelineModel model(tiny::model_config(), 6);
  TrainerOptions opt;
  opt.optim = fast_optim(2);
  opt.schedule = StageSchedule::staged();
  for (auto& s : opt.schedule.stages) s.epochs = 1;
  Trainer trainer(model, data, opt);
  const std::string lm_start = serialize_params(model.registry(), {ParamGroup::lm_body});

  const std::set<ParamGroup> all{ParamGroup::encoder, ParamGroup::projector, ParamGroup::bridge, ParamGroup::lora,
                                 ParamGroup::lm_body};
  for (std::size_t i = 0; i < opt.schedule.stages.size(); ++i) {
    const auto& trained = opt.schedule.stages[i].groups;
    std::set<ParamGroup> frozen;
    for (auto g : all) {
      if (!trained.count(g)) frozen.insert(g);
    }
    const std::string frozen_before = serialize_params(model.registry(), frozen);
    std::map<ParamGroup, std::string> trained_before;
    for (auto g : trained) trained_before[g] = serialize_params(model.registry(), {g});
    trainer.run_stage(i);
    CHECK(serialize_params(model.registry(), frozen) == frozen_before);
    for (auto g : trained) CHECK(serialize_params(model.registry(), {g}) != trained_before[g]);
  }
  CHECK(serialize_params(model.registry(), {ParamGroup::lm_body}) == lm_start);
  CHECK(trainer.state().finished);
}

TEST_CASE("all-unfrozen moves every trainable group, never lm_body") {
  const auto data = tiny::training_set(six_transcripts());
  PipelineModel model(tiny::model_config(), 7);
  const std::string lm_start = serialize_params(model.registry(), {ParamGroup::lm_body});
  std::map<ParamGroup, std::string> before;
  for (auto g : {ParamGroup::encoder, ParamGroup::projector, ParamGroup::bridge, ParamGroup::lora}) {
    before[g] = serialize_params(model.registry(), {g});
  }
  TrainerOptions opt;
  opt.optim = fast_optim(2);
  run_all_unfrozen(model, data, 1, opt);
  for (const auto& [g, bytes] : before) CHECK(serialize_params(model.registry(), {g}) != bytes);
  CHECK(serialize_params(model.registry(), {ParamGroup::lm_body}) == lm_start);
}

TEST_CASE("schedule and dataset validation") {
  StageSchedule bad{{{{ParamGroup::lora, ParamGroup::lm_body}, 1}}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(StageSchedule{}.validate(), ConfigError);
  StageSchedule zero{{{{ParamGroup::lora}, 0}}};
  CHECK_THROWS_AS(zero.validate(), ConfigError);
  PipelineModel model(tiny::model_config(), 8);
  const TrainingSet empty;
  CHECK_THROWS_AS(Trainer(model, empty, TrainerOptions{}), ConfigError);
}

TEST_CASE("checkpoints, log and resume determinism") {
  const auto data = tiny::training_set(six_transcripts(), {2, 1, 1, 1, 3, 1});
  TrainerOptions opt;
  opt.optim = fast_optim(2);
  opt.seed = 11;

  const auto full_dir = fresh_dir("resume_full");
  std::string uninterrupted;
  std::size_t planned = 0;
  {
    PipelineModel model(tiny::model_config(), 11);
    opt.run_dir = full_dir;
    Trainer trainer(model, data, opt);
    planned = trainer.planned_updates();
    trainer.run();
    CHECK(trainer.state().global_step == planned);
    uninterrupted = serialize_params(model.registry());
  }
  for (const char* name : {"ckpt-stage1-epoch1", "ckpt-stage2-epoch1", "ckpt-stage2-epoch2", "ckpt-stage3-epoch1",
                           "ckpt-stage3-epoch2", "final"}) {
    CHECK(fs::exists(full_dir / "checkpoints" / name));
  }
  {
    std::ifstream log(full_dir / "train_log.tsv");
    std::string line;
    std::getline(log, line);
    CHECK(line == "step\tstage\tlr\tloss\tgrad_norm_preclip\twall_time");
    std::size_t rows = 0;
    while (std::getline(log, line)) ++rows;
    CHECK(rows == planned);
  }

  // Stop at a stage boundary, then resume in a fresh process-equivalent.
  const auto part_dir = fresh_dir("resume_part");
  {
    PipelineModel model(tiny::model_config(), 11);
    opt.run_dir = part_dir;
    opt.stop_after_stage = 1;
    Trainer trainer(model, data, opt);
    trainer.run();
    CHECK_FALSE(trainer.state().finished);
    CHECK(trainer.state().stage_index == 1);
  }
  opt.stop_after_stage.reset();
  for (const char* from : {"ckpt-stage1-epoch1", "ckpt-stage2-epoch1"}) {
    PipelineModel model(tiny::model_config(), 99);  // resume must not depend on init
    opt.run_dir = fresh_dir("resume_tail");
    Trainer trainer(model, data, opt);
    trainer.resume(read_checkpoint((std::string(from) == "ckpt-stage1-epoch1" ? part_dir : full_dir) /
                                   "checkpoints" / from));
    trainer.run();
    CHECK(trainer.state().finished);
    CHECK(trainer.state().global_step == planned);
    CHECK(serialize_params(model.registry()) == uninterrupted);
  }

  PipelineModel model(tiny::model_config(), 11);
  opt.seed = 12;
  Trainer wrong_seed(model, data, opt);
  CHECK_THROWS_AS(wrong_seed.resume(read_checkpoint(full_dir / "checkpoints" / "ckpt-stage1-epoch1")), ConfigError);
}

TEST_CASE("trainer state round trip") {
  TrainState s;
  s.seed = 5;
  s.global_step = 17;
  s.stage_index = 2;
  s.stage_epochs_done = 1;
  s.stage_step = 4;
  s.global_epoch = 3;
  s.epoch_losses = {3.5, 1.25};
  s.finished = true;
  s.optimizer = std::string("\0ab", 3);
  const auto back = TrainState::deserialize(s.serialize());
  CHECK(back.seed == 5);
  CHECK(back.global_step == 17);
  CHECK(back.stage_index == 2);
  CHECK(back.stage_epochs_done == 1);
  CHECK(back.stage_step == 4);
  CHECK(back.global_epoch == 3);
  CHECK(back.epoch_losses == s.epoch_losses);
  CHECK(back.finished);
  CHECK(back.optimizer == s.optimizer);
}

TEST_CASE("a model fitted to five utterances decodes them exactly") {
  const std::vector<std::string> texts{"abc", "hello", "zz9", "word", "q1w2"};
  const auto data = tiny::training_set(texts);
  // A random frozen LM body cannot express confident outputs; give it a short copy-task pretraining first.
  auto config = tiny::model_config();
  config.lm.embed_dim = 32;
  PipelineModel model(config, 13);
  FoundationSettings fs_settings;
  fs_settings.lm_updates = 800;
  fs_settings.lm_warmup = 100;
  pretrain_lm(model, fs_settings);
  TrainerOptions opt;
  opt.optim = fast_optim(1);
  opt.optim.batch_points = 1;
  opt.optim.warmup_steps = 20;
  const auto st = run_all_unfrozen(model, data, 200, opt);
  CHECK(st.epoch_losses.back() < 0.1 * st.epoch_losses.front());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    CHECK(greedy_decode(model, data.samples[i].features, "go:", 20) == texts[i]);
  }
}
