#include "alignlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "alignlab/bytes.hpp"
#include "alignlab/errors.hpp"
#include "alignlab/rng.hpp"

namespace alignlab {

namespace {

constexpr std::uint32_t kStateVersion = 1;

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::set<ParamGroup> complement(const std::set<ParamGroup>& groups) {
  std::set<ParamGroup> out;
  for (auto g : {ParamGroup::encoder, ParamGroup::projector, ParamGroup::bridge, ParamGroup::lora,
                 ParamGroup::lm_body}) {
    if (!groups.count(g)) out.insert(g);
  }
  return out;
}

}  // namespace

StageSchedule StageSchedule::staged() {
  return StageSchedule{{{{ParamGroup::projector, ParamGroup::bridge}, 1},
                        {{ParamGroup::encoder}, 2},
                        {{ParamGroup::lora}, 2}}};
}

StageSchedule StageSchedule::all_unfrozen(std::size_t epochs) {
  return StageSchedule{
      {{{ParamGroup::encoder, ParamGroup::projector, ParamGroup::bridge, ParamGroup::lora}, epochs}}};
}

std::size_t StageSchedule::total_epochs() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.epochs;
  return n;
}

void StageSchedule::validate() const {
  if (stages.empty()) throw ConfigError("stage schedule has no stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "stage " + std::to_string(i + 1);
    if (s.groups.empty()) throw ConfigError(where + " has no trainable groups");
    if (s.epochs == 0) throw ConfigError(where + " has zero epochs");
    if (s.groups.count(ParamGroup::lm_body)) throw ConfigError(where + " unfreezes lm_body, which stays frozen");
  }
}

void TrainingSet::validate() const {
  if (samples.empty()) throw ConfigError("training set is empty");
  if (weights.size() != samples.size() || points.size() != samples.size()) {
    throw ContractError("training set weights/points do not match its samples");
  }
}

TrainingSet make_training_set(const Manifest& manifest, const std::map<std::string, Tensor>& features,
                              const std::string& prompt) {
  TrainingSet out;
  for (const auto& e : manifest) {
    auto it = features.find(e.utt_id);
    if (it == features.end()) throw DataError("no features stored for " + e.utt_id);
    out.samples.push_back(Sample{e.utt_id, it->second, prompt, e.transcript});
    out.weights.push_back(e.weight);
    out.points.push_back(it->second.numel());
  }
  return out;
}

std::string TrainState::serialize() const {
  ByteWriter out;
  out.put<std::uint32_t>(kStateVersion);
  out.put<std::uint64_t>(seed);
  out.put<std::uint64_t>(global_step);
  out.put<std::uint64_t>(stage_index);
  out.put<std::uint64_t>(stage_epochs_done);
  out.put<std::uint64_t>(stage_step);
  out.put<std::uint64_t>(global_epoch);
  out.put_doubles(epoch_losses.data(), epoch_losses.size());
  out.put<std::uint8_t>(finished ? 1 : 0);
  out.put_string(optimizer);
  return out.take();
}

TrainState TrainState::deserialize(const std::string& bytes) {
  ByteReader r(bytes, "trainer state");
  if (r.get<std::uint32_t>() != kStateVersion) r.fail("unsupported version");
  TrainState s;
  s.seed = r.get<std::uint64_t>();
  s.global_step = r.get<std::uint64_t>();
  s.stage_index = r.get<std::uint64_t>();
  s.stage_epochs_done = r.get<std::uint64_t>();
  s.stage_step = r.get<std::uint64_t>();
  s.global_epoch = r.get<std::uint64_t>();
  s.epoch_losses = r.get_doubles();
  s.finished = r.get<std::uint8_t>() != 0;
  s.optimizer = r.get_string();
  if (!r.at_end()) r.fail("trailing bytes");
  return s;
}

Trainer::Trainer(PipelineModel& model, const TrainingSet& data, TrainerOptions options)
    : model_(model), data_(data), options_(std::move(options)), optimizer_(options_.optim) {
  options_.schedule.validate();
  data_.validate();
  state_.seed = options_.seed;
  start_time_ = now_seconds();
}

std::string Trainer::checkpoint_name(std::size_t stage, std::size_t epoch) {
  return "ckpt-stage" + std::to_string(stage) + "-epoch" + std::to_string(epoch);
}

void Trainer::resume(const CheckpointData& checkpoint) {
  if (checkpoint.train_state.empty()) throw DataError("checkpoint carries no trainer state");
  auto state = TrainState::deserialize(checkpoint.train_state);
  if (state.seed != options_.seed) {
    throw ConfigError("checkpoint was trained with seed " + std::to_string(state.seed) + ", not " +
                      std::to_string(options_.seed));
  }
  if (state.stage_index > options_.schedule.stages.size()) throw ConfigError("checkpoint is past the schedule end");
  load_params(model_.registry(), checkpoint);
  state_ = std::move(state);
  window_ = 0;
  model_.clear_grads();
  if (state_.stage_index < options_.schedule.stages.size() && state_.stage_epochs_done > 0) {
    const auto& groups = options_.schedule.stages[state_.stage_index].groups;
    model_.set_trainable(groups);
    params_ = model_.trainable_params();
    optimizer_.deserialize(state_.optimizer);
    frozen_groups_ = complement(groups);
    frozen_snapshot_ = serialize_params(model_.registry(), frozen_groups_);
  }
}

void Trainer::begin_stage(std::size_t index) {
  if (index >= options_.schedule.stages.size()) throw ContractError("stage index out of range");
  const auto& groups = options_.schedule.stages[index].groups;
  model_.set_trainable(groups);
  params_ = model_.trainable_params();
  optimizer_.reset(params_);
  state_.stage_index = index;
  state_.stage_epochs_done = 0;
  if (options_.optim.restart_schedule_per_stage) state_.stage_step = 0;
  window_ = 0;
  window_loss_ = 0.0;
  frozen_groups_ = complement(groups);
  frozen_snapshot_ = serialize_params(model_.registry(), frozen_groups_);
}

bool Trainer::budget_spent() const {
  return options_.max_updates && state_.global_step >= *options_.max_updates;
}

bool Trainer::accumulate_step(std::span<const Sample> microbatch) {
  if (params_.empty()) throw ContractError("accumulate_step before begin_stage");
  double value;
  {
    Tape tape;
    const Tensor loss = forward_loss(model_, microbatch);
    value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite training loss after step " + std::to_string(state_.global_step));
    }
    tape.backward(loss);
  }
  window_loss_ += value;
  epoch_loss_sum_ += value;
  ++epoch_microbatches_;
  ++window_;
  if (window_ < options_.optim.accum_steps) return false;
  return apply_window();
}

bool Trainer::flush() {
  if (window_ == 0) return false;
  return apply_window();
}

bool Trainer::apply_window() {
  const double inv = 1.0 / static_cast<double>(window_);
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.mutable_grad()) g *= inv;
  }
  UpdateRecord rec;
  rec.grad_norm_preclip = grad_norm(params_);
  clip_gradients(params_, options_.optim.clip_value);
  ++state_.global_step;
  ++state_.stage_step;
  const std::size_t sched_step =
      options_.optim.restart_schedule_per_stage ? state_.stage_step : state_.global_step;
  rec.lr = lr_at(options_.optim, sched_step);
  optimizer_.step(params_, rec.lr);
  model_.clear_grads();
  rec.step = state_.global_step;
  rec.stage = state_.stage_index + 1;
  rec.loss = window_loss_ * inv;
  rec.wall_time = now_seconds() - start_time_;
  window_ = 0;
  window_loss_ = 0.0;
  log_.push_back(rec);
  write_log(rec);
  if (options_.on_update) options_.on_update(rec);
  return true;
}

void Trainer::write_log(const UpdateRecord& r) {
  if (options_.run_dir.empty()) return;
  std::filesystem::create_directories(options_.run_dir);
  const auto path = options_.run_dir / "train_log.tsv";
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError("cannot append to " + path.string());
  if (fresh) f << "step\tstage\tlr\tloss\tgrad_norm_preclip\twall_time\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu\t%zu\t%.9e\t%.9f\t%.9e\t%.3f\n", r.step, r.stage, r.lr, r.loss,
                r.grad_norm_preclip, r.wall_time);
  f << buf;
}

std::vector<std::vector<std::size_t>> Trainer::epoch_batches(std::size_t global_epoch, bool warn) const {
  auto rng = derive_rng(options_.seed, "epoch-shuffle", {global_epoch});
  std::vector<std::string> warnings;
  auto batches = pack_batches(data_.points, data_.weights, options_.optim.batch_points, rng(), &warnings);
  if (warn && options_.on_warning) {
    for (const auto& w : warnings) options_.on_warning(w);
  }
  return batches;
}

std::size_t Trainer::planned_updates() const {
  const std::size_t accum = options_.optim.accum_steps;
  std::size_t total = 0;
  for (std::size_t e = 0; e < options_.schedule.total_epochs(); ++e) {
    const std::size_t n = epoch_batches(e, false).size();
    total += (n + accum - 1) / accum;
  }
  if (options_.max_updates) total = std::min(total, *options_.max_updates);
  return total;
}

void Trainer::run_epoch() {
  const auto batches = epoch_batches(state_.global_epoch, true);
  std::vector<Sample> micro;
  for (const auto& b : batches) {
    if (budget_spent()) break;
    micro.clear();
    for (auto i : b) micro.push_back(data_.samples[i]);
    accumulate_step(micro);
  }
  if (budget_spent()) {
    // Leftover microbatches past the budget are discarded.
    model_.clear_grads();
    window_ = 0;
    window_loss_ = 0.0;
  } else {
    flush();
  }
  end_epoch();
}

void Trainer::end_epoch() {
  const std::size_t stage = state_.stage_index + 1;
  const std::size_t epoch = state_.stage_epochs_done + 1;
  state_.epoch_losses.push_back(epoch_microbatches_ ? epoch_loss_sum_ / static_cast<double>(epoch_microbatches_)
                                                    : 0.0);
  epoch_loss_sum_ = 0.0;
  epoch_microbatches_ = 0;
  ++state_.global_epoch;
  ++state_.stage_epochs_done;
  if (state_.stage_epochs_done == options_.schedule.stages[state_.stage_index].epochs || budget_spent()) {
    if (serialize_params(model_.registry(), frozen_groups_) != frozen_snapshot_) {
      throw ContractError("a frozen parameter changed during stage " + std::to_string(stage));
    }
    ++state_.stage_index;
    state_.stage_epochs_done = 0;
    if (state_.stage_index == options_.schedule.stages.size() || budget_spent()) state_.finished = true;
  }
  state_.optimizer = optimizer_.serialize();
  if (options_.run_dir.empty()) return;
  const auto dir = checkpoint_dir();
  std::filesystem::create_directories(dir);
  const auto name = checkpoint_name(stage, epoch);
  save_checkpoint(dir / name, model_.registry(), options_.config_json, state_.serialize());
  last_checkpoint_ = dir / name;
  if (state_.finished) {
    std::ofstream f(dir / "final", std::ios::trunc);
    f << name << '\n';
  }
}

const TrainState& Trainer::run_stage(std::size_t index) {
  if (index >= options_.schedule.stages.size()) throw ContractError("stage index out of range");
  if (state_.stage_index != index) {
    throw ContractError("stage " + std::to_string(index + 1) + " requested but the run is at stage " +
                        std::to_string(state_.stage_index + 1));
  }
  if (state_.stage_epochs_done == 0) begin_stage(index);
  while (!state_.finished && state_.stage_index == index) run_epoch();
  return state_;
}

const TrainState& Trainer::run() {
  while (!state_.finished && state_.stage_index < options_.schedule.stages.size()) {
    if (options_.stop_after_stage && state_.stage_index >= *options_.stop_after_stage) break;
    run_stage(state_.stage_index);
  }
  return state_;
}

TrainState run_stage(PipelineModel& model, const StageSchedule& schedule, std::size_t stage_index,
                     const TrainingSet& data, TrainerOptions options) {
  options.schedule = schedule;
  Trainer trainer(model, data, std::move(options));
  trainer.begin_stage(stage_index);
  return trainer.run_stage(stage_index);
}

TrainState run_all_unfrozen(PipelineModel& model, const TrainingSet& data, std::size_t epochs,
                            TrainerOptions options) {
  options.schedule = StageSchedule::all_unfrozen(epochs);
  Trainer trainer(model, data, std::move(options));
  return trainer.run();
}

}  // namespace alignlab
