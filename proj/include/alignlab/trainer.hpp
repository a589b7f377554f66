#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "alignlab/checkpoint.hpp"
#include "alignlab/data.hpp"
#include "alignlab/optim.hpp"
#include "alignlab/pipeline.hpp"

namespace alignlab {

struct Stage {
  std::set<ParamGroup> groups;
  std::size_t epochs = 1;
};

struct StageSchedule {
  std::vector<Stage> stages;

  // projector+bridge for 1 epoch, then encoder for 2, then LoRA for 2.
  static StageSchedule staged();
  // One stage unfreezing encoder, projector, bridge and LoRA together.
  static StageSchedule all_unfrozen(std::size_t epochs);

  std::size_t total_epochs() const;
  // ConfigError for no stages, an empty group set, zero epochs or lm_body.
  void validate() const;
};

// Training utterances with their sampling weights and packing costs.
struct TrainingSet {
  std::vector<Sample> samples;
  std::vector<std::size_t> weights;
  std::vector<std::size_t> points;

  void validate() const;
};

// Joins a manifest with its feature store. Every entry needs features.
TrainingSet make_training_set(const Manifest& manifest, const std::map<std::string, Tensor>& features,
                              const std::string& prompt);

struct UpdateRecord {
  std::size_t step = 0;   // global optimizer step, from 1
  std::size_t stage = 0;  // from 1
  double lr = 0.0;
  double loss = 0.0;  // mean microbatch loss of the update
  double grad_norm_preclip = 0.0;
  double wall_time = 0.0;  // seconds since the trainer was constructed
};

// Everything needed to continue a run from an epoch boundary.
struct TrainState {
  std::uint64_t seed = 0;
  std::size_t global_step = 0;
  std::size_t stage_index = 0;
  std::size_t stage_epochs_done = 0;
  // Optimizer updates inside the current stage; drives the restarted schedule.
  std::size_t stage_step = 0;
  // Completed epochs over the whole run; the next epoch's shuffle derives from it.
  std::size_t global_epoch = 0;
  std::vector<double> epoch_losses;
  bool finished = false;
  std::string optimizer;

  std::string serialize() const;
  static TrainState deserialize(const std::string& bytes);
};

struct TrainerOptions {
  OptimSettings optim;
  StageSchedule schedule = StageSchedule::staged();
  std::uint64_t seed = 0;
  // Empty: no log file and no checkpoints.
  std::filesystem::path run_dir;
  // Stored in every checkpoint.
  std::string config_json = "{}";
  // Hard cap on optimizer updates over the whole run.
  std::optional<std::size_t> max_updates;
  // Stop once this many stages are complete.
  std::optional<std::size_t> stop_after_stage;
  std::function<void(const UpdateRecord&)> on_update;
  std::function<void(const std::string&)> on_warning;
};

class Trainer {
 public:
  Trainer(PipelineModel& model, const TrainingSet& data, TrainerOptions options);

  // Loads parameters and trainer state from an epoch-boundary checkpoint.
  void resume(const CheckpointData& checkpoint);

  // Runs the remaining schedule.
  const TrainState& run();
  // Runs the remaining epochs of stage `index`; earlier stages must be done.
  const TrainState& run_stage(std::size_t index);

  // Forward + backward on one microbatch. Gradients are summed across the
  // window and divided by its size before clipping and the AdamW step; the
  // optimizer and schedule advance only when the window is full.
  bool accumulate_step(std::span<const Sample> microbatch);
  // Applies a partial window, if any. Called at every epoch end.
  bool flush();
  // Makes the stage's groups trainable and resets the moments.
  void begin_stage(std::size_t index);

  // Updates the full schedule performs, by packing every epoch without training.
  std::size_t planned_updates() const;

  const TrainState& state() const { return state_; }
  const AdamW& optimizer() const { return optimizer_; }
  const std::vector<UpdateRecord>& log() const { return log_; }
  // Empty until an epoch-end checkpoint has been written by this trainer.
  const std::filesystem::path& last_checkpoint() const { return last_checkpoint_; }
  std::filesystem::path checkpoint_dir() const { return options_.run_dir / "checkpoints"; }

  static std::string checkpoint_name(std::size_t stage, std::size_t epoch);

 private:
  bool apply_window();
  void run_epoch();
  void end_epoch();
  bool budget_spent() const;
  void write_log(const UpdateRecord& record);
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t global_epoch, bool warn) const;

  PipelineModel& model_;
  const TrainingSet& data_;
  TrainerOptions options_;
  AdamW optimizer_;
  TrainState state_;
  std::vector<NamedParam> params_;
  std::size_t window_ = 0;
  double window_loss_ = 0.0;
  double epoch_loss_sum_ = 0.0;
  std::size_t epoch_microbatches_ = 0;
  std::string frozen_snapshot_;
  std::set<ParamGroup> frozen_groups_;
  std::vector<UpdateRecord> log_;
  double start_time_ = 0.0;
  std::filesystem::path last_checkpoint_;
};

// Convenience wrappers over Trainer.
TrainState run_stage(PipelineModel& model, const StageSchedule& schedule, std::size_t stage_index,
                     const TrainingSet& data, TrainerOptions options = {});
TrainState run_all_unfrozen(PipelineModel& model, const TrainingSet& data, std::size_t epochs,
                            TrainerOptions options = {});

}  // namespace alignlab
