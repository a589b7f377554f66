#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "alignlab/errors.hpp"
#include "alignlab/eval.hpp"
#include "alignlab/optim.hpp"
#include "alignlab/utf8.hpp"
#include "alignlab/workflow.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace alignlab;

namespace {

// Configs cross the boundary as JSON text; the Python side converts dicts.
RunConfig config_from(const std::string& json_text, bool reference) {
  RunConfig c = parse_run_config(json_text, reference ? RunConfig::reference() : RunConfig::toy());
  c.validate();
  return c;
}

std::map<std::string, double> cer_map(const ScoreResult& r) {
  std::map<std::string, double> out;
  for (const auto& [name, counts] : r.per_set) out[name] = counts.cer();
  out["all"] = r.aggregate.cer();
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Staged speech-to-LM alignment on a synthetic corpus";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  auto data_error = py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  (void)data_error;

  m.def("build_id", &build_id);

  m.def(
      "default_config", [](bool reference) { return to_json(reference ? RunConfig::reference() : RunConfig::toy()); },
      py::arg("reference") = false, "Fully resolved default config as JSON text");
  m.def(
      "resolve_config", [](const std::string& text, bool reference) { return to_json(config_from(text, reference)); },
      py::arg("config"), py::arg("reference") = false, "Strict parse + validation; returns the resolved JSON");

  m.def(
      "lr_at",
      [](std::size_t step, double lr_peak, std::size_t warmup) {
        OptimSettings s;
        s.lr_peak = lr_peak;
        s.warmup_steps = warmup;
        return lr_at(s, step);
      },
      py::arg("step"), py::arg("lr_peak") = OptimSettings{}.lr_peak,
      py::arg("warmup_steps") = OptimSettings{}.warmup_steps);

  m.def(
      "cer", [](const std::string& ref, const std::string& hyp) { return cer(ref, hyp).value; }, py::arg("ref"),
      py::arg("hyp"));
  m.def(
      "edit_distance",
      [](const std::string& a, const std::string& b) { return edit_distance(utf8::decode(a), utf8::decode(b)); },
      py::arg("a"), py::arg("b"));
  m.def(
      "pack_batches",
      [](const std::vector<std::size_t>& points, const std::vector<std::size_t>& weights, std::size_t cap,
         std::uint64_t seed) { return pack_batches(points, weights, cap, seed); },
      py::arg("points"), py::arg("weights"), py::arg("cap"), py::arg("seed"));

  m.def(
      "prepare_data",
      [](const std::string& config, const fs::path& data_dir, bool force, bool reference) {
        const RunConfig c = config_from(config, reference);
        py::gil_scoped_release release;
        return prepare_data(c, data_dir, force).utterances;
      },
      py::arg("config"), py::arg("data_dir"), py::arg("force") = false, py::arg("reference") = false);

  m.def(
      "train",
      [](const std::string& config, const fs::path& run_dir, const std::string& schedule,
         std::optional<fs::path> resume, std::optional<std::size_t> stop_after_stage, bool force, bool reference) {
        RunConfig c = config_from(config, reference);
        if (schedule == "all-unfrozen") {
          c.stages = StageSchedule::all_unfrozen(c.stages.total_epochs());
        } else if (schedule != "staged") {
          throw ConfigError("schedule must be staged or all-unfrozen");
        }
        TrainOutcome out;
        {
          py::gil_scoped_release release;
          out = train_run(c, TrainRequest{run_dir, resume, stop_after_stage, force});
        }
        py::dict d;
        d["updates"] = out.updates;
        d["complete"] = out.complete;
        d["last_checkpoint"] = out.last_checkpoint;
        d["epoch_losses"] = out.state.epoch_losses;
        return d;
      },
      py::arg("config"), py::arg("run_dir"), py::arg("schedule") = "staged", py::arg("resume") = py::none(),
      py::arg("stop_after_stage") = py::none(), py::arg("force") = false, py::arg("reference") = false);

  m.def("final_checkpoint", &final_checkpoint, py::arg("run_dir"));

  m.def(
      "decode",
      [](const std::string& config, const fs::path& checkpoint, const fs::path& out_dir, bool reference) {
        const RunConfig c = config_from(config, reference);
        py::gil_scoped_release release;
        return decode_run(c, checkpoint, out_dir, worker_threads());
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out_dir"), py::arg("reference") = false);

  m.def(
      "score",
      [](const std::string& config, const fs::path& decode_dir, bool reference) {
        return cer_map(score_decodes(config_from(config, reference), decode_dir));
      },
      py::arg("config"), py::arg("decode_dir"), py::arg("reference") = false,
      "Micro-averaged CER per test set plus 'all'");

  m.def(
      "transcribe",
      [](const fs::path& checkpoint, py::array_t<double, py::array::c_style | py::array::forcecast> features,
         std::optional<std::string> prompt, std::size_t max_len) {
        if (features.ndim() != 2) throw ConfigError("features must be a 2-D array [frames x dims]");
        const auto model = model_from_checkpoint(checkpoint);
        const auto rows = static_cast<std::size_t>(features.shape(0));
        const auto cols = static_cast<std::size_t>(features.shape(1));
        const Tensor t = Tensor::from({rows, cols}, std::vector<double>(features.data(), features.data() + rows * cols));
        py::gil_scoped_release release;
        return greedy_decode(model, t, prompt.value_or(model.config().prompt), max_len);
      },
      py::arg("checkpoint"), py::arg("features"), py::arg("prompt") = py::none(), py::arg("max_len") = 64);

  m.def(
      "synthesize",
      [](const std::string& config, const std::string& transcript, std::uint64_t seed, const std::string& condition,
         bool reference) {
        const RunConfig c = config_from(config, reference);
        Perturbation p = Perturbation::none;
        if (condition == "noisy") {
          p = Perturbation::noise;
        } else if (condition == "accent") {
          p = Perturbation::accent;
        } else if (condition != "clean") {
          throw ConfigError("condition must be clean, noisy or accent");
        }
        const Codebook codebook{c.data.synth};
        const Sample s = synth_utterance(codebook, "py", transcript, seed, p, c.model.prompt);
        const auto& shape = s.features.shape();
        py::array_t<double> out({shape[0], shape[1]});
        std::copy(s.features.data().begin(), s.features.data().end(), out.mutable_data());
        return out;
      },
      py::arg("config"), py::arg("transcript"), py::arg("seed") = 0, py::arg("condition") = "clean",
      py::arg("reference") = false, "Feature frames of one synthetic utterance");

  m.def(
      "run_experiment",
      [](const std::string& name, const std::string& config, const fs::path& root, bool reference) {
        const RunConfig c = config_from(config, reference);
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(name, c, root, worker_threads());
        }
        py::dict d;
        d["markdown"] = r.report.markdown;
        d["tsv"] = r.report.tsv;
        py::list seeds;
        for (const auto& s : r.seeds) {
          py::dict row;
          row["seed"] = s.seed;
          row["staged"] = s.staged;
          row["all_unfrozen"] = s.all_unfrozen;
          row["updates"] = s.staged_updates;
          seeds.append(row);
        }
        d["seeds"] = seeds;
        d["staged_wins"] = r.staged_wins;
        return d;
      },
      py::arg("name"), py::arg("config"), py::arg("root"), py::arg("reference") = false);
}
