#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "alignlab/model_config.hpp"
#include "alignlab/nn.hpp"

namespace alignlab {

// Binary layout, little-endian:
//   "ALGNCKPT" u32 version
//   u64 n + config JSON bytes
//   u64 tensor count, then per tensor: u64 n + name, u32 rank, u64 dims[rank], f64 data
//   u64 n + opaque trainer state bytes (n may be 0)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct CheckpointData {
  std::string config_json;
  std::vector<StoredTensor> tensors;
  std::string train_state;
};

// Raw byte encoding of the selected groups' parameters, in registry order.
// An empty group set selects every parameter.
std::string serialize_params(const ParamRegistry& registry, const std::set<ParamGroup>& groups = {});

std::string encode_checkpoint(const ParamRegistry& registry, const std::string& config_json,
                              const std::string& train_state = {});
CheckpointData decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

// Writes to a temporary sibling and renames, so a crash never leaves a torn file.
void save_checkpoint(const std::filesystem::path& path, const ParamRegistry& registry, const std::string& config_json,
                     const std::string& train_state = {});
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Copies stored values into the registry. With `groups` empty every registry
// parameter must be present; otherwise only parameters of those groups are
// loaded. Names and shapes must match exactly.
void load_params(const ParamRegistry& registry, const CheckpointData& data, const std::set<ParamGroup>& groups = {});

}  // namespace alignlab
