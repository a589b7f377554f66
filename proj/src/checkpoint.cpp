#include "alignlab/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "alignlab/bytes.hpp"
#include "alignlab/errors.hpp"

namespace alignlab {

namespace {

constexpr char kMagic[8] = {'A', 'L', 'G', 'N', 'C', 'K', 'P', 'T'};

void put_tensor(ByteWriter& out, const std::string& name, const Tensor& t) {
  out.put_string(name);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
  for (auto d : t.shape()) out.put<std::uint64_t>(d);
  const auto data = t.data();
  out.put_raw(std::string(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double)));
}

}  // namespace

std::string serialize_params(const ParamRegistry& registry, const std::set<ParamGroup>& groups) {
  ByteWriter out;
  for (const auto& p : registry.all()) {
    if (groups.empty() || groups.count(p.group)) put_tensor(out, p.name, p.tensor);
  }
  return out.take();
}

std::string encode_checkpoint(const ParamRegistry& registry, const std::string& config_json,
                              const std::string& train_state) {
  ByteWriter out;
  out.put_raw(std::string(kMagic, sizeof(kMagic)));
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put_string(config_json);
  out.put<std::uint64_t>(registry.all().size());
  out.put_raw(serialize_params(registry));
  out.put_string(train_state);
  return out.take();
}

CheckpointData decode_checkpoint(const std::string& bytes, const std::string& origin) {
  ByteReader r(bytes, "checkpoint " + origin);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    r.fail("not an alignlab checkpoint (bad magic)");
  }
  r.skip(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  CheckpointData data;
  data.config_json = r.get_string();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.get<std::uint64_t>());
      numel *= t.shape.back();
    }
    t.data = r.get_doubles(numel);
    data.tensors.push_back(std::move(t));
  }
  data.train_state = r.get_string();
  if (!r.at_end()) r.fail("trailing bytes");
  return data;
}

void save_checkpoint(const std::filesystem::path& path, const ParamRegistry& registry, const std::string& config_json,
                     const std::string& train_state) {
  const std::string bytes = encode_checkpoint(registry, config_json, train_state);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

void load_params(const ParamRegistry& registry, const CheckpointData& data, const std::set<ParamGroup>& groups) {
  std::map<std::string, const StoredTensor*> stored;
  for (const auto& t : data.tensors) stored.emplace(t.name, &t);
  for (const auto& p : registry.all()) {
    if (!groups.empty() && !groups.count(p.group)) continue;
    auto it = stored.find(p.name);
    if (it == stored.end()) throw DataError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw DataError("checkpoint parameter " + p.name + " has shape " + shape_to_string(it->second->shape) +
                      ", model expects " + shape_to_string(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto dst = t.mutable_data();
    std::copy(it->second->data.begin(), it->second->data.end(), dst.begin());
  }
  if (groups.empty() && stored.size() != registry.all().size()) {
    for (const auto& t : data.tensors) {
      if (registry.find(t.name) == nullptr) throw DataError("checkpoint has unknown parameter " + t.name);
    }
  }
}

}  // namespace alignlab
