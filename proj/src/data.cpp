#include "alignlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <set>

#include "alignlab/errors.hpp"
#include "alignlab/rng.hpp"
#include "alignlab/utf8.hpp"

namespace alignlab {

void SynthSpec::validate() const {
  if (frames_per_char < 1) throw ConfigError("frames_per_char must be >= 1");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (!(noise_std >= 0.0) || !(noisy_noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (!(accent_strength >= 0.0 && accent_strength < 0.5)) {
    throw ConfigError("accent_strength must lie in [0, 0.5) to keep the warp invertible");
  }
  if (utf8::decode(characters).empty()) throw ConfigError("synthesis alphabet is empty");
  if (min_word_len < 1 || min_word_len > max_word_len) throw ConfigError("bad word length range");
  if (min_words < 1 || min_words > max_words) throw ConfigError("bad words-per-transcript range");
  if (lexicon_size < 1) throw ConfigError("lexicon_size must be >= 1");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::test_clean: return "test_clean";
    case Split::test_noisy: return "test_noisy";
    case Split::test_accent: return "test_accent";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (auto s : {Split::train, Split::test_clean, Split::test_noisy, Split::test_accent}) {
    if (to_string(s) == name) return s;
  }
  throw DataError("unknown split '" + std::string(name) + "'");
}

Perturbation perturbation_for(Split split) {
  switch (split) {
    case Split::test_noisy: return Perturbation::noise;
    case Split::test_accent: return Perturbation::accent;
    default: return Perturbation::none;
  }
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) throw ContractError("uniform_below(0)");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Gaussian vectors, orthogonalized against earlier ones while the dimension allows.
std::vector<std::vector<double>> orthogonal_vectors(std::size_t count, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    if (i < dim) {
      for (const auto& u : out) {
        const double p = dot(v, u) / dot(u, u);
        for (std::size_t k = 0; k < dim; ++k) v[k] -= p * u[k];
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

Codebook::Codebook(const SynthSpec& spec) : spec_(spec) {
  spec_.validate();
  const auto alphabet = utf8::decode(spec_.characters);
  std::set<char32_t> seen(alphabet.begin(), alphabet.end());
  if (seen.size() != alphabet.size()) throw ConfigError("synthesis alphabet has duplicate characters");

  const std::size_t dim = spec_.pattern_dim();
  auto rng = derive_rng(spec_.seed, "codebook");
  auto vecs = orthogonal_vectors(alphabet.size(), dim, rng);
  for (std::size_t i = 0; i < alphabet.size(); ++i) {
    auto& v = vecs[i];
    // Unit RMS: norm sqrt(dim).
    const double s = std::sqrt(static_cast<double>(dim) / dot(v, v));
    for (auto& x : v) x *= s;
    prototypes_.emplace(alphabet[i], v);
  }
  min_distance_ = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    for (std::size_t j = i + 1; j < vecs.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d2 += (vecs[i][k] - vecs[j][k]) * (vecs[i][k] - vecs[j][k]);
      min_distance_ = std::min(min_distance_, std::sqrt(d2));
    }
  }
  if (vecs.size() > 1 && min_distance_ < separability_bound()) {
    throw ConfigError("character prototypes are not separable: min distance " + std::to_string(min_distance_) +
                      " < 4 * noise_std * sqrt(dim) = " + std::to_string(separability_bound()));
  }

  const std::size_t d = spec_.feature_dim;
  auto warp_rng = derive_rng(spec_.seed, "accent");
  const auto q = orthogonal_vectors(d, d, warp_rng);
  const double a = spec_.accent_strength;
  warp_.assign(d * d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const double norm = std::sqrt(dot(q[r], q[r]));
    for (std::size_t c = 0; c < d; ++c) warp_[r * d + c] = a * q[r][c] / norm + (r == c ? 1.0 - a : 0.0);
  }
}

double Codebook::separability_bound() const {
  return 4.0 * spec_.noise_std * std::sqrt(static_cast<double>(spec_.pattern_dim()));
}

std::span<const double> Codebook::prototype(char32_t c) const {
  auto it = prototypes_.find(c);
  if (it == prototypes_.end()) {
    throw DataError("generation: character '" + utf8::encode(c) + "' is not in the synthesis alphabet");
  }
  return it->second;
}

Tensor synth_features(const Codebook& codebook, std::string_view transcript, std::uint64_t seed,
                      Perturbation perturbation) {
  const auto& spec = codebook.spec();
  const auto chars = utf8::decode(transcript);
  if (chars.empty()) throw DataError("generation: empty transcript");
  std::vector<std::span<const double>> patterns;
  for (char32_t c : chars) patterns.push_back(codebook.prototype(c));

  const std::size_t d = spec.feature_dim;
  const std::size_t frames = chars.size() * spec.frames_per_char;
  Tensor out = Tensor::zeros({frames, d});
  auto x = out.mutable_data();
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    std::copy(patterns[i].begin(), patterns[i].end(), x.begin() + static_cast<std::ptrdiff_t>(i * patterns[i].size()));
  }
  const double sigma = perturbation == Perturbation::noise ? spec.noisy_noise_std : spec.noise_std;
  if (sigma > 0.0) {
    auto rng = derive_rng(seed, "utterance-noise");
    std::normal_distribution<double> normal(0.0, sigma);
    for (auto& v : x) v += normal(rng);
  }
  if (perturbation == Perturbation::accent) {
    const auto& m = codebook.accent_warp();
    std::vector<double> frame(d);
    for (std::size_t f = 0; f < frames; ++f) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(f * d), d, frame.begin());
      for (std::size_t r = 0; r < d; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += m[r * d + c] * frame[c];
        x[f * d + r] = s;
      }
    }
  }
  return out;
}

Sample synth_utterance(const Codebook& codebook, const std::string& utt_id, const std::string& transcript,
                       std::uint64_t seed, Perturbation perturbation, const std::string& prompt) {
  return Sample{utt_id, synth_features(codebook, transcript, seed, perturbation), prompt, transcript};
}

const Manifest& CorpusManifests::get(Split split) const {
  switch (split) {
    case Split::train: return train;
    case Split::test_clean: return test_clean;
    case Split::test_noisy: return test_noisy;
    case Split::test_accent: return test_accent;
  }
  throw ContractError("bad split");
}

namespace {

std::string random_word(const std::u32string& alphabet, std::size_t len, std::mt19937_64& rng) {
  std::u32string w;
  for (std::size_t i = 0; i < len; ++i) w.push_back(alphabet[uniform_below(rng, alphabet.size())]);
  return utf8::encode(w);
}

// Saturating count of distinct word sequences, capped at `cap`.
std::size_t sequence_capacity(std::size_t lexicon, std::size_t min_words, std::size_t max_words, std::size_t cap) {
  std::size_t total = 0;
  for (std::size_t k = min_words; k <= max_words && total < cap; ++k) {
    std::size_t n = 1;
    for (std::size_t i = 0; i < k && n < cap; ++i) n = std::min(cap, n * lexicon);
    total = std::min(cap, total + n);
  }
  return total;
}

std::string id_for(Split split, std::size_t i) {
  static const char* prefixes[] = {"train", "clean", "noisy", "accent"};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%04zu", prefixes[static_cast<int>(split)], i);
  return buf;
}

std::uint64_t utterance_seed(std::uint64_t spec_seed, Split split, std::size_t i) {
  auto rng = derive_rng(spec_seed, "utterance-seed", {static_cast<std::uint64_t>(split), i});
  return rng();
}

}  // namespace

CorpusManifests build_manifests(const SynthSpec& spec, const CorpusSizes& sizes) {
  spec.validate();
  if (sizes.train == 0) throw ConfigError("train split must be non-empty");
  if (sizes.replicated > sizes.train) throw ConfigError("more replicated entries than train entries");
  if (sizes.replicated_weight < 1) throw ConfigError("replicated weight must be >= 1");
  const auto alphabet = utf8::decode(spec.characters);

  std::size_t word_space = 0;
  for (std::size_t len = spec.min_word_len; len <= spec.max_word_len && word_space < spec.lexicon_size; ++len) {
    word_space = std::max(word_space, sequence_capacity(alphabet.size(), len, len, spec.lexicon_size));
  }
  if (word_space < spec.lexicon_size) {
    throw ConfigError("alphabet too small for a lexicon of " + std::to_string(spec.lexicon_size) + " words");
  }
  const std::size_t needed = sizes.train + sizes.test;
  if (sequence_capacity(spec.lexicon_size, spec.min_words, spec.max_words, needed) < needed) {
    throw ConfigError("vocabulary too small for " + std::to_string(sizes.train) + " train and " +
                      std::to_string(sizes.test) + " disjoint test transcripts");
  }

  auto lex_rng = derive_rng(spec.seed, "lexicon");
  std::vector<std::string> lexicon;
  std::set<std::string> lex_seen;
  std::size_t attempts = 0;
  while (lexicon.size() < spec.lexicon_size) {
    if (++attempts > 1000 * spec.lexicon_size) throw ConfigError("could not draw a lexicon of distinct words");
    const auto len = spec.min_word_len + uniform_below(lex_rng, spec.max_word_len - spec.min_word_len + 1);
    auto w = random_word(alphabet, len, lex_rng);
    if (lex_seen.insert(w).second) lexicon.push_back(std::move(w));
  }

  auto tr_rng = derive_rng(spec.seed, "transcripts");
  std::set<std::string> used;
  auto draw_pool = [&](std::size_t count) {
    std::vector<std::string> pool;
    std::size_t tries = 0;
    while (pool.size() < count) {
      if (++tries > 1000 * (count + 1)) {
        throw ConfigError("vocabulary too small for the requested disjoint transcript pools");
      }
      const auto k = spec.min_words + uniform_below(tr_rng, spec.max_words - spec.min_words + 1);
      std::string t;
      for (std::size_t i = 0; i < k; ++i) t += lexicon[uniform_below(tr_rng, lexicon.size())];
      if (used.insert(t).second) pool.push_back(std::move(t));
    }
    return pool;
  };
  const auto train_pool = draw_pool(sizes.train);
  const auto test_pool = draw_pool(sizes.test);

  CorpusManifests out;
  for (std::size_t i = 0; i < train_pool.size(); ++i) {
    out.train.push_back({id_for(Split::train, i), train_pool[i], utterance_seed(spec.seed, Split::train, i),
                         i < sizes.replicated ? sizes.replicated_weight : 1, Split::train});
  }
  for (Split split : kTestSplits) {
    Manifest& m = split == Split::test_clean ? out.test_clean : split == Split::test_noisy ? out.test_noisy : out.test_accent;
    for (std::size_t i = 0; i < test_pool.size(); ++i) {
      m.push_back({id_for(split, i), test_pool[i], utterance_seed(spec.seed, split, i), 1, split});
    }
  }
  return out;
}

void validate_manifest(const Manifest& manifest) {
  std::set<std::string> ids;
  for (const auto& e : manifest) {
    if (e.utt_id.empty()) throw DataError("manifest entry with empty utt_id");
    if (!ids.insert(e.utt_id).second) throw DataError("duplicate utt_id " + e.utt_id);
    if (e.weight < 1) throw DataError("utt " + e.utt_id + " has weight < 1");
    if (e.transcript.find_first_of("\t\n") != std::string::npos) {
      throw DataError("utt " + e.utt_id + " transcript contains a tab or newline");
    }
  }
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  validate_manifest(manifest);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : manifest) {
    f << e.utt_id << '\t' << e.transcript << '\t' << e.seed << '\t' << e.weight << '\t' << to_string(e.split) << '\n';
  }
  if (!f) throw DataError("failed writing manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read manifest " + path.string());
  Manifest out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 5) throw DataError(where + ": expected 5 tab-separated fields");
    ManifestEntry e;
    e.utt_id = fields[0];
    e.transcript = fields[1];
    try {
      std::size_t used = 0;
      e.seed = std::stoull(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("seed");
      e.weight = std::stoull(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("weight");
    } catch (const std::logic_error&) {
      throw DataError(where + ": seed and weight must be non-negative integers");
    }
    try {
      e.split = parse_split(fields[4]);
    } catch (const DataError& err) {
      throw DataError(where + ": " + err.what());
    }
    out.push_back(std::move(e));
  }
  validate_manifest(out);
  return out;
}

namespace {

constexpr char kFeatMagic[8] = {'A', 'L', 'G', 'N', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& origin) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("feature store " + origin + ": truncated file");
  return v;
}

}  // namespace

void write_feature_store(const std::filesystem::path& path, std::span<const Sample> samples, std::size_t feature_dim) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write feature store " + path.string());
  f.write(kFeatMagic, sizeof(kFeatMagic));
  write_pod<std::uint32_t>(f, kFeatVersion);
  write_pod<std::uint64_t>(f, samples.size());
  write_pod<std::uint64_t>(f, feature_dim);
  for (const auto& s : samples) {
    if (s.features.cols() != feature_dim) throw DimensionError("feature store: utterance " + s.utt_id + " has wrong width");
    write_pod<std::uint64_t>(f, s.utt_id.size());
    f.write(s.utt_id.data(), static_cast<std::streamsize>(s.utt_id.size()));
    write_pod<std::uint64_t>(f, s.features.rows());
    const auto data = s.features.data();
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!f) throw DataError("failed writing feature store " + path.string());
}

std::map<std::string, Tensor> read_feature_store(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  const std::string origin = path.string();
  if (!f) throw DataError("cannot read feature store " + origin);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kFeatMagic, sizeof(magic)) != 0) throw DataError("feature store " + origin + ": bad magic");
  if (read_pod<std::uint32_t>(f, origin) != kFeatVersion) throw DataError("feature store " + origin + ": bad version");
  const auto count = read_pod<std::uint64_t>(f, origin);
  const auto dim = read_pod<std::uint64_t>(f, origin);
  std::map<std::string, Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto n = read_pod<std::uint64_t>(f, origin);
    if (n > 4096) throw DataError("feature store " + origin + ": implausible utt_id length");
    std::string id(n, '\0');
    f.read(id.data(), static_cast<std::streamsize>(n));
    const auto frames = read_pod<std::uint64_t>(f, origin);
    if (frames == 0 || frames > (1u << 24)) throw DataError("feature store " + origin + ": implausible frame count");
    std::vector<double> data(frames * dim);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw DataError("feature store " + origin + ": truncated file");
    if (!out.emplace(id, Tensor::from({frames, dim}, std::move(data))).second) {
      throw DataError("feature store " + origin + ": duplicate utt_id " + id);
    }
  }
  f.peek();
  if (!f.eof()) throw DataError("feature store " + origin + ": trailing bytes");
  return out;
}

std::size_t sample_points(const ManifestEntry& entry, const SynthSpec& spec) {
  return utf8::decode(entry.transcript).size() * spec.frames_per_char * spec.feature_dim;
}

std::size_t batch_cost(std::span<const std::size_t> batch, std::span<const std::size_t> points) {
  std::size_t longest = 0;
  for (auto i : batch) longest = std::max(longest, points[i]);
  return batch.size() * longest;
}

std::vector<std::vector<std::size_t>> pack_batches(std::span<const std::size_t> points,
                                                   std::span<const std::size_t> weights, std::size_t cap,
                                                   std::uint64_t epoch_seed, std::vector<std::string>* warnings) {
  if (cap < 1) throw ConfigError("batch cap must be >= 1");
  if (points.size() != weights.size()) throw ContractError("points and weights differ in length");
  if (points.empty()) throw ConfigError("cannot pack an empty manifest");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 1) throw ConfigError("entry weight must be >= 1");
    order.insert(order.end(), weights[i], i);
  }
  auto rng = derive_rng(epoch_seed, "batch-shuffle");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
  return pack_in_order(order, points, cap, warnings);
}

std::vector<std::vector<std::size_t>> pack_in_order(std::span<const std::size_t> order,
                                                    std::span<const std::size_t> points, std::size_t cap,
                                                    std::vector<std::string>* warnings) {
  if (cap < 1) throw ConfigError("batch cap must be >= 1");
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (auto idx : order) {
    if (points[idx] > cap) {
      if (!current.empty()) batches.push_back(std::move(current));
      current.clear();
      longest = 0;
      batches.push_back({idx});
      if (warnings) {
        warnings->push_back("entry " + std::to_string(idx) + " has " + std::to_string(points[idx]) +
                            " sample points, above the batch cap " + std::to_string(cap) + "; emitted alone");
      }
      continue;
    }
    const std::size_t new_longest = std::max(longest, points[idx]);
    if (!current.empty() && (current.size() + 1) * new_longest > cap) {
      batches.push_back(std::move(current));
      current.clear();
      longest = 0;
    }
    current.push_back(idx);
    longest = std::max(longest, points[idx]);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

}  // namespace alignlab
