#include "alignlab/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "alignlab/errors.hpp"
#include "alignlab/utf8.hpp"

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "config integers are read as size_t");

namespace alignlab {

namespace {

using json = nlohmann::ordered_json;

// Reads one JSON object, remembering which keys were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  const json* find(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void read(const char* key, std::size_t& out) {
    if (auto v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, double& out) {
    if (auto v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (auto v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename Fn>
  void read_enum(const char* key, Fn parse) {
    std::string s;
    if (!find_string(key, s)) return;
    parse(s);
  }
  bool find_string(const char* key, std::string& out) {
    auto v = find(key);
    if (!v) return false;
    if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
    out = v->get<std::string>();
    return true;
  }

  std::string where(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + path_ + "." + it.key());
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_encoder(const json& j, EncoderConfig& c) {
  Section s(j, "model.encoder");
  std::string variant;
  if (s.find_string("variant", variant)) {
    const auto v = parse_encoder_variant(variant);
    if (v != c.variant) c = EncoderConfig::defaults(v);
  }
  s.read("out_dim", c.out_dim);
  s.read("n_layers", c.n_layers);
  s.read("n_heads", c.n_heads);
  s.read("subsampling_factor", c.subsampling_factor);
  s.read("ff_mult", c.ff_mult);
  s.read("max_frames", c.max_frames);
  s.finish();
}

void parse_projector(const json& j, ProjectorConfig& c) {
  Section s(j, "model.projector");
  std::string kind;
  if (s.find_string("kind", kind)) {
    const auto k = parse_projector_kind(kind);
    if (k != c.kind) c = ProjectorConfig::defaults(k);
  }
  s.read("n_layers", c.n_layers);
  s.read("n_heads", c.n_heads);
  s.read("window_length", c.window_length);
  s.read("n_queries", c.n_queries);
  s.read("ff_mult", c.ff_mult);
  s.finish();
}

void parse_lm(const json& j, DecoderLmConfig& c) {
  Section s(j, "model.lm");
  s.read("characters", c.characters);
  s.read("embed_dim", c.embed_dim);
  s.read("n_layers", c.n_layers);
  s.read("n_heads", c.n_heads);
  s.read("ff_mult", c.ff_mult);
  s.read("max_positions", c.max_positions);
  if (auto t = s.find("chat_template")) {
    if (t->is_null()) {
      c.chat_template.reset();
    } else {
      Section ts(*t, "model.lm.chat_template");
      ChatTemplate tpl = c.chat_template.value_or(ChatTemplate{});
      ts.read("prefix", tpl.prefix);
      ts.read("suffix", tpl.suffix);
      ts.finish();
      c.chat_template = tpl;
    }
  }
  s.finish();
}

void parse_model(const json& j, ModelConfig& c) {
  Section s(j, "model");
  if (auto e = s.find("encoder")) parse_encoder(*e, c.encoder);
  if (auto p = s.find("projector")) parse_projector(*p, c.projector);
  if (auto l = s.find("lm")) parse_lm(*l, c.lm);
  if (auto l = s.find("lora")) {
    Section ls(*l, "model.lora");
    ls.read("rank", c.lora.rank);
    ls.read("alpha", c.lora.alpha);
    ls.finish();
  }
  s.read_enum("region_order", [&](const std::string& v) { c.region_order = parse_region_order(v); });
  s.read("prompt", c.prompt);
  s.finish();
}

StageSchedule parse_stages(const json& j) {
  if (!j.is_array()) throw ConfigError("stages must be an array");
  StageSchedule out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    Section s(j[i], "stages[" + std::to_string(i) + "]");
    Stage stage;
    auto groups = s.find("groups");
    if (!groups || !groups->is_array()) throw ConfigError(s.where("groups") + " must be an array of group names");
    for (const auto& g : *groups) {
      if (!g.is_string()) throw ConfigError(s.where("groups") + " must hold strings");
      stage.groups.insert(parse_param_group(g.get<std::string>()));
    }
    s.read("epochs", stage.epochs);
    s.finish();
    out.stages.push_back(std::move(stage));
  }
  return out;
}

void parse_optim(const json& j, OptimSettings& o, std::optional<std::size_t>& max_updates) {
  Section s(j, "optim");
  s.read("lr_peak", o.lr_peak);
  s.read("beta1", o.beta1);
  s.read("beta2", o.beta2);
  s.read("eps", o.eps);
  s.read("weight_decay", o.weight_decay);
  s.read("warmup_steps", o.warmup_steps);
  s.read("clip_value", o.clip_value);
  s.read("accum_steps", o.accum_steps);
  s.read("batch_points", o.batch_points);
  s.read("restart_schedule_per_stage", o.restart_schedule_per_stage);
  if (auto m = s.find("max_updates")) {
    if (m->is_null()) {
      max_updates.reset();
    } else if (m->is_number_unsigned()) {
      max_updates = m->get<std::size_t>();
    } else {
      throw ConfigError("optim.max_updates must be null or a non-negative integer");
    }
  }
  s.finish();
}

void parse_foundation(const json& j, FoundationSettings& f) {
  Section s(j, "data.foundation");
  s.read("seed", f.seed);
  s.read("min_chars", f.min_chars);
  s.read("max_chars", f.max_chars);
  s.read("lm_updates", f.lm_updates);
  s.read("lm_batch", f.lm_batch);
  s.read("lm_lr", f.lm_lr);
  s.read("speech_noise_std", f.speech_noise_std);
  s.read("encoder_updates", f.encoder_updates);
  s.read("encoder_batch", f.encoder_batch);
  s.read("encoder_lr", f.encoder_lr);
  s.read("augment_noise_max", f.augment_noise_max);
  s.read("mask_fraction", f.mask_fraction);
  s.read("lm_warmup", f.lm_warmup);
  s.read("encoder_warmup", f.encoder_warmup);
  s.finish();
}

void parse_data(const json& j, DataConfig& d) {
  Section s(j, "data");
  if (auto v = s.find("synth")) {
    Section ss(*v, "data.synth");
    auto& sp = d.synth;
    ss.read("characters", sp.characters);
    ss.read("frames_per_char", sp.frames_per_char);
    ss.read("feature_dim", sp.feature_dim);
    ss.read("noise_std", sp.noise_std);
    ss.read("noisy_noise_std", sp.noisy_noise_std);
    ss.read("accent_strength", sp.accent_strength);
    ss.read("seed", sp.seed);
    ss.read("lexicon_size", sp.lexicon_size);
    ss.read("min_word_len", sp.min_word_len);
    ss.read("max_word_len", sp.max_word_len);
    ss.read("min_words", sp.min_words);
    ss.read("max_words", sp.max_words);
    ss.finish();
  }
  if (auto v = s.find("sizes")) {
    Section ss(*v, "data.sizes");
    ss.read("train", d.sizes.train);
    ss.read("replicated", d.sizes.replicated);
    ss.read("replicated_weight", d.sizes.replicated_weight);
    ss.read("test", d.sizes.test);
    ss.finish();
  }
  if (auto v = s.find("foundation")) parse_foundation(*v, d.foundation);
  std::string dir;
  if (s.find_string("dir", dir)) d.dir = dir;
  s.finish();
}

void parse_eval(const json& j, EvalConfig& e) {
  Section s(j, "eval");
  if (auto v = s.find("test_sets")) {
    if (!v->is_array() || v->empty()) throw ConfigError("eval.test_sets must be a non-empty array");
    e.test_sets.clear();
    for (const auto& t : *v) {
      if (!t.is_string()) throw ConfigError("eval.test_sets must hold strings");
      Split split;
      try {
        split = parse_split(t.get<std::string>());
      } catch (const DataError& err) {
        throw ConfigError(std::string("eval.test_sets: ") + err.what());
      }
      if (split == Split::train) throw ConfigError("eval.test_sets cannot include train");
      e.test_sets.push_back(split);
    }
  }
  if (auto v = s.find("normalizer")) {
    Section ns(*v, "eval.normalizer");
    ns.read("strip_whitespace", e.normalizer.strip_whitespace);
    ns.read("case_fold", e.normalizer.case_fold);
    ns.read("punctuation", e.normalizer.punctuation);
    ns.finish();
  }
  s.read("max_decode_len", e.max_decode_len);
  s.finish();
}

json model_json(const ModelConfig& m) {
  json j;
  j["encoder"] = {{"variant", std::string(to_string(m.encoder.variant))},
                  {"out_dim", m.encoder.out_dim},
                  {"n_layers", m.encoder.n_layers},
                  {"n_heads", m.encoder.n_heads},
                  {"subsampling_factor", m.encoder.subsampling_factor},
                  {"ff_mult", m.encoder.ff_mult},
                  {"max_frames", m.encoder.max_frames}};
  j["projector"] = {{"kind", std::string(to_string(m.projector.kind))},
                    {"n_layers", m.projector.n_layers},
                    {"n_heads", m.projector.n_heads},
                    {"window_length", m.projector.window_length},
                    {"n_queries", m.projector.n_queries},
                    {"ff_mult", m.projector.ff_mult}};
  json lm = {{"characters", m.lm.characters},   {"embed_dim", m.lm.embed_dim}, {"n_layers", m.lm.n_layers},
             {"n_heads", m.lm.n_heads},         {"ff_mult", m.lm.ff_mult},     {"max_positions", m.lm.max_positions}};
  if (m.lm.chat_template) {
    lm["chat_template"] = {{"prefix", m.lm.chat_template->prefix}, {"suffix", m.lm.chat_template->suffix}};
  } else {
    lm["chat_template"] = nullptr;
  }
  j["lm"] = lm;
  j["lora"] = {{"rank", m.lora.rank}, {"alpha", m.lora.alpha}};
  j["region_order"] = std::string(to_string(m.region_order));
  j["prompt"] = m.prompt;
  return j;
}

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

RunConfig RunConfig::toy() {
  RunConfig c;
  c.optim.lr_peak = 5.0e-3;
  c.optim.warmup_steps = 100;
  c.optim.accum_steps = 2;
  c.optim.batch_points = 2000;
  c.model.lm.chat_template = ChatTemplate{"user: ", " assistant:"};
  return c;
}

RunConfig RunConfig::reference() {
  RunConfig c = toy();
  c.optim = OptimSettings{};
  return c;
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const TokenizerError& err) {
    // The prompt or chat template needs characters the LM cannot encode.
    throw ConfigError(std::string("model: ") + err.what());
  }
  stages.validate();
  optim.validate();
  data.synth.validate();
  if (data.synth.feature_dim != model.feature_dim) {
    throw ConfigError("model feature_dim " + std::to_string(model.feature_dim) + " != data.synth.feature_dim " +
                      std::to_string(data.synth.feature_dim));
  }
  const auto lm_chars = utf8::decode(model.lm.characters);
  for (char32_t c : utf8::decode(data.synth.characters)) {
    if (lm_chars.find(c) == std::u32string::npos) {
      throw ConfigError("synthesis character '" + utf8::encode(std::u32string(1, c)) +
                        "' is missing from the LM vocabulary");
    }
  }
  if (eval.test_sets.empty()) throw ConfigError("eval.test_sets is empty");
  if (eval.max_decode_len == 0) throw ConfigError("eval.max_decode_len must be positive");
  if (max_updates && *max_updates == 0) throw ConfigError("optim.max_updates must be positive");
}

RunConfig parse_run_config(const std::string& json_text, const RunConfig& base) {
  const json j = parse_text(json_text);
  RunConfig c = base;
  Section s(j, "config");
  if (auto v = s.find("model")) parse_model(*v, c.model);
  if (auto v = s.find("stages")) c.stages = parse_stages(*v);
  if (auto v = s.find("optim")) parse_optim(*v, c.optim, c.max_updates);
  if (auto v = s.find("data")) parse_data(*v, c.data);
  if (auto v = s.find("eval")) parse_eval(*v, c.eval);
  s.read("seed", c.seed);
  s.finish();
  c.model.feature_dim = c.data.synth.feature_dim;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), base);
}

std::string to_json(const RunConfig& c) {
  json j;
  j["model"] = model_json(c.model);
  json stages = json::array();
  for (const auto& st : c.stages.stages) {
    json groups = json::array();
    for (auto g : st.groups) groups.push_back(std::string(to_string(g)));
    stages.push_back({{"groups", groups}, {"epochs", st.epochs}});
  }
  j["stages"] = stages;
  const auto& o = c.optim;
  j["optim"] = {{"lr_peak", o.lr_peak},
                {"beta1", o.beta1},
                {"beta2", o.beta2},
                {"eps", o.eps},
                {"weight_decay", o.weight_decay},
                {"warmup_steps", o.warmup_steps},
                {"clip_value", o.clip_value},
                {"accum_steps", o.accum_steps},
                {"batch_points", o.batch_points},
                {"restart_schedule_per_stage", o.restart_schedule_per_stage},
                {"max_updates", c.max_updates ? json(*c.max_updates) : json(nullptr)}};
  const auto& sp = c.data.synth;
  const auto& f = c.data.foundation;
  j["data"] = {{"synth",
                {{"characters", sp.characters},
                 {"frames_per_char", sp.frames_per_char},
                 {"feature_dim", sp.feature_dim},
                 {"noise_std", sp.noise_std},
                 {"noisy_noise_std", sp.noisy_noise_std},
                 {"accent_strength", sp.accent_strength},
                 {"seed", sp.seed},
                 {"lexicon_size", sp.lexicon_size},
                 {"min_word_len", sp.min_word_len},
                 {"max_word_len", sp.max_word_len},
                 {"min_words", sp.min_words},
                 {"max_words", sp.max_words}}},
               {"sizes",
                {{"train", c.data.sizes.train},
                 {"replicated", c.data.sizes.replicated},
                 {"replicated_weight", c.data.sizes.replicated_weight},
                 {"test", c.data.sizes.test}}},
               {"foundation",
                {{"seed", f.seed},
                 {"min_chars", f.min_chars},
                 {"max_chars", f.max_chars},
                 {"lm_updates", f.lm_updates},
                 {"lm_batch", f.lm_batch},
                 {"lm_lr", f.lm_lr},
                 {"speech_noise_std", f.speech_noise_std},
                 {"encoder_updates", f.encoder_updates},
                 {"encoder_batch", f.encoder_batch},
                 {"encoder_lr", f.encoder_lr},
                 {"augment_noise_max", f.augment_noise_max},
                 {"mask_fraction", f.mask_fraction},
                 {"lm_warmup", f.lm_warmup},
                 {"encoder_warmup", f.encoder_warmup}}},
               {"dir", c.data.dir.string()}};
  json sets = json::array();
  for (auto s : c.eval.test_sets) sets.push_back(std::string(to_string(s)));
  j["eval"] = {{"test_sets", sets},
               {"normalizer",
                {{"strip_whitespace", c.eval.normalizer.strip_whitespace},
                 {"case_fold", c.eval.normalizer.case_fold},
                 {"punctuation", c.eval.normalizer.punctuation}}},
               {"max_decode_len", c.eval.max_decode_len}};
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

std::string model_to_json(const ModelConfig& model) {
  json j = model_json(model);
  j["feature_dim"] = model.feature_dim;
  return j.dump();
}

ModelConfig model_from_json(const std::string& json_text) {
  json j = parse_text(json_text);
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig m;
  auto fd = j.find("feature_dim");
  if (fd == j.end() || !fd->is_number_unsigned()) throw ConfigError("model config lacks feature_dim");
  m.feature_dim = fd->get<std::size_t>();
  j.erase("feature_dim");
  parse_model(j, m);
  m.validate();
  return m;
}

}  // namespace alignlab
