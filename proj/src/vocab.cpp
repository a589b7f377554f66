#include "alignlab/vocab.hpp"

#include <set>

#include "alignlab/errors.hpp"
#include "alignlab/utf8.hpp"

namespace alignlab {

Vocabulary::Vocabulary(std::string_view characters) : chars_(utf8::decode(characters)) {
  for (std::size_t i = 0; i < chars_.size(); ++i) {
    if (!index_.emplace(chars_[i], kNumSpecials + i).second) {
      throw ConfigError("duplicate vocabulary character '" + utf8::encode(chars_[i]) + "'");
    }
  }
}

std::string Vocabulary::characters_utf8() const { return utf8::encode(chars_); }

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
  const auto cps = utf8::decode(text);
  std::vector<std::size_t> ids;
  ids.reserve(cps.size());
  std::set<char32_t> missing;
  for (char32_t c : cps) {
    auto it = index_.find(c);
    if (it == index_.end()) {
      missing.insert(c);
      continue;
    }
    ids.push_back(it->second);
  }
  if (!missing.empty()) {
    std::string list;
    for (char32_t c : missing) {
      if (!list.empty()) list += ", ";
      list += "'" + utf8::encode(c) + "'";
    }
    throw TokenizerError("characters not in vocabulary: " + list);
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const std::size_t> ids) const {
  std::u32string out;
  for (auto id : ids) {
    if (id < kNumSpecials) continue;
    if (id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    out.push_back(chars_[id - kNumSpecials]);
  }
  return utf8::encode(out);
}

std::string Vocabulary::token_text(std::size_t id) const {
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    default: break;
  }
  if (id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return utf8::encode(chars_[id - kNumSpecials]);
}

}  // namespace alignlab
