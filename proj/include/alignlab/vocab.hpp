#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace alignlab {

// Character tokenizer. Ids 0..2 are the specials; characters follow in the
// order given at construction.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kNumSpecials = 3;

  Vocabulary() = default;
  // `characters` is UTF-8; duplicates are a ConfigError.
  explicit Vocabulary(std::string_view characters);

  std::size_t size() const { return kNumSpecials + chars_.size(); }
  const std::u32string& characters() const { return chars_; }
  std::string characters_utf8() const;

  bool contains(char32_t c) const { return index_.count(c) != 0; }
  // Throws TokenizerError naming every out-of-vocabulary character.
  std::vector<std::size_t> encode(std::string_view text) const;
  // Specials are dropped.
  std::string decode(std::span<const std::size_t> ids) const;
  std::string token_text(std::size_t id) const;

 private:
  std::u32string chars_;
  std::map<char32_t, std::size_t> index_;
};

}  // namespace alignlab
