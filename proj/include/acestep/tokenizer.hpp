#pragma once

// Byte-level lyric tokenizer with structural tags.

#include "acestep/core.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace acestep {

enum SpecialToken : int {
  kTokVerse = 256,
  kTokChorus,
  kTokBridge,
  kTokInst,
  kTokInstrumental,
  kTokPad,
  kTokBos,
  kTokEos,
};

inline constexpr int kLyricVocabSize = 264;

struct LyricTokens {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  bool operator==(const LyricTokens&) const = default;
};

inline bool is_byte_token(int id) { return id >= 0 && id < 256; }
inline bool is_structure_token(int id) { return id == kTokVerse || id == kTokChorus || id == kTokBridge; }
inline bool is_instrumental_token(int id) { return id == kTokInst || id == kTokInstrumental; }

namespace detail {

struct TagName {
  std::string_view name;
  int id;
};

inline constexpr std::array<TagName, 5> kTags{{
    {"verse", kTokVerse},
    {"chorus", kTokChorus},
    {"bridge", kTokBridge},
    {"inst", kTokInst},
    {"instrumental", kTokInstrumental},
}};

inline int lookup_tag(std::string_view inner) {
  std::string lower(inner);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& t : kTags)
    if (t.name == lower) return t.id;
  return -1;
}

}  // namespace detail

// Known bracket tags map to special tokens; everything else (including
// unknown bracket tags, reported through `warnings`) maps to raw bytes.
// Output is framed by BOS/EOS.
inline LyricTokens tokenize_lyrics(std::string_view text, std::vector<std::string>* warnings = nullptr) {
  LyricTokens out;
  out.ids.push_back(kTokBos);
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '[') {
      const std::size_t close = text.find(']', i + 1);
      if (close != std::string_view::npos) {
        const int id = detail::lookup_tag(text.substr(i + 1, close - i - 1));
        if (id >= 0) {
          out.ids.push_back(id);
          i = close + 1;
          continue;
        }
        if (warnings) warnings->push_back("unknown tag '" + std::string(text.substr(i, close - i + 1)) + "' kept as text");
      }
    }
    out.ids.push_back(static_cast<unsigned char>(text[i]));
    ++i;
  }
  out.ids.push_back(kTokEos);

  const bool instrumental = std::any_of(out.ids.begin(), out.ids.end(), is_instrumental_token);
  if (instrumental) {
    std::vector<int> content;
    for (int id : out.ids) {
      if (id == kTokBos || id == kTokEos) continue;
      if (is_byte_token(id) && std::isspace(id)) continue;
      content.push_back(id);
    }
    require(content.size() == 1, ErrorKind::kInvalidArgument,
            "[inst]/[instrumental] must be the only lyric content");
    out.ids = {kTokBos, content.front(), kTokEos};
  }
  require(out.ids.size() <= static_cast<std::size_t>(kMaxLyricTokens), ErrorKind::kBudgetExceeded,
          "lyrics tokenize to " + std::to_string(out.ids.size()) + " tokens, over the " +
              std::to_string(kMaxLyricTokens) + "-token budget");
  return out;
}

// Inverse of tokenize_lyrics for well-formed token lists.
inline std::string detokenize_lyrics(const LyricTokens& tokens) {
  std::string out;
  for (int id : tokens.ids) {
    if (is_byte_token(id)) {
      out.push_back(static_cast<char>(id));
    } else {
      for (const auto& t : detail::kTags)
        if (t.id == id) out += "[" + std::string(t.name) + "]";
    }
  }
  return out;
}

inline bool is_instrumental(const LyricTokens& tokens) {
  return std::any_of(tokens.ids.begin(), tokens.ids.end(), is_instrumental_token);
}

}  // namespace acestep
