#pragma once

// Closed caption grammar and its whitespace tokenizer.

#include <array>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cliplite {

inline constexpr std::size_t kMaxCaptionLength = 16;

class UnknownTokenError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TokenSequence {
  std::vector<int> ids;

  std::size_t length() const noexcept { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

namespace grammar {

inline constexpr std::array<std::string_view, 3> kShapes{"square", "disk", "cross"};
inline constexpr std::array<std::string_view, 3> kColors{"red", "green", "blue"};
/// Texture classes: 0 = striped, 1 = dotted. Each class has two surface words.
inline constexpr std::array<std::array<std::string_view, 2>, 2> kTextureWords{
    {{"striped", "lined"}, {"dotted", "spotted"}}};
inline constexpr std::array<std::string_view, 3> kRows{"top", "middle", "bottom"};
inline constexpr std::array<std::string_view, 3> kCols{"left", "center", "right"};
inline constexpr std::array<std::string_view, 6> kFunctionWords{"a",       "at", "photo",
                                                                "picture", "of", "shape"};

}  // namespace grammar

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  /// `words` excludes the two specials, which always take ids 0 and 1.
  explicit Vocabulary(const std::vector<std::string>& words) {
    add("<pad>");
    add("<unk>");
    for (const auto& w : words) {
      if (index_.contains(w)) throw std::invalid_argument("vocabulary: duplicate word '" + w + "'");
      add(w);
    }
  }

  /// Vocabulary of the captioned-shapes grammar plus prompt words.
  static const Vocabulary& shapes() {
    static const Vocabulary v = [] {
      std::vector<std::string> words;
      for (auto w : grammar::kFunctionWords) words.emplace_back(w);
      for (const auto& cls : grammar::kTextureWords)
        for (auto w : cls) words.emplace_back(w);
      for (auto w : grammar::kColors) words.emplace_back(w);
      for (auto w : grammar::kShapes) words.emplace_back(w);
      for (auto w : grammar::kRows) words.emplace_back(w);
      for (auto w : grammar::kCols) words.emplace_back(w);
      return Vocabulary(words);
    }();
    return v;
  }

  std::size_t size() const noexcept { return words_.size(); }
  bool contains(std::string_view w) const { return index_.contains(std::string(w)); }

  int id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) throw UnknownTokenError("unknown token '" + std::string(w) + "'");
    return it->second;
  }

  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  /// Strict whitespace tokenization: unknown words and over-long captions are errors.
  TokenSequence tokenize(std::string_view text) const {
    TokenSequence seq;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) seq.ids.push_back(id(w));
    if (seq.ids.empty()) throw std::invalid_argument("tokenize: empty text");
    if (seq.ids.size() > kMaxCaptionLength) {
      throw std::invalid_argument("tokenize: " + std::to_string(seq.ids.size()) +
                                  " tokens exceed max length " +
                                  std::to_string(kMaxCaptionLength));
    }
    return seq;
  }

  std::string detokenize(const TokenSequence& seq) const {
    std::string out;
    for (int id : seq.ids) {
      if (id == kPad) continue;
      if (!out.empty()) out += ' ';
      out += word(id);
    }
    return out;
  }

  void validate(const TokenSequence& seq) const {
    if (seq.ids.empty() || seq.ids.size() > kMaxCaptionLength) {
      throw std::invalid_argument("token sequence length " + std::to_string(seq.ids.size()) +
                                  " outside [1, " + std::to_string(kMaxCaptionLength) + "]");
    }
    for (int id : seq.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= size()) {
        throw UnknownTokenError("token id " + std::to_string(id) + " outside vocabulary");
      }
    }
  }

 private:
  void add(const std::string& w) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace cliplite
