#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pvlseg/core/errors.hpp"

namespace pvlseg {

// Lowercased word tokens. Letters, digits and in-word hyphens are kept
// ("upper-left" is one token); everything else separates.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && cur.back() == '-') cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) cur.push_back(static_cast<char>(std::tolower(c)));
    else if (ch == '-' && !cur.empty()) cur.push_back('-');
    else flush();
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kUnk = 2;
  static constexpr const char* kReserved[3] = {"[PAD]", "[EOS]", "[UNK]"};

  Vocabulary() : tokens_(std::begin(kReserved), std::end(kReserved)) { reindex(); }

  // Sorted token set of the corpus after the reserved rows.
  static Vocabulary build(const std::vector<std::string>& corpus) {
    std::set<std::string> words;
    for (const auto& line : corpus)
      for (auto& w : tokenize(line)) words.insert(std::move(w));
    Vocabulary v;
    for (const auto& w : words) v.tokens_.push_back(w);
    v.reindex();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::size_t id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }

  // Fixed-length id row: tokens (truncated to max_len - 1), [EOS], [PAD]...
  std::vector<std::size_t> encode(std::string_view text, std::size_t max_len, std::size_t* unknown = nullptr) const {
    if (max_len < 2) throw ConfigError("vocabulary: max prompt length must be >= 2");
    std::vector<std::size_t> ids;
    std::size_t unk = 0;
    for (const auto& w : tokenize(text)) {
      if (ids.size() + 1 >= max_len) break;
      const std::size_t i = id(w);
      unk += i == kUnk;
      ids.push_back(i);
    }
    ids.push_back(kEos);
    ids.resize(max_len, kPad);
    if (unknown) *unknown = unk;
    return ids;
  }

  // One token per line; line number is the id, reserved rows first.
  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("vocabulary: cannot write " + path);
    for (const auto& t : tokens_) f << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("vocabulary: cannot read " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) tokens.push_back(line);
    return from_tokens(std::move(tokens), path);
  }

  static Vocabulary from_tokens(std::vector<std::string> tokens, const std::string& origin = "token list") {
    if (tokens.size() < 3 || tokens[0] != kReserved[0] || tokens[1] != kReserved[1] || tokens[2] != kReserved[2]) {
      throw InputError("vocabulary: " + origin + " lacks the reserved [PAD]/[EOS]/[UNK] rows");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.reindex();
    return v;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace pvlseg
