#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace makd {

// Word-level vocabulary: lowercased whitespace tokens, frequency-ranked,
// with five reserved ids up front.
struct Tokenizer {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kMask = 2;
  static constexpr int kBos = 3;
  static constexpr int kEos = 4;
  static constexpr int kNumSpecial = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int vocab_size() const { return static_cast<int>(id_to_token.size()); }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }

  int encode_token(const std::string& word) const;
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids, bool keep_special = false) const;
};

std::vector<std::string> split_words(const std::string& text);

// Frequency-ranked vocabulary over all docs, ties broken alphabetically,
// truncated to max_vocab ids including the specials.
Tokenizer build_tokenizer(const std::vector<std::string>& docs, int max_vocab);

void save_tokenizer(const Tokenizer& tok, const std::string& path);
Tokenizer load_tokenizer(const std::string& path);

}  // namespace makd
