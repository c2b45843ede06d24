#include "makd/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

namespace makd {

static const char* const kSpecialNames[] = {"<pad>", "<unk>", "<mask>", "<bos>", "<eos>"};

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

int Tokenizer::encode_token(const std::string& word) const {
  auto it = token_to_id.find(word);
  return it == token_to_id.end() ? kUnk : it->second;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const std::string& w : split_words(text)) ids.push_back(encode_token(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids, bool keep_special) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw std::invalid_argument("decode: id " + std::to_string(id) + " out of range");
    if (!keep_special && is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += id_to_token[static_cast<size_t>(id)];
  }
  return out;
}

Tokenizer build_tokenizer(const std::vector<std::string>& docs, int max_vocab) {
  if (docs.empty()) throw std::invalid_argument("build_tokenizer: empty corpus");
  if (max_vocab <= Tokenizer::kNumSpecial) {
    throw std::invalid_argument("build_tokenizer: max_vocab must exceed " +
                                std::to_string(Tokenizer::kNumSpecial));
  }
  // std::map keeps ties alphabetical without an extra sort key.
  std::map<std::string, int64_t> counts;
  for (const std::string& doc : docs) {
    for (const std::string& w : split_words(doc)) ++counts[w];
  }
  if (counts.empty()) throw std::invalid_argument("build_tokenizer: corpus holds no tokens");
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Tokenizer tok;
  for (const char* s : kSpecialNames) tok.id_to_token.emplace_back(s);
  for (const auto& [word, count] : ranked) {
    if (tok.vocab_size() >= max_vocab) break;
    tok.id_to_token.push_back(word);
  }
  for (int i = 0; i < tok.vocab_size(); ++i) tok.token_to_id[tok.id_to_token[static_cast<size_t>(i)]] = i;
  return tok;
}

void save_tokenizer(const Tokenizer& tok, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("tokenizer: cannot open '" + tmp + "' for writing");
    out << "makd-vocab v1\n";
    for (const std::string& t : tok.id_to_token) out << t << "\n";
    if (!out) throw std::runtime_error("tokenizer: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

Tokenizer load_tokenizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("tokenizer: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "makd-vocab v1") {
    throw std::runtime_error("tokenizer: '" + path + "' is not a vocab file");
  }
  Tokenizer tok;
  while (std::getline(in, line)) {
    if (!line.empty()) tok.id_to_token.push_back(line);
  }
  if (tok.vocab_size() < Tokenizer::kNumSpecial) {
    throw std::runtime_error("tokenizer: '" + path + "' lacks the reserved tokens");
  }
  for (int i = 0; i < Tokenizer::kNumSpecial; ++i) {
    if (tok.id_to_token[static_cast<size_t>(i)] != kSpecialNames[i]) {
      throw std::runtime_error("tokenizer: '" + path + "' has the wrong reserved token order");
    }
  }
  for (int i = 0; i < tok.vocab_size(); ++i) tok.token_to_id[tok.id_to_token[static_cast<size_t>(i)]] = i;
  return tok;
}

}  // namespace makd
