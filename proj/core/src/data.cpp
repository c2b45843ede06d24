#include "makd/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "makd/tensor.hpp"

namespace makd {

namespace {
constexpr uint64_t kShuffleStream = 0x73687566;  // epoch shuffles
constexpr uint64_t kMaskStream = 0x6d61736b;     // mlm corruption
constexpr uint64_t kCorpusStream = 0x636f7270;   // synthetic docs
}  // namespace

std::vector<int> Batch::label_positions(int i) const {
  std::vector<int> out;
  const auto& row = labels[static_cast<size_t>(i)];
  for (int t = 0; t < static_cast<int>(row.size()); ++t) {
    if (row[static_cast<size_t>(t)] >= 0) out.push_back(t);
  }
  return out;
}

std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("corpus: cannot open '" + path + "'");
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) docs.push_back(line);
  }
  if (docs.empty()) throw std::runtime_error("corpus: '" + path + "' holds no documents");
  return docs;
}

void write_corpus(const std::vector<std::string>& docs, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("corpus: cannot open '" + tmp + "' for writing");
    for (const std::string& d : docs) out << d << "\n";
    if (!out) throw std::runtime_error("corpus: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::vector<int>> make_examples(const Tokenizer& tok, const std::vector<std::string>& docs,
                                            int seq_len) {
  if (seq_len < 3) throw std::invalid_argument("make_examples: seq_len must be at least 3");
  const int body = seq_len - 2;  // room for <bos> and <eos>
  std::vector<std::vector<int>> examples;
  for (const std::string& doc : docs) {
    const std::vector<int> ids = tok.encode(doc);
    for (size_t off = 0; off < ids.size(); off += static_cast<size_t>(body)) {
      const size_t n = std::min(static_cast<size_t>(body), ids.size() - off);
      std::vector<int> ex;
      ex.reserve(n + 2);
      ex.push_back(Tokenizer::kBos);
      ex.insert(ex.end(), ids.begin() + static_cast<std::ptrdiff_t>(off),
                ids.begin() + static_cast<std::ptrdiff_t>(off + n));
      ex.push_back(Tokenizer::kEos);
      examples.push_back(std::move(ex));
    }
  }
  if (examples.empty()) throw std::invalid_argument("make_examples: no usable documents");
  return examples;
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(Rng::derive(seed, kShuffleStream, static_cast<uint64_t>(epoch)));
  for (size_t i = n; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

Batch make_batch(const std::vector<std::vector<int>>& examples, const std::vector<size_t>& idx, size_t begin,
                 int batch_size) {
  if (examples.empty() || idx.empty()) throw std::invalid_argument("make_batch: no examples");
  if (batch_size < 1) throw std::invalid_argument("make_batch: batch_size must be positive");
  Batch b;
  size_t max_len = 0;
  std::vector<const std::vector<int>*> picked;
  for (int j = 0; j < batch_size; ++j) {
    const std::vector<int>& ex = examples[idx[(begin + static_cast<size_t>(j)) % idx.size()]];
    picked.push_back(&ex);
    max_len = std::max(max_len, ex.size());
  }
  b.seq_len = static_cast<int>(max_len);
  for (const std::vector<int>* ex : picked) {
    std::vector<int> toks(max_len, Tokenizer::kPad);
    std::vector<uint8_t> attn(max_len, 0);
    std::copy(ex->begin(), ex->end(), toks.begin());
    std::fill(attn.begin(), attn.begin() + static_cast<std::ptrdiff_t>(ex->size()), uint8_t{1});
    b.tokens.push_back(std::move(toks));
    b.attn.push_back(std::move(attn));
    b.labels.emplace_back(max_len, -1);
  }
  return b;
}

Batch mlm_mask(const Batch& batch, const Tokenizer& tok, double mask_rate, uint64_t seed) {
  if (mask_rate <= 0.0 || mask_rate >= 1.0) {
    throw std::invalid_argument("mlm_mask: mask_rate must lie in (0, 1)");
  }
  const int n_real = tok.vocab_size() - Tokenizer::kNumSpecial;
  if (n_real < 1) throw std::invalid_argument("mlm_mask: vocabulary has no regular tokens");
  Batch out = batch;
  Rng rng(Rng::derive(seed, kMaskStream, 0));
  for (int i = 0; i < out.size(); ++i) {
    auto& toks = out.tokens[static_cast<size_t>(i)];
    auto& labels = out.labels[static_cast<size_t>(i)];
    const auto& attn = out.attn[static_cast<size_t>(i)];
    std::vector<int> cand;
    for (int t = 0; t < static_cast<int>(toks.size()); ++t) {
      if (attn[static_cast<size_t>(t)] && !tok.is_special(toks[static_cast<size_t>(t)])) cand.push_back(t);
    }
    if (cand.empty()) {
      ++out.skipped_sequences;
      continue;
    }
    const int want =
        std::max<int>(1, static_cast<int>(std::ceil(mask_rate * static_cast<double>(cand.size()))));
    const int n_pick = std::min<int>(want, static_cast<int>(cand.size()));
    for (int j = 0; j < n_pick; ++j) {
      const int k = j + static_cast<int>(rng.uniform_int(static_cast<int64_t>(cand.size() - static_cast<size_t>(j))));
      std::swap(cand[static_cast<size_t>(j)], cand[static_cast<size_t>(k)]);
      const int t = cand[static_cast<size_t>(j)];
      labels[static_cast<size_t>(t)] = toks[static_cast<size_t>(t)];
      const double r = rng.uniform();
      if (r < 0.8) {
        toks[static_cast<size_t>(t)] = Tokenizer::kMask;
      } else if (r < 0.9) {
        toks[static_cast<size_t>(t)] =
            Tokenizer::kNumSpecial + static_cast<int>(rng.uniform_int(n_real));
      }  // else keep the original token
    }
  }
  return out;
}

Batch causal_labels(const Batch& batch) {
  Batch out = batch;
  for (int i = 0; i < out.size(); ++i) {
    const auto& toks = out.tokens[static_cast<size_t>(i)];
    const auto& attn = out.attn[static_cast<size_t>(i)];
    auto& labels = out.labels[static_cast<size_t>(i)];
    for (size_t t = 0; t + 1 < toks.size(); ++t) {
      if (attn[t] && attn[t + 1]) labels[t] = toks[t + 1];
    }
  }
  return out;
}

// ---- synthetic corpora --------------------------------------------------

std::vector<std::string> gen_bracket_corpus(int docs, uint64_t seed) {
  if (docs < 1) throw std::invalid_argument("gen_bracket_corpus: need at least one doc");
  static const char* const open_w[] = {"la", "lb", "lc", "ld"};
  static const char* const close_w[] = {"ra", "rb", "rc", "rd"};
  std::vector<std::string> out;
  for (int d = 0; d < docs; ++d) {
    Rng rng(Rng::derive(seed, kCorpusStream, static_cast<uint64_t>(d)));
    const int target = 10 + static_cast<int>(rng.uniform_int(13));  // 10..22 tokens
    std::vector<int> stack;
    std::ostringstream os;
    int emitted = 0;
    bool first = true;
    while (emitted < target || !stack.empty()) {
      const bool must_close = emitted + static_cast<int>(stack.size()) >= target;
      const bool can_open = !must_close && static_cast<int>(stack.size()) < 5;
      const bool do_open = stack.empty() || (can_open && rng.uniform() < 0.55);
      if (!first) os << " ";
      first = false;
      if (do_open) {
        const int ty = static_cast<int>(rng.uniform_int(4));
        stack.push_back(ty);
        os << open_w[ty];
      } else {
        os << close_w[stack.back()];
        stack.pop_back();
      }
      ++emitted;
    }
    out.push_back(os.str());
  }
  return out;
}

std::vector<std::string> gen_mirror_corpus(int docs, uint64_t seed) {
  if (docs < 1) throw std::invalid_argument("gen_mirror_corpus: need at least one doc");
  std::vector<std::string> out;
  for (int d = 0; d < docs; ++d) {
    Rng rng(Rng::derive(seed, kCorpusStream ^ 0xff, static_cast<uint64_t>(d)));
    const int half = 4 + static_cast<int>(rng.uniform_int(5));  // 4..8 words per side
    std::vector<int> words;
    for (int i = 0; i < half; ++i) words.push_back(static_cast<int>(rng.uniform_int(24)));
    std::ostringstream os;
    for (int w : words) os << "v" << w << " ";
    os << "sep";
    for (auto it = words.rbegin(); it != words.rend(); ++it) os << " v" << *it;
    out.push_back(os.str());
  }
  return out;
}

// Deterministic two-token answer for an (entity, relation) pair.
static void fact_answer(int e, int r, int* a0, int* a1) {
  *a0 = (e * 7 + r * 13 + 3) % 48;
  *a1 = (e * 5 + r * 11 + 1) % 48;
}

std::vector<std::string> gen_instruction_corpus(int docs, uint64_t seed) {
  if (docs < 1) throw std::invalid_argument("gen_instruction_corpus: need at least one doc");
  std::vector<std::string> out;
  for (int d = 0; d < docs; ++d) {
    Rng rng(Rng::derive(seed, kCorpusStream ^ 0xa5a5, static_cast<uint64_t>(d)));
    const int e = static_cast<int>(rng.uniform_int(24));
    const int r = static_cast<int>(rng.uniform_int(6));
    int a0 = 0, a1 = 0;
    fact_answer(e, r, &a0, &a1);
    std::ostringstream os;
    os << "ask e" << e << " r" << r << " : t" << a0 << " t" << a1 << " done";
    out.push_back(os.str());
  }
  return out;
}

std::vector<int> instruction_prompt(const Tokenizer& tok, const std::string& doc) {
  const std::vector<std::string> words = split_words(doc);
  std::vector<int> ids = {Tokenizer::kBos};
  bool saw_colon = false;
  for (const std::string& w : words) {
    ids.push_back(tok.encode_token(w));
    if (w == ":") {
      saw_colon = true;
      break;
    }
  }
  if (!saw_colon) throw std::invalid_argument("instruction_prompt: doc has no ':' separator");
  return ids;
}

}  // namespace makd
