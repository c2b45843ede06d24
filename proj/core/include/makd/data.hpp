#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "makd/tokenizer.hpp"

namespace makd {

// One training batch; sequences are padded to a common length and the
// attention mask marks the real positions. labels holds -1 where no label
// applies (unmasked positions for MLM, pads and the last position for
// causal LM).
struct Batch {
  int seq_len = 0;
  std::vector<std::vector<int>> tokens;      // [B][T]
  std::vector<std::vector<uint8_t>> attn;    // [B][T], 1 = attendable
  std::vector<std::vector<int>> labels;      // [B][T], -1 = no label
  int skipped_sequences = 0;                 // had no maskable position

  int size() const { return static_cast<int>(tokens.size()); }
  // Positions of sequence i that carry labels, ascending.
  std::vector<int> label_positions(int i) const;
};

std::vector<std::string> read_corpus(const std::string& path);
void write_corpus(const std::vector<std::string>& docs, const std::string& path);

// Encodes each doc as <bos> words <eos>, chunking long docs so no example
// exceeds seq_len tokens.
std::vector<std::vector<int>> make_examples(const Tokenizer& tok, const std::vector<std::string>& docs,
                                            int seq_len);

// Deterministic shuffled index order for one epoch.
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch);

// Batch of examples[idx[begin .. begin+batch_size)], wrapping around idx.
Batch make_batch(const std::vector<std::vector<int>>& examples, const std::vector<size_t>& idx, size_t begin,
                 int batch_size);

// Standard MLM corruption: mask_rate of the non-special positions per
// sequence (at least one), 80% -> <mask>, 10% -> random token, 10% kept;
// labels carry the original ids. Deterministic under seed.
Batch mlm_mask(const Batch& batch, const Tokenizer& tok, double mask_rate, uint64_t seed);

// Next-token labels at every real position except the last.
Batch causal_labels(const Batch& batch);

// ---- synthetic corpora --------------------------------------------------

// Balanced nested bracket words ("la .. ra" pairs of four types): closing
// tokens are predictable from their matching opener across the sequence.
std::vector<std::string> gen_bracket_corpus(int docs, uint64_t seed);
// "w1 .. wn sep wn .. w1" mirror sentences over a small word inventory.
std::vector<std::string> gen_mirror_corpus(int docs, uint64_t seed);
// "ask <entity> <relation> : <answer> done" with a fixed fact table, for
// the decoder pipeline.
std::vector<std::string> gen_instruction_corpus(int docs, uint64_t seed);
// The prompt prefix of an instruction doc (up to and including ":").
std::vector<int> instruction_prompt(const Tokenizer& tok, const std::string& doc);

}  // namespace makd
