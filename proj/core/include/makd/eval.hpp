#pragma once

#include <string>
#include <vector>

#include "makd/data.hpp"
#include "makd/model.hpp"

namespace makd {

// Fraction of labelled (masked) positions whose argmax logit matches the
// label. Encoder models only.
double masked_accuracy(const TransformerModel& model, const std::vector<Batch>& batches);

struct AgreementReport {
  double logit_kl = 0.0;            // mean per-position KL(teacher || student)
  double top1_agreement = 0.0;      // argmax match rate over positions
  std::vector<double> attn_kl;      // per layer, mean over heads and rows
};

AgreementReport agreement(const TransformerModel& student, const TransformerModel& teacher,
                          const std::vector<Batch>& batches);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
  bool empty_candidate = false;  // P undefined, returned as 0 by convention
};

// LCS-based Rouge-L over token sequences; reference must be non-empty.
RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);
RougeScore rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference);

// Greedy next-token decoding until eos_id or max_new tokens; returns the
// full sequence including the prompt. Decoder models only.
std::vector<int> greedy_decode(const TransformerModel& model, const std::vector<int>& prompt, int max_new);

struct ThroughputReport {
  double tokens_per_sec = 0.0;
  double median_forward_seconds = 0.0;
  int64_t linear_macs_per_token = 0;
  int seq_len = 0;
  int repetitions = 0;
};

// Median wall-clock forward throughput over repetitions (after 2 warmup
// passes) plus the analytic per-token MAC count.
ThroughputReport throughput_bench(const TransformerModel& model, int seq_len, int repetitions);

}  // namespace makd
