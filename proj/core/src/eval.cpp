#include "makd/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "makd/distill.hpp"
#include "makd/factorize.hpp"

namespace makd {

namespace {

int argmax_row(const Tensor& t, int row) {
  const double* p = t.data() + static_cast<size_t>(row) * t.cols();
  int best = 0;
  for (int j = 1; j < t.cols(); ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

// KL(p || q) over one distribution row with the same probability clamp the
// training losses use.
double kl_row(const double* p, const double* q, int n) {
  double acc = 0.0;
  for (int j = 0; j < n; ++j) {
    const double pj = std::max(p[j], kKlEpsilon);
    const double qj = std::max(q[j], kKlEpsilon);
    acc += pj * (std::log(pj) - std::log(qj));
  }
  return acc;
}

}  // namespace

double masked_accuracy(const TransformerModel& model, const std::vector<Batch>& batches) {
  if (model.config.kind != ModelKind::EncoderMlm) {
    throw std::invalid_argument("masked_accuracy: model is not encoder-mlm");
  }
  int64_t hits = 0, total = 0;
  for (const Batch& batch : batches) {
    for (int i = 0; i < batch.size(); ++i) {
      const std::vector<int> rows = batch.label_positions(i);
      if (rows.empty()) continue;
      const ActivationTrace tr = model_forward(model, batch.tokens[static_cast<size_t>(i)],
                                               batch.attn[static_cast<size_t>(i)]);
      for (int r : rows) {
        hits += argmax_row(tr.logits, r) == batch.labels[static_cast<size_t>(i)][static_cast<size_t>(r)];
        ++total;
      }
    }
  }
  if (total == 0) throw std::invalid_argument("masked_accuracy: batches hold no labelled positions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

AgreementReport agreement(const TransformerModel& student, const TransformerModel& teacher,
                          const std::vector<Batch>& batches) {
  const ModelConfig& sc = student.config;
  const ModelConfig& tc = teacher.config;
  if (sc.layers != tc.layers || sc.hidden != tc.hidden || sc.heads != tc.heads ||
      sc.vocab_size != tc.vocab_size || sc.kind != tc.kind) {
    throw std::invalid_argument("agreement: student and teacher architectures differ");
  }
  AgreementReport rep;
  rep.attn_kl.assign(static_cast<size_t>(tc.layers), 0.0);
  int64_t positions = 0, top1 = 0;
  double logit_kl = 0.0;
  std::vector<double> attn_acc(static_cast<size_t>(tc.layers), 0.0);
  std::vector<int64_t> attn_rows(static_cast<size_t>(tc.layers), 0);

  for (const Batch& batch : batches) {
    for (int i = 0; i < batch.size(); ++i) {
      const auto& toks = batch.tokens[static_cast<size_t>(i)];
      const auto& attn = batch.attn[static_cast<size_t>(i)];
      const ActivationTrace ts = model_forward(student, toks, attn);
      const ActivationTrace tt = model_forward(teacher, toks, attn);
      const Tensor ps = softmax_rows(ts.logits);
      const Tensor pt = softmax_rows(tt.logits);
      for (int r : ts.valid_rows) {
        logit_kl += kl_row(pt.data() + static_cast<size_t>(r) * pt.cols(),
                           ps.data() + static_cast<size_t>(r) * ps.cols(), pt.cols());
        top1 += argmax_row(ts.logits, r) == argmax_row(tt.logits, r);
        ++positions;
      }
      for (int l = 0; l < tc.layers; ++l) {
        const LayerTrace& sl = ts.layers[static_cast<size_t>(l)];
        const LayerTrace& tl = tt.layers[static_cast<size_t>(l)];
        for (size_t a = 0; a < tl.attn.size(); ++a) {
          const int n = tl.attn[a].cols();
          for (int r : ts.valid_rows) {
            attn_acc[static_cast<size_t>(l)] += kl_row(tl.attn[a].data() + static_cast<size_t>(r) * n,
                                                       sl.attn[a].data() + static_cast<size_t>(r) * n, n);
            ++attn_rows[static_cast<size_t>(l)];
          }
        }
      }
    }
  }
  if (positions == 0) throw std::invalid_argument("agreement: batches hold no positions");
  rep.logit_kl = logit_kl / static_cast<double>(positions);
  rep.top1_agreement = static_cast<double>(top1) / static_cast<double>(positions);
  for (int l = 0; l < tc.layers; ++l) {
    rep.attn_kl[static_cast<size_t>(l)] =
        attn_rows[static_cast<size_t>(l)] > 0
            ? attn_acc[static_cast<size_t>(l)] / static_cast<double>(attn_rows[static_cast<size_t>(l)])
            : 0.0;
  }
  return rep;
}

template <typename T>
static RougeScore rouge_impl(const std::vector<T>& cand, const std::vector<T>& ref) {
  if (ref.empty()) throw std::invalid_argument("rouge_l: empty reference");
  RougeScore s;
  if (cand.empty()) {
    s.empty_candidate = true;
    return s;
  }
  // Two-row LCS table.
  const size_t n = cand.size(), m = ref.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      cur[j] = cand[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = prev[m];
  s.precision = lcs / static_cast<double>(n);
  s.recall = lcs / static_cast<double>(m);
  s.f = lcs > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  return rouge_impl(candidate, reference);
}

RougeScore rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference) {
  return rouge_impl(candidate, reference);
}

std::vector<int> greedy_decode(const TransformerModel& model, const std::vector<int>& prompt, int max_new) {
  if (model.config.kind != ModelKind::DecoderCausal) {
    throw std::invalid_argument("greedy_decode: model is not decoder-causal");
  }
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  std::vector<int> ids = prompt;
  for (int i = 0; i < max_new; ++i) {
    if (static_cast<int>(ids.size()) >= model.config.max_seq_len) break;
    const ActivationTrace tr = model_forward(model, ids);
    const int next = argmax_row(tr.logits, static_cast<int>(ids.size()) - 1);
    ids.push_back(next);
    if (next == Tokenizer::kEos) break;
  }
  return ids;
}

ThroughputReport throughput_bench(const TransformerModel& model, int seq_len, int repetitions) {
  if (seq_len < 1 || seq_len > model.config.max_seq_len) {
    throw std::invalid_argument("throughput_bench: seq_len outside [1, max_seq_len]");
  }
  if (repetitions < 1) throw std::invalid_argument("throughput_bench: repetitions must be positive");
  Rng rng(Rng::derive(0x62656e63, 0, 0));
  std::vector<int> toks(static_cast<size_t>(seq_len));
  for (int& t : toks) t = static_cast<int>(rng.uniform_int(model.config.vocab_size));
  for (int i = 0; i < 2; ++i) (void)model_forward(model, toks);
  std::vector<double> secs;
  for (int i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)model_forward(model, toks);
    const auto t1 = std::chrono::steady_clock::now();
    secs.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(secs.begin(), secs.end());
  ThroughputReport rep;
  rep.seq_len = seq_len;
  rep.repetitions = repetitions;
  rep.median_forward_seconds = secs[secs.size() / 2];
  rep.tokens_per_sec = rep.median_forward_seconds > 0.0 ? seq_len / rep.median_forward_seconds : 0.0;
  rep.linear_macs_per_token = linear_macs_per_token(model);
  return rep;
}

}  // namespace makd
