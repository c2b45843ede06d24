#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "makd/data.hpp"
#include "makd/distill.hpp"
#include "makd/model.hpp"
#include "makd/tokenizer.hpp"

namespace makd {

enum class TrainMode { TeacherPretrain, DistillMakd, DistillLogitOnly };

std::string mode_to_string(TrainMode m);
TrainMode mode_from_string(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::DistillMakd;
  int64_t steps = 2000;
  int batch_size = 8;
  // Production-scale orientation: batch 512, peak lr 1e-4, 400k steps;
  // desk-scale runs use far smaller values.
  double peak_lr = 1e-3;
  double warmup_frac = 0.06;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  double mask_rate = 0.15;
  uint64_t seed = 42;
  int64_t eval_interval = 100;       // metrics-record cadence in steps
  int64_t checkpoint_interval = 0;   // 0 = final save only
  // Pause after this many steps (snapshotting as usual) while keeping the
  // lr schedule pinned to `steps`; 0 runs to completion. A paused run plus
  // a resumed one replays an uninterrupted run exactly.
  int64_t halt_after = 0;

  void validate() const;
};

// Linear warmup to peak over warmup_frac of the run, then linear decay to
// zero at the final step.
double lr_at(const TrainConfig& cfg, int64_t step);

struct AdamState {
  int64_t step = 0;           // completed optimizer steps
  std::vector<Tensor> m, v;   // first/second moments, parameter order
};

// Decoupled-weight-decay Adam with bias correction, applied in place.
// Aborts with the parameter name on a non-finite gradient.
void adamw_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads, AdamState& state,
                double lr, const TrainConfig& cfg);

// Scales grads in place to cap the global L2 norm; returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);

void save_train_state(const AdamState& state, const std::vector<ParamRef>& params, uint64_t seed,
                      const std::string& path);
AdamState load_train_state(const std::string& path, const std::vector<ParamRef>& params, uint64_t expected_seed);

// Output plumbing for a training run. Empty paths disable the feature.
struct RunIO {
  std::string metrics_path;     // metrics log, appended per eval interval
  std::string out_checkpoint;   // model written here (periodically + at end)
  std::string resume_state;     // optimizer state to resume from
};

struct TrainResult {
  std::vector<std::string> metrics_lines;
  int64_t final_step = 0;
};

// Masked-LM (encoder) or next-token (decoder) pretraining with hard CE.
TrainResult pretrain(TransformerModel& model, const std::vector<std::vector<int>>& examples,
                     const Tokenizer& tok, const TrainConfig& cfg, const RunIO& io);

// Distillation: the teacher is frozen, teacher and student see identical
// corrupted batches each step, and the objective is the plan's combined
// loss. Aborts (keeping the last checkpoint) if the loss goes non-finite.
TrainResult distill_run(const TransformerModel& teacher, TransformerModel& student,
                        const std::vector<std::vector<int>>& examples, const Tokenizer& tok,
                        const DistillPlan& plan, const TrainConfig& cfg, const RunIO& io);

}  // namespace makd
