#include "makd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "makd/checkpoint.hpp"

namespace makd {

namespace {

constexpr uint64_t kMlmSeedStream = 0x6d6c6d;

inline constexpr const char* kStateMagic = "makd-trainstate v1";

std::string fmt_g(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Deterministic batch schedule: step t consumes examples [t*B, (t+1)*B)
// of the concatenated epoch shuffles, so resuming at step t needs no
// carried RNG state.
struct BatchSchedule {
  const std::vector<std::vector<int>>* examples;
  uint64_t seed;
  int batch;
  int64_t cached_epoch = -1;
  std::vector<size_t> order;

  Batch at_step(int64_t step) {
    const int64_t n = static_cast<int64_t>(examples->size());
    const int64_t pos = step * batch;
    const int64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      order = epoch_order(static_cast<size_t>(n), seed, epoch);
      cached_epoch = epoch;
    }
    return make_batch(*examples, order, static_cast<size_t>(pos % n), batch);
  }
};

LossReport mean_reports(const std::vector<LossReport>& reps) {
  LossReport out;
  if (reps.empty()) return out;
  const double inv = 1.0 / static_cast<double>(reps.size());
  out.per_layer = reps.front().per_layer;
  for (auto& row : out.per_layer) row.attn = row.hidn = row.mha = row.ffn = 0.0;
  for (const LossReport& r : reps) {
    out.matrix_total += r.matrix_total * inv;
    out.layer_total += r.layer_total * inv;
    out.model_loss += r.model_loss * inv;
    out.total += r.total * inv;
    for (size_t i = 0; i < r.per_layer.size(); ++i) {
      out.per_layer[i].attn += r.per_layer[i].attn * inv;
      out.per_layer[i].hidn += r.per_layer[i].hidn * inv;
      out.per_layer[i].mha += r.per_layer[i].mha * inv;
      out.per_layer[i].ffn += r.per_layer[i].ffn * inv;
    }
  }
  return out;
}

// Running sums over one metrics interval.
struct IntervalAccum {
  int64_t count = 0;
  double ce = 0.0, total = 0.0, matrix = 0.0, layer = 0.0, model = 0.0, grad_norm = 0.0;
  std::vector<LossReport::Row> rows;

  void add(const LossReport& r, double gn) {
    if (rows.empty()) {
      rows = r.per_layer;
    } else {
      for (size_t i = 0; i < r.per_layer.size(); ++i) {
        rows[i].attn += r.per_layer[i].attn;
        rows[i].hidn += r.per_layer[i].hidn;
        rows[i].mha += r.per_layer[i].mha;
        rows[i].ffn += r.per_layer[i].ffn;
      }
    }
    total += r.total;
    matrix += r.matrix_total;
    layer += r.layer_total;
    model += r.model_loss;
    grad_norm += gn;
    ++count;
  }

  void add_ce(double loss, double gn) {
    ce += loss;
    grad_norm += gn;
    ++count;
  }

  std::string distill_line(int64_t step, double lr) const {
    const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
    std::ostringstream os;
    os << "step=" << step << " lr=" << fmt_g(lr) << " total=" << fmt_g(total * inv)
       << " matrix=" << fmt_g(matrix * inv) << " layer=" << fmt_g(layer * inv)
       << " model=" << fmt_g(model * inv) << " grad_norm=" << fmt_g(grad_norm * inv);
    for (const auto& row : rows) {
      if (row.aspect == "none") continue;
      const std::string p = " l" + std::to_string(row.layer) + ".";
      if (row.aspect != "layer") {
        os << p << "mha=" << fmt_g(row.mha * inv) << p << "ffn=" << fmt_g(row.ffn * inv);
      }
      if (row.aspect != "matrix") {
        os << p << "attn=" << fmt_g(row.attn * inv) << p << "hidn=" << fmt_g(row.hidn * inv);
      }
    }
    return os.str();
  }

  std::string pretrain_line(int64_t step, double lr) const {
    const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
    std::ostringstream os;
    os << "step=" << step << " lr=" << fmt_g(lr) << " ce=" << fmt_g(ce * inv)
       << " grad_norm=" << fmt_g(grad_norm * inv);
    return os.str();
  }

  void reset() { *this = IntervalAccum{}; }
};

struct MetricsSink {
  std::ofstream file;
  std::vector<std::string>* lines;

  MetricsSink(const std::string& path, std::vector<std::string>* store) : lines(store) {
    if (!path.empty()) {
      file.open(path, std::ios::app);
      if (!file) throw std::runtime_error("train: cannot open metrics log '" + path + "'");
    }
  }
  void emit(const std::string& line) {
    if (file.is_open()) file << line << "\n" << std::flush;
    lines->push_back(line);
  }
};

void save_run_snapshot(const TransformerModel& model, const AdamState& state,
                       const std::vector<ParamRef>& params, uint64_t seed, const std::string& ckpt) {
  save_checkpoint(model, ckpt);
  save_train_state(state, params, seed, ckpt + ".state");
}

// Last step to execute this invocation; the lr schedule stays on cfg.steps.
int64_t end_step(const TrainConfig& cfg) {
  return cfg.halt_after > 0 && cfg.halt_after < cfg.steps ? cfg.halt_after : cfg.steps;
}

Batch batch_for_step(BatchSchedule& sched, const Tokenizer& tok, const TrainConfig& cfg, ModelKind kind,
                     int64_t step) {
  Batch b = sched.at_step(step);
  if (kind == ModelKind::EncoderMlm) {
    return mlm_mask(b, tok, cfg.mask_rate, Rng::derive(cfg.seed, kMlmSeedStream, static_cast<uint64_t>(step)));
  }
  return causal_labels(b);
}

}  // namespace

std::string mode_to_string(TrainMode m) {
  switch (m) {
    case TrainMode::TeacherPretrain: return "teacher-pretrain";
    case TrainMode::DistillMakd: return "distill-makd";
    case TrainMode::DistillLogitOnly: return "distill-logit-only";
  }
  return "distill-makd";
}

TrainMode mode_from_string(const std::string& s) {
  if (s == "teacher-pretrain") return TrainMode::TeacherPretrain;
  if (s == "distill-makd") return TrainMode::DistillMakd;
  if (s == "distill-logit-only") return TrainMode::DistillLogitOnly;
  throw std::invalid_argument("unknown train mode: " + s);
}

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("train config: steps must be positive");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
  if (peak_lr < 0.0) throw std::invalid_argument("train config: peak_lr must be nonnegative");
  if (warmup_frac < 0.0 || warmup_frac >= 1.0) {
    throw std::invalid_argument("train config: warmup_frac must lie in [0, 1)");
  }
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  }
  if (adam_eps <= 0.0) throw std::invalid_argument("train config: adam_eps must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be nonnegative");
  if (clip_norm < 0.0) throw std::invalid_argument("train config: clip_norm must be nonnegative");
  if (mask_rate <= 0.0 || mask_rate >= 1.0) {
    throw std::invalid_argument("train config: mask_rate must lie in (0, 1)");
  }
  if (eval_interval < 1) throw std::invalid_argument("train config: eval_interval must be positive");
  if (checkpoint_interval < 0) {
    throw std::invalid_argument("train config: checkpoint_interval must be nonnegative");
  }
  if (halt_after < 0) throw std::invalid_argument("train config: halt_after must be nonnegative");
}

double lr_at(const TrainConfig& cfg, int64_t step) {
  const int64_t warmup = std::max<int64_t>(1, std::llround(cfg.warmup_frac * static_cast<double>(cfg.steps)));
  if (step < warmup) {
    return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(cfg.steps - warmup);
  if (span <= 0.0) return cfg.peak_lr;
  return cfg.peak_lr * static_cast<double>(cfg.steps - step) / span;
}

void adamw_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads, AdamState& state,
                double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  if (state.m.empty()) {
    for (const ParamRef& p : params) {
      state.m.push_back(Tensor::zeros(p.tensor->shape()));
      state.v.push_back(Tensor::zeros(p.tensor->shape()));
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer state sized for " + std::to_string(state.m.size()) +
                                " parameters, got " + std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].tensor->same_shape(grads[i])) {
      throw std::invalid_argument("adamw_step: gradient shape " + grads[i].shape_str() +
                                  " does not match parameter '" + params[i].name + "' " +
                                  params[i].tensor->shape_str());
    }
    if (!grads[i].all_finite()) {
      throw std::runtime_error("adamw_step: non-finite gradient for parameter '" + params[i].name + "'");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].tensor->mut();
    double* m = state.m[i].mut();
    double* v = state.v[i].mut();
    const double* g = grads[i].data();
    const int64_t n = grads[i].numel();
    for (int64_t j = 0; j < n; ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[j]);
    }
  }
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    const double* p = g.data();
    for (int64_t j = 0; j < g.numel(); ++j) sq += p[j] * p[j];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      double* p = g.mut();
      for (int64_t j = 0; j < g.numel(); ++j) p[j] *= s;
    }
  }
  return norm;
}

void save_train_state(const AdamState& state, const std::vector<ParamRef>& params, uint64_t seed,
                      const std::string& path) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("save_train_state: state does not match parameter list");
  }
  std::vector<std::pair<std::string, std::string>> meta;
  meta.emplace_back("step", std::to_string(state.step));
  meta.emplace_back("seed", std::to_string(seed));
  std::vector<container::Item> items;
  for (size_t i = 0; i < params.size(); ++i) items.push_back({"m." + params[i].name, state.m[i]});
  for (size_t i = 0; i < params.size(); ++i) items.push_back({"v." + params[i].name, state.v[i]});
  container::write(path, kStateMagic, meta, items);
}

AdamState load_train_state(const std::string& path, const std::vector<ParamRef>& params,
                           uint64_t expected_seed) {
  container::File f = container::read(path, kStateMagic);
  AdamState state;
  uint64_t seed = 0;
  bool saw_step = false, saw_seed = false;
  for (const auto& [k, v] : f.meta) {
    if (k == "step") {
      state.step = std::stoll(v);
      saw_step = true;
    } else if (k == "seed") {
      seed = std::stoull(v);
      saw_seed = true;
    } else {
      throw std::runtime_error("train state: unknown header key '" + k + "' in '" + path + "'");
    }
  }
  if (!saw_step || !saw_seed) throw std::runtime_error("train state: '" + path + "' lacks step/seed");
  if (seed != expected_seed) {
    throw std::runtime_error("train state: '" + path + "' was written under seed " + std::to_string(seed) +
                             ", run uses " + std::to_string(expected_seed));
  }
  if (f.tensors.size() != 2 * params.size()) {
    throw std::runtime_error("train state: '" + path + "' holds " + std::to_string(f.tensors.size()) +
                             " tensors, expected " + std::to_string(2 * params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& mi = f.tensors[i];
    const auto& vi = f.tensors[params.size() + i];
    if (mi.name != "m." + params[i].name || vi.name != "v." + params[i].name ||
        !mi.tensor.same_shape(*params[i].tensor) || !vi.tensor.same_shape(*params[i].tensor)) {
      throw std::runtime_error("train state: '" + path + "' does not match parameter '" + params[i].name + "'");
    }
    state.m.push_back(mi.tensor);
    state.v.push_back(vi.tensor);
  }
  return state;
}

TrainResult pretrain(TransformerModel& model, const std::vector<std::vector<int>>& examples,
                     const Tokenizer& tok, const TrainConfig& cfg, const RunIO& io) {
  cfg.validate();
  model.config.finalize();
  TrainResult result;
  MetricsSink sink(io.metrics_path, &result.metrics_lines);
  std::vector<ParamRef> params = parameters(model);
  AdamState state;
  if (!io.resume_state.empty()) state = load_train_state(io.resume_state, params, cfg.seed);
  BatchSchedule sched{&examples, cfg.seed, cfg.batch_size};
  IntervalAccum accum;
  const int64_t end = end_step(cfg);

  for (int64_t step = state.step; step < end; ++step) {
    const Batch batch = batch_for_step(sched, tok, cfg, model.config.kind, step);
    std::vector<Tensor> grads;
    double loss_val = 0.0;
    {
      GradientTape tape(true);
      BoundModel bm = bind_trainable(model, tape);
      std::vector<Var> seq_losses;
      for (int i = 0; i < batch.size(); ++i) {
        const std::vector<int> rows = batch.label_positions(i);
        if (rows.empty()) continue;
        std::vector<int> labels;
        for (int r : rows) labels.push_back(batch.labels[static_cast<size_t>(i)][static_cast<size_t>(r)]);
        ActivationTrace tr = model_forward(bm, tape, batch.tokens[static_cast<size_t>(i)],
                                           batch.attn[static_cast<size_t>(i)]);
        seq_losses.push_back(tape.ce_hard(tr.logits_v, labels, rows));
      }
      const std::vector<double> w(seq_losses.size(),
                                  seq_losses.empty() ? 0.0 : 1.0 / static_cast<double>(seq_losses.size()));
      Var loss = tape.wsum(seq_losses, w);
      loss_val = tape.scalar(loss);
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("pretrain: loss became non-finite at step " + std::to_string(step));
      }
      tape.backward(loss);
      for (Var v : bm.ref_vars) grads.push_back(tape.grad(v));
    }
    const double gn = clip_gradients(grads, cfg.clip_norm);
    const double lr = lr_at(cfg, step);
    adamw_step(params, grads, state, lr, cfg);
    accum.add_ce(loss_val, gn);

    const bool at_interval = (step + 1) % cfg.eval_interval == 0 || step + 1 == end;
    if (at_interval) {
      sink.emit(accum.pretrain_line(step + 1, lr));
      accum.reset();
    }
    if (!io.out_checkpoint.empty() && cfg.checkpoint_interval > 0 &&
        (step + 1) % cfg.checkpoint_interval == 0) {
      save_run_snapshot(model, state, params, cfg.seed, io.out_checkpoint);
    }
  }
  if (!io.out_checkpoint.empty()) save_run_snapshot(model, state, params, cfg.seed, io.out_checkpoint);
  result.final_step = end;
  return result;
}

TrainResult distill_run(const TransformerModel& teacher, TransformerModel& student,
                        const std::vector<std::vector<int>>& examples, const Tokenizer& tok,
                        const DistillPlan& plan, const TrainConfig& cfg, const RunIO& io) {
  cfg.validate();
  if (teacher.config.kind != student.config.kind) {
    throw std::invalid_argument("distill_run: teacher and student model kinds differ");
  }
  TrainResult result;
  MetricsSink sink(io.metrics_path, &result.metrics_lines);
  std::vector<ParamRef> params = parameters(student);
  AdamState state;
  if (!io.resume_state.empty()) state = load_train_state(io.resume_state, params, cfg.seed);
  BatchSchedule sched{&examples, cfg.seed, cfg.batch_size};
  IntervalAccum accum;
  const int64_t end = end_step(cfg);

  for (int64_t step = state.step; step < end; ++step) {
    const Batch batch = batch_for_step(sched, tok, cfg, teacher.config.kind, step);
    std::vector<Tensor> grads;
    std::vector<LossReport> reports;
    {
      GradientTape tape(true);
      BoundModel bt = bind_frozen(teacher, tape);
      BoundModel bs = bind_trainable(student, tape);
      std::vector<Var> seq_losses;
      for (int i = 0; i < batch.size(); ++i) {
        ActivationTrace tt = model_forward(bt, tape, batch.tokens[static_cast<size_t>(i)],
                                           batch.attn[static_cast<size_t>(i)]);
        ActivationTrace st = model_forward(bs, tape, batch.tokens[static_cast<size_t>(i)],
                                           batch.attn[static_cast<size_t>(i)]);
        auto [rep, loss] = build_total_loss(tape, st, tt, plan, batch.label_positions(i));
        reports.push_back(std::move(rep));
        seq_losses.push_back(loss);
      }
      const std::vector<double> w(seq_losses.size(),
                                  seq_losses.empty() ? 0.0 : 1.0 / static_cast<double>(seq_losses.size()));
      Var loss = tape.wsum(seq_losses, w);
      const double loss_val = tape.scalar(loss);
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("distill_run: loss became non-finite at step " + std::to_string(step) +
                                 (io.out_checkpoint.empty() ? "" : "; last checkpoint retained at '" +
                                                                       io.out_checkpoint + "'"));
      }
      tape.backward(loss);
      for (Var v : bs.ref_vars) grads.push_back(tape.grad(v));
    }
    const double gn = clip_gradients(grads, cfg.clip_norm);
    const double lr = lr_at(cfg, step);
    adamw_step(params, grads, state, lr, cfg);
    accum.add(mean_reports(reports), gn);

    const bool at_interval = (step + 1) % cfg.eval_interval == 0 || step + 1 == end;
    if (at_interval) {
      sink.emit(accum.distill_line(step + 1, lr));
      accum.reset();
    }
    if (!io.out_checkpoint.empty() && cfg.checkpoint_interval > 0 &&
        (step + 1) % cfg.checkpoint_interval == 0) {
      save_run_snapshot(student, state, params, cfg.seed, io.out_checkpoint);
    }
  }
  if (!io.out_checkpoint.empty()) save_run_snapshot(student, state, params, cfg.seed, io.out_checkpoint);
  result.final_step = end;
  return result;
}

}  // namespace makd
