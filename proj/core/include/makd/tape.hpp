#pragma once

#include <functional>
#include <vector>

#include "makd/tensor.hpp"

namespace makd {

// Handle into a GradientTape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops compute eagerly and, while recording, push a
// backward closure. With recording off the same calls behave as plain
// eager evaluation, so forward code is written once for both the frozen
// teacher and the trained student.
//
// Single-writer: one training step owns one tape.
class GradientTape {
 public:
  explicit GradientTape(bool recording = true) : recording_(recording) {}
  // backward closures capture `this`
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  bool recording() const { return recording_; }
  void clear();

  Var leaf(const Tensor& value, bool needs_grad);
  Var constant(const Tensor& value) { return leaf(value, false); }

  const Tensor& value(Var v) const;
  double scalar(Var v) const;
  // Gradient accumulated for v; zeros if v never influenced the loss.
  Tensor grad(Var v) const;

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row_bias(Var x, Var bias);
  Var scale(Var a, double s);
  Var slice_cols(Var x, int c0, int c1);
  Var concat_cols(const std::vector<Var>& parts);
  Var softmax_rows(Var x, const Tensor* mask);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  Var gelu(Var x, GeluKind kind);
  Var gather_rows(Var table, std::vector<int> ids);

  // Scalar loss heads; the target side is held constant.
  // Mean squared error over the listed rows and all columns.
  Var mse_vs(Var x, const Tensor& target, const std::vector<int>& rows);
  // Mean over listed rows of the row-wise KL divergence. Probabilities are
  // clamped below by eps before the logs. reversed = KL(target || x).
  Var kl_rows_vs(Var probs, const Tensor& target_probs, double eps, const std::vector<int>& rows,
                 bool reversed = false);
  // Mean over listed rows of CE(softmax(target/t), softmax(x/t)), computed
  // via log-sum-exp. t2_scale multiplies by t^2.
  Var soft_ce_vs(Var logits, const Tensor& target_logits, double temperature,
                 const std::vector<int>& rows, bool t2_scale = false);
  // Mean over listed rows of -log softmax(logits)[label].
  Var ce_hard(Var logits, const std::vector<int>& labels, const std::vector<int>& rows);
  Var wsum(const std::vector<Var>& terms, const std::vector<double>& weights);

  // Reverse pass from a scalar loss. Errors on non-scalar input.
  void backward(Var loss);

  size_t num_slots() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool needs_grad = false;
  };

  Slot& slot(Var v);
  const Slot& slot(Var v) const;
  Var push(Tensor value, bool needs_grad);
  void accum(Var v, const Tensor& g);
  bool track(std::initializer_list<Var> ins) const;

  bool recording_;
  std::vector<Slot> slots_;
  std::vector<std::function<void()>> backops_;
};

}  // namespace makd
