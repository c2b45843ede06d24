#pragma once

#include <string>
#include <utility>
#include <vector>

#include "makd/model.hpp"
#include "makd/tape.hpp"
#include "makd/tensor.hpp"

namespace makd {

inline constexpr double kKlEpsilon = 1e-10;

// Which layers get which distillation aspect, plus the scalar knobs of the
// combined objective. Layer indices are 1-based over [1, L].
struct DistillPlan {
  std::vector<int> matrix_layers;  // per-head q/k/v MSE + ffn up/down MSE
  std::vector<int> layer_layers;   // attention KL + hidden-state MSE
  bool use_model_loss = true;      // softened logit cross-entropy
  double temperature = 1.0;
  double w_matrix = 1.0;
  double w_layer = 1.0;
  double w_model = 1.0;
  double kl_epsilon = kKlEpsilon;
  // The default schedule ranges are disjoint; overlapping assignments
  // (both aspects on one layer) must be opted into.
  bool allow_overlap = false;
  bool reverse_kl = false;  // KL(teacher || student) instead of the written order
  bool t2_scale = false;    // multiply the model loss by temperature^2

  // Sorts and dedups the layer sets, then checks ranges and overlap.
  void validate(int num_layers);
  std::string describe() const;
};

// Default assignment for an L-layer student: matrix aspect on the shallow
// half {1..floor(L/2)}, layer aspect on {floor(L/2)+1..L}, model loss on.
DistillPlan assign_aspects(int num_layers);

struct LossReport {
  struct Row {
    int layer = 0;
    std::string aspect;  // "matrix", "layer", "matrix+layer", or "none"
    double attn = 0.0;
    double hidn = 0.0;
    double mha = 0.0;
    double ffn = 0.0;
  };
  std::vector<Row> per_layer;      // one row per model layer, in order
  double matrix_total = 0.0;       // unweighted sums over assigned layers
  double layer_total = 0.0;
  double model_loss = 0.0;
  double total = 0.0;              // weighted objective
};

// ---- per-layer scalar losses (1-based layer index) ----------------------
// All of these exclude padded query positions and treat the teacher trace
// as the constant target.

double attn_kl_loss(const ActivationTrace& student, const ActivationTrace& teacher, int layer,
                    double eps = kKlEpsilon, bool reversed = false);
double hidden_mse_loss(const ActivationTrace& student, const ActivationTrace& teacher, int layer);
double layer_loss(const ActivationTrace& student, const ActivationTrace& teacher, int layer);
double mha_matrix_loss(const ActivationTrace& student, const ActivationTrace& teacher, int layer);
double ffn_matrix_loss(const ActivationTrace& student, const ActivationTrace& teacher, int layer);
double matrix_loss(const ActivationTrace& student, const ActivationTrace& teacher, int layer);
// Softened cross-entropy over all logit rows; teacher is the target.
double model_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

// ---- trainable objective ------------------------------------------------

// Builds the combined objective on the tape that produced the student
// trace. model_rows picks the logit rows the model loss applies to (masked
// positions for encoders, next-token positions for decoders). The report
// carries the scalar values of every component.
std::pair<LossReport, Var> build_total_loss(GradientTape& tape, const ActivationTrace& student,
                                            const ActivationTrace& teacher, const DistillPlan& plan,
                                            const std::vector<int>& model_rows);

// Pure evaluation: same objective on a scratch tape, values only.
LossReport total_loss(const ActivationTrace& student, const ActivationTrace& teacher, const DistillPlan& plan,
                      const std::vector<int>& model_rows);
LossReport total_loss(const ActivationTrace& student, const ActivationTrace& teacher, const DistillPlan& plan);

}  // namespace makd
