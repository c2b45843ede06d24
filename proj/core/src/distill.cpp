#include "makd/distill.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

namespace makd {

namespace {

void require_sorted_range(std::vector<int>& xs, int num_layers, const char* which) {
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  for (int l : xs) {
    if (l < 1 || l > num_layers) {
      throw std::invalid_argument("plan: " + std::string(which) + " layer " + std::to_string(l) +
                                  " outside [1, " + std::to_string(num_layers) + "]");
    }
  }
}

const LayerTrace& layer_at(const ActivationTrace& tr, int l, const char* what) {
  if (l < 1 || l > static_cast<int>(tr.layers.size())) {
    throw std::invalid_argument(std::string(what) + ": layer " + std::to_string(l) + " outside [1, " +
                                std::to_string(tr.layers.size()) + "]");
  }
  return tr.layers[static_cast<size_t>(l - 1)];
}

void check_pair(const ActivationTrace& s, const ActivationTrace& t, const char* what) {
  if (s.seq_len != t.seq_len) {
    throw std::invalid_argument(std::string(what) + ": sequence lengths differ (" + std::to_string(s.seq_len) +
                                " vs " + std::to_string(t.seq_len) + ")");
  }
  if (s.valid_rows != t.valid_rows) {
    throw std::invalid_argument(std::string(what) + ": padding masks differ between traces");
  }
  if (s.layers.size() != t.layers.size()) {
    throw std::invalid_argument(std::string(what) + ": layer counts differ (" + std::to_string(s.layers.size()) +
                                " vs " + std::to_string(t.layers.size()) + ")");
  }
}

void check_heads(const LayerTrace& sl, const LayerTrace& tl, const char* what) {
  if (sl.attn.size() != tl.attn.size()) {
    throw std::invalid_argument(std::string(what) + ": head counts differ (" + std::to_string(sl.attn.size()) +
                                " vs " + std::to_string(tl.attn.size()) + ")");
  }
}

// With live=true the student trace's tape handles are used directly;
// otherwise values are wrapped as constants (pure evaluation path).
Var head_var(GradientTape& tape, const std::vector<Var>& vs, const std::vector<Tensor>& ts, size_t i, bool live) {
  return live ? vs[i] : tape.constant(ts[i]);
}

Var one_var(GradientTape& tape, Var v, const Tensor& t, bool live) { return live ? v : tape.constant(t); }

Var attn_term(GradientTape& tape, const LayerTrace& sl, const LayerTrace& tl, const std::vector<int>& rows,
              double eps, bool reversed, bool live) {
  check_heads(sl, tl, "attn_kl_loss");
  const size_t heads = tl.attn.size();
  std::vector<Var> terms;
  std::vector<double> w(heads, 1.0 / static_cast<double>(heads));
  for (size_t a = 0; a < heads; ++a) {
    terms.push_back(tape.kl_rows_vs(head_var(tape, sl.attn_v, sl.attn, a, live), tl.attn[a], eps, rows, reversed));
  }
  return tape.wsum(terms, w);
}

Var hidn_term(GradientTape& tape, const LayerTrace& sl, const LayerTrace& tl, const std::vector<int>& rows,
              bool live) {
  return tape.mse_vs(one_var(tape, sl.hidden_v, sl.hidden, live), tl.hidden, rows);
}

Var mha_term(GradientTape& tape, const LayerTrace& sl, const LayerTrace& tl, const std::vector<int>& rows,
             bool live) {
  check_heads(sl, tl, "mha_matrix_loss");
  const size_t heads = tl.attn.size();
  std::vector<Var> terms;
  std::vector<double> w(3 * heads, 1.0 / static_cast<double>(heads));
  for (size_t a = 0; a < heads; ++a) {
    terms.push_back(tape.mse_vs(head_var(tape, sl.q_v, sl.q, a, live), tl.q[a], rows));
    terms.push_back(tape.mse_vs(head_var(tape, sl.k_v, sl.k, a, live), tl.k[a], rows));
    terms.push_back(tape.mse_vs(head_var(tape, sl.v_v, sl.v, a, live), tl.v[a], rows));
  }
  return tape.wsum(terms, w);
}

Var ffn_term(GradientTape& tape, const LayerTrace& sl, const LayerTrace& tl, const std::vector<int>& rows,
             bool live) {
  std::vector<Var> terms = {tape.mse_vs(one_var(tape, sl.ffn_up_v, sl.ffn_up, live), tl.ffn_up, rows),
                            tape.mse_vs(one_var(tape, sl.ffn_down_v, sl.ffn_down, live), tl.ffn_down, rows)};
  return tape.wsum(terms, {1.0, 1.0});
}

Var model_term(GradientTape& tape, const ActivationTrace& st, const ActivationTrace& tt,
               const DistillPlan& plan, const std::vector<int>& rows, bool live) {
  return tape.soft_ce_vs(one_var(tape, st.logits_v, st.logits, live), tt.logits, plan.temperature, rows,
                         plan.t2_scale);
}

std::pair<LossReport, Var> build_impl(GradientTape& tape, const ActivationTrace& st, const ActivationTrace& tt,
                                      const DistillPlan& plan_in, const std::vector<int>& model_rows,
                                      bool live) {
  check_pair(st, tt, "total_loss");
  DistillPlan plan = plan_in;
  plan.validate(static_cast<int>(st.layers.size()));
  if (plan.temperature <= 0.0) throw std::invalid_argument("plan: temperature must be positive");

  const std::vector<int>& rows = st.valid_rows;
  const std::set<int> mset(plan.matrix_layers.begin(), plan.matrix_layers.end());
  const std::set<int> lset(plan.layer_layers.begin(), plan.layer_layers.end());

  LossReport rep;
  std::vector<Var> terms;
  std::vector<double> weights;
  for (int l = 1; l <= static_cast<int>(st.layers.size()); ++l) {
    const LayerTrace& sl = st.layers[static_cast<size_t>(l - 1)];
    const LayerTrace& tl = tt.layers[static_cast<size_t>(l - 1)];
    LossReport::Row row;
    row.layer = l;
    const bool in_m = mset.count(l) != 0;
    const bool in_l = lset.count(l) != 0;
    row.aspect = in_m && in_l ? "matrix+layer" : in_m ? "matrix" : in_l ? "layer" : "none";
    if (in_m) {
      Var mha = mha_term(tape, sl, tl, rows, live);
      Var ffn = ffn_term(tape, sl, tl, rows, live);
      row.mha = tape.scalar(mha);
      row.ffn = tape.scalar(ffn);
      rep.matrix_total += row.mha + row.ffn;
      terms.push_back(mha);
      weights.push_back(plan.w_matrix);
      terms.push_back(ffn);
      weights.push_back(plan.w_matrix);
    }
    if (in_l) {
      Var attn = attn_term(tape, sl, tl, rows, plan.kl_epsilon, plan.reverse_kl, live);
      Var hid = hidn_term(tape, sl, tl, rows, live);
      row.attn = tape.scalar(attn);
      row.hidn = tape.scalar(hid);
      rep.layer_total += row.attn + row.hidn;
      terms.push_back(attn);
      weights.push_back(plan.w_layer);
      terms.push_back(hid);
      weights.push_back(plan.w_layer);
    }
    rep.per_layer.push_back(std::move(row));
  }
  if (plan.use_model_loss && !model_rows.empty()) {
    Var ml = model_term(tape, st, tt, plan, model_rows, live);
    rep.model_loss = tape.scalar(ml);
    terms.push_back(ml);
    weights.push_back(plan.w_model);
  }
  Var total = tape.wsum(terms, weights);
  rep.total = tape.scalar(total);
  return {rep, total};
}

}  // namespace

void DistillPlan::validate(int num_layers) {
  require_sorted_range(matrix_layers, num_layers, "matrix");
  require_sorted_range(layer_layers, num_layers, "layer");
  if (!allow_overlap) {
    std::vector<int> both;
    std::set_intersection(matrix_layers.begin(), matrix_layers.end(), layer_layers.begin(), layer_layers.end(),
                          std::back_inserter(both));
    if (!both.empty()) {
      throw std::invalid_argument("plan: layer " + std::to_string(both.front()) +
                                  " carries both aspects; set allow_overlap to permit this");
    }
  }
  if (temperature <= 0.0) throw std::invalid_argument("plan: temperature must be positive");
  if (kl_epsilon <= 0.0) throw std::invalid_argument("plan: kl_epsilon must be positive");
  if (w_matrix < 0.0 || w_layer < 0.0 || w_model < 0.0) {
    throw std::invalid_argument("plan: aspect weights must be nonnegative");
  }
}

std::string DistillPlan::describe() const {
  auto set_str = [](const std::vector<int>& xs) {
    std::ostringstream os;
    os << "{";
    for (size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
    os << "}";
    return os.str();
  };
  std::ostringstream os;
  os << "matrix=" << set_str(matrix_layers) << " layer=" << set_str(layer_layers)
     << " model=" << (use_model_loss ? "on" : "off") << " t=" << temperature;
  if (reverse_kl) os << " reverse_kl";
  if (t2_scale) os << " t2";
  return os.str();
}

DistillPlan assign_aspects(int num_layers) {
  if (num_layers < 1) throw std::invalid_argument("assign_aspects: need at least one layer");
  DistillPlan plan;
  const int m = num_layers / 2;
  for (int l = 1; l <= m; ++l) plan.matrix_layers.push_back(l);
  for (int l = m + 1; l <= num_layers; ++l) plan.layer_layers.push_back(l);
  plan.use_model_loss = true;
  return plan;
}

double attn_kl_loss(const ActivationTrace& st, const ActivationTrace& tt, int layer, double eps, bool reversed) {
  check_pair(st, tt, "attn_kl_loss");
  GradientTape tape(false);
  return tape.scalar(
      attn_term(tape, layer_at(st, layer, "attn_kl_loss"), layer_at(tt, layer, "attn_kl_loss"), st.valid_rows,
                eps, reversed, false));
}

double hidden_mse_loss(const ActivationTrace& st, const ActivationTrace& tt, int layer) {
  check_pair(st, tt, "hidden_mse_loss");
  GradientTape tape(false);
  return tape.scalar(hidn_term(tape, layer_at(st, layer, "hidden_mse_loss"),
                               layer_at(tt, layer, "hidden_mse_loss"), st.valid_rows, false));
}

double layer_loss(const ActivationTrace& st, const ActivationTrace& tt, int layer) {
  return attn_kl_loss(st, tt, layer) + hidden_mse_loss(st, tt, layer);
}

double mha_matrix_loss(const ActivationTrace& st, const ActivationTrace& tt, int layer) {
  check_pair(st, tt, "mha_matrix_loss");
  GradientTape tape(false);
  return tape.scalar(mha_term(tape, layer_at(st, layer, "mha_matrix_loss"),
                              layer_at(tt, layer, "mha_matrix_loss"), st.valid_rows, false));
}

double ffn_matrix_loss(const ActivationTrace& st, const ActivationTrace& tt, int layer) {
  check_pair(st, tt, "ffn_matrix_loss");
  GradientTape tape(false);
  return tape.scalar(ffn_term(tape, layer_at(st, layer, "ffn_matrix_loss"),
                              layer_at(tt, layer, "ffn_matrix_loss"), st.valid_rows, false));
}

double matrix_loss(const ActivationTrace& st, const ActivationTrace& tt, int layer) {
  return mha_matrix_loss(st, tt, layer) + ffn_matrix_loss(st, tt, layer);
}

double model_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("model_loss: temperature must be positive");
  GradientTape tape(false);
  std::vector<int> rows(static_cast<size_t>(student_logits.rows()));
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return tape.scalar(tape.soft_ce_vs(tape.constant(student_logits), teacher_logits, temperature, rows, false));
}

std::pair<LossReport, Var> build_total_loss(GradientTape& tape, const ActivationTrace& st,
                                            const ActivationTrace& tt, const DistillPlan& plan,
                                            const std::vector<int>& model_rows) {
  return build_impl(tape, st, tt, plan, model_rows, true);
}

LossReport total_loss(const ActivationTrace& st, const ActivationTrace& tt, const DistillPlan& plan,
                      const std::vector<int>& model_rows) {
  GradientTape tape(false);
  return build_impl(tape, st, tt, plan, model_rows, false).first;
}

LossReport total_loss(const ActivationTrace& st, const ActivationTrace& tt, const DistillPlan& plan) {
  return total_loss(st, tt, plan, st.valid_rows);
}

}  // namespace makd
