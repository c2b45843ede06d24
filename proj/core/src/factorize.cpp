#include "makd/factorize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "makd/svd.hpp"

namespace makd {

static const char* const kProjRoles[] = {"wq", "wk", "wv", "wo", "wu", "wd"};

static void proj_dims(const ModelConfig& c, const std::string& role, int* n, int* m) {
  if (role == "wu") {
    *n = c.hidden;
    *m = c.ffn;
  } else if (role == "wd") {
    *n = c.ffn;
    *m = c.hidden;
  } else if (role == "embed") {
    *n = c.vocab_size;
    *m = c.hidden;
  } else {
    *n = c.hidden;
    *m = c.hidden;
  }
}

static void check_rank(const ModelConfig& c, const std::string& role, int k) {
  int n = 0, m = 0;
  proj_dims(c, role, &n, &m);
  const int cap = std::min(n, m);
  if (k < 1 || k > cap) {
    throw std::invalid_argument("factorize: rank " + std::to_string(k) + " for role '" + role +
                                "' outside [1, " + std::to_string(cap) + "]");
  }
}

// Whole-model parameter count under a uniform rank, relative to the dense
// teacher: each factorized n x m matrix trades nm for k(n+m).
static int64_t params_at_uniform(const ModelConfig& c, int64_t dense_total, int k, bool embed_too) {
  int64_t total = dense_total;
  for (const char* role : kProjRoles) {
    int n = 0, m = 0;
    proj_dims(c, role, &n, &m);
    total += static_cast<int64_t>(c.layers) * (static_cast<int64_t>(k) * (n + m) - static_cast<int64_t>(n) * m);
  }
  if (embed_too) {
    total += static_cast<int64_t>(k) * (c.vocab_size + c.hidden) -
             static_cast<int64_t>(c.vocab_size) * c.hidden;
  }
  return total;
}

std::map<std::string, int> FactorizationSpec::resolve(const ModelConfig& teacher) const {
  const int selectors = (uniform_rank > 0) + (!rank_map.empty()) + (target_rate > 0.0);
  if (selectors != 1) {
    throw std::invalid_argument("factorize: exactly one of uniform rank, rank map, or target rate must be set");
  }
  std::map<std::string, int> out;
  if (uniform_rank > 0) {
    for (const char* role : kProjRoles) {
      check_rank(teacher, role, uniform_rank);
      out[role] = uniform_rank;
    }
    if (factorize_embeddings) {
      check_rank(teacher, "embed", uniform_rank);
      out["embed"] = uniform_rank;
    }
    return out;
  }
  if (!rank_map.empty()) {
    for (const auto& [role, k] : rank_map) {
      const bool proj = std::find_if(std::begin(kProjRoles), std::end(kProjRoles),
                                     [&](const char* r) { return role == r; }) != std::end(kProjRoles);
      if (!proj && role != "embed") throw std::invalid_argument("factorize: unknown role '" + role + "'");
      check_rank(teacher, role, k);
      out[role] = k;
    }
    if (factorize_embeddings && out.count("embed") == 0) {
      throw std::invalid_argument("factorize: factorize_embeddings needs an 'embed' entry in the rank map");
    }
    if (!factorize_embeddings && out.count("embed") != 0) {
      throw std::invalid_argument("factorize: 'embed' rank given without factorize_embeddings");
    }
    return out;
  }
  // Rate target: parameter counts grow with k, so scan up and keep the
  // largest k still meeting the rate (equal-rate ties fall to smaller k
  // because only the first k at that ratio is kept).
  if (target_rate <= 1.0) {
    throw std::invalid_argument("factorize: target rate must exceed 1.0");
  }
  ModelConfig c = teacher;
  c.rank_map.clear();
  c.finalize();
  int64_t dense_total = 0;
  {
    TransformerModel shell = build_model_shell(c);
    dense_total = parameter_count(shell);
  }
  int k_cap = std::min(c.hidden, c.ffn);
  if (factorize_embeddings) k_cap = std::min(k_cap, std::min(c.vocab_size, c.hidden));
  int best = 0;
  for (int k = 1; k <= k_cap; ++k) {
    const int64_t p = params_at_uniform(c, dense_total, k, factorize_embeddings);
    const double ratio = static_cast<double>(dense_total) / static_cast<double>(p);
    if (ratio >= target_rate && (best == 0 || k > best)) best = k;
  }
  if (best == 0) {
    throw std::invalid_argument("factorize: target rate " + std::to_string(target_rate) +
                                " unattainable even at rank 1");
  }
  FactorizationSpec uni;
  uni.uniform_rank = best;
  uni.factorize_embeddings = factorize_embeddings;
  return uni.resolve(teacher);
}

std::pair<Tensor, Tensor> svd_truncate(const Tensor& w, int k) {
  if (w.rank() != 2) throw std::invalid_argument("svd_truncate: need a rank-2 tensor, got " + w.shape_str());
  const int n = w.rows(), m = w.cols();
  if (k < 1 || k > std::min(n, m)) {
    throw std::invalid_argument("svd_truncate: rank " + std::to_string(k) + " outside [1, " +
                                std::to_string(std::min(n, m)) + "] for " + w.shape_str());
  }
  SvdResult r = svd(w);
  Tensor a({n, k});
  Tensor b({k, m});
  double* pa = a.mut();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) pa[static_cast<size_t>(i) * k + j] = r.u.at(i, j) * r.s[static_cast<size_t>(j)];
  }
  double* pb = b.mut();
  for (int j = 0; j < k; ++j) {
    for (int i = 0; i < m; ++i) pb[static_cast<size_t>(j) * m + i] = r.v.at(i, j);
  }
  return {std::move(a), std::move(b)};
}

static LinearLayer factorize_linear(const LinearLayer& dense, const std::map<std::string, int>& ranks,
                                    const std::string& role) {
  auto it = ranks.find(role);
  if (it == ranks.end()) {
    LinearLayer l;
    l.weight = dense.weight.clone();
    l.bias = dense.bias.clone();
    return l;
  }
  auto [a, b] = svd_truncate(dense.weight, it->second);
  return LinearLayer::from_factors(std::move(a), std::move(b), dense.bias.clone());
}

TransformerModel build_student(const TransformerModel& teacher, const FactorizationSpec& spec) {
  for (size_t l = 0; l < teacher.layers.size(); ++l) {
    const LayerParams& lay = teacher.layers[l];
    for (const LinearLayer* ll : {&lay.wq, &lay.wk, &lay.wv, &lay.wo, &lay.wu, &lay.wd}) {
      if (ll->factorized) {
        throw std::invalid_argument("build_student: teacher layer " + std::to_string(l) +
                                    " is already factorized");
      }
    }
  }
  if (teacher.config.embed_factorized()) {
    throw std::invalid_argument("build_student: teacher embedding is already factorized");
  }

  const std::map<std::string, int> ranks = spec.resolve(teacher.config);
  TransformerModel s;
  s.config = teacher.config;
  s.config.rank_map = ranks;
  s.config.finalize();
  if (ranks.count("embed")) {
    auto [a, b] = svd_truncate(teacher.tok_embed, ranks.at("embed"));
    s.tok_embed_a = std::move(a);
    s.tok_embed_b = std::move(b);
  } else {
    s.tok_embed = teacher.tok_embed.clone();
  }
  s.pos_embed = teacher.pos_embed.clone();
  if (!s.config.tied_head) s.head_weight = teacher.head_weight.clone();
  s.head_bias = teacher.head_bias.clone();
  s.layers.reserve(teacher.layers.size());
  for (const LayerParams& tl : teacher.layers) {
    LayerParams sl;
    sl.wq = factorize_linear(tl.wq, ranks, "wq");
    sl.wk = factorize_linear(tl.wk, ranks, "wk");
    sl.wv = factorize_linear(tl.wv, ranks, "wv");
    sl.wo = factorize_linear(tl.wo, ranks, "wo");
    sl.ln1_gain = tl.ln1_gain.clone();
    sl.ln1_bias = tl.ln1_bias.clone();
    sl.wu = factorize_linear(tl.wu, ranks, "wu");
    sl.wd = factorize_linear(tl.wd, ranks, "wd");
    sl.ln2_gain = tl.ln2_gain.clone();
    sl.ln2_bias = tl.ln2_bias.clone();
    s.layers.push_back(std::move(sl));
  }
  return s;
}

// One report row comparing a teacher matrix with its student counterpart.
static MatrixReport matrix_row(const std::string& name, const Tensor& tw, const LinearLayer& sl) {
  if (tw.empty()) throw std::invalid_argument("compression_report: teacher matrix '" + name + "' is not dense");
  MatrixReport r;
  r.name = name;
  r.n = tw.rows();
  r.m = tw.cols();
  r.dense_params = static_cast<int64_t>(r.n) * r.m;
  const double wf = frobenius_norm(tw);
  if (sl.factorized) {
    r.k = sl.a.cols();
    r.factorized_params = static_cast<int64_t>(r.k) * (r.n + r.m);
    r.truncation_error = frobenius_norm(sub(tw, matmul(sl.a, sl.b)));
  } else {
    r.k = 0;
    r.factorized_params = r.dense_params;
    r.truncation_error = frobenius_norm(sub(tw, sl.weight));
  }
  const double denom = wf * wf;
  r.retained_energy = denom > 0.0 ? 1.0 - (r.truncation_error * r.truncation_error) / denom : 1.0;
  return r;
}

static int64_t layer_linear_macs(const LayerParams& lay) {
  int64_t macs = 0;
  for (const LinearLayer* ll : {&lay.wq, &lay.wk, &lay.wv, &lay.wo, &lay.wu, &lay.wd}) {
    if (ll->factorized) {
      macs += static_cast<int64_t>(ll->rank()) * (ll->in_dim() + ll->out_dim());
    } else {
      macs += static_cast<int64_t>(ll->in_dim()) * ll->out_dim();
    }
  }
  return macs;
}

int64_t linear_macs_per_token(const TransformerModel& m) {
  int64_t macs = 0;
  for (const auto& lay : m.layers) macs += layer_linear_macs(lay);
  return macs;
}

CompressionReport compression_report(const TransformerModel& teacher, const TransformerModel& student) {
  const ModelConfig& tc = teacher.config;
  const ModelConfig& sc = student.config;
  if (tc.layers != sc.layers || tc.hidden != sc.hidden || tc.ffn != sc.ffn || tc.heads != sc.heads ||
      tc.vocab_size != sc.vocab_size || tc.max_seq_len != sc.max_seq_len) {
    throw std::invalid_argument("compression_report: teacher and student architectures differ");
  }
  CompressionReport rep;
  if (sc.embed_factorized()) {
    MatrixReport r;
    r.name = "tok_embed";
    r.n = tc.vocab_size;
    r.m = tc.hidden;
    r.k = student.tok_embed_a.cols();
    r.dense_params = static_cast<int64_t>(r.n) * r.m;
    r.factorized_params = static_cast<int64_t>(r.k) * (r.n + r.m);
    r.truncation_error = frobenius_norm(sub(teacher.tok_embed, matmul(student.tok_embed_a, student.tok_embed_b)));
    const double wf = frobenius_norm(teacher.tok_embed);
    r.retained_energy = wf > 0.0 ? 1.0 - (r.truncation_error * r.truncation_error) / (wf * wf) : 1.0;
    rep.matrices.push_back(std::move(r));
  }
  for (size_t l = 0; l < teacher.layers.size(); ++l) {
    const LayerParams& tl = teacher.layers[l];
    const LayerParams& sl = student.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    rep.matrices.push_back(matrix_row(p + "wq", tl.wq.weight, sl.wq));
    rep.matrices.push_back(matrix_row(p + "wk", tl.wk.weight, sl.wk));
    rep.matrices.push_back(matrix_row(p + "wv", tl.wv.weight, sl.wv));
    rep.matrices.push_back(matrix_row(p + "wo", tl.wo.weight, sl.wo));
    rep.matrices.push_back(matrix_row(p + "wu", tl.wu.weight, sl.wu));
    rep.matrices.push_back(matrix_row(p + "wd", tl.wd.weight, sl.wd));
  }
  rep.teacher_params = parameter_count(teacher);
  rep.student_params = parameter_count(student);
  rep.param_ratio = static_cast<double>(rep.teacher_params) / static_cast<double>(rep.student_params);

  rep.teacher_linear_macs = linear_macs_per_token(teacher);
  rep.student_linear_macs = linear_macs_per_token(student);
  rep.macs_ratio = rep.student_linear_macs > 0
                       ? static_cast<double>(rep.teacher_linear_macs) / static_cast<double>(rep.student_linear_macs)
                       : 1.0;
  rep.expands = rep.macs_ratio <= 1.0;
  return rep;
}

}  // namespace makd
