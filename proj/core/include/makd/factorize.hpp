#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "makd/model.hpp"
#include "makd/tensor.hpp"

namespace makd {

// How to pick preserved ranks for the student. Exactly one of uniform_rank,
// rank_map, or target_rate must be set. target_rate resolves to the largest
// uniform k whose whole-model parameter compression still meets the rate.
struct FactorizationSpec {
  int uniform_rank = 0;                 // > 0: same k for every projection
  std::map<std::string, int> rank_map;  // per-role; absent role stays dense
  double target_rate = 0.0;             // > 0: teacher/student parameter ratio to meet
  bool factorize_embeddings = false;    // also factorize the token embedding

  // Final role->k assignment for a given teacher config.
  std::map<std::string, int> resolve(const ModelConfig& teacher) const;
};

// W -> (A, B) keeping the top-k singular directions: A = U_k Sigma_k,
// B = V_k^T. A*B is the Frobenius-optimal rank-k approximation.
std::pair<Tensor, Tensor> svd_truncate(const Tensor& w, int k);

// Student with the teacher's architecture, projections replaced by their
// truncated factors; biases, layer-norms and (by default) embeddings are
// copied verbatim.
TransformerModel build_student(const TransformerModel& teacher, const FactorizationSpec& spec);

struct MatrixReport {
  std::string name;         // e.g. layer3.wu
  int n = 0, m = 0, k = 0;  // teacher n x m, preserved rank
  int64_t dense_params = 0;       // n*m
  int64_t factorized_params = 0;  // k*(n+m)
  double truncation_error = 0.0;  // ||W - AB||_F
  double retained_energy = 0.0;   // 1 - error^2 / ||W||_F^2
};

struct CompressionReport {
  std::vector<MatrixReport> matrices;
  int64_t teacher_params = 0;
  int64_t student_params = 0;
  double param_ratio = 0.0;
  // Per-token multiply-accumulates over the transformer layers' linear
  // projections (embedding lookup and output head excluded).
  int64_t teacher_linear_macs = 0;
  int64_t student_linear_macs = 0;
  double macs_ratio = 0.0;
  // Set when the factorization does not shrink anything (k > nm/(n+m)).
  bool expands = false;
};

CompressionReport compression_report(const TransformerModel& teacher, const TransformerModel& student);

// Per-token multiply-accumulates of the transformer layers' linear
// projections (dense nm, factorized k(n+m)); embeddings and head excluded.
int64_t linear_macs_per_token(const TransformerModel& m);

}  // namespace makd
