#pragma once

#include "makd/tensor.hpp"

namespace makd {

// Thin SVD of w[n x m]: w = u * diag(s) * v^T with u[n x r], v[m x r],
// r = min(n, m), s nonnegative and sorted descending. Column signs are
// fixed by making the largest-magnitude entry of each u column positive.
struct SvdResult {
  Tensor u;
  std::vector<double> s;
  Tensor v;
  int sweeps = 0;
};

// One-sided Jacobi on the shorter side of w. Converges when every column
// pair is orthogonal to 1e-10 relative; throws on non-convergence with
// the sweep count in the message.
SvdResult svd(const Tensor& w);

// U * diag(s) * V^T for checking reconstructions.
Tensor svd_reconstruct(const SvdResult& r);

}  // namespace makd
