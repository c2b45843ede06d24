#include "makd/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace makd {

namespace {

constexpr double kJacobiTol = 1e-10;

// Columns stored contiguously (column-major) so every rotation streams
// two contiguous runs.
struct ColMat {
  int n = 0, m = 0;
  std::vector<double> a;  // column j at a[j*n .. j*n+n)

  double* col(int j) { return a.data() + static_cast<size_t>(j) * n; }
  const double* col(int j) const { return a.data() + static_cast<size_t>(j) * n; }
};

ColMat to_colmajor(const Tensor& w, bool transposed) {
  ColMat b;
  if (!transposed) {
    b.n = w.rows();
    b.m = w.cols();
    b.a.resize(static_cast<size_t>(b.n) * b.m);
    const double* p = w.data();
    for (int i = 0; i < b.n; ++i)
      for (int j = 0; j < b.m; ++j) b.a[static_cast<size_t>(j) * b.n + i] = p[static_cast<size_t>(i) * b.m + j];
  } else {
    b.n = w.cols();
    b.m = w.rows();
    b.a.resize(static_cast<size_t>(b.n) * b.m);
    const double* p = w.data();
    // column j of w^T is row j of w, already contiguous
    for (int j = 0; j < b.m; ++j)
      std::copy_n(p + static_cast<size_t>(j) * b.n, b.n, b.a.begin() + static_cast<size_t>(j) * b.n);
  }
  return b;
}

void rotate_pair(double* x, double* y, int len, double c, double s) {
  for (int i = 0; i < len; ++i) {
    const double xi = x[i], yi = y[i];
    x[i] = c * xi - s * yi;
    y[i] = s * xi + c * yi;
  }
}

}  // namespace

SvdResult svd(const Tensor& w) {
  if (w.rank() != 2) throw std::invalid_argument("svd: requires a rank-2 tensor, got " + w.shape_str());
  if (!w.all_finite()) throw std::invalid_argument("svd: input contains NaN/Inf");
  const int n = w.rows(), m = w.cols();
  const bool transposed = n < m;  // work with at least as many rows as columns
  ColMat b = to_colmajor(w, transposed);
  const int N = b.n, M = b.m;

  ColMat v;  // rotation accumulator, M x M identity
  v.n = M;
  v.m = M;
  v.a.assign(static_cast<size_t>(M) * M, 0.0);
  for (int j = 0; j < M; ++j) v.a[static_cast<size_t>(j) * M + j] = 1.0;

  const int max_sweeps = 10 * std::max(n, m);
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    int rotations = 0;
    for (int p = 0; p < M - 1; ++p) {
      for (int q = p + 1; q < M; ++q) {
        double* bp = b.col(p);
        double* bq = b.col(q);
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (int i = 0; i < N; ++i) {
          app += bp[i] * bp[i];
          aqq += bq[i] * bq[i];
          apq += bp[i] * bq[i];
        }
        if (app == 0.0 || aqq == 0.0) continue;
        if (std::abs(apq) <= kJacobiTol * std::sqrt(app * aqq)) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_pair(bp, bq, N, c, s);
        rotate_pair(v.col(p), v.col(q), M, c, s);
        ++rotations;
      }
    }
    if (rotations == 0) break;
  }
  if (sweep >= max_sweeps) {
    throw std::runtime_error("svd: one-sided Jacobi did not converge after " + std::to_string(max_sweeps) +
                             " sweeps on " + w.shape_str());
  }

  std::vector<double> sigma(static_cast<size_t>(M));
  for (int j = 0; j < M; ++j) {
    const double* bj = b.col(j);
    double s2 = 0.0;
    for (int i = 0; i < N; ++i) s2 += bj[i] * bj[i];
    sigma[static_cast<size_t>(j)] = std::sqrt(s2);
  }

  std::vector<int> order(static_cast<size_t>(M));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)]; });

  const double sigma_max = sigma[static_cast<size_t>(order[0])];
  const double cutoff = sigma_max * 1e-13;

  // left vectors: normalized columns of b; zero columns get a basis
  // completion so u stays orthonormal even for rank-deficient input
  std::vector<double> umat(static_cast<size_t>(N) * M, 0.0);  // column-major
  std::vector<double> s_sorted(static_cast<size_t>(M));
  for (int jj = 0; jj < M; ++jj) {
    const int j = order[static_cast<size_t>(jj)];
    const double sj = sigma[static_cast<size_t>(j)];
    s_sorted[static_cast<size_t>(jj)] = sj;
    double* uj = umat.data() + static_cast<size_t>(jj) * N;
    if (sj > cutoff) {
      const double* bj = b.col(j);
      const double inv = 1.0 / sj;
      for (int i = 0; i < N; ++i) uj[i] = bj[i] * inv;
    }
  }
  for (int jj = 0; jj < M; ++jj) {
    if (s_sorted[static_cast<size_t>(jj)] > cutoff) continue;
    s_sorted[static_cast<size_t>(jj)] = std::max(s_sorted[static_cast<size_t>(jj)], 0.0);
    double* uj = umat.data() + static_cast<size_t>(jj) * N;
    // Gram-Schmidt a canonical vector against the filled columns.
    for (int cand = 0; cand < N; ++cand) {
      std::fill(uj, uj + N, 0.0);
      uj[cand] = 1.0;
      for (int kk = 0; kk < M; ++kk) {
        if (kk == jj) continue;
        const double* uk = umat.data() + static_cast<size_t>(kk) * N;
        double dot = 0.0;
        for (int i = 0; i < N; ++i) dot += uj[i] * uk[i];
        for (int i = 0; i < N; ++i) uj[i] -= dot * uk[i];
      }
      double nrm = 0.0;
      for (int i = 0; i < N; ++i) nrm += uj[i] * uj[i];
      nrm = std::sqrt(nrm);
      if (nrm > 0.5) {
        for (int i = 0; i < N; ++i) uj[i] /= nrm;
        break;
      }
    }
  }

  // right vectors: sorted columns of the accumulator
  std::vector<double> vmat(static_cast<size_t>(M) * M);
  for (int jj = 0; jj < M; ++jj) {
    const int j = order[static_cast<size_t>(jj)];
    std::copy_n(v.col(j), M, vmat.begin() + static_cast<size_t>(jj) * M);
  }

  // deterministic signs: largest-magnitude entry of each left column positive
  for (int jj = 0; jj < M; ++jj) {
    double* uj = umat.data() + static_cast<size_t>(jj) * N;
    double* vj = vmat.data() + static_cast<size_t>(jj) * M;
    int arg = 0;
    double best = std::abs(uj[0]);
    for (int i = 1; i < N; ++i) {
      const double a = std::abs(uj[i]);
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (uj[arg] < 0.0) {
      for (int i = 0; i < N; ++i) uj[i] = -uj[i];
      for (int i = 0; i < M; ++i) vj[i] = -vj[i];
    }
  }

  auto rowmajor = [](const std::vector<double>& cm, int rows, int cols) {
    Tensor t({rows, cols});
    double* p = t.mut();
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) p[static_cast<size_t>(i) * cols + j] = cm[static_cast<size_t>(j) * rows + i];
    return t;
  };

  SvdResult out;
  out.s = std::move(s_sorted);
  out.sweeps = sweep + 1;
  if (!transposed) {
    out.u = rowmajor(umat, N, M);  // n x r
    out.v = rowmajor(vmat, M, M);  // m x r
  } else {
    out.u = rowmajor(vmat, M, M);  // n x r
    out.v = rowmajor(umat, N, M);  // m x r
  }
  return out;
}

Tensor svd_reconstruct(const SvdResult& r) {
  const int n = r.u.rows(), k = r.u.cols(), m = r.v.rows();
  Tensor us({n, k});
  double* p = us.mut();
  const double* pu = r.u.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) p[static_cast<size_t>(i) * k + j] = pu[static_cast<size_t>(i) * k + j] * r.s[static_cast<size_t>(j)];
  Tensor vt({k, m});
  double* pv = vt.mut();
  const double* pvv = r.v.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) pv[static_cast<size_t>(j) * m + i] = pvv[static_cast<size_t>(i) * k + j];
  return matmul(us, vt);
}

}  // namespace makd
