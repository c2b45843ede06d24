#include "makd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace makd {

namespace {

int64_t checked_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_2d(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(what) + " requires a rank-2 tensor, got shape " + t.shape_str());
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  numel_ = checked_numel(shape_);
  data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(numel_), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
  numel_ = checked_numel(shape_);
  if (static_cast<int64_t>(values.size()) != numel_) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + makd::shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("from_rows: no rows");
  const int r = static_cast<int>(rows.size());
  const int c = static_cast<int>(rows[0].size());
  std::vector<double> v;
  v.reserve(static_cast<size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw std::invalid_argument("from_rows: ragged rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.mut()[static_cast<size_t>(i) * n + i] = 1.0;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  if (!data_) return Tensor();
  Tensor t(shape_);
  std::copy(data_->begin(), data_->end(), t.data_->begin());
  return t;
}

std::string Tensor::shape_str() const { return makd::shape_str(shape_); }

// ---- kernels ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + a.shape_str() + " vs " + b.shape_str());
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.mut();
  for (int i = 0; i < m; ++i) {
    double* ci = pc + static_cast<size_t>(i) * n;
    const double* ai = pa + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = pb + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dimensions disagree, " + a.shape_str() + " vs " +
                                b.shape_str() + "^T");
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.mut();
  for (int i = 0; i < m; ++i) {
    const double* ai = pa + static_cast<size_t>(i) * k;
    double* ci = pc + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = pb + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] = acc;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_tn");
  require_2d(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: inner dimensions disagree, " + a.shape_str() + "^T vs " +
                                b.shape_str());
  }
  const int m = a.cols(), k = a.rows(), n = b.cols();
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.mut();
  for (int kk = 0; kk < k; ++kk) {
    const double* ak = pa + static_cast<size_t>(kk) * m;
    const double* bk = pb + static_cast<size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      const double av = ak[i];
      double* ci = pc + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor t({n, m});
  double* pt = t.mut();
  const double* pa = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) pt[static_cast<size_t>(j) * m + i] = pa[static_cast<size_t>(i) * n + j];
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor c(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.mut();
  for (int64_t i = 0; i < a.numel(); ++i) pc[i] = pa[i] + pb[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor c(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.mut();
  for (int64_t i = 0; i < a.numel(); ++i) pc[i] = pa[i] - pb[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c(a.shape());
  const double* pa = a.data();
  double* pc = c.mut();
  for (int64_t i = 0; i < a.numel(); ++i) pc[i] = pa[i] * s;
  return c;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_row_bias");
  if (bias.rank() != 1 || bias.dim(0) != x.cols()) {
    throw std::invalid_argument("add_row_bias: bias " + bias.shape_str() + " does not match " + x.shape_str());
  }
  const int r = x.rows(), c = x.cols();
  Tensor y({r, c});
  const double* px = x.data();
  const double* pb = bias.data();
  double* py = y.mut();
  for (int i = 0; i < r; ++i) {
    const double* xi = px + static_cast<size_t>(i) * c;
    double* yi = py + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) yi[j] = xi[j] + pb[j];
  }
  return y;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  require_2d(x, "slice_cols");
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") invalid for " + x.shape_str());
  }
  const int r = x.rows(), c = c1 - c0;
  Tensor y({r, c});
  const double* px = x.data();
  double* py = y.mut();
  for (int i = 0; i < r; ++i) {
    std::copy_n(px + static_cast<size_t>(i) * x.cols() + c0, c, py + static_cast<size_t>(i) * c);
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int r = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch " + p.shape_str());
    total += p.cols();
  }
  Tensor y({r, total});
  double* py = y.mut();
  int off = 0;
  for (const auto& p : parts) {
    const double* pp = p.data();
    for (int i = 0; i < r; ++i) {
      std::copy_n(pp + static_cast<size_t>(i) * p.cols(), p.cols(), py + static_cast<size_t>(i) * total + off);
    }
    off += p.cols();
  }
  return y;
}

Tensor softmax_rows(const Tensor& x, const Tensor* mask) {
  if (x.rank() < 1) throw std::invalid_argument("softmax_rows: rank-0 input");
  if (mask && !mask->same_shape(x)) {
    throw std::invalid_argument("softmax_rows: mask shape " + mask->shape_str() + " does not match " + x.shape_str());
  }
  const int n = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / n;
  Tensor y(x.shape());
  const double* px = x.data();
  const double* pm = mask ? mask->data() : nullptr;
  double* py = y.mut();
  std::vector<double> row(static_cast<size_t>(n));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = px + r * n;
    const double* mi = pm ? pm + r * n : nullptr;
    bool any = false;
    for (int j = 0; j < n; ++j) {
      row[static_cast<size_t>(j)] = xi[j];
      if (mi && mi[j] == 0.0) {
        row[static_cast<size_t>(j)] -= kMaskNegative;
      } else {
        any = true;
      }
    }
    if (!any) throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(r));
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[static_cast<size_t>(j)]);
    double s = 0.0;
    double* yi = py + r * n;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(row[static_cast<size_t>(j)] - mx);
      yi[j] = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < n; ++j) yi[j] *= inv;
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const int d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw std::invalid_argument("layer_norm: gain " + gain.shape_str() + " / bias " + bias.shape_str() +
                                " do not match " + x.shape_str());
  }
  const int64_t rows = x.numel() / d;
  Tensor y(x.shape());
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* py = y.mut();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = px + r * d;
    double* yi = py + r * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double t = xi[j] - mean;
      var += t * t;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mean) * inv * pg[j] + pb[j];
  }
  return y;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x, GeluKind kind) {
  if (kind == GeluKind::Tanh) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  }
  return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

double gelu_grad_scalar(double x, GeluKind kind) {
  if (kind == GeluKind::Tanh) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
  }
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

Tensor gelu(const Tensor& x, GeluKind kind) {
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mut();
  for (int64_t i = 0; i < x.numel(); ++i) py[i] = gelu_scalar(px[i], kind);
  return y;
}

double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

// ---- rng ----------------------------------------------------------------

uint64_t Rng::next_u64() {
  // splitmix64
  uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::uniform_int(int64_t n) {
  // Modulo bias is negligible for n << 2^64.
  return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

uint64_t Rng::derive(uint64_t seed, uint64_t stream, uint64_t index) {
  // One splitmix scramble over the packed triple keeps substreams stable
  // and independent of call order.
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1) + 0xbf58476d1ce4e5b9ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Tensor random_normal(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  double* p = t.mut();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal() * stddev;
  return t;
}

Tensor random_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  double* p = t.mut();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace makd
