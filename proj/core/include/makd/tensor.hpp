#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace makd {

// Dense row-major tensor of doubles. Copies are cheap (shared storage);
// all kernels allocate fresh outputs, so shared buffers are never written
// through. The optimizer is the one deliberate exception (see mut()).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  // 2-D convenience constructors.
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor identity(int n);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return numel_; }
  bool empty() const { return numel_ == 0; }

  // 2-D accessors; valid only for rank-2 tensors.
  int rows() const { return shape_[0]; }
  int cols() const { return shape_[1]; }
  double at(int r, int c) const { return (*data_)[static_cast<size_t>(r) * shape_[1] + c]; }

  const double* data() const { return data_->data(); }
  std::span<const double> values() const { return {data_->data(), data_->size()}; }

  // In-place access. Caller must hold the only live reference to the
  // buffer (parameter updates between training steps).
  double* mut() { return data_->data(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  // Deep copy with its own buffer (copies otherwise share storage).
  Tensor clone() const;

  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  int64_t numel_ = 0;
};

std::string shape_str(const std::vector<int>& shape);

enum class GeluKind { Tanh, Erf };

// ---- pure kernels -------------------------------------------------------

// Standard matrix product a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x k] * b[n x k]^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a[k x m]^T * b[k x n] without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x[r x c] + bias[c] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Row-wise softmax with max-subtraction. mask, when present, is a 0/1
// tensor of the same shape; masked entries (0) are excluded via an
// additive -1e9 surrogate and come out exactly zero. A fully masked row
// is an error.
Tensor softmax_rows(const Tensor& x, const Tensor* mask = nullptr);

// Per-row normalization over the last dimension (population variance),
// then elementwise gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor gelu(const Tensor& x, GeluKind kind = GeluKind::Tanh);
double gelu_scalar(double x, GeluKind kind);
double gelu_grad_scalar(double x, GeluKind kind);

double frobenius_norm(const Tensor& a);
double sum(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Additive mask surrogate used by softmax_rows.
inline constexpr double kMaskNegative = 1e9;

// ---- deterministic RNG --------------------------------------------------

// Self-contained generator so that sampled values depend only on the
// seed, not on a standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);
  // Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Stable derived seed for a named substream.
  static uint64_t derive(uint64_t seed, uint64_t stream, uint64_t index);

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Tensor random_normal(std::vector<int> shape, Rng& rng, double stddev = 1.0);
Tensor random_uniform(std::vector<int> shape, Rng& rng, double lo, double hi);

}  // namespace makd
