#include "makd/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace makd {

namespace {

// log(sum(exp(x))) over a contiguous run, max-subtracted
double lse(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

void require_rows(const std::vector<int>& rows, int nrows, const char* what) {
  if (rows.empty()) throw std::invalid_argument(std::string(what) + ": empty row list");
  for (int r : rows) {
    if (r < 0 || r >= nrows) {
      throw std::invalid_argument(std::string(what) + ": row " + std::to_string(r) + " out of range [0," +
                                  std::to_string(nrows) + ")");
    }
  }
}

}  // namespace

void GradientTape::clear() {
  slots_.clear();
  backops_.clear();
}

GradientTape::Slot& GradientTape::slot(Var v) {
  if (v.id < 0 || static_cast<size_t>(v.id) >= slots_.size()) throw std::logic_error("tape: invalid var handle");
  return slots_[static_cast<size_t>(v.id)];
}

const GradientTape::Slot& GradientTape::slot(Var v) const {
  if (v.id < 0 || static_cast<size_t>(v.id) >= slots_.size()) throw std::logic_error("tape: invalid var handle");
  return slots_[static_cast<size_t>(v.id)];
}

Var GradientTape::push(Tensor value, bool needs_grad) {
  Slot s;
  s.value = std::move(value);
  s.needs_grad = needs_grad && recording_;
  slots_.push_back(std::move(s));
  return Var{static_cast<int>(slots_.size()) - 1};
}

Var GradientTape::leaf(const Tensor& value, bool needs_grad) { return push(value, needs_grad); }

const Tensor& GradientTape::value(Var v) const { return slot(v).value; }

double GradientTape::scalar(Var v) const {
  const Tensor& t = slot(v).value;
  if (t.numel() != 1) throw std::invalid_argument("tape: scalar() on tensor of shape " + t.shape_str());
  return t.data()[0];
}

Tensor GradientTape::grad(Var v) const {
  const Slot& s = slot(v);
  if (s.grad.numel() == 0) return Tensor::zeros(s.value.shape());
  return s.grad;
}

void GradientTape::accum(Var v, const Tensor& g) {
  Slot& s = slot(v);
  if (!s.needs_grad) return;
  if (s.grad.numel() == 0) s.grad = Tensor::zeros(s.value.shape());
  double* p = s.grad.mut();
  const double* q = g.data();
  for (int64_t i = 0; i < g.numel(); ++i) p[i] += q[i];
}

bool GradientTape::track(std::initializer_list<Var> ins) const {
  if (!recording_) return false;
  for (Var v : ins) {
    if (slot(v).needs_grad) return true;
  }
  return false;
}

Var GradientTape::matmul(Var a, Var b) {
  Var out = push(makd::matmul(value(a), value(b)), track({a, b}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, a, b, out] {
      const Tensor gc = grad(out);
      if (slot(a).needs_grad) accum(a, makd::matmul_nt(gc, value(b)));
      if (slot(b).needs_grad) accum(b, makd::matmul_tn(value(a), gc));
    });
  }
  return out;
}

Var GradientTape::matmul_nt(Var a, Var b) {
  Var out = push(makd::matmul_nt(value(a), value(b)), track({a, b}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, a, b, out] {
      const Tensor gc = grad(out);
      if (slot(a).needs_grad) accum(a, makd::matmul(gc, value(b)));
      if (slot(b).needs_grad) accum(b, makd::matmul_tn(gc, value(a)));
    });
  }
  return out;
}

Var GradientTape::add(Var a, Var b) {
  Var out = push(makd::add(value(a), value(b)), track({a, b}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, a, b, out] {
      const Tensor gc = grad(out);
      accum(a, gc);
      accum(b, gc);
    });
  }
  return out;
}

Var GradientTape::add_row_bias(Var x, Var bias) {
  Var out = push(makd::add_row_bias(value(x), value(bias)), track({x, bias}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, x, bias, out] {
      const Tensor gc = grad(out);
      accum(x, gc);
      if (slot(bias).needs_grad) {
        const int r = gc.rows(), c = gc.cols();
        Tensor gb({c});
        double* p = gb.mut();
        const double* q = gc.data();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) p[j] += q[static_cast<size_t>(i) * c + j];
        accum(bias, gb);
      }
    });
  }
  return out;
}

Var GradientTape::scale(Var a, double s) {
  Var out = push(makd::scale(value(a), s), track({a}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, a, s, out] { accum(a, makd::scale(grad(out), s)); });
  }
  return out;
}

Var GradientTape::slice_cols(Var x, int c0, int c1) {
  Var out = push(makd::slice_cols(value(x), c0, c1), track({x}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, x, c0, c1, out] {
      const Tensor gc = grad(out);
      const Tensor& xv = value(x);
      Tensor gx = Tensor::zeros(xv.shape());
      const int r = xv.rows(), cx = xv.cols(), c = c1 - c0;
      double* p = gx.mut();
      const double* q = gc.data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) p[static_cast<size_t>(i) * cx + c0 + j] = q[static_cast<size_t>(i) * c + j];
      accum(x, gx);
    });
  }
  return out;
}

Var GradientTape::concat_cols(const std::vector<Var>& parts) {
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  bool needs = false;
  for (Var p : parts) {
    vals.push_back(value(p));
    needs = needs || slot(p).needs_grad;
  }
  Var out = push(makd::concat_cols(vals), recording_ && needs);
  if (slot(out).needs_grad) {
    std::vector<Var> ps = parts;
    backops_.push_back([this, ps, out] {
      const Tensor gc = grad(out);
      int off = 0;
      for (Var p : ps) {
        const int c = value(p).cols();
        if (slot(p).needs_grad) accum(p, makd::slice_cols(gc, off, off + c));
        off += c;
      }
    });
  }
  return out;
}

Var GradientTape::softmax_rows(Var x, const Tensor* mask) {
  Var out = push(makd::softmax_rows(value(x), mask), track({x}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, x, out] {
      const Tensor& p = value(out);
      const Tensor gy = grad(out);
      const int n = p.dim(p.rank() - 1);
      const int64_t rows = p.numel() / n;
      Tensor gx(p.shape());
      double* pg = gx.mut();
      const double* pp = p.data();
      const double* pgy = gy.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* pi = pp + r * n;
        const double* gi = pgy + r * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += gi[j] * pi[j];
        double* oi = pg + r * n;
        for (int j = 0; j < n; ++j) oi[j] = pi[j] * (gi[j] - dot);
      }
      accum(x, gx);
    });
  }
  return out;
}

Var GradientTape::layer_norm(Var x, Var gain, Var bias, double eps) {
  Var out = push(makd::layer_norm(value(x), value(gain), value(bias), eps), track({x, gain, bias}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, x, gain, bias, eps, out] {
      const Tensor& xv = value(x);
      const Tensor& gv = value(gain);
      const Tensor gy = grad(out);
      const int d = xv.dim(xv.rank() - 1);
      const int64_t rows = xv.numel() / d;
      Tensor gx(xv.shape());
      Tensor ggain({d});
      Tensor gbias({d});
      double* pgx = gx.mut();
      double* pgg = ggain.mut();
      double* pgb = gbias.mut();
      const double* px = xv.data();
      const double* pg = gv.data();
      const double* py = gy.data();
      std::vector<double> xhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const double* xi = px + r * d;
        const double* yi = py + r * d;
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
        double gh_mean = 0.0, ghx_mean = 0.0;
        for (int j = 0; j < d; ++j) {
          xhat[static_cast<size_t>(j)] = (xi[j] - mean) * inv;
          const double gh = yi[j] * pg[j];
          gh_mean += gh;
          ghx_mean += gh * xhat[static_cast<size_t>(j)];
        }
        gh_mean /= d;
        ghx_mean /= d;
        double* oi = pgx + r * d;
        for (int j = 0; j < d; ++j) {
          const double gh = yi[j] * pg[j];
          oi[j] = inv * (gh - gh_mean - xhat[static_cast<size_t>(j)] * ghx_mean);
          pgg[j] += yi[j] * xhat[static_cast<size_t>(j)];
          pgb[j] += yi[j];
        }
      }
      accum(x, gx);
      accum(gain, ggain);
      accum(bias, gbias);
    });
  }
  return out;
}

Var GradientTape::gelu(Var x, GeluKind kind) {
  Var out = push(makd::gelu(value(x), kind), track({x}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, x, kind, out] {
      const Tensor& xv = value(x);
      const Tensor gy = grad(out);
      Tensor gx(xv.shape());
      double* p = gx.mut();
      const double* px = xv.data();
      const double* pyg = gy.data();
      for (int64_t i = 0; i < xv.numel(); ++i) p[i] = gelu_grad_scalar(px[i], kind) * pyg[i];
      accum(x, gx);
    });
  }
  return out;
}

Var GradientTape::gather_rows(Var table, std::vector<int> ids) {
  const Tensor& tv = value(table);
  if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank-2, got " + tv.shape_str());
  const int d = tv.cols();
  for (int id : ids) {
    if (id < 0 || id >= tv.rows()) {
      throw std::invalid_argument("gather_rows: row id " + std::to_string(id) + " out of range for " +
                                  tv.shape_str());
    }
  }
  Tensor out({static_cast<int>(ids.size()), d});
  double* p = out.mut();
  const double* pt = tv.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(pt + static_cast<size_t>(ids[i]) * d, d, p + i * d);
  }
  Var o = push(std::move(out), track({table}));
  if (slot(o).needs_grad) {
    backops_.push_back([this, table, ids = std::move(ids), o] {
      const Tensor gc = grad(o);
      const Tensor& tv2 = value(table);
      Tensor gt = Tensor::zeros(tv2.shape());
      const int dd = tv2.cols();
      double* pg = gt.mut();
      const double* q = gc.data();
      for (size_t i = 0; i < ids.size(); ++i) {
        double* row = pg + static_cast<size_t>(ids[i]) * dd;
        const double* src = q + i * dd;
        for (int j = 0; j < dd; ++j) row[j] += src[j];
      }
      accum(table, gt);
    });
  }
  return o;
}

Var GradientTape::mse_vs(Var x, const Tensor& target, const std::vector<int>& rows) {
  const Tensor& xv = value(x);
  if (!xv.same_shape(target)) {
    throw std::invalid_argument("mse_vs: shape mismatch " + xv.shape_str() + " vs " + target.shape_str());
  }
  const int c = xv.cols();
  require_rows(rows, xv.rows(), "mse_vs");
  const double denom = static_cast<double>(rows.size()) * c;
  double acc = 0.0;
  const double* px = xv.data();
  const double* pt = target.data();
  for (int r : rows) {
    const double* xi = px + static_cast<size_t>(r) * c;
    const double* ti = pt + static_cast<size_t>(r) * c;
    for (int j = 0; j < c; ++j) {
      const double d = xi[j] - ti[j];
      acc += d * d;
    }
  }
  Var out = push(Tensor({1}, {acc / denom}), track({x}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, x, target, rows, denom, out] {
      const double g = grad(out).data()[0];
      const Tensor& xv2 = value(x);
      const int cc = xv2.cols();
      Tensor gx = Tensor::zeros(xv2.shape());
      double* p = gx.mut();
      const double* px2 = xv2.data();
      const double* pt2 = target.data();
      const double k = 2.0 * g / denom;
      for (int r : rows) {
        double* oi = p + static_cast<size_t>(r) * cc;
        const double* xi = px2 + static_cast<size_t>(r) * cc;
        const double* ti = pt2 + static_cast<size_t>(r) * cc;
        for (int j = 0; j < cc; ++j) oi[j] += k * (xi[j] - ti[j]);
      }
      accum(x, gx);
    });
  }
  return out;
}

Var GradientTape::kl_rows_vs(Var probs, const Tensor& target_probs, double eps, const std::vector<int>& rows,
                             bool reversed) {
  const Tensor& pv = value(probs);
  if (!pv.same_shape(target_probs)) {
    throw std::invalid_argument("kl_rows_vs: shape mismatch " + pv.shape_str() + " vs " + target_probs.shape_str());
  }
  if (eps <= 0.0) throw std::invalid_argument("kl_rows_vs: eps must be positive");
  const int c = pv.cols();
  require_rows(rows, pv.rows(), "kl_rows_vs");
  const double denom = static_cast<double>(rows.size());
  double acc = 0.0;
  const double* pp = pv.data();
  const double* pt = target_probs.data();
  for (int r : rows) {
    const double* pi = pp + static_cast<size_t>(r) * c;
    const double* ti = pt + static_cast<size_t>(r) * c;
    for (int j = 0; j < c; ++j) {
      const double lp = std::log(std::max(pi[j], eps));
      const double lt = std::log(std::max(ti[j], eps));
      acc += reversed ? ti[j] * (lt - lp) : pi[j] * (lp - lt);
    }
  }
  Var out = push(Tensor({1}, {acc / denom}), track({probs}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, probs, target_probs, eps, rows, reversed, denom, out] {
      const double g = grad(out).data()[0];
      const Tensor& pv2 = value(probs);
      const int cc = pv2.cols();
      Tensor gp = Tensor::zeros(pv2.shape());
      double* o = gp.mut();
      const double* pp2 = pv2.data();
      const double* pt2 = target_probs.data();
      const double k = g / denom;
      for (int r : rows) {
        double* oi = o + static_cast<size_t>(r) * cc;
        const double* pi = pp2 + static_cast<size_t>(r) * cc;
        const double* ti = pt2 + static_cast<size_t>(r) * cc;
        for (int j = 0; j < cc; ++j) {
          if (reversed) {
            oi[j] += (pi[j] > eps) ? -k * ti[j] / pi[j] : 0.0;
          } else {
            const double lp = std::log(std::max(pi[j], eps));
            const double lt = std::log(std::max(ti[j], eps));
            oi[j] += k * ((lp - lt) + (pi[j] > eps ? 1.0 : 0.0));
          }
        }
      }
      accum(probs, gp);
    });
  }
  return out;
}

Var GradientTape::soft_ce_vs(Var logits, const Tensor& target_logits, double temperature,
                             const std::vector<int>& rows, bool t2_scale) {
  if (temperature <= 0.0) throw std::invalid_argument("soft_ce_vs: temperature must be positive");
  const Tensor& zv = value(logits);
  if (!zv.same_shape(target_logits)) {
    throw std::invalid_argument("soft_ce_vs: shape mismatch " + zv.shape_str() + " vs " + target_logits.shape_str());
  }
  const int c = zv.cols();
  require_rows(rows, zv.rows(), "soft_ce_vs");
  const double denom = static_cast<double>(rows.size());
  const double outer = t2_scale ? temperature * temperature : 1.0;
  const double* pz = zv.data();
  const double* pt = target_logits.data();
  std::vector<double> xs(static_cast<size_t>(c)), ys(static_cast<size_t>(c));
  double acc = 0.0;
  for (int r : rows) {
    const double* zi = pz + static_cast<size_t>(r) * c;
    const double* ti = pt + static_cast<size_t>(r) * c;
    for (int j = 0; j < c; ++j) {
      xs[static_cast<size_t>(j)] = zi[j] / temperature;
      ys[static_cast<size_t>(j)] = ti[j] / temperature;
    }
    const double lx = lse(xs.data(), c);
    const double ly = lse(ys.data(), c);
    double cross = 0.0;
    for (int j = 0; j < c; ++j) {
      const double ptj = std::exp(ys[static_cast<size_t>(j)] - ly);
      cross += ptj * xs[static_cast<size_t>(j)];
    }
    acc += lx - cross;
  }
  Var out = push(Tensor({1}, {outer * acc / denom}), track({logits}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, logits, target_logits, temperature, rows, outer, denom, out] {
      const double g = grad(out).data()[0];
      const Tensor& zv2 = value(logits);
      const int cc = zv2.cols();
      Tensor gz = Tensor::zeros(zv2.shape());
      double* o = gz.mut();
      const double* pz2 = zv2.data();
      const double* pt2 = target_logits.data();
      std::vector<double> xs2(static_cast<size_t>(cc)), ys2(static_cast<size_t>(cc));
      const double k = g * outer / (denom * temperature);
      for (int r : rows) {
        const double* zi = pz2 + static_cast<size_t>(r) * cc;
        const double* ti = pt2 + static_cast<size_t>(r) * cc;
        for (int j = 0; j < cc; ++j) {
          xs2[static_cast<size_t>(j)] = zi[j] / temperature;
          ys2[static_cast<size_t>(j)] = ti[j] / temperature;
        }
        const double lx = lse(xs2.data(), cc);
        const double ly = lse(ys2.data(), cc);
        double* oi = o + static_cast<size_t>(r) * cc;
        for (int j = 0; j < cc; ++j) {
          const double ps = std::exp(xs2[static_cast<size_t>(j)] - lx);
          const double ptj = std::exp(ys2[static_cast<size_t>(j)] - ly);
          oi[j] += k * (ps - ptj);
        }
      }
      accum(logits, gz);
    });
  }
  return out;
}

Var GradientTape::ce_hard(Var logits, const std::vector<int>& labels, const std::vector<int>& rows) {
  const Tensor& zv = value(logits);
  const int c = zv.cols();
  require_rows(rows, zv.rows(), "ce_hard");
  if (labels.size() != rows.size()) {
    throw std::invalid_argument("ce_hard: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows.size()) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || l >= c) throw std::invalid_argument("ce_hard: label " + std::to_string(l) + " out of range");
  }
  const double denom = static_cast<double>(rows.size());
  const double* pz = zv.data();
  double acc = 0.0;
  for (size_t i = 0; i < rows.size(); ++i) {
    const double* zi = pz + static_cast<size_t>(rows[i]) * c;
    acc += lse(zi, c) - zi[labels[i]];
  }
  Var out = push(Tensor({1}, {acc / denom}), track({logits}));
  if (slot(out).needs_grad) {
    backops_.push_back([this, logits, labels, rows, denom, out] {
      const double g = grad(out).data()[0];
      const Tensor& zv2 = value(logits);
      const int cc = zv2.cols();
      Tensor gz = Tensor::zeros(zv2.shape());
      double* o = gz.mut();
      const double* pz2 = zv2.data();
      const double k = g / denom;
      for (size_t i = 0; i < rows.size(); ++i) {
        const double* zi = pz2 + static_cast<size_t>(rows[i]) * cc;
        double* oi = o + static_cast<size_t>(rows[i]) * cc;
        const double l = lse(zi, cc);
        for (int j = 0; j < cc; ++j) oi[j] += k * std::exp(zi[j] - l);
        oi[labels[i]] -= k;
      }
      accum(logits, gz);
    });
  }
  return out;
}

Var GradientTape::wsum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("wsum: terms/weights length mismatch");
  double acc = 0.0;
  bool needs = false;
  for (size_t i = 0; i < terms.size(); ++i) {
    acc += weights[i] * scalar(terms[i]);
    needs = needs || slot(terms[i]).needs_grad;
  }
  Var out = push(Tensor({1}, {acc}), recording_ && needs);
  if (slot(out).needs_grad) {
    std::vector<Var> ts = terms;
    std::vector<double> ws = weights;
    backops_.push_back([this, ts, ws, out] {
      const double g = grad(out).data()[0];
      for (size_t i = 0; i < ts.size(); ++i) {
        if (slot(ts[i]).needs_grad) accum(ts[i], Tensor({1}, {g * ws[i]}));
      }
    });
  }
  return out;
}

void GradientTape::backward(Var loss) {
  Slot& s = slot(loss);
  if (s.value.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + s.value.shape_str());
  }
  if (!recording_) throw std::logic_error("backward: tape is not recording");
  s.grad = Tensor({1}, {1.0});
  s.needs_grad = true;
  for (auto it = backops_.rbegin(); it != backops_.rend(); ++it) (*it)();
}

}  // namespace makd
