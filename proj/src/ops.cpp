#include "mmkd/ops.hpp"

#include <cmath>
#include <cstddef>
#include <string>

#include "mmkd/errors.hpp"

namespace mmkd::ad {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr fresh(Shape shape) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(numel(n->shape), 0.0);
  return n;
}

bool grad_wanted(const Tensor& a) { return GradMode::enabled() && a.requires_grad(); }
bool grad_wanted(const Tensor& a, const Tensor& b) {
  return GradMode::enabled() && (a.requires_grad() || b.requires_grad());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

// Dot product with a fixed 4-way unroll. The summation order is part of the
// contract: results must be bit-identical across runs and build hosts, so no
// -ffast-math style reassociation is left to the compiler.
double dot_u4(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// C[m x n] += A[m x k] * B[k x n]. The j loop is a pure axpy, which the
// compiler vectorizes without reordering any additions.
void mm_nn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double apv = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += apv * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T.
void mm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] += dot_u4(ai, b + static_cast<std::size_t>(j) * k, k);
  }
}

// C[k x n] += A[m x k]^T * B[m x n].
void mm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double apv = ai[p];
      double* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += apv * bi[j];
    }
  }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto out = fresh(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  if (grad_wanted(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node_ptr(), b.node_ptr()};
    out->backprop = [](Node& self) {
      for (int p = 0; p < 2; ++p) {
        Node& par = *self.parents[p];
        if (!par.requires_grad) continue;
        par.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto out = fresh(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  if (grad_wanted(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node_ptr(), b.node_ptr()};
    out->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto out = fresh(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  if (grad_wanted(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node_ptr(), b.node_ptr()};
    out->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const int r = x.rows();
  const int d = x.cols();
  if (static_cast<int>(bias.value().size()) != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match row width of " +
                         shape_str(x.shape()));
  }
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  const auto& bv = bias.value();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < d; ++j)
      out->value[static_cast<std::size_t>(i) * d + j] = xv[static_cast<std::size_t>(i) * d + j] + bv[j];
  }
  if (grad_wanted(x, bias)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr(), bias.node_ptr()};
    out->backprop = [r, d](Node& self) {
      Node& px = *self.parents[0];
      Node& pb = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int i = 0; i < r; ++i) {
          const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) pb.grad[j] += g[j];
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor scale(const Tensor& x, double c) {
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * c;
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [c](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += c * self.grad[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor add_const(const Tensor& x, double c) {
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] + c;
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor sqrt_(const Tensor& x) {
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (xv[i] < 0.0) throw NumericError("sqrt_: negative input " + std::to_string(xv[i]));
    out->value[i] = std::sqrt(xv[i]);
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px.grad[i] += self.grad[i] * 0.5 / self.value[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor log_(const Tensor& x) {
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) throw NumericError("log_: input must be positive, got " + std::to_string(xv[i]));
    out->value[i] = std::log(xv[i]);
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] / px.value[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor gelu(const Tensor& x) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt_2pi = 1.0 / std::sqrt(8.0 * std::atan(1.0));
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i)
    out->value[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = px.value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = std::exp(-0.5 * v * v) * inv_sqrt_2pi;
        px.grad[i] += self.grad[i] * (cdf + v * pdf);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = fresh({m, n});
  mm_nn_acc(a.value().data(), b.value().data(), out->value.data(), m, k, n);
  if (grad_wanted(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node_ptr(), b.node_ptr()};
    out->backprop = [m, k, n](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        mm_nt_acc(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        mm_tn_acc(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  auto out = fresh({m, n});
  mm_nt_acc(a.value().data(), b.value().data(), out->value.data(), m, k, n);
  if (grad_wanted(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node_ptr(), b.node_ptr()};
    out->backprop = [m, k, n](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        mm_nn_acc(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        mm_tn_acc(self.grad.data(), pa.value.data(), pb.grad.data(), m, n, k);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor slice_rows(const Tensor& x, int start, int count) {
  require_matrix("slice_rows", x);
  const int r = x.shape()[0], d = x.shape()[1];
  if (start < 0 || count < 1 || start + count > r) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of bounds for " + shape_str(x.shape()));
  }
  auto out = fresh({count, d});
  const double* src = x.value().data() + static_cast<std::size_t>(start) * d;
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = src[i];
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [start, d](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      double* dst = px.grad.data() + static_cast<std::size_t>(start) * d;
      for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor slice_cols(const Tensor& x, int start, int count) {
  require_matrix("slice_cols", x);
  const int r = x.shape()[0], d = x.shape()[1];
  if (start < 0 || count < 1 || start + count > d) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of bounds for " + shape_str(x.shape()));
  }
  auto out = fresh({r, count});
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < count; ++j)
      out->value[static_cast<std::size_t>(i) * count + j] =
          xv[static_cast<std::size_t>(i) * d + start + j];
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [r, d, start, count](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < count; ++j)
          px.grad[static_cast<std::size_t>(i) * d + start + j] +=
              self.grad[static_cast<std::size_t>(i) * count + j];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  require_matrix("gather_rows", x);
  const int r = x.shape()[0], d = x.shape()[1];
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  for (int idx : rows) {
    if (idx < 0 || idx >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(idx) + " out of bounds for " +
                           shape_str(x.shape()));
    }
  }
  auto out = fresh({static_cast<int>(rows.size()), d});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = xv.data() + static_cast<std::size_t>(rows[i]) * d;
    double* dst = out->value.data() + i * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [rows, d](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* g = self.grad.data() + i * d;
        double* dst = px.grad.data() + static_cast<std::size_t>(rows[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += g[j];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor embed(const Tensor& table, const std::vector<int>& ids) { return gather_rows(table, ids); }

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const int d = parts[0].cols();
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p);
    if (p.shape()[1] != d) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.shape()[0];
    rg = rg || p.requires_grad();
  }
  auto out = fresh({total, d});
  std::size_t off = 0;
  std::vector<int> row_counts;
  row_counts.reserve(parts.size());
  for (const auto& p : parts) {
    const auto& pv = p.value();
    for (std::size_t i = 0; i < pv.size(); ++i) out->value[off + i] = pv[i];
    off += pv.size();
    row_counts.push_back(p.shape()[0]);
  }
  if (GradMode::enabled() && rg) {
    out->requires_grad = true;
    for (const auto& p : parts) out->parents.push_back(p.node_ptr());
    out->backprop = [row_counts, d](Node& self) {
      std::size_t pos = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node& par = *self.parents[k];
        const std::size_t len = static_cast<std::size_t>(row_counts[k]) * d;
        if (par.requires_grad) {
          par.ensure_grad();
          for (std::size_t i = 0; i < len; ++i) par.grad[i] += self.grad[pos + i];
        }
        pos += len;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor row_sum(const Tensor& x) {
  const int r = x.rows(), d = x.cols();
  auto out = fresh({r});
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) s += row[j];
    out->value[i] = s;
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [r, d](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double g = self.grad[i];
        double* dst = px.grad.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += g;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor sum(const Tensor& x) {
  auto out = fresh({1});
  const auto& xv = x.value();
  double s = 0.0;
  for (double v : xv) s += v;
  out->value[0] = s;
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      const double g = self.grad[0];
      for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += g;
    };
  }
  return Tensor::wrap(out);
}

Tensor pick_per_row(const Tensor& x, const std::vector<int>& cols) {
  const int r = x.rows(), d = x.cols();
  if (static_cast<int>(cols.size()) != r) {
    throw DimensionError("pick_per_row: got " + std::to_string(cols.size()) + " indices for " +
                         std::to_string(r) + " rows");
  }
  for (int c : cols) {
    if (c < 0 || c >= d) {
      throw DimensionError("pick_per_row: column " + std::to_string(c) + " out of bounds for " +
                           shape_str(x.shape()));
    }
  }
  auto out = fresh({r});
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) out->value[i] = xv[static_cast<std::size_t>(i) * d + cols[i]];
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [cols, d](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (std::size_t i = 0; i < cols.size(); ++i)
        px.grad[i * d + cols[i]] += self.grad[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor div_rows(const Tensor& x, const Tensor& v) {
  const int r = x.rows(), d = x.cols();
  if (static_cast<int>(v.value().size()) != r) {
    throw DimensionError("div_rows: divisor " + shape_str(v.shape()) + " does not match row count of " +
                         shape_str(x.shape()));
  }
  const auto& vv = v.value();
  for (int i = 0; i < r; ++i) {
    if (vv[i] == 0.0) throw NumericError("div_rows: zero divisor in row " + std::to_string(i));
  }
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) {
    const double inv = 1.0 / vv[i];
    for (int j = 0; j < d; ++j)
      out->value[static_cast<std::size_t>(i) * d + j] = xv[static_cast<std::size_t>(i) * d + j] * inv;
  }
  if (grad_wanted(x, v)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr(), v.node_ptr()};
    out->backprop = [r, d](Node& self) {
      Node& px = *self.parents[0];
      Node& pv = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (int i = 0; i < r; ++i) {
          const double inv = 1.0 / pv.value[i];
          for (int j = 0; j < d; ++j)
            px.grad[static_cast<std::size_t>(i) * d + j] +=
                self.grad[static_cast<std::size_t>(i) * d + j] * inv;
        }
      }
      if (pv.requires_grad) {
        pv.ensure_grad();
        for (int i = 0; i < r; ++i) {
          const double inv = 1.0 / pv.value[i];
          double s = 0.0;
          for (int j = 0; j < d; ++j)
            s += self.grad[static_cast<std::size_t>(i) * d + j] *
                 self.value[static_cast<std::size_t>(i) * d + j];
          pv.grad[i] -= s * inv;
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int r = x.rows(), d = x.cols();
  if (static_cast<int>(gain.value().size()) != d || static_cast<int>(bias.value().size()) != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match row width of " + shape_str(x.shape()));
  }
  if (eps <= 0.0) throw ParameterError("layer_norm: eps must be positive, got " + std::to_string(eps));
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    double* o = out->value.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) o[j] = (row[j] - mu) * inv * gv[j] + bv[j];
  }
  if (GradMode::enabled() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
    out->requires_grad = true;
    out->parents = {x.node_ptr(), gain.node_ptr(), bias.node_ptr()};
    out->backprop = [r, d, eps](Node& self) {
      Node& px = *self.parents[0];
      Node& pg = *self.parents[1];
      Node& pb = *self.parents[2];
      if (px.requires_grad) px.ensure_grad();
      if (pg.requires_grad) pg.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      std::vector<double> xhat(d);
      for (int i = 0; i < r; ++i) {
        const double* row = px.value.data() + static_cast<std::size_t>(i) * d;
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          const double c = row[j] - mu;
          var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) xhat[j] = (row[j] - mu) * inv;
        if (pg.requires_grad) {
          for (int j = 0; j < d; ++j) pg.grad[j] += g[j] * xhat[j];
        }
        if (pb.requires_grad) {
          for (int j = 0; j < d; ++j) pb.grad[j] += g[j];
        }
        if (px.requires_grad) {
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxh = g[j] * pg.value[j];
            m1 += dxh;
            m2 += dxh * xhat[j];
          }
          m1 /= d;
          m2 /= d;
          double* dst = px.grad.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j)
            dst[j] += inv * (g[j] * pg.value[j] - m1 - xhat[j] * m2);
        }
      }
    };
  }
  return Tensor::wrap(out);
}

namespace {

// Shared row pass for the two softmax flavors: finds the row max and rejects
// non-finite inputs, which would otherwise poison every entry via the max shift.
double checked_row_max(const double* row, int d, int row_index, const char* op) {
  double mx = row[0];
  for (int j = 0; j < d; ++j) {
    if (!std::isfinite(row[j])) {
      throw NumericError(std::string(op) + ": non-finite input in row " + std::to_string(row_index));
    }
    if (row[j] > mx) mx = row[j];
  }
  return mx;
}

} // namespace

Tensor softmax_t(const Tensor& x, double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("softmax_t: temperature must be positive, got " + std::to_string(temperature));
  }
  const int r = x.rows(), d = x.cols();
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    const double mx = checked_row_max(row, d, i, "softmax_t");
    double* o = out->value.data() + static_cast<std::size_t>(i) * d;
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = std::exp((row[j] - mx) / temperature);
      z += o[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < d; ++j) o[j] *= inv;
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [r, d, temperature](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* y = self.value.data() + static_cast<std::size_t>(i) * d;
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += g[j] * y[j];
        double* dst = px.grad.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += (g[j] - s) * y[j] / temperature;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor log_softmax_t(const Tensor& x, double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("log_softmax_t: temperature must be positive, got " +
                         std::to_string(temperature));
  }
  const int r = x.rows(), d = x.cols();
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    const double mx = checked_row_max(row, d, i, "log_softmax_t");
    double* o = out->value.data() + static_cast<std::size_t>(i) * d;
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = (row[j] - mx) / temperature;
      z += std::exp(o[j]);
    }
    const double lz = std::log(z);
    for (int j = 0; j < d; ++j) o[j] -= lz;
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [r, d, temperature](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* y = self.value.data() + static_cast<std::size_t>(i) * d;
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += g[j];
        double* dst = px.grad.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += (g[j] - std::exp(y[j]) * s) / temperature;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor standardize_rows(const Tensor& x) {
  const int r = x.rows(), d = x.cols();
  auto out = fresh(x.shape());
  const auto& xv = x.value();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    double* o = out->value.data() + static_cast<std::size_t>(i) * d;
    if (var == 0.0) {
      for (int j = 0; j < d; ++j) o[j] = 0.0;
    } else {
      const double inv = 1.0 / std::sqrt(var);
      for (int j = 0; j < d; ++j) o[j] = (row[j] - mu) * inv;
    }
  }
  if (grad_wanted(x)) {
    out->requires_grad = true;
    out->parents = {x.node_ptr()};
    out->backprop = [r, d](Node& self) {
      Node& px = *self.parents[0];
      px.ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* row = px.value.data() + static_cast<std::size_t>(i) * d;
        const double* y = self.value.data() + static_cast<std::size_t>(i) * d;
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          const double c = row[j] - mu;
          var += c * c;
        }
        var /= d;
        if (var == 0.0) continue; // constant row maps to zeros with zero gradient
        const double inv = 1.0 / std::sqrt(var);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          m1 += g[j];
          m2 += g[j] * y[j];
        }
        m1 /= d;
        m2 /= d;
        double* dst = px.grad.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += inv * (g[j] - m1 - y[j] * m2);
      }
    };
  }
  return Tensor::wrap(out);
}

} // namespace mmkd::ad
