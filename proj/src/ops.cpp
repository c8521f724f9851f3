#include "alpkd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "alpkd/errors.hpp"

namespace alpkd::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

using detail::make_result;

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

std::vector<double> copy_data(const Tensor& x) { return {x.data().begin(), x.data().end()}; }

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

// Generic elementwise unary op with derivative computed from input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](TensorImpl& self) {
    const Tensor& p = self.parents[0];
    auto& g = TensorImpl::grad_of(p);
    auto in = p.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(in[i], self.data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto r = a.dim(0), k = a.dim(1), c = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a, b);
  std::vector<double> out(r * c);
  MapMat(out.data(), r, c).noalias() =
      CMapMat(a.data().data(), r, k) * CMapMat(b.data().data(), k, c);
  return make_result({r, c}, std::move(out), {a, b}, [r, k, c](TensorImpl& self) {
    const Tensor& pa = self.parents[0];
    const Tensor& pb = self.parents[1];
    CMapMat dout(self.grad.data(), r, c);
    if (wants_grad(pa)) {
      MapMat(TensorImpl::grad_of(pa).data(), r, k).noalias() +=
          dout * CMapMat(pb.data().data(), k, c).transpose();
    }
    if (wants_grad(pb)) {
      MapMat(TensorImpl::grad_of(pb).data(), k, c).noalias() +=
          CMapMat(pa.data().data(), r, k).transpose() * dout;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("add", a, b);
  auto out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    for (const auto& p : self.parents) {
      if (!wants_grad(p)) continue;
      auto& g = TensorImpl::grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("sub", a, b);
  auto out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t pi = 0; pi < 2; ++pi) {
      const Tensor& p = self.parents[pi];
      if (!wants_grad(p)) continue;
      auto& g = TensorImpl::grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[pi] * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("mul", a, b);
  auto out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    const Tensor& pa = self.parents[0];
    const Tensor& pb = self.parents[1];
    if (wants_grad(pa)) {
      auto& g = TensorImpl::grad_of(pa);
      auto other = pb.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
    if (wants_grad(pb)) {
      auto& g = TensorImpl::grad_of(pb);
      auto other = pa.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  auto out = copy_data(x);
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  require_rank("add_bias", bias, 1);
  const auto n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) mismatch("add_bias", x, bias);
  auto out = copy_data(x);
  auto bd = bias.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bd[c];
  return make_result(x.shape(), std::move(out), {x, bias}, [n, d](TensorImpl& self) {
    const Tensor& px = self.parents[0];
    const Tensor& pb = self.parents[1];
    if (wants_grad(px)) {
      auto& g = TensorImpl::grad_of(px);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = TensorImpl::grad_of(pb);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
    }
  });
}

Tensor mul_col(const Tensor& x, const Tensor& s) {
  require_rank("mul_col", x, 2);
  require_rank("mul_col", s, 2);
  const auto n = x.dim(0), d = x.dim(1);
  if (s.dim(0) != n || s.dim(1) != 1) mismatch("mul_col", x, s);
  auto out = copy_data(x);
  auto sd = s.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= sd[r];
  return make_result(x.shape(), std::move(out), {x, s}, [n, d](TensorImpl& self) {
    const Tensor& px = self.parents[0];
    const Tensor& ps = self.parents[1];
    if (wants_grad(px)) {
      auto& g = TensorImpl::grad_of(px);
      auto sd = ps.data();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += self.grad[r * d + c] * sd[r];
    }
    if (wants_grad(ps)) {
      auto& g = TensorImpl::grad_of(ps);
      auto xd = px.data();
      for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += self.grad[r * d + c] * xd[r * d + c];
        g[r] += acc;
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double in, double) {
        const double cdf = 0.5 * (1.0 + std::erf(in * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * in * in);
        return cdf + in * pdf;
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const auto d = x.shape().back();
  if (gamma.numel() != d) mismatch("layer_norm", x, gamma);
  if (beta.numel() != d) mismatch("layer_norm", x, beta);
  const auto rows = x.numel() / d;
  auto in = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * g[c] + b[c];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& self) {
        const Tensor& px = self.parents[0];
        const Tensor& pg = self.parents[1];
        const Tensor& pb = self.parents[2];
        const auto& dy = self.grad;
        if (wants_grad(pg)) {
          auto& gg = TensorImpl::grad_of(pg);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += dy[r * d + c] * xhat[r * d + c];
        }
        if (wants_grad(pb)) {
          auto& gb = TensorImpl::grad_of(pb);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += dy[r * d + c];
        }
        if (wants_grad(px)) {
          auto& gx = TensorImpl::grad_of(px);
          auto gam = pg.data();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = dy[r * d + c] * gam[c];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + c];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = dy[r * d + c] * gam[c];
              gx[r * d + c] += inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
            }
          }
        }
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const auto n = shape[axis];
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, in[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  return make_result(shape, std::move(out), {x}, [outer, inner, n](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    const auto& y = self.data;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += y[base + k * inner] * dy[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const auto idx = base + k * inner;
          g[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("log_softmax: scalar input");
  const auto d = x.shape().back();
  const auto rows = x.numel() / d;
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double total = 0.0;
    for (std::size_t c = 0; c < d; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = row[c] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, d](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < d; ++c) total += self.grad[r * d + c];
      for (std::size_t c = 0; c < d; ++c) {
        const auto idx = r * d + c;
        g[idx] += self.grad[idx] - std::exp(self.data[idx]) * total;
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, {x}, [](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total / n}, {x}, [n](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (auto& v : g) v += self.grad[0] / n;
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) mismatch("concat", parts[0], p);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) mismatch("concat", parts[0], p);
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t total = out_shape[axis];
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].data();
    const std::size_t chunk = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * total * inner + offset * inner);
    }
    offset += extents[p];
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result(std::move(out_shape), std::move(out), std::move(parents),
                     [outer, inner, total, extents](TensorImpl& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         const std::size_t chunk = extents[p] * inner;
                         if (wants_grad(self.parents[p])) {
                           auto& g = TensorImpl::grad_of(self.parents[p]);
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src =
                                 self.grad.data() + o * total * inner + offset * inner;
                             for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                           }
                         }
                         offset += extents[p];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return make_result(std::move(shape), copy_data(x), {x}, [](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("mse", a, b);
  auto ad = a.data();
  auto bd = b.data();
  const double n = static_cast<double>(ad.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) total += (ad[i] - bd[i]) * (ad[i] - bd[i]);
  return make_result({1}, {total / n}, {a, b}, [n](TensorImpl& self) {
    const Tensor& pa = self.parents[0];
    const Tensor& pb = self.parents[1];
    auto ad = pa.data();
    auto bd = pb.data();
    const double coef = 2.0 * self.grad[0] / n;
    if (wants_grad(pa)) {
      auto& g = TensorImpl::grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += coef * (ad[i] - bd[i]);
    }
    if (wants_grad(pb)) {
      auto& g = TensorImpl::grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= coef * (ad[i] - bd[i]);
    }
  });
}

Tensor cross_entropy_with_soft_targets(const Tensor& logits, const Tensor& targets) {
  require_rank("cross_entropy_with_soft_targets", logits, 2);
  if (logits.shape() != targets.shape()) mismatch("cross_entropy_with_soft_targets", logits, targets);
  const auto rows = logits.dim(0), d = logits.dim(1);
  auto in = logits.data();
  auto t = targets.data();
  std::vector<double> probs(in.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < d; ++c) {
      probs[r * d + c] = std::exp(row[c] - lse);
      total -= t[r * d + c] * (row[c] - lse);
    }
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  // Only the logits participate in the graph; targets are constants.
  return make_result({1}, {total * inv_rows}, {logits, targets.detach()},
                     [rows, d, inv_rows, probs = std::move(probs)](TensorImpl& self) {
                       const Tensor& pl = self.parents[0];
                       auto t = self.parents[1].data();
                       auto& g = TensorImpl::grad_of(pl);
                       const double coef = self.grad[0] * inv_rows;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double tsum = 0.0;
                         for (std::size_t c = 0; c < d; ++c) tsum += t[r * d + c];
                         for (std::size_t c = 0; c < d; ++c) {
                           const auto idx = r * d + c;
                           g[idx] += coef * (tsum * probs[idx] - t[idx]);
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank("embedding", table, 2);
  const auto vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table},
                     [d, id_copy = std::move(id_copy)](TensorImpl& self) {
                       auto& g = TensorImpl::grad_of(self.parents[0]);
                       for (std::size_t i = 0; i < id_copy.size(); ++i) {
                         const auto row = static_cast<std::size_t>(id_copy[i]) * d;
                         for (std::size_t c = 0; c < d; ++c) g[row + c] += self.grad[i * d + c];
                       }
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x, 2);
  const auto n = x.dim(0), d = x.dim(1);
  std::vector<double> out(rows.size() * d);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside shape " +
                           shape_str(x.shape()));
    }
    std::copy_n(xd.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> row_copy(rows.begin(), rows.end());
  return make_result({rows.size(), d}, std::move(out), {x},
                     [d, row_copy = std::move(row_copy)](TensorImpl& self) {
                       auto& g = TensorImpl::grad_of(self.parents[0]);
                       for (std::size_t i = 0; i < row_copy.size(); ++i)
                         for (std::size_t c = 0; c < d; ++c)
                           g[row_copy[i] * d + c] += self.grad[i * d + c];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", x, 2);
  const auto n = x.dim(0), d = x.dim(1);
  if (begin >= end || end > d) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(x.shape()));
  }
  const auto w = end - begin;
  std::vector<double> out(n * w);
  auto xd = x.data();
  for (std::size_t r = 0; r < n; ++r) std::copy_n(xd.data() + r * d + begin, w, out.data() + r * w);
  return make_result({n, w}, std::move(out), {x}, [n, d, w, begin](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) g[r * d + begin + c] += self.grad[r * w + c];
  });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  require_rank("row_dot", a, 2);
  if (a.shape() != b.shape()) mismatch("row_dot", a, b);
  const auto n = a.dim(0), d = a.dim(1);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += ad[r * d + c] * bd[r * d + c];
    out[r] = acc;
  }
  return make_result({n, 1}, std::move(out), {a, b}, [n, d](TensorImpl& self) {
    const Tensor& pa = self.parents[0];
    const Tensor& pb = self.parents[1];
    if (wants_grad(pa)) {
      auto& g = TensorImpl::grad_of(pa);
      auto other = pb.data();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += self.grad[r] * other[r * d + c];
    }
    if (wants_grad(pb)) {
      auto& g = TensorImpl::grad_of(pb);
      auto other = pa.data();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += self.grad[r] * other[r * d + c];
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_rank("l2_normalize_rows", x, 2);
  const auto n = x.dim(0), d = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(n * d);
  std::vector<double> denom(n);
  std::vector<std::uint8_t> clamped(n);
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += xd[r * d + c] * xd[r * d + c];
    const double norm = std::sqrt(sq);
    clamped[r] = norm < eps;
    denom[r] = clamped[r] ? eps : norm;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xd[r * d + c] / denom[r];
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [n, d, denom = std::move(denom), clamped = std::move(clamped)](TensorImpl& self) {
        auto& g = TensorImpl::grad_of(self.parents[0]);
        for (std::size_t r = 0; r < n; ++r) {
          if (clamped[r]) {
            for (std::size_t c = 0; c < d; ++c) g[r * d + c] += self.grad[r * d + c] / denom[r];
            continue;
          }
          // d(x/|x|) = (I - y y^T) / |x|
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += self.grad[r * d + c] * self.data[r * d + c];
          for (std::size_t c = 0; c < d; ++c) {
            g[r * d + c] += (self.grad[r * d + c] - self.data[r * d + c] * dot) / denom[r];
          }
        }
      });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv_keep = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? inv_keep : 0.0;
  auto out = copy_data(x);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](TensorImpl& self) {
    auto& g = TensorImpl::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> key_mask, std::size_t batch, std::size_t seq,
                 std::size_t num_heads) {
  require_rank("attention", q, 2);
  if (q.shape() != k.shape()) mismatch("attention", q, k);
  if (q.shape() != v.shape()) mismatch("attention", q, v);
  if (q.dim(0) != batch * seq) {
    throw DimensionError("attention: " + shape_str(q.shape()) + " is not batch*seq rows (" +
                         std::to_string(batch) + "x" + std::to_string(seq) + ")");
  }
  if (key_mask.size() != batch * seq) {
    throw DimensionError("attention: mask length " + std::to_string(key_mask.size()) +
                         " != batch*seq " + std::to_string(batch * seq));
  }
  const auto d = q.dim(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw ConfigError("attention: hidden size " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(num_heads));
  }
  const auto dh = d / num_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  std::vector<double> probs(batch * num_heads * seq * seq, 0.0);
  std::vector<double> out(batch * seq * d, 0.0);
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      double* P = probs.data() + (b * num_heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qd.data() + (b * seq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[b * seq + j]) continue;
          const double* kj = kd.data() + (b * seq + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= sc;
          P[i * seq + j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[b * seq + j]) continue;
          const double e = std::exp(P[i * seq + j] - mx);
          P[i * seq + j] = e;
          z += e;
        }
        double* oi = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[b * seq + j]) continue;
          P[i * seq + j] /= z;
          const double p = P[i * seq + j];
          const double* vj = vd.data() + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }

  return make_result(
      q.shape(), std::move(out), {q, k, v},
      [batch, seq, num_heads, d, dh, sc, probs = std::move(probs),
       mask = std::move(mask)](TensorImpl& self) {
        const Tensor& pq = self.parents[0];
        const Tensor& pk = self.parents[1];
        const Tensor& pv = self.parents[2];
        auto qd = pq.data();
        auto kd = pk.data();
        auto vd = pv.data();
        std::vector<double> dq(qd.size(), 0.0), dk(kd.size(), 0.0), dv(vd.size(), 0.0);
        std::vector<double> dS(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < num_heads; ++h) {
            const double* P = probs.data() + (b * num_heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* go = self.grad.data() + (b * seq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                dS[j] = 0.0;
                if (!mask[b * seq + j]) continue;
                const double p = P[i * seq + j];
                const double* vj = vd.data() + (b * seq + j) * d + h * dh;
                double* dvj = dv.data() + (b * seq + j) * d + h * dh;
                double dp = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  dvj[c] += p * go[c];
                  dp += go[c] * vj[c];
                }
                dS[j] = dp;
                dot += p * dp;
              }
              const double* qi = qd.data() + (b * seq + i) * d + h * dh;
              double* dqi = dq.data() + (b * seq + i) * d + h * dh;
              for (std::size_t j = 0; j < seq; ++j) {
                if (!mask[b * seq + j]) continue;
                const double ds = P[i * seq + j] * (dS[j] - dot) * sc;
                const double* kj = kd.data() + (b * seq + j) * d + h * dh;
                double* dkj = dk.data() + (b * seq + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqi[c] += ds * kj[c];
                  dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
        const std::vector<double>* local[3] = {&dq, &dk, &dv};
        for (std::size_t p = 0; p < 3; ++p) {
          if (!wants_grad(self.parents[p])) continue;
          auto& g = TensorImpl::grad_of(self.parents[p]);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*local[p])[i];
        }
      });
}

}  // namespace alpkd::ops
