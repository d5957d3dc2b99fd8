#include "acia/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace acia::nn {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

bool needs(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Var& x, int rank, const char* op) {
  require(x.value().rank() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

template <typename F, typename D>
Var unary(const Var& x, F f, D df_from_xy) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  return make_op(std::move(y), {x}, [df_from_xy](Node& n) {
    const Tensor& xin = n.inputs[0]->value;
    Tensor g(xin.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * df_from_xy(xin[i], n.value[i]);
    n.inputs[0]->accumulate(g);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor y = a.value();
  y.add_(b.value());
  return make_op(std::move(y), {a, b}, [](Node& n) {
    if (needs(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (needs(n, 1)) n.inputs[1]->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor y = a.value();
  y.add_(b.value(), -1.0);
  return make_op(std::move(y), {a, b}, [](Node& n) {
    if (needs(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (needs(n, 1)) n.inputs[1]->grad_buffer().add_(n.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor y(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  return make_op(std::move(y), {a, b}, [](Node& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (needs(n, 0)) {
      Tensor g(av.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * bv[i];
      n.inputs[0]->accumulate(g);
    }
    if (needs(n, 1)) {
      Tensor g(bv.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * av[i];
      n.inputs[1]->accumulate(g);
    }
  });
}

Var scale(const Var& x, Scalar s) {
  Tensor y = x.value();
  y.scale_(s);
  return make_op(std::move(y), {x}, [s](Node& n) { n.inputs[0]->grad_buffer().add_(n.grad, s); });
}

Var add_scalar(const Var& x, Scalar s) {
  Tensor y = x.value();
  for (auto& v : y.data()) v += s;
  return make_op(std::move(y), {x}, [](Node& n) { n.inputs[0]->accumulate(n.grad); });
}

Var add_n(std::span<const Var> xs) {
  require(!xs.empty(), "add_n: empty input");
  Tensor y = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same(xs[0], xs[i], "add_n");
    y.add_(xs[i].value());
  }
  return make_op(std::move(y), std::vector<Var>(xs.begin(), xs.end()), [](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      if (needs(n, i)) n.inputs[i]->accumulate(n.grad);
    }
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](Scalar v) { return v > 0 ? v : 0.0; }, [](Scalar v, Scalar) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, Scalar slope) {
  return unary(
      x, [slope](Scalar v) { return v > 0 ? v : slope * v; },
      [slope](Scalar v, Scalar) { return v > 0 ? 1.0 : slope; });
}

Var gelu(const Var& x) {
  constexpr Scalar inv_sqrt2 = 0.70710678118654752440;
  constexpr Scalar inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, [](Scalar v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](Scalar v, Scalar) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](Scalar v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (1.0 + e);
      },
      [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Var exp(const Var& x) {
  return unary(
      x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Var log(const Var& x) {
  return unary(
      x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return 1.0 / v; });
}

Var pow(const Var& x, Scalar p) {
  return unary(
      x, [p](Scalar v) { return std::pow(v, p); },
      [p](Scalar v, Scalar) { return p == 0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

Var sum(const Var& x) {
  return make_op(Tensor::scalar(x.value().sum()), {x}, [](Node& n) {
    Tensor g(n.inputs[0]->value.shape(), n.grad[0]);
    n.inputs[0]->accumulate(g);
  });
}

Var mean(const Var& x) {
  const auto count = static_cast<Scalar>(x.value().numel());
  require(count > 0, "mean: empty tensor");
  return make_op(Tensor::scalar(x.value().sum() / count), {x}, [count](Node& n) {
    Tensor g(n.inputs[0]->value.shape(), n.grad[0] / count);
    n.inputs[0]->accumulate(g);
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_op(std::move(y), {x}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad.reshaped(n.inputs[0]->value.shape()));
  });
}

Var transpose(const Var& x) {
  require_rank(x, 2, "transpose");
  const int r = x.dim(0);
  const int c = x.dim(1);
  Tensor y(Shape{c, r});
  MapMat(y.ptr(), c, r) = ConstMapMat(x.value().ptr(), r, c).transpose();
  return make_op(std::move(y), {x}, [r, c](Node& n) {
    Tensor g(Shape{r, c});
    MapMat(g.ptr(), r, c) = ConstMapMat(n.grad.ptr(), c, r).transpose();
    n.inputs[0]->accumulate(g);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require(a.dim(0) == b.dim(0), "concat_cols: row mismatch");
  const int r = a.dim(0);
  const int ca = a.dim(1);
  const int cb = b.dim(1);
  Tensor y(Shape{r, ca + cb});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < ca; ++j) y.at(i, j) = a.value().at(i, j);
    for (int j = 0; j < cb; ++j) y.at(i, ca + j) = b.value().at(i, j);
  }
  return make_op(std::move(y), {a, b}, [r, ca, cb](Node& n) {
    if (needs(n, 0)) {
      Tensor g(Shape{r, ca});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < ca; ++j) g.at(i, j) = n.grad.at(i, j);
      n.inputs[0]->accumulate(g);
    }
    if (needs(n, 1)) {
      Tensor g(Shape{r, cb});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < cb; ++j) g.at(i, j) = n.grad.at(i, ca + j);
      n.inputs[1]->accumulate(g);
    }
  });
}

Var concat_rows(std::span<const Var> xs) {
  require(!xs.empty(), "concat_rows: empty input");
  Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
  int rows = 0;
  for (const auto& x : xs) {
    require(x.value().rank() >= 1, "concat_rows: rank-0 input");
    require(Shape(x.shape().begin() + 1, x.shape().end()) == tail,
            "concat_rows: trailing shape mismatch " + shape_str(x.shape()));
    rows += x.dim(0);
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  Tensor y(out_shape);
  std::size_t offset = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data().begin(), x.value().data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += x.value().numel();
  }
  return make_op(std::move(y), std::vector<Var>(xs.begin(), xs.end()), [](Node& n) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const auto count = n.inputs[i]->value.numel();
      if (needs(n, i)) {
        Tensor g(n.inputs[i]->value.shape());
        std::copy_n(n.grad.ptr() + off, count, g.ptr());
        n.inputs[i]->accumulate(g);
      }
      off += count;
    }
  });
}

Var slice_cols(const Var& x, int start, int len) {
  require_rank(x, 2, "slice_cols");
  require(start >= 0 && len >= 0 && start + len <= x.dim(1), "slice_cols: range out of bounds");
  const int r = x.dim(0);
  Tensor y(Shape{r, len});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < len; ++j) y.at(i, j) = x.value().at(i, start + j);
  return make_op(std::move(y), {x}, [r, start, len](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j) g.at(i, start + j) += n.grad.at(i, j);
  });
}

Var select_rows(const Var& x, std::span<const int> rows) {
  require(x.value().rank() >= 1, "select_rows: rank-0 input");
  const int total = x.dim(0);
  const std::size_t row_size = total == 0 ? 0 : x.value().numel() / static_cast<std::size_t>(total);
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int>(rows.size());
  Tensor y(out_shape);
  std::vector<int> idx(rows.begin(), rows.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < total, "select_rows: index out of range");
    std::copy_n(x.value().ptr() + static_cast<std::size_t>(idx[i]) * row_size, row_size, y.ptr() + i * row_size);
  }
  return make_op(std::move(y), {x}, [idx = std::move(idx), row_size](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Scalar* dst = g.ptr() + static_cast<std::size_t>(idx[i]) * row_size;
      const Scalar* src = n.grad.ptr() + i * row_size;
      for (std::size_t k = 0; k < row_size; ++k) dst[k] += src[k];
    }
  });
}

Var mean_rows(const Var& x) {
  require_rank(x, 2, "mean_rows");
  const int r = x.dim(0);
  const int d = x.dim(1);
  require(r > 0, "mean_rows: no rows");
  Tensor y(Shape{1, d});
  const Tensor& xv = x.value();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < d; ++j) y[static_cast<std::size_t>(j)] += xv.at(i, j);
  }
  y.scale_(1.0 / r);
  return make_op(std::move(y), {x}, [r, d](Node& n) {
    Tensor g(Shape{r, d});
    MapMat(g.ptr(), r, d).rowwise() = ConstMapMat(n.grad.ptr(), 1, d).row(0) / static_cast<Scalar>(r);
    n.inputs[0]->accumulate(g);
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0);
  const int k = a.dim(1);
  const int nn = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimension " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor y(Shape{m, nn});
  MapMat(y.ptr(), m, nn).noalias() = ConstMapMat(a.value().ptr(), m, k) * ConstMapMat(b.value().ptr(), k, nn);
  return make_op(std::move(y), {a, b}, [m, k, nn](Node& n) {
    ConstMapMat g(n.grad.ptr(), m, nn);
    if (needs(n, 0)) {
      Tensor ga(Shape{m, k});
      MapMat(ga.ptr(), m, k).noalias() = g * ConstMapMat(n.inputs[1]->value.ptr(), k, nn).transpose();
      n.inputs[0]->accumulate(ga);
    }
    if (needs(n, 1)) {
      Tensor gb(Shape{k, nn});
      MapMat(gb.ptr(), k, nn).noalias() = ConstMapMat(n.inputs[0]->value.ptr(), m, k).transpose() * g;
      n.inputs[1]->accumulate(gb);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int r = x.dim(0);
  const int in = x.dim(1);
  const int out = weight.dim(0);
  require(weight.dim(1) == in, "linear: input width " + std::to_string(in) + " vs weight " + shape_str(weight.shape()));
  require(bias.value().numel() == static_cast<std::size_t>(out), "linear: bias size");
  Tensor y(Shape{r, out});
  MapMat ym(y.ptr(), r, out);
  if (r > 0) {
    ym.noalias() = ConstMapMat(x.value().ptr(), r, in) * ConstMapMat(weight.value().ptr(), out, in).transpose();
    ym.rowwise() += ConstMapMat(bias.value().ptr(), 1, out).row(0);
  }
  return make_op(std::move(y), {x, weight, bias}, [r, in, out](Node& n) {
    if (r == 0) return;
    ConstMapMat g(n.grad.ptr(), r, out);
    if (needs(n, 0)) {
      Tensor gx(Shape{r, in});
      MapMat(gx.ptr(), r, in).noalias() = g * ConstMapMat(n.inputs[1]->value.ptr(), out, in);
      n.inputs[0]->accumulate(gx);
    }
    if (needs(n, 1)) {
      Tensor& gw = n.inputs[1]->grad_buffer();
      MapMat(gw.ptr(), out, in).noalias() += g.transpose() * ConstMapMat(n.inputs[0]->value.ptr(), r, in);
    }
    if (needs(n, 2)) {
      // plain loops: Eigen's vectorized reductions peel by address, which
      // makes the summation order depend on heap alignment
      Tensor& gb = n.inputs[2]->grad_buffer();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < out; ++j) gb[static_cast<std::size_t>(j)] += n.grad.at(i, j);
      }
    }
  });
}

namespace {

struct ConvGeom {
  int c, h, w, k, stride, pad, ho, wo;
};

void im2col(const Scalar* x, const ConvGeom& g, Scalar* col) {
  const int hw = g.ho * g.wo;
  for (int ci = 0; ci < g.c; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        Scalar* row = col + (static_cast<std::size_t>(ci) * g.k * g.k + ky * g.k + kx) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          Scalar* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, 0.0);
            continue;
          }
          const Scalar* src = x + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const Scalar* col, const ConvGeom& g, Scalar* x) {
  const int hw = g.ho * g.wo;
  for (int ci = 0; ci < g.c; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const Scalar* row = col + (static_cast<std::size_t>(ci) * g.k * g.k + ky * g.k + kx) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          Scalar* dst = x + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          const Scalar* src = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int out = weight.dim(0);
  const int k = weight.dim(2);
  require(weight.dim(1) == x.dim(0), "conv2d: input channels " + shape_str(x.shape()) + " vs weight " +
                                         shape_str(weight.shape()));
  require(weight.dim(3) == k, "conv2d: non-square kernel");
  require(bias.value().numel() == static_cast<std::size_t>(out), "conv2d: bias size");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: input smaller than kernel");
  const int ckk = g.c * k * k;
  const int hw = g.ho * g.wo;

  auto col = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(ckk) * hw);
  im2col(x.value().ptr(), g, col->data());
  Tensor y(Shape{out, g.ho, g.wo});
  MapMat ym(y.ptr(), out, hw);
  ym.noalias() = ConstMapMat(weight.value().ptr(), out, ckk) * ConstMapMat(col->data(), ckk, hw);
  ym.colwise() += Eigen::Map<const Eigen::VectorX<Scalar>>(bias.value().ptr(), out);

  return make_op(std::move(y), {x, weight, bias}, [g, out, ckk, hw, col](Node& n) {
    ConstMapMat gy(n.grad.ptr(), out, hw);
    if (needs(n, 1)) {
      Tensor& gw = n.inputs[1]->grad_buffer();
      MapMat(gw.ptr(), out, ckk).noalias() += gy * ConstMapMat(col->data(), ckk, hw).transpose();
    }
    if (needs(n, 2)) {
      Tensor& gb = n.inputs[2]->grad_buffer();
      for (int o = 0; o < out; ++o) {
        const Scalar* row = n.grad.ptr() + static_cast<std::size_t>(o) * hw;
        Scalar acc = 0;
        for (int i = 0; i < hw; ++i) acc += row[i];
        gb[static_cast<std::size_t>(o)] += acc;
      }
    }
    if (needs(n, 0)) {
      std::vector<Scalar> gcol(static_cast<std::size_t>(ckk) * hw);
      MapMat(gcol.data(), ckk, hw).noalias() = ConstMapMat(n.inputs[1]->value.ptr(), out, ckk).transpose() * gy;
      Tensor& gx = n.inputs[0]->grad_buffer();
      col2im(gcol.data(), g, gx.ptr());
    }
  });
}

Var max_pool2d(const Var& x, int k) {
  require_rank(x, 3, "max_pool2d");
  require(k >= 1, "max_pool2d: kernel must be positive");
  const int c = x.dim(0);
  const int h = x.dim(1);
  const int w = x.dim(2);
  const int ho = (h + k - 1) / k;
  const int wo = (w + k - 1) / k;
  Tensor y(Shape{c, ho, wo});
  auto arg = std::make_shared<std::vector<std::size_t>>(y.numel());
  const auto& xv = x.value();
  std::size_t o = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        std::size_t best_i = 0;
        for (int dy = 0; dy < k; ++dy) {
          const int iy = oy * k + dy;
          if (iy >= h) break;
          for (int dx = 0; dx < k; ++dx) {
            const int ix = ox * k + dx;
            if (ix >= w) break;
            const std::size_t i = (static_cast<std::size_t>(ci) * h + iy) * w + ix;
            if (xv[i] > best) {
              best = xv[i];
              best_i = i;
            }
          }
        }
        y[o] = best;
        (*arg)[o] = best_i;
      }
    }
  }
  return make_op(std::move(y), {x}, [arg](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg->size(); ++i) g[(*arg)[i]] += n.grad[i];
  });
}

Var spatial_to_rows(const Var& x) {
  require_rank(x, 3, "spatial_to_rows");
  const int c = x.dim(0);
  return transpose(reshape(x, Shape{c, x.dim(1) * x.dim(2)}));
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps) {
  require_rank(x, 2, "layer_norm");
  const int d = x.dim(1);
  require(gamma.value().numel() == static_cast<std::size_t>(d) && beta.value().numel() == static_cast<std::size_t>(d),
          "layer_norm: affine size");
  Var normalized = layer_norm(x, eps);
  const int r = x.dim(0);
  Tensor y(Shape{r, d});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < d; ++j) y.at(i, j) = normalized.value().at(i, j) * gamma.value()[j] + beta.value()[j];
  return make_op(std::move(y), {normalized, gamma, beta}, [r, d](Node& n) {
    const Tensor& xn = n.inputs[0]->value;
    const Tensor& gm = n.inputs[1]->value;
    if (needs(n, 0)) {
      Tensor g(Shape{r, d});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) g.at(i, j) = n.grad.at(i, j) * gm[j];
      n.inputs[0]->accumulate(g);
    }
    if (needs(n, 1)) {
      Tensor& g = n.inputs[1]->grad_buffer();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) g[j] += n.grad.at(i, j) * xn.at(i, j);
    }
    if (needs(n, 2)) {
      Tensor& g = n.inputs[2]->grad_buffer();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) g[j] += n.grad.at(i, j);
    }
  });
}

Var layer_norm(const Var& x, Scalar eps) {
  require_rank(x, 2, "layer_norm");
  const int r = x.dim(0);
  const int d = x.dim(1);
  Tensor y(Shape{r, d});
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    Scalar mu = 0;
    for (int j = 0; j < d; ++j) mu += x.value().at(i, j);
    mu /= d;
    Scalar var = 0;
    for (int j = 0; j < d; ++j) {
      const Scalar c = x.value().at(i, j) - mu;
      var += c * c;
    }
    var /= d;
    const Scalar is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) y.at(i, j) = (x.value().at(i, j) - mu) * is;
  }
  return make_op(std::move(y), {x}, [r, d, inv_std](Node& n) {
    Tensor g(Shape{r, d});
    for (int i = 0; i < r; ++i) {
      Scalar mean_g = 0;
      Scalar mean_gy = 0;
      for (int j = 0; j < d; ++j) {
        mean_g += n.grad.at(i, j);
        mean_gy += n.grad.at(i, j) * n.value.at(i, j);
      }
      mean_g /= d;
      mean_gy /= d;
      const Scalar is = (*inv_std)[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) g.at(i, j) = is * (n.grad.at(i, j) - mean_g - n.value.at(i, j) * mean_gy);
    }
    n.inputs[0]->accumulate(g);
  });
}

Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  const int r = x.dim(0);
  const int c = x.dim(1);
  Tensor y(Shape{r, c});
  for (int i = 0; i < r; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, x.value().at(i, j));
    Scalar z = 0;
    for (int j = 0; j < c; ++j) {
      y.at(i, j) = std::exp(x.value().at(i, j) - mx);
      z += y.at(i, j);
    }
    for (int j = 0; j < c; ++j) y.at(i, j) /= z;
  }
  return make_op(std::move(y), {x}, [r, c](Node& n) {
    Tensor g(Shape{r, c});
    for (int i = 0; i < r; ++i) {
      Scalar dot = 0;
      for (int j = 0; j < c; ++j) dot += n.grad.at(i, j) * n.value.at(i, j);
      for (int j = 0; j < c; ++j) g.at(i, j) = n.value.at(i, j) * (n.grad.at(i, j) - dot);
    }
    n.inputs[0]->accumulate(g);
  });
}

Var log_softmax_rows(const Var& x) {
  require_rank(x, 2, "log_softmax_rows");
  const int r = x.dim(0);
  const int c = x.dim(1);
  Tensor y(Shape{r, c});
  for (int i = 0; i < r; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, x.value().at(i, j));
    Scalar z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(x.value().at(i, j) - mx);
    const Scalar lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) y.at(i, j) = x.value().at(i, j) - lse;
  }
  return make_op(std::move(y), {x}, [r, c](Node& n) {
    Tensor g(Shape{r, c});
    for (int i = 0; i < r; ++i) {
      Scalar gs = 0;
      for (int j = 0; j < c; ++j) gs += n.grad.at(i, j);
      for (int j = 0; j < c; ++j) g.at(i, j) = n.grad.at(i, j) - std::exp(n.value.at(i, j)) * gs;
    }
    n.inputs[0]->accumulate(g);
  });
}

Var gather_cols(const Var& x, std::span<const int> cols) {
  require_rank(x, 2, "gather_cols");
  const int r = x.dim(0);
  const int c = x.dim(1);
  require(static_cast<int>(cols.size()) == r, "gather_cols: one index per row required");
  std::vector<int> idx(cols.begin(), cols.end());
  Tensor y(Shape{r});
  for (int i = 0; i < r; ++i) {
    require(idx[static_cast<std::size_t>(i)] >= 0 && idx[static_cast<std::size_t>(i)] < c, "gather_cols: index out of range");
    y[static_cast<std::size_t>(i)] = x.value().at(i, idx[static_cast<std::size_t>(i)]);
  }
  return make_op(std::move(y), {x}, [idx = std::move(idx)](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g.at(static_cast<int>(i), idx[i]) += n.grad[i];
  });
}

Var grad_reverse(const Var& x, Scalar lambda) {
  require(lambda >= 0, "grad_reverse: lambda must be nonnegative");
  return make_op(x.value(), {x}, [lambda](Node& n) { n.inputs[0]->grad_buffer().add_(n.grad, -lambda); });
}

Var smooth_l1_elementwise(const Var& d, Scalar beta) {
  require(beta > 0, "smooth_l1: beta must be positive");
  return unary(
      d,
      [beta](Scalar v) {
        const Scalar a = std::abs(v);
        return a < beta ? 0.5 * v * v / beta : a - 0.5 * beta;
      },
      [beta](Scalar v, Scalar) {
        if (std::abs(v) < beta) return v / beta;
        return v > 0 ? 1.0 : -1.0;
      });
}

Var bce_with_logits(const Var& logits, std::span<const Scalar> targets) {
  const auto count = logits.value().numel();
  require(targets.size() == count, "bce_with_logits: target count");
  require(count > 0, "bce_with_logits: empty input");
  std::vector<Scalar> t(targets.begin(), targets.end());
  Scalar total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const Scalar x = logits.value()[i];
    total += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return make_op(Tensor::scalar(total / static_cast<Scalar>(count)), {logits}, [t = std::move(t)](Node& n) {
    const Tensor& x = n.inputs[0]->value;
    Tensor g(x.shape());
    const Scalar scale = n.grad[0] / static_cast<Scalar>(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const Scalar s = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      g[i] = scale * (s - t[i]);
    }
    n.inputs[0]->accumulate(g);
  });
}

}  // namespace acia::nn
