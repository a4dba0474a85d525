// SPDX-License-Identifier: Apache-2.0
#include "paracnn/kernels.hpp"
#include "paracnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace paracnn {

namespace {

using NodePtr = std::shared_ptr<Node>;
using Backward = std::function<void(Node &)>;

// Creates the result node and, when gradients are being recorded, wires it
// to its inputs. `make_backward` is only invoked when the tape is live so
// forward-only passes never pay for closure captures.
template <typename MakeBackward>
Tensor record(Shape shape, std::vector<double> values,
              const std::vector<Tensor> &inputs, MakeBackward &&make_backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor &t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const auto &t : inputs)
        node->parents.push_back(t.node());
      node->backward_fn = make_backward();
    }
  }
  return Tensor(std::move(node));
}

bool is_suffix(const Shape &small, const Shape &big) {
  if (small.size() > big.size())
    return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const Tensor &a, const Tensor &b, const char *op) {
  if (is_suffix(b.shape(), a.shape()))
    return a.shape();
  if (is_suffix(a.shape(), b.shape()))
    return b.shape();
  throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a.shape()) +
                   " with " + to_string(b.shape()) +
                   " (only trailing-dimension alignment is supported)");
}

void check_rank(const Tensor &x, std::size_t rank, const char *op) {
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + to_string(x.shape()));
}

struct AxisSplit {
  std::size_t outer, length, inner;
};

AxisSplit split_at(const Shape &shape, std::size_t axis, const char *op) {
  if (axis >= shape.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for " + to_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i)
    s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor &x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = fwd(in[i]);
  NodePtr xn = x.node();
  return record(x.shape(), std::move(out), {x}, [xn, deriv] {
    return [xn, deriv](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += self.grad[i] * deriv(xn->data[i], self.data[i]);
    };
  });
}

} // namespace

// ---------------------------------------------------------------------------
// element-wise

Tensor add(const Tensor &a, const Tensor &b) {
  Shape shape = broadcast_shape(a, b, "add");
  const std::size_t n = numel_of(shape), na = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  auto da = a.data(), db = b.data();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i)
      out[i] = da[i] + db[i];
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out[i] = da[i % na] + db[i % nb];
  }
  NodePtr an = a.node(), bn = b.node();
  return record(std::move(shape), std::move(out), {a, b}, [an, bn] {
    return [an, bn](Node &self) {
      for (auto *p : {an.get(), bn.get()}) {
        if (!p->requires_grad)
          continue;
        auto g = p->grad_buffer();
        const std::size_t np = g.size();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i % np] += self.grad[i];
      }
    };
  });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  Shape shape = broadcast_shape(a, b, "sub");
  const std::size_t n = numel_of(shape), na = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = da[i % na] - db[i % nb];
  NodePtr an = a.node(), bn = b.node();
  return record(std::move(shape), std::move(out), {a, b}, [an, bn] {
    return [an, bn](Node &self) {
      if (an->requires_grad) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i % g.size()] += self.grad[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i % g.size()] -= self.grad[i];
      }
    };
  });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  Shape shape = broadcast_shape(a, b, "mul");
  const std::size_t n = numel_of(shape), na = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = da[i % na] * db[i % nb];
  NodePtr an = a.node(), bn = b.node();
  return record(std::move(shape), std::move(out), {a, b}, [an, bn] {
    return [an, bn](Node &self) {
      const std::size_t na = an->data.size(), nb = bn->data.size();
      if (an->requires_grad) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i % na] += self.grad[i] * bn->data[i % nb];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i % nb] += self.grad[i] * an->data[i % na];
      }
    };
  });
}

Tensor scale(const Tensor &a, double factor) {
  return unary(
      a, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor &a, double value) {
  return unary(
      a, [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor &x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0)
          return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) {
        if (debug::active_fault() == debug::Fault::sigmoid_backward)
          return y * (1.0 - y) * 1.01;
        return y * (1.0 - y);
      });
}

Tensor tanh(const Tensor &x) {
  return unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor &x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor &x) {
  return unary(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor &a, const Tensor &b) {
  check_rank(b, 2, "matmul");
  if (a.rank() < 1 || a.shape().back() != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) +
                     " · " + to_string(b.shape()));
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<double> out(m * n);
  kernels::gemm_nn(a.data(), b.data(), out, m, k, n, false);
  NodePtr an = a.node(), bn = b.node();
  return record(std::move(shape), std::move(out), {a, b}, [an, bn, m, k, n] {
    return [an, bn, m, k, n](Node &self) {
      if (an->requires_grad)
        kernels::gemm_nt(self.grad, bn->data, an->grad_buffer(), m, n, k, true);
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        kernels::gemm_tn(an->data, self.grad, g, k, m, n, true);
        if (debug::active_fault() == debug::Fault::matmul_backward)
          g[0] += 1e-3;
      }
    };
  });
}

Tensor bmm(const Tensor &a, const Tensor &b, bool transpose_b) {
  check_rank(a, 3, "bmm");
  check_rank(b, 3, "bmm");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != groups || bk != k)
    throw ShapeError("bmm: incompatible " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + (transpose_b ? " (transposed)" : ""));
  std::vector<double> out(groups * m * n);
  auto da = a.data(), db = b.data();
  for (std::size_t g = 0; g < groups; ++g) {
    auto ag = da.subspan(g * m * k, m * k);
    auto bg = db.subspan(g * k * n, k * n);
    auto cg = std::span<double>(out).subspan(g * m * n, m * n);
    if (transpose_b)
      kernels::gemm_nt(ag, bg, cg, m, k, n, false);
    else
      kernels::gemm_nn(ag, bg, cg, m, k, n, false);
  }
  NodePtr an = a.node(), bn = b.node();
  return record({groups, m, n}, std::move(out), {a, b},
                [an, bn, groups, m, k, n, transpose_b] {
    return [an, bn, groups, m, k, n, transpose_b](Node &self) {
      std::span<const double> gout = self.grad;
      for (std::size_t g = 0; g < groups; ++g) {
        auto go = gout.subspan(g * m * n, m * n);
        std::span<const double> ag(an->data.data() + g * m * k, m * k);
        std::span<const double> bg(bn->data.data() + g * k * n, k * n);
        if (an->requires_grad) {
          auto ga = an->grad_buffer().subspan(g * m * k, m * k);
          if (transpose_b)
            kernels::gemm_nn(go, bg, ga, m, n, k, true);
          else
            kernels::gemm_nt(go, bg, ga, m, n, k, true);
        }
        if (bn->requires_grad) {
          auto gb = bn->grad_buffer().subspan(g * k * n, k * n);
          if (transpose_b)
            kernels::gemm_tn(go, ag, gb, n, m, k, true);
          else
            kernels::gemm_tn(ag, go, gb, k, m, n, true);
        }
      }
    };
  });
}

Tensor linear(const Tensor &x, const Tensor &w, const Tensor &bias) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// structure

Tensor concat(const std::vector<Tensor> &parts, std::size_t axis) {
  if (parts.empty())
    throw ShapeError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size())
    throw ShapeError("concat: axis out of range for " + to_string(shape));
  std::size_t total = 0;
  for (const auto &p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size())
      throw ShapeError("concat: rank mismatch " + to_string(s) + " vs " +
                       to_string(shape));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != shape[i])
        throw ShapeError("concat: extent mismatch " + to_string(s) + " vs " +
                         to_string(shape) + " off axis " + std::to_string(axis));
    total += s[axis];
  }
  shape[axis] = total;
  const auto split = split_at(shape, axis, "concat");
  std::vector<std::size_t> chunk;
  for (const auto &p : parts)
    chunk.push_back(p.dim(axis) * split.inner);
  const std::size_t row = total * split.inner;
  std::vector<double> out(numel_of(shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto d = parts[pi].data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(d.begin() + o * chunk[pi], chunk[pi],
                  out.begin() + o * row + offset);
    offset += chunk[pi];
  }
  std::vector<NodePtr> nodes;
  for (const auto &p : parts)
    nodes.push_back(p.node());
  return record(std::move(shape), std::move(out), parts,
                [nodes, chunk, row, outer = split.outer] {
    return [nodes, chunk, row, outer](Node &self) {
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        if (nodes[pi]->requires_grad) {
          auto g = nodes[pi]->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < chunk[pi]; ++i)
              g[o * chunk[pi] + i] += self.grad[o * row + offset + i];
        }
        offset += chunk[pi];
      }
    };
  });
}

Tensor slice(const Tensor &x, std::size_t axis, std::size_t start,
             std::size_t length) {
  const auto split = split_at(x.shape(), axis, "slice");
  if (length == 0 || start + length > split.length)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") invalid for axis " +
                     std::to_string(axis) + " of " + to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = length;
  const std::size_t in_row = split.length * split.inner;
  const std::size_t out_row = length * split.inner;
  const std::size_t skip = start * split.inner;
  std::vector<double> out(split.outer * out_row);
  auto d = x.data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(d.begin() + o * in_row + skip, out_row, out.begin() + o * out_row);
  NodePtr xn = x.node();
  return record(std::move(shape), std::move(out), {x},
                [xn, in_row, out_row, skip, outer = split.outer] {
    return [xn, in_row, out_row, skip, outer](Node &self) {
      if (!xn->requires_grad)
        return;
      auto g = xn->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < out_row; ++i)
          g[o * in_row + skip + i] += self.grad[o * out_row + i];
    };
  });
}

Tensor reshape(const Tensor &x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " +
                     to_string(shape) + " changes element count");
  NodePtr xn = x.node();
  return record(std::move(shape), x.values(), {x}, [xn] {
    return [xn](Node &self) {
      if (!xn->requires_grad)
        return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i];
    };
  });
}

Tensor transpose(const Tensor &x, std::size_t axis0, std::size_t axis1) {
  const Shape &in = x.shape();
  if (axis0 >= in.size() || axis1 >= in.size())
    throw ShapeError("transpose: axes out of range for " + to_string(in));
  Shape shape = in;
  std::swap(shape[axis0], shape[axis1]);
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;)
    in_stride[i] = in_stride[i + 1] * in[i + 1];
  // stride in the input for each output axis
  std::vector<std::size_t> stride = in_stride;
  std::swap(stride[axis0], stride[axis1]);

  const std::size_t n = x.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t a = 0; a < rank; ++a)
      src += idx[a] * stride[a];
    source[flat] = src;
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < shape[a])
        break;
      idx[a] = 0;
    }
  }
  std::vector<double> out(n);
  auto d = x.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = d[source[i]];
  NodePtr xn = x.node();
  return record(std::move(shape), std::move(out), {x},
                [xn, src = std::move(source)]() mutable {
    return [xn, src = std::move(src)](Node &self) {
      if (!xn->requires_grad)
        return;
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < src.size(); ++i)
        g[src[i]] += self.grad[i];
    };
  });
}

Tensor expand(const Tensor &x, std::size_t n) {
  check_rank(x, 2, "expand");
  if (n == 0)
    throw ShapeError("expand: count must be positive");
  const std::size_t groups = x.dim(0), c = x.dim(1);
  std::vector<double> out(groups * n * c);
  auto d = x.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t t = 0; t < n; ++t)
      std::copy_n(d.begin() + g * c, c, out.begin() + (g * n + t) * c);
  NodePtr xn = x.node();
  return record({groups, n, c}, std::move(out), {x}, [xn, groups, n, c] {
    return [xn, groups, n, c](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t i = 0; i < c; ++i)
            gx[g * c + i] += self.grad[(g * n + t) * c + i];
    };
  });
}

Tensor gather_rows(const Tensor &table, std::span<const std::int64_t> index) {
  check_rank(table, 2, "gather_rows");
  if (index.empty())
    throw ShapeError("gather_rows: empty index");
  const std::size_t rows = table.dim(0), c = table.dim(1);
  std::vector<std::int64_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * c, 0.0);
  auto d = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < -1 || idx[i] >= static_cast<std::int64_t>(rows))
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) +
                       " out of range for " + std::to_string(rows) + " rows");
    if (idx[i] >= 0)
      std::copy_n(d.begin() + idx[i] * c, c, out.begin() + i * c);
  }
  NodePtr tn = table.node();
  const std::size_t count = idx.size();
  return record({count, c}, std::move(out), {table},
                [tn, c, idx = std::move(idx)]() mutable {
    return [tn, c, idx = std::move(idx)](Node &self) {
      if (!tn->requires_grad)
        return;
      auto g = tn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (idx[i] >= 0)
          for (std::size_t j = 0; j < c; ++j)
            g[idx[i] * c + j] += self.grad[i * c + j];
    };
  });
}

Tensor pairwise_add(const Tensor &a, const Tensor &b) {
  check_rank(a, 3, "pairwise_add");
  check_rank(b, 3, "pairwise_add");
  const std::size_t groups = a.dim(0), l = a.dim(1), r = b.dim(1), h = a.dim(2);
  if (b.dim(0) != groups || b.dim(2) != h)
    throw ShapeError("pairwise_add: incompatible " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  std::vector<double> out(groups * l * r * h);
  auto da = a.data(), db = b.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < r; ++j) {
        const double *pa = da.data() + (g * l + i) * h;
        const double *pb = db.data() + (g * r + j) * h;
        double *po = out.data() + ((g * l + i) * r + j) * h;
        for (std::size_t q = 0; q < h; ++q)
          po[q] = pa[q] + pb[q];
      }
  NodePtr an = a.node(), bn = b.node();
  return record({groups, l, r, h}, std::move(out), {a, b},
                [an, bn, groups, l, r, h] {
    return [an, bn, groups, l, r, h](Node &self) {
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t j = 0; j < r; ++j) {
            const double *go = self.grad.data() + ((g * l + i) * r + j) * h;
            if (an->requires_grad) {
              double *ga = an->grad_buffer().data() + (g * l + i) * h;
              for (std::size_t q = 0; q < h; ++q)
                ga[q] += go[q];
            }
            if (bn->requires_grad) {
              double *gb = bn->grad_buffer().data() + (g * r + j) * h;
              for (std::size_t q = 0; q < h; ++q)
                gb[q] += go[q];
            }
          }
    };
  });
}

Tensor causal_unfold(const Tensor &x, std::size_t kernel) {
  check_rank(x, 3, "causal_unfold");
  if (kernel == 0)
    throw ShapeError("causal_unfold: kernel must be positive");
  const std::size_t groups = x.dim(0), steps = x.dim(1), c = x.dim(2);
  const std::size_t width = kernel * c;
  std::vector<double> out(groups * steps * width, 0.0);
  auto d = x.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t q = 0; q < kernel; ++q) {
        // tap q reads frame t - (kernel - 1) + q
        if (t + q + 1 < kernel)
          continue;
        const std::size_t src = t + q + 1 - kernel;
        std::copy_n(d.begin() + (g * steps + src) * c, c,
                    out.begin() + (g * steps + t) * width + q * c);
      }
  NodePtr xn = x.node();
  return record({groups, steps, width}, std::move(out), {x},
                [xn, groups, steps, c, kernel, width] {
    return [xn, groups, steps, c, kernel, width](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t t = 0; t < steps; ++t)
          for (std::size_t q = 0; q < kernel; ++q) {
            if (t + q + 1 < kernel)
              continue;
            const std::size_t src = t + q + 1 - kernel;
            const double *go = self.grad.data() + (g * steps + t) * width + q * c;
            double *gi = gx.data() + (g * steps + src) * c;
            for (std::size_t i = 0; i < c; ++i)
              gi[i] += go[i];
          }
    };
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor &x) {
  double total = 0.0;
  for (double v : x.data())
    total += v;
  NodePtr xn = x.node();
  return record({}, {total}, {x}, [xn] {
    return [xn](Node &self) {
      if (!xn->requires_grad)
        return;
      for (auto &g : xn->grad_buffer())
        g += self.grad[0];
    };
  });
}

Tensor mean(const Tensor &x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor masked_mean(const Tensor &x, const Mask &mask) {
  check_rank(x, 3, "masked_mean");
  const std::size_t groups = x.dim(0), steps = x.dim(1), c = x.dim(2);
  if (mask.size() != groups * steps)
    throw ShapeError("masked_mean: mask has " + std::to_string(mask.size()) +
                     " entries for " + to_string(x.shape()));
  std::vector<double> out(groups * c, 0.0);
  std::vector<double> inv(groups, 0.0);
  auto d = x.data();
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      if (!mask[g * steps + t])
        continue;
      ++count;
      for (std::size_t i = 0; i < c; ++i)
        out[g * c + i] += d[(g * steps + t) * c + i];
    }
    if (count) {
      inv[g] = 1.0 / static_cast<double>(count);
      for (std::size_t i = 0; i < c; ++i)
        out[g * c + i] *= inv[g];
    }
  }
  NodePtr xn = x.node();
  return record({groups, c}, std::move(out), {x},
                [xn, mask, inv = std::move(inv), groups, steps, c]() mutable {
    return [xn, mask, inv = std::move(inv), groups, steps, c](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t t = 0; t < steps; ++t) {
          if (!mask[g * steps + t])
            continue;
          for (std::size_t i = 0; i < c; ++i)
            gx[(g * steps + t) * c + i] += self.grad[g * c + i] * inv[g];
        }
    };
  });
}

Tensor masked_max(const Tensor &x, const Mask &mask) {
  check_rank(x, 3, "masked_max");
  const std::size_t groups = x.dim(0), steps = x.dim(1), c = x.dim(2);
  if (mask.size() != groups * steps)
    throw ShapeError("masked_max: mask has " + std::to_string(mask.size()) +
                     " entries for " + to_string(x.shape()));
  std::vector<double> out(groups * c, 0.0);
  std::vector<std::int64_t> arg(groups * c, -1);
  auto d = x.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t t = 0; t < steps; ++t) {
      if (!mask[g * steps + t])
        continue;
      for (std::size_t i = 0; i < c; ++i) {
        const double v = d[(g * steps + t) * c + i];
        auto &a = arg[g * c + i];
        if (a < 0 || v > out[g * c + i]) {
          out[g * c + i] = v;
          a = static_cast<std::int64_t>((g * steps + t) * c + i);
        }
      }
    }
  NodePtr xn = x.node();
  return record({groups, c}, std::move(out), {x},
                [xn, arg = std::move(arg)]() mutable {
    return [xn, arg = std::move(arg)](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t i = 0; i < arg.size(); ++i)
        if (arg[i] >= 0)
          gx[arg[i]] += self.grad[i];
    };
  });
}

Tensor softmax(const Tensor &x, std::size_t axis, const Mask *mask) {
  const auto s = split_at(x.shape(), axis, "softmax");
  if (mask && mask->size() != x.numel())
    throw ShapeError("softmax: mask size " + std::to_string(mask->size()) +
                     " does not match " + to_string(x.shape()));
  std::vector<double> out(x.numel(), 0.0);
  auto d = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      auto valid = [&](std::size_t l) {
        return !mask || (*mask)[base + l * s.inner];
      };
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l)
        if (valid(l))
          peak = std::max(peak, d[base + l * s.inner]);
      if (peak == -std::numeric_limits<double>::infinity())
        continue;
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l)
        if (valid(l)) {
          const double e = std::exp(d[base + l * s.inner] - peak);
          out[base + l * s.inner] = e;
          total += e;
        }
      for (std::size_t l = 0; l < s.length; ++l)
        out[base + l * s.inner] /= total;
    }
  NodePtr xn = x.node();
  return record(x.shape(), std::move(out), {x}, [xn, s] {
    return [xn, s](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.length * s.inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < s.length; ++l)
            dot += self.grad[base + l * s.inner] * self.data[base + l * s.inner];
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t i = base + l * s.inner;
            gx[i] += self.data[i] * (self.grad[i] - dot);
          }
        }
    };
  });
}

Tensor log_softmax(const Tensor &x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "log_softmax");
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l)
        peak = std::max(peak, d[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l)
        total += std::exp(d[base + l * s.inner] - peak);
      const double lse = peak + std::log(total);
      for (std::size_t l = 0; l < s.length; ++l)
        out[base + l * s.inner] = d[base + l * s.inner] - lse;
    }
  NodePtr xn = x.node();
  return record(x.shape(), std::move(out), {x}, [xn, s] {
    return [xn, s](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.length * s.inner + in;
          double total = 0.0;
          for (std::size_t l = 0; l < s.length; ++l)
            total += self.grad[base + l * s.inner];
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t i = base + l * s.inner;
            gx[i] += self.grad[i] - std::exp(self.data[i]) * total;
          }
        }
    };
  });
}

Tensor glu(const Tensor &x) {
  if (x.rank() < 1 || x.shape().back() % 2 != 0)
    throw ShapeError("glu: last axis must be even, got " + to_string(x.shape()));
  const std::size_t c = x.shape().back() / 2;
  const std::size_t rows = x.numel() / (2 * c);
  Shape shape = x.shape();
  shape.back() = c;
  std::vector<double> out(rows * c);
  std::vector<double> gate(rows * c);
  auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) {
      const double b = d[r * 2 * c + c + i];
      const double s = b >= 0 ? 1.0 / (1.0 + std::exp(-b))
                              : std::exp(b) / (1.0 + std::exp(b));
      gate[r * c + i] = s;
      out[r * c + i] = d[r * 2 * c + i] * s;
    }
  NodePtr xn = x.node();
  return record(std::move(shape), std::move(out), {x},
                [xn, gate = std::move(gate), rows, c]() mutable {
    return [xn, gate = std::move(gate), rows, c](Node &self) {
      if (!xn->requires_grad)
        return;
      auto gx = xn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i) {
          const double g = self.grad[r * c + i];
          const double s = gate[r * c + i];
          const double a = xn->data[r * 2 * c + i];
          gx[r * 2 * c + i] += g * s;
          gx[r * 2 * c + c + i] += g * a * s * (1.0 - s);
        }
    };
  });
}

Tensor cross_entropy(const Tensor &logits, std::span<const std::int64_t> targets,
                     const Mask &mask) {
  check_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets and " + std::to_string(mask.size()) +
                     " mask entries for " + std::to_string(rows) + " rows");
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r])
      continue;
    if (targets[r] < 0 || targets[r] >= static_cast<std::int64_t>(vocab))
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside [0, " + std::to_string(vocab) + ")");
    ++count;
  }
  if (count == 0)
    throw EmptyLossError("empty loss: every position is masked");

  auto d = logits.data();
  std::vector<double> probs(rows * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r])
      continue;
    const double *row = d.data() + r * vocab;
    const double peak = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v)
      z += std::exp(row[v] - peak);
    const double lse = peak + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t v = 0; v < vocab; ++v)
      probs[r * vocab + v] = std::exp(row[v] - lse);
  }
  const double inv = 1.0 / static_cast<double>(count);
  NodePtr ln = logits.node();
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  return record({}, {total * inv}, {logits},
                [ln, probs = std::move(probs), tgt = std::move(tgt), mask, rows,
                 vocab, inv]() mutable {
    return [ln, probs = std::move(probs), tgt = std::move(tgt), mask, rows,
            vocab, inv](Node &self) {
      if (!ln->requires_grad)
        return;
      auto g = ln->grad_buffer();
      const double scale = self.grad[0] * inv;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r])
          continue;
        for (std::size_t v = 0; v < vocab; ++v)
          g[r * vocab + v] += scale * probs[r * vocab + v];
        g[r * vocab + tgt[r]] -= scale;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// verification

namespace {

double check_gradients(const std::function<Tensor()> &f,
                       const std::vector<Tensor> &inputs,
                       const std::function<double(const std::function<double()> &,
                                                  double &, double)> &numeric_at) {
  std::vector<Tensor> xs = inputs;
  std::vector<bool> previous;
  for (auto &x : xs) {
    previous.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tensor out = f();
  if (out.numel() != 1)
    throw ShapeError("grad_check: function must be scalar-valued, got " +
                     to_string(out.shape()));
  out.backward();

  double worst = 0.0;
  NoGradGuard guard;
  const std::function<double()> value = [&] { return f().item(); };
  for (auto &x : xs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto values = x.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double numeric = numeric_at(value, values[i], analytic[i]);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i].zero_grad();
    xs[i].set_requires_grad(previous[i]);
  }
  return worst;
}

double central(const std::function<double()> &value, double &slot, double eps) {
  const double saved = slot;
  slot = saved + eps;
  const double up = value();
  slot = saved - eps;
  const double down = value();
  slot = saved;
  return (up - down) / (2.0 * eps);
}

double relative_gap(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Ridders' polynomial extrapolation of central differences with step
// h, h/2, h/4, ...; returns the tableau entry with the smallest internal
// error estimate.
double ridders(const std::function<double()> &value, double &slot, double h) {
  constexpr int table = 8;
  constexpr double shrink = 2.0, safe = 2.0;
  double a[table][table];
  a[0][0] = central(value, slot, h);
  double best = a[0][0], err = std::numeric_limits<double>::infinity();
  for (int i = 1; i < table; ++i) {
    h /= shrink;
    a[0][i] = central(value, slot, h);
    double fac = shrink * shrink;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= shrink * shrink;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]),
                                std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= safe * err)
      break;
  }
  return best;
}

} // namespace

double grad_check(const std::function<Tensor()> &f,
                  const std::vector<Tensor> &inputs, double eps) {
  return check_gradients(f, inputs, [eps](const auto &value, double &slot, double) {
    return central(value, slot, eps);
  });
}

double grad_check_refined(const std::function<Tensor()> &f,
                          const std::vector<Tensor> &inputs, double eps) {
  return check_gradients(
      f, inputs, [eps](const auto &value, double &slot, double analytic) {
        const double d1 = central(value, slot, eps);
        const double d2 = central(value, slot, 2.0 * eps);
        const double quick = (4.0 * d1 - d2) / 3.0;
        if (relative_gap(quick, analytic) <= 1e-5)
          return quick;
        return ridders(value, slot, 32.0 * eps);
      });
}

double grad_check(const std::function<Tensor(const Tensor &)> &f,
                  const Tensor &x, double eps) {
  return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, eps);
}

} // namespace paracnn
