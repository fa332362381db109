#include "medblip/ndiff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace medblip::nd {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": " + why + " (shape " + to_string(a) + ")");
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) shape_fail(op, s, "axis " + std::to_string(axis) + " out of range");
  AxisSplit r;
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  r.n = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out.push_back(s[d]);
  return out;
}

// Right-aligned numpy broadcasting.
Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed over the dimensions of `out`; 0 where broadcast.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d = in.size() - 1 - k;
    const std::size_t od = out.size() - 1 - k;
    strides[od] = in[d] == 1 ? 0 : stride;
    stride *= in[d];
  }
  return strides;
}

// Odometer over `out`, tracking offsets into two strided operands.
template <class F>
void for_each_offset(const Shape& out, const std::vector<std::size_t>& sa,
                     const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinOp { add, sub, mul };

template <class T>
Var<T> binary(std::string_view name, BinOp kind, const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinOp::add: return x + y;
      case BinOp::sub: return x - y;
      default: return x * y;
    }
  };

  if (as == bs) {
    Tensor<T> out(as);
    auto& o = out.storage();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply(av[i], bv[i]);
    return make_result<T>(name, std::move(out), {a, b}, [kind](Node<T>& self) {
      const auto& g = self.grad.storage();
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      if (na.requires_grad) {
        auto& ga = na.grad_buffer().storage();
        if (kind == BinOp::mul) {
          const auto& bv = nb.value.storage();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer().storage();
        if (kind == BinOp::mul) {
          const auto& av = na.value.storage();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        } else if (kind == BinOp::sub) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }

  const Shape out_shape = broadcast_shape(name, as, bs);
  const auto sa = broadcast_strides(as, out_shape);
  const auto sb = broadcast_strides(bs, out_shape);
  Tensor<T> out(out_shape);
  auto& o = out.storage();
  for_each_offset(out_shape, sa, sb,
                  [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = apply(av[ia], bv[ib]); });
  return make_result<T>(name, std::move(out), {a, b}, [kind, out_shape, sa, sb](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto& av = na.value.storage();
    const auto& bv = nb.value.storage();
    if (na.requires_grad) {
      auto& ga = na.grad_buffer().storage();
      for_each_offset(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += kind == BinOp::mul ? g[i] * bv[ib] : g[i];
      });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer().storage();
      for_each_offset(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (kind) {
          case BinOp::mul: gb[ib] += g[i] * av[ia]; break;
          case BinOp::sub: gb[ib] -= g[i]; break;
          default: gb[ib] += g[i];
        }
      });
    }
  });
}

template <class T>
Var<T> unary(std::string_view name, const Var<T>& a, T (*f)(T), T (*df)(T x, T y)) {
  Tensor<T> out(a.shape());
  const auto& av = a.value().storage();
  auto& o = out.storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(av[i]);
  return make_result<T>(name, std::move(out), {a}, [df](Node<T>& self) {
    auto& in = *self.inputs[0];
    const auto& g = self.grad.storage();
    const auto& x = in.value.storage();
    const auto& y = self.value.storage();
    auto& gi = in.grad_buffer().storage();
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() >= 2 && bs.size() == 2) {
    const std::size_t k = as.back();
    if (k != bs[0]) shape_fail("matmul", as, bs);
    const std::size_t m = a.value().numel() / k;
    const std::size_t n = bs[1];
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);
    MutMap<T>(out.data().data(), m, n).noalias() =
        ConstMap<T>(a.value().data().data(), m, k) * ConstMap<T>(b.value().data().data(), k, n);
    return make_result<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      ConstMap<T> g(self.grad.data().data(), m, n);
      if (na.requires_grad) {
        MutMap<T>(na.grad_buffer().data().data(), m, k).noalias() +=
            g * ConstMap<T>(nb.value.data().data(), k, n).transpose();
      }
      if (nb.requires_grad) {
        MutMap<T>(nb.grad_buffer().data().data(), k, n).noalias() +=
            ConstMap<T>(na.value.data().data(), m, k).transpose() * g;
      }
    });
  }
  if (as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[1]) {
    const std::size_t batch = as[0], m = as[1], k = as[2], n = bs[2];
    Tensor<T> out(Shape{batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap<T>(out.data().data() + i * m * n, m, n).noalias() =
          ConstMap<T>(a.value().data().data() + i * m * k, m, k) *
          ConstMap<T>(b.value().data().data() + i * k * n, k, n);
    }
    return make_result<T>("matmul", std::move(out), {a, b}, [batch, m, k, n](Node<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMap<T> g(self.grad.data().data() + i * m * n, m, n);
        if (na.requires_grad) {
          MutMap<T>(na.grad_buffer().data().data() + i * m * k, m, k).noalias() +=
              g * ConstMap<T>(nb.value.data().data() + i * k * n, k, n).transpose();
        }
        if (nb.requires_grad) {
          MutMap<T>(nb.grad_buffer().data().data() + i * k * n, k, n).noalias() +=
              ConstMap<T>(na.value.data().data() + i * m * k, m, k).transpose() * g;
        }
      }
    });
  }
  shape_fail("matmul", as, bs);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>("add", BinOp::add, a, b);
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>("sub", BinOp::sub, a, b);
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>("mul", BinOp::mul, a, b);
}

template <class T>
Var<T> scale(const Var<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out(a.shape());
  const auto& av = a.value().storage();
  auto& o = out.storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * f;
  return make_result<T>("scale", std::move(out), {a}, [f](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * f;
  });
}

template <class T>
Var<T> broadcast_to(const Var<T>& a, const Shape& shape) {
  if (broadcast_shape("broadcast_to", a.shape(), shape) != shape) {
    shape_fail("broadcast_to", a.shape(), shape);
  }
  const auto sa = broadcast_strides(a.shape(), shape);
  const std::vector<std::size_t> none(shape.size(), 0);
  Tensor<T> out(shape);
  const auto& av = a.value().storage();
  auto& o = out.storage();
  for_each_offset(shape, sa, none, [&](std::size_t i, std::size_t ia, std::size_t) { o[i] = av[ia]; });
  return make_result<T>("broadcast_to", std::move(out), {a}, [shape, sa, none](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for_each_offset(shape, sa, none, [&](std::size_t i, std::size_t ia, std::size_t) { gi[ia] += g[i]; });
  });
}

template <class T>
Var<T> transpose(const Var<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) shape_fail("transpose", in, "permutation rank mismatch");
  std::vector<bool> seen(in.size(), false);
  for (std::size_t p : perm) {
    if (p >= in.size() || seen[p]) shape_fail("transpose", in, "invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t d = in.size(); d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
  Shape out_shape(in.size());
  std::vector<std::size_t> strides(in.size());
  for (std::size_t d = 0; d < in.size(); ++d) {
    out_shape[d] = in[perm[d]];
    strides[d] = in_strides[perm[d]];
  }
  const std::vector<std::size_t> none(in.size(), 0);
  Tensor<T> out(out_shape);
  const auto& av = a.value().storage();
  auto& o = out.storage();
  for_each_offset(out_shape, strides, none, [&](std::size_t i, std::size_t ia, std::size_t) { o[i] = av[ia]; });
  return make_result<T>("transpose", std::move(out), {a}, [out_shape, strides, none](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for_each_offset(out_shape, strides, none, [&](std::size_t i, std::size_t ia, std::size_t) { gi[ia] += g[i]; });
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  if (a.rank() < 2) shape_fail("transpose", a.shape(), "rank must be at least 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(a, perm);
}

template <class T>
Var<T> reshape(const Var<T>& a, const Shape& shape) {
  if (numel(shape) != a.value().numel()) shape_fail("reshape", a.shape(), shape);
  return make_result<T>("reshape", a.value().reshaped(shape), {a}, [](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const AxisSplit base = split_axis("concat", first, axis);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) shape_fail("concat", first, s);
    widths.push_back(s[axis] * base.inner);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const std::size_t row = total * base.inner;
  Tensor<T> out(out_shape);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = parts[p].value().storage();
    for (std::size_t o = 0; o < base.outer; ++o)
      std::copy_n(pv.begin() + o * widths[p], widths[p], out.storage().begin() + o * row + col);
    col += widths[p];
  }
  return make_result<T>("concat", std::move(out), parts, [widths, row, outer = base.outer](Node<T>& self) {
    const auto& g = self.grad.storage();
    std::size_t col = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      auto& in = *self.inputs[p];
      if (in.requires_grad) {
        auto& gi = in.grad_buffer().storage();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[p]; ++j) gi[o * widths[p] + j] += g[o * row + col + j];
      }
      col += widths[p];
    }
  });
}

template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis("slice", a.shape(), axis);
  if (length == 0 || start + length > s.n) {
    shape_fail("slice", a.shape(),
               "range [" + std::to_string(start) + "," + std::to_string(start + length) + ") on axis " +
                   std::to_string(axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const std::size_t in_row = s.n * s.inner;
  const std::size_t out_row = length * s.inner;
  const std::size_t offset = start * s.inner;
  Tensor<T> out(out_shape);
  const auto& av = a.value().storage();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.begin() + o * in_row + offset, out_row, out.storage().begin() + o * out_row);
  return make_result<T>("slice", std::move(out), {a}, [s, in_row, out_row, offset](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < out_row; ++j) gi[o * in_row + offset + j] += g[o * out_row + j];
  });
}

template <class T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis("softmax", a.shape(), axis);
  Tensor<T> out(a.shape());
  const auto& x = a.value().storage();
  auto& y = out.storage();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) hi = std::max(hi, x[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const T e = std::exp(x[base + j * s.inner] - hi);
        y[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) y[base + j * s.inner] /= total;
    }
  }
  return make_result<T>("softmax", std::move(out), {a}, [s](Node<T>& self) {
    const auto& g = self.grad.storage();
    const auto& y = self.value.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t k = base + j * s.inner;
          gi[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

template <class T>
Var<T> layernorm(const Var<T>& a, std::size_t axis, double eps) {
  const AxisSplit s = split_axis("layernorm", a.shape(), axis);
  Tensor<T> out(a.shape());
  std::vector<T> rstd(s.outer * s.inner);
  const auto& x = a.value().storage();
  auto& y = out.storage();
  const T e = static_cast<T>(eps);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mu = 0;
      for (std::size_t j = 0; j < s.n; ++j) mu += x[base + j * s.inner];
      mu /= static_cast<T>(s.n);
      T var = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const T d = x[base + j * s.inner] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.n);
      const T r = T(1) / std::sqrt(var + e);
      rstd[o * s.inner + i] = r;
      for (std::size_t j = 0; j < s.n; ++j) y[base + j * s.inner] = (x[base + j * s.inner] - mu) * r;
    }
  }
  return make_result<T>("layernorm", std::move(out), {a}, [s, rstd = std::move(rstd)](Node<T>& self) {
    const auto& g = self.grad.storage();
    const auto& y = self.value.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    const T inv_n = T(1) / static_cast<T>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T mg = 0, mgy = 0;
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t k = base + j * s.inner;
          mg += g[k];
          mgy += g[k] * y[k];
        }
        mg *= inv_n;
        mgy *= inv_n;
        const T r = rstd[o * s.inner + i];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t k = base + j * s.inner;
          gi[k] += r * (g[k] - mg - y[k] * mgy);
        }
      }
    }
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  return unary<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2))); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
        return cdf + x * pdf;
      });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids, const Shape& ids_shape) {
  if (table.rank() != 2) shape_fail("embedding", table.shape(), "table must be rank 2");
  if (ids.size() != numel(ids_shape)) shape_fail("embedding", ids_shape, "id count does not match id shape");
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw Error("embedding: token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(vocab));
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  Tensor<T> out(out_shape);
  const auto& tv = table.value().storage();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[i]) * width, width, out.storage().begin() + i * width);
  std::vector<int> kept(ids.begin(), ids.end());
  return make_result<T>("embedding", std::move(out), {table}, [kept = std::move(kept), width](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gt = self.inputs[0]->grad_buffer().storage();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(kept[i]) * width;
      for (std::size_t j = 0; j < width; ++j) gt[row + j] += g[i * width + j];
    }
  });
}

template <class T>
Var<T> masked_fill(const Var<T>& a, const Mask& mask, double value) {
  if (!is_suffix(mask.shape, a.shape()) || mask.bits.size() != numel(mask.shape)) {
    shape_fail("masked_fill", a.shape(), mask.shape);
  }
  const std::size_t period = mask.bits.size();
  Tensor<T> out(a.shape());
  const auto& av = a.value().storage();
  auto& o = out.storage();
  const T fill = static_cast<T>(value);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = mask.bits[i % period] ? fill : av[i];
  return make_result<T>("masked_fill", std::move(out), {a}, [bits = mask.bits](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    const std::size_t period = bits.size();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!bits[i % period]) gi[i] += g[i];
  });
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) shape_fail("cross_entropy", logits.shape(), "logits must be rank 2");
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    shape_fail("cross_entropy", logits.shape(), Shape{targets.size(), mask.size()});
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw Error("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
  }
  if (count == 0) throw Error("cross_entropy: mask selects no rows");
  const auto& x = logits.value().storage();
  std::vector<T> probs(rows * vocab, T(0));
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = x.data() + r * vocab;
    const T hi = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const T e = std::exp(row[v] - hi);
      probs[r * vocab + v] = e;
      z += e;
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] /= z;
    total += static_cast<double>(hi + std::log(z) - row[targets[r]]);
  }
  const T inv = T(1) / static_cast<T>(count);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_result<T>(
      "cross_entropy", Tensor<T>::scalar(static_cast<T>(total) * inv), {logits},
      [probs = std::move(probs), tgt = std::move(tgt), m = std::move(m), vocab, inv](Node<T>& self) {
        const T g = self.grad[0] * inv;
        auto& gi = self.inputs[0]->grad_buffer().storage();
        for (std::size_t r = 0; r < m.size(); ++r) {
          if (!m[r]) continue;
          for (std::size_t v = 0; v < vocab; ++v) gi[r * vocab + v] += g * probs[r * vocab + v];
          gi[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
        }
      });
}

template <class T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b, std::size_t axis) {
  if (a.shape() != b.shape()) shape_fail("cosine_similarity", a.shape(), b.shape());
  const AxisSplit s = split_axis("cosine_similarity", a.shape(), axis);
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  const std::size_t cells = s.outer * s.inner;
  std::vector<T> na(cells), nb(cells);
  Tensor<T> out(drop_axis(a.shape(), axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T dot = 0, sa = 0, sb = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t k = base + j * s.inner;
        dot += av[k] * bv[k];
        sa += av[k] * av[k];
        sb += bv[k] * bv[k];
      }
      if (sa == T(0) || sb == T(0)) throw NumericError("cosine_similarity: zero-norm vector");
      const std::size_t c = o * s.inner + i;
      na[c] = std::sqrt(sa);
      nb[c] = std::sqrt(sb);
      out[c] = dot / (na[c] * nb[c]);
    }
  }
  return make_result<T>("cosine_similarity", std::move(out), {a, b},
                        [s, na = std::move(na), nb = std::move(nb)](Node<T>& self) {
                          auto& in_a = *self.inputs[0];
                          auto& in_b = *self.inputs[1];
                          const auto& av = in_a.value.storage();
                          const auto& bv = in_b.value.storage();
                          const auto& g = self.grad.storage();
                          const auto& cosv = self.value.storage();
                          T* ga = in_a.requires_grad ? in_a.grad_buffer().data().data() : nullptr;
                          T* gb = in_b.requires_grad ? in_b.grad_buffer().data().data() : nullptr;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t i = 0; i < s.inner; ++i) {
                              const std::size_t c = o * s.inner + i;
                              const std::size_t base = o * s.n * s.inner + i;
                              const T inv_ab = T(1) / (na[c] * nb[c]);
                              const T ca = cosv[c] / (na[c] * na[c]);
                              const T cb = cosv[c] / (nb[c] * nb[c]);
                              for (std::size_t j = 0; j < s.n; ++j) {
                                const std::size_t k = base + j * s.inner;
                                if (ga) ga[k] += g[c] * (bv[k] * inv_ab - ca * av[k]);
                                if (gb) gb[k] += g[c] * (av[k] * inv_ab - cb * bv[k]);
                              }
                            }
                          }
                        });
}

template <class T>
MaxResult<T> max(const Var<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis("max", a.shape(), axis);
  const auto& x = a.value().storage();
  Tensor<T> out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      std::size_t best = 0;
      for (std::size_t j = 1; j < s.n; ++j)
        if (x[base + j * s.inner] > x[base + best * s.inner]) best = j;
      arg[o * s.inner + i] = best;
      out[o * s.inner + i] = x[base + best * s.inner];
    }
  }
  MaxResult<T> r;
  r.argmax = arg;
  r.value = make_result<T>("max", std::move(out), {a}, [s, arg = std::move(arg)](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t c = o * s.inner + i;
        gi[o * s.n * s.inner + arg[c] * s.inner + i] += g[c];
      }
  });
  return r;
}

template <class T>
Var<T> sum(const Var<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis("sum", a.shape(), axis);
  const auto& x = a.value().storage();
  Tensor<T> out(drop_axis(a.shape(), axis));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.n; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.n + j) * s.inner + i];
  return make_result<T>("sum", std::move(out), {a}, [s](Node<T>& self) {
    const auto& g = self.grad.storage();
    auto& gi = self.inputs[0]->grad_buffer().storage();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.n; ++j)
        for (std::size_t i = 0; i < s.inner; ++i) gi[(o * s.n + j) * s.inner + i] += g[o * s.inner + i];
  });
}

template <class T>
Var<T> mean(const Var<T>& a, std::size_t axis) {
  const std::size_t n = split_axis("mean", a.shape(), axis).n;
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().storage()) total += v;
  return make_result<T>("sum", Tensor<T>::scalar(total), {a}, [](Node<T>& self) {
    const T g = self.grad[0];
    for (T& v : self.inputs[0]->grad_buffer().storage()) v += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

#define MEDBLIP_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> scale(const Var<T>&, double);                                                     \
  template Var<T> broadcast_to(const Var<T>&, const Shape&);                                        \
  template Var<T> transpose(const Var<T>&, const std::vector<std::size_t>&);                        \
  template Var<T> transpose(const Var<T>&);                                                         \
  template Var<T> reshape(const Var<T>&, const Shape&);                                             \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                  \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                      \
  template Var<T> softmax(const Var<T>&, std::size_t);                                              \
  template Var<T> layernorm(const Var<T>&, std::size_t, double);                                    \
  template Var<T> gelu(const Var<T>&);                                                              \
  template Var<T> exp(const Var<T>&);                                                               \
  template Var<T> log(const Var<T>&);                                                               \
  template Var<T> embedding(const Var<T>&, std::span<const int>, const Shape&);                     \
  template Var<T> masked_fill(const Var<T>&, const Mask&, double);                                  \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, std::span<const std::uint8_t>); \
  template Var<T> cosine_similarity(const Var<T>&, const Var<T>&, std::size_t);                     \
  template MaxResult<T> max(const Var<T>&, std::size_t);                                            \
  template Var<T> sum(const Var<T>&, std::size_t);                                                  \
  template Var<T> mean(const Var<T>&, std::size_t);                                                 \
  template Var<T> sum(const Var<T>&);                                                               \
  template Var<T> mean(const Var<T>&);

MEDBLIP_INSTANTIATE_OPS(float)
MEDBLIP_INSTANTIATE_OPS(double)

}  // namespace medblip::nd
