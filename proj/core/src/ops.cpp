#include "lavi/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "lavi/error.hpp"

namespace lavi::ops {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

void expect_same_shape(const Var& a, const Var& b, const char* op) {
  LAVI_EXPECT(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
}

void expect_rank(const Var& a, int rank, const char* op) {
  LAVI_EXPECT(a.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                            shape_str(a.shape()));
}

bool wants(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  const Scalar* src = x.ptr();
  Scalar* dst = out.ptr();
  for (std::int64_t i = 0; i < x.numel(); ++i) dst[i] = f(src[i]);
  return out;
}

// Unfolds one CHW image into [C*k*k, Ho*Wo] columns.
void im2col(const Scalar* img, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t ho, std::int64_t wo, Scalar* cols) {
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          Scalar* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, Scalar{0});
            continue;
          }
          const Scalar* src = img + (ci * h + iy) * w;
          if (stride == 1) {
            const std::int64_t lo = std::clamp<std::int64_t>(pad - kx, 0, wo);
            const std::int64_t hi = std::clamp<std::int64_t>(w + pad - kx, lo, wo);
            std::fill(dst, dst + lo, Scalar{0});
            std::copy(src + lo - pad + kx, src + hi - pad + kx, dst + lo);
            std::fill(dst + hi, dst + wo, Scalar{0});
            continue;
          }
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : Scalar{0};
          }
        }
      }
    }
  }
}

void col2im(const Scalar* cols, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t ho, std::int64_t wo, Scalar* img) {
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = img + (ci * h + iy) * w;
          const Scalar* src = row + oy * wo;
          if (stride == 1) {
            const std::int64_t lo = std::clamp<std::int64_t>(pad - kx, 0, wo);
            const std::int64_t hi = std::clamp<std::int64_t>(w + pad - kx, lo, wo);
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox - pad + kx] += src[ox];
            continue;
          }
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

Scalar gelu_value(Scalar x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Scalar gelu_grad(Scalar x) {
  const Scalar cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const Scalar pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Scalar sigmoid(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

struct AttnDims {
  std::int64_t batch, lq, lk, d, heads, dh;
};

AttnDims check_attention(const Shape& q, const Shape& k, const Shape& v, int heads,
                         std::span<const std::uint8_t> mask) {
  LAVI_EXPECT(q.size() == 3 && k.size() == 3 && v.size() == 3, "attention: q, k, v must be rank 3");
  LAVI_EXPECT(k == v, "attention: k and v shapes differ " + shape_str(k) + " vs " + shape_str(v));
  LAVI_EXPECT(q[0] == k[0] && q[2] == k[2], "attention: q " + shape_str(q) + " incompatible with k " + shape_str(k));
  LAVI_EXPECT(heads > 0 && q[2] % heads == 0, "attention: feature dim not divisible by heads");
  LAVI_EXPECT(mask.empty() || static_cast<std::int64_t>(mask.size()) == k[0] * k[1],
              "attention: key mask size does not match [batch, keys]");
  return {q[0], q[1], k[1], q[2], heads, q[2] / heads};
}

// Fills probs [heads, Lq, Lk] for one batch item.
void attention_probs_item(const Scalar* q, const Scalar* k, const AttnDims& dm, const std::uint8_t* mask,
                          bool causal, Scalar* probs) {
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dm.dh));
  constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();
  for (std::int64_t h = 0; h < dm.heads; ++h) {
    CStridedMap qh(q + h * dm.dh, dm.lq, dm.dh, Eigen::OuterStride<>(dm.d));
    CStridedMap kh(k + h * dm.dh, dm.lk, dm.dh, Eigen::OuterStride<>(dm.d));
    MatMap p(probs + h * dm.lq * dm.lk, dm.lq, dm.lk);
    p.noalias() = qh * kh.transpose();
    for (std::int64_t i = 0; i < dm.lq; ++i) {
      Scalar* row = p.data() + i * dm.lk;
      Scalar mx = kNegInf;
      for (std::int64_t j = 0; j < dm.lk; ++j) {
        const bool visible = (!mask || mask[j]) && (!causal || j <= i);
        row[j] = visible ? row[j] * scale : kNegInf;
        mx = std::max(mx, row[j]);
      }
      if (mx == kNegInf) {
        std::fill(row, row + dm.lk, Scalar{0});
        continue;
      }
      Scalar total = 0;
      for (std::int64_t j = 0; j < dm.lk; ++j) {
        row[j] = row[j] == kNegInf ? Scalar{0} : std::exp(row[j] - mx);
        total += row[j];
      }
      const Scalar inv = 1.0 / total;
      for (std::int64_t j = 0; j < dm.lk; ++j) row[j] *= inv;
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  expect_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (wants(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (wants(n, 1)) n.inputs[1]->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  expect_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Scalar* pb = b.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (wants(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (wants(n, 1)) {
      Tensor g = n.grad;
      g *= -1.0;
      n.inputs[1]->accumulate(std::move(g));
    }
  });
}

Var mul(const Var& a, const Var& b) {
  expect_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Scalar* pb = b.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (wants(n, 0)) {
      Tensor g = n.grad;
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= bv[i];
      n.inputs[0]->accumulate(std::move(g));
    }
    if (wants(n, 1)) {
      Tensor g = n.grad;
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= av[i];
      n.inputs[1]->accumulate(std::move(g));
    }
  });
}

Var scale(const Var& a, Scalar s) {
  Tensor out = a.value();
  out *= s;
  return make_result(std::move(out), {a}, [s](Node& n) {
    Tensor g = n.grad;
    g *= s;
    n.inputs[0]->accumulate(std::move(g));
  });
}

Var sum(const Var& a) {
  Scalar total = 0;
  for (auto v : a.value().data()) total += v;
  return make_result(Tensor::scalar(total), {a}, [](Node& n) {
    n.inputs[0]->accumulate(Tensor(n.inputs[0]->value.shape(), n.grad.item()));
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad.reshaped(n.inputs[0]->value.shape()));
  });
}

Var silu(const Var& x) {
  Tensor out = map_values(x.value(), [](Scalar v) { return v * sigmoid(v); });
  return make_result(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.inputs[0]->value;
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const Scalar s = sigmoid(xv[i]);
      g[i] *= s * (1.0 + xv[i] * (1.0 - s));
    }
    n.inputs[0]->accumulate(std::move(g));
  });
}

Var gelu(const Var& x) {
  Tensor out = map_values(x.value(), gelu_value);
  return make_result(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.inputs[0]->value;
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= gelu_grad(xv[i]);
    n.inputs[0]->accumulate(std::move(g));
  });
}

namespace {

// Dense weight, optionally merged with a LoRA update: W + s * B A, with B
// [out, r] and A [r, fan_in]. A zero B returns W untouched so the frozen path
// stays bit-exact.
Storage effective_weight(const Tensor& w, const Tensor* a, const Tensor* b, Scalar s) {
  Storage out(w.storage());
  if (!a || std::all_of(b->data().begin(), b->data().end(), [](Scalar v) { return v == 0; })) return out;
  const std::int64_t o = w.dim(0), fan_in = w.numel() / o, r = a->dim(0);
  MatMap(out.data(), o, fan_in).noalias() += s * (CMatMap(b->ptr(), o, r) * CMatMap(a->ptr(), r, fan_in));
  return out;
}

void check_lora_shapes(const Var& weight, const Var& a, const Var& b, const char* op) {
  const std::int64_t o = weight.dim(0), fan_in = weight.numel() / o;
  LAVI_EXPECT(a.value().rank() >= 2 && b.value().rank() >= 2 && b.dim(0) == o && b.numel() / o == a.dim(0) &&
                  a.numel() / a.dim(0) == fan_in && a.dim(1) == weight.dim(1),
              std::string(op) + ": delta shapes " + shape_str(a.shape()) + "/" + shape_str(b.shape()) +
                  " incompatible with weight " + shape_str(weight.shape()));
}

Var linear_impl(const Var& x, const Var& weight, const Var& bias, const Var* a, const Var* b, Scalar s) {
  expect_rank(weight, 2, "linear weight");
  const std::int64_t in = weight.dim(1);
  const std::int64_t out_dim = weight.dim(0);
  LAVI_EXPECT(x.value().rank() >= 1 && x.dim(-1) == in,
              "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  if (bias.defined()) {
    LAVI_EXPECT(bias.value().rank() == 1 && bias.dim(0) == out_dim, "linear: bias shape mismatch");
  }
  const bool lora = a != nullptr;
  if (lora) check_lora_shapes(weight, *a, *b, "linear");
  const std::int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  {
    const auto w = effective_weight(weight.value(), lora ? &a->value() : nullptr, lora ? &b->value() : nullptr, s);
    CMatMap xm(x.value().ptr(), rows, in);
    CMatMap wm(w.data(), out_dim, in);
    MatMap ym(out.ptr(), rows, out_dim);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bm(bias.value().ptr(), out_dim);
      ym.rowwise() += bm;
    }
  }
  // Input order: x, weight, [a, b], [bias].
  std::vector<Var> inputs{x, weight};
  if (lora) {
    inputs.push_back(*a);
    inputs.push_back(*b);
  }
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [rows, in, out_dim, lora, has_bias, s](Node& n) {
    CMatMap gy(n.grad.ptr(), rows, out_dim);
    CMatMap xm(n.inputs[0]->value.ptr(), rows, in);
    const Tensor* av = lora ? &n.inputs[2]->value : nullptr;
    const Tensor* bv = lora ? &n.inputs[3]->value : nullptr;
    if (wants(n, 0)) {
      const auto w = effective_weight(n.inputs[1]->value, av, bv, s);
      Tensor gx(n.inputs[0]->value.shape());
      MatMap(gx.ptr(), rows, in).noalias() = gy * CMatMap(w.data(), out_dim, in);
      n.inputs[0]->accumulate(std::move(gx));
    }
    if (wants(n, 1)) {
      Tensor gw(n.inputs[1]->value.shape());
      MatMap(gw.ptr(), out_dim, in).noalias() = gy.transpose() * xm;
      n.inputs[1]->accumulate(std::move(gw));
    }
    if (lora) {
      const std::int64_t r = av->dim(0);
      CMatMap am(av->ptr(), r, in);
      CMatMap bm(bv->ptr(), out_dim, r);
      if (wants(n, 3)) {
        const RowMat u = xm * am.transpose();  // rows x r
        Tensor gb(bv->shape());
        MatMap(gb.ptr(), out_dim, r).noalias() = s * (gy.transpose() * u);
        n.inputs[3]->accumulate(std::move(gb));
      }
      if (wants(n, 2)) {
        const RowMat v = gy * bm;  // rows x r
        Tensor ga(av->shape());
        MatMap(ga.ptr(), r, in).noalias() = s * (v.transpose() * xm);
        n.inputs[2]->accumulate(std::move(ga));
      }
    }
    const std::size_t bi = lora ? 4 : 2;
    if (has_bias && wants(n, bi)) {
      Tensor gb({out_dim});
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gb.ptr(), out_dim) = gy.colwise().sum();
      n.inputs[bi]->accumulate(std::move(gb));
    }
  });
}

Var conv2d_impl(const Var& x, const Var& weight, const Var& bias, int stride, int padding, const Var* a,
                const Var* b, Scalar s) {
  expect_rank(x, 4, "conv2d input");
  expect_rank(weight, 4, "conv2d weight");
  const std::int64_t n_batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t o = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  LAVI_EXPECT(weight.dim(1) == c && weight.dim(3) == k,
              "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  LAVI_EXPECT(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  LAVI_EXPECT(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d: kernel larger than padded input");
  if (bias.defined()) LAVI_EXPECT(bias.value().rank() == 1 && bias.dim(0) == o, "conv2d: bias shape mismatch");
  const bool lora = a != nullptr;
  if (lora) {
    check_lora_shapes(weight, *a, *b, "conv2d");
    LAVI_EXPECT(a->value().rank() == 4 && a->dim(2) == k && a->dim(3) == k && b->value().rank() == 4 &&
                    b->dim(2) == 1 && b->dim(3) == 1,
                "conv2d: LoRA factors must be [r,c,k,k] and [o,r,1,1]");
  }
  const std::int64_t ho = (h + 2 * padding - k) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - k) / stride + 1;
  const std::int64_t ckk = c * k * k;
  const std::int64_t hw_out = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  Tensor out({n_batch, o, ho, wo});
  {
    const auto wv = effective_weight(weight.value(), lora ? &a->value() : nullptr, lora ? &b->value() : nullptr, s);
    Storage cols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw_out));
    CMatMap wm(wv.data(), o, ckk);
    for (std::int64_t bi = 0; bi < n_batch; ++bi) {
      const Scalar* img = x.value().ptr() + bi * c * h * w;
      const Scalar* colp = img;
      if (!pointwise) {
        im2col(img, c, h, w, k, stride, padding, ho, wo, cols.data());
        colp = cols.data();
      }
      MatMap ym(out.ptr() + bi * o * hw_out, o, hw_out);
      ym.noalias() = wm * CMatMap(colp, ckk, hw_out);
      if (bias.defined()) {
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bv(bias.value().ptr(), o);
        ym.colwise() += bv;
      }
    }
  }

  std::vector<Var> inputs{x, weight};
  if (lora) {
    inputs.push_back(*a);
    inputs.push_back(*b);
  }
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result(
      std::move(out), std::move(inputs), [=](Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        const Tensor& wv = n.inputs[1]->value;
        const Tensor* av = lora ? &n.inputs[2]->value : nullptr;
        const Tensor* bv = lora ? &n.inputs[3]->value : nullptr;
        const std::size_t bias_i = lora ? 4 : 2;
        const bool gx_on = wants(n, 0), gw_on = wants(n, 1);
        const bool ga_on = lora && wants(n, 2), gbl_on = lora && wants(n, 3);
        const bool gb_on = has_bias && wants(n, bias_i);
        const std::int64_t r = lora ? av->dim(0) : 0;
        Tensor gx = gx_on ? Tensor(xv.shape()) : Tensor();
        Tensor gw = gw_on ? Tensor(wv.shape()) : Tensor();
        Tensor ga = ga_on ? Tensor(av->shape()) : Tensor();
        Tensor gbl = gbl_on ? Tensor(bv->shape()) : Tensor();
        Tensor gb = gb_on ? Tensor({o}) : Tensor();
        const bool need_cols = gw_on || ga_on || gbl_on;
        Storage colbuf(need_cols && !pointwise ? static_cast<std::size_t>(ckk * hw_out) : 0);
        Storage dcols(gx_on && !pointwise ? static_cast<std::size_t>(ckk * hw_out) : 0);
        const auto weff = gx_on ? effective_weight(wv, av, bv, s) : Storage();
        CMatMap wmat(weff.data(), gx_on ? o : 0, gx_on ? ckk : 0);
        RowMat u, v;
        for (std::int64_t bi = 0; bi < n_batch; ++bi) {
          CMatMap gy(n.grad.ptr() + bi * o * hw_out, o, hw_out);
          const Scalar* img = xv.ptr() + bi * c * h * w;
          if (need_cols) {
            const Scalar* colp = img;
            if (!pointwise) {
              im2col(img, c, h, w, k, stride, padding, ho, wo, colbuf.data());
              colp = colbuf.data();
            }
            CMatMap cols(colp, ckk, hw_out);
            if (gw_on) MatMap(gw.ptr(), o, ckk).noalias() += gy * cols.transpose();
            if (gbl_on) {
              u.noalias() = CMatMap(av->ptr(), r, ckk) * cols;
              MatMap(gbl.ptr(), o, r).noalias() += s * (gy * u.transpose());
            }
            if (ga_on) {
              v.noalias() = CMatMap(bv->ptr(), o, r).transpose() * gy;
              MatMap(ga.ptr(), r, ckk).noalias() += s * (v * cols.transpose());
            }
          }
          if (gb_on) {
            // Plain loop: Eigen's vectorized row sum peels by address, which
            // would make the result depend on allocation alignment.
            for (std::int64_t oc = 0; oc < o; ++oc) {
              const Scalar* row = n.grad.ptr() + (bi * o + oc) * hw_out;
              Scalar acc = 0;
              for (std::int64_t p = 0; p < hw_out; ++p) acc += row[p];
              gb[oc] += acc;
            }
          }
          if (gx_on) {
            Scalar* gimg = gx.ptr() + bi * c * h * w;
            if (pointwise) {
              MatMap(gimg, c, hw_out).noalias() = wmat.transpose() * gy;
            } else {
              MatMap(dcols.data(), ckk, hw_out).noalias() = wmat.transpose() * gy;
              col2im(dcols.data(), c, h, w, k, stride, padding, ho, wo, gimg);
            }
          }
        }
        if (gx_on) n.inputs[0]->accumulate(std::move(gx));
        if (gw_on) n.inputs[1]->accumulate(std::move(gw));
        if (ga_on) n.inputs[2]->accumulate(std::move(ga));
        if (gbl_on) n.inputs[3]->accumulate(std::move(gbl));
        if (gb_on) n.inputs[bias_i]->accumulate(std::move(gb));
      });
}

}  // namespace

Var linear(const Var& x, const Var& weight, const Var& bias) {
  return linear_impl(x, weight, bias, nullptr, nullptr, 0);
}

Var linear_lora(const Var& x, const Var& weight, const Var& bias, const Var& a, const Var& b, Scalar scale) {
  return linear_impl(x, weight, bias, &a, &b, scale);
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  return conv2d_impl(x, weight, bias, stride, padding, nullptr, nullptr, 0);
}

Var conv2d_lora(const Var& x, const Var& weight, const Var& bias, int stride, int padding, const Var& a, const Var& b,
                Scalar scale) {
  return conv2d_impl(x, weight, bias, stride, padding, &a, &b, scale);
}

namespace {

// Shared normalization kernel: `groups` contiguous blocks of `block` elements
// per outer index; affine parameters indexed by channel = element / inner.
struct NormLayout {
  std::int64_t outer;    // independent normalization sets
  std::int64_t block;    // elements per set
  std::int64_t inner;    // elements sharing one affine channel
  std::int64_t channels; // affine parameter count
};

Var normalize(const Var& x, const Var& gamma, const Var& beta, Scalar eps, NormLayout lay,
              std::int64_t (*channel_of)(std::int64_t set, std::int64_t idx, const NormLayout&)) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  Tensor inv_std({lay.outer});
  const Scalar* g = gamma.value().ptr();
  const Scalar* bt = beta.value().ptr();
  for (std::int64_t s = 0; s < lay.outer; ++s) {
    const Scalar* src = xv.ptr() + s * lay.block;
    Scalar mean = 0;
    for (std::int64_t i = 0; i < lay.block; ++i) mean += src[i];
    mean /= static_cast<Scalar>(lay.block);
    Scalar var = 0;
    for (std::int64_t i = 0; i < lay.block; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<Scalar>(lay.block);
    const Scalar is = 1.0 / std::sqrt(var + eps);
    inv_std[s] = is;
    Scalar* xh = xhat.ptr() + s * lay.block;
    Scalar* dst = out.ptr() + s * lay.block;
    for (std::int64_t i = 0; i < lay.block; ++i) {
      xh[i] = (src[i] - mean) * is;
      const std::int64_t ch = channel_of(s, i, lay);
      dst[i] = xh[i] * g[ch] + bt[ch];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [lay, channel_of, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const Scalar* gam = n.inputs[1]->value.ptr();
                       const bool gx_on = wants(n, 0);
                       Tensor gx = gx_on ? Tensor(n.inputs[0]->value.shape()) : Tensor();
                       Tensor ggam({lay.channels});
                       Tensor gbet({lay.channels});
                       Storage dxh(static_cast<std::size_t>(lay.block));
                       for (std::int64_t s = 0; s < lay.outer; ++s) {
                         const Scalar* gy = n.grad.ptr() + s * lay.block;
                         const Scalar* xh = xhat.ptr() + s * lay.block;
                         Scalar mean_d = 0, mean_dx = 0;
                         for (std::int64_t i = 0; i < lay.block; ++i) {
                           const std::int64_t ch = channel_of(s, i, lay);
                           ggam[ch] += gy[i] * xh[i];
                           gbet[ch] += gy[i];
                           dxh[static_cast<std::size_t>(i)] = gy[i] * gam[ch];
                           mean_d += dxh[static_cast<std::size_t>(i)];
                           mean_dx += dxh[static_cast<std::size_t>(i)] * xh[i];
                         }
                         if (!gx_on) continue;
                         mean_d /= static_cast<Scalar>(lay.block);
                         mean_dx /= static_cast<Scalar>(lay.block);
                         Scalar* dst = gx.ptr() + s * lay.block;
                         for (std::int64_t i = 0; i < lay.block; ++i) {
                           dst[i] = inv_std[s] * (dxh[static_cast<std::size_t>(i)] - mean_d - xh[i] * mean_dx);
                         }
                       }
                       if (gx_on) n.inputs[0]->accumulate(std::move(gx));
                       if (wants(n, 1)) n.inputs[1]->accumulate(std::move(ggam));
                       if (wants(n, 2)) n.inputs[2]->accumulate(std::move(gbet));
                     });
}

std::int64_t layer_norm_channel(std::int64_t, std::int64_t idx, const NormLayout&) { return idx; }

std::int64_t group_norm_channel(std::int64_t set, std::int64_t idx, const NormLayout& lay) {
  const std::int64_t groups = lay.channels / (lay.block / lay.inner);
  return (set % groups) * (lay.block / lay.inner) + idx / lay.inner;
}

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps) {
  const std::int64_t d = x.dim(-1);
  LAVI_EXPECT(gamma.numel() == d && beta.numel() == d, "layer_norm: affine parameter size mismatch");
  return normalize(x, gamma, beta, eps, NormLayout{x.numel() / d, d, 1, d}, layer_norm_channel);
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, Scalar eps) {
  expect_rank(x, 4, "group_norm");
  const std::int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  LAVI_EXPECT(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
  LAVI_EXPECT(gamma.numel() == c && beta.numel() == c, "group_norm: affine parameter size mismatch");
  const std::int64_t per = c / groups;
  return normalize(x, gamma, beta, eps, NormLayout{x.dim(0) * groups, per * hw, hw, c}, group_norm_channel);
}

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads, std::span<const std::uint8_t> key_mask,
                         bool causal) {
  const AttnDims dm = check_attention(q.shape(), k.shape(), k.shape(), heads, key_mask);
  Tensor probs({dm.batch, dm.heads, dm.lq, dm.lk});
  for (std::int64_t b = 0; b < dm.batch; ++b) {
    attention_probs_item(q.ptr() + b * dm.lq * dm.d, k.ptr() + b * dm.lk * dm.d, dm,
                         key_mask.empty() ? nullptr : key_mask.data() + b * dm.lk, causal,
                         probs.ptr() + b * dm.heads * dm.lq * dm.lk);
  }
  return probs;
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, std::span<const std::uint8_t> key_mask,
              bool causal) {
  const AttnDims dm = check_attention(q.shape(), k.shape(), v.shape(), heads, key_mask);
  Tensor probs = attention_weights(q.value(), k.value(), heads, key_mask, causal);
  Tensor out({dm.batch, dm.lq, dm.d});
  for (std::int64_t b = 0; b < dm.batch; ++b) {
    for (std::int64_t h = 0; h < dm.heads; ++h) {
      CMatMap p(probs.ptr() + (b * dm.heads + h) * dm.lq * dm.lk, dm.lq, dm.lk);
      CStridedMap vh(v.value().ptr() + b * dm.lk * dm.d + h * dm.dh, dm.lk, dm.dh, Eigen::OuterStride<>(dm.d));
      StridedMap oh(out.ptr() + b * dm.lq * dm.d + h * dm.dh, dm.lq, dm.dh, Eigen::OuterStride<>(dm.d));
      oh.noalias() = p * vh;
    }
  }
  return make_result(std::move(out), {q, k, v}, [dm, probs = std::move(probs)](Node& n) {
    const Tensor& qv = n.inputs[0]->value;
    const Tensor& kv = n.inputs[1]->value;
    const Tensor& vv = n.inputs[2]->value;
    const bool gq_on = wants(n, 0), gk_on = wants(n, 1), gv_on = wants(n, 2);
    Tensor gq = gq_on ? Tensor(qv.shape()) : Tensor();
    Tensor gk = gk_on ? Tensor(kv.shape()) : Tensor();
    Tensor gv = gv_on ? Tensor(vv.shape()) : Tensor();
    const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dm.dh));
    RowMat dp(dm.lq, dm.lk);
    for (std::int64_t b = 0; b < dm.batch; ++b) {
      for (std::int64_t h = 0; h < dm.heads; ++h) {
        const std::int64_t off_q = b * dm.lq * dm.d + h * dm.dh;
        const std::int64_t off_k = b * dm.lk * dm.d + h * dm.dh;
        CMatMap p(probs.ptr() + (b * dm.heads + h) * dm.lq * dm.lk, dm.lq, dm.lk);
        CStridedMap go(n.grad.ptr() + off_q, dm.lq, dm.dh, Eigen::OuterStride<>(dm.d));
        if (gv_on) {
          StridedMap(gv.ptr() + off_k, dm.lk, dm.dh, Eigen::OuterStride<>(dm.d)).noalias() = p.transpose() * go;
        }
        if (!gq_on && !gk_on) continue;
        CStridedMap vh(vv.ptr() + off_k, dm.lk, dm.dh, Eigen::OuterStride<>(dm.d));
        dp.noalias() = go * vh.transpose();
        // dS = P o (dP - rowsum(dP o P)), folded with the score scale.
        for (std::int64_t i = 0; i < dm.lq; ++i) {
          Scalar dot = 0;
          for (std::int64_t j = 0; j < dm.lk; ++j) dot += dp(i, j) * p(i, j);
          for (std::int64_t j = 0; j < dm.lk; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
        }
        if (gq_on) {
          CStridedMap kh(kv.ptr() + off_k, dm.lk, dm.dh, Eigen::OuterStride<>(dm.d));
          StridedMap(gq.ptr() + off_q, dm.lq, dm.dh, Eigen::OuterStride<>(dm.d)).noalias() = dp * kh;
        }
        if (gk_on) {
          CStridedMap qh(qv.ptr() + off_q, dm.lq, dm.dh, Eigen::OuterStride<>(dm.d));
          StridedMap(gk.ptr() + off_k, dm.lk, dm.dh, Eigen::OuterStride<>(dm.d)).noalias() = dp.transpose() * qh;
        }
      }
    }
    if (gq_on) n.inputs[0]->accumulate(std::move(gq));
    if (gk_on) n.inputs[1]->accumulate(std::move(gk));
    if (gv_on) n.inputs[2]->accumulate(std::move(gv));
  });
}

namespace {

// Applies a fixed index permutation: out[perm[i]] = in[i]. Backward gathers.
Var permute_elements(const Var& x, Shape out_shape, std::shared_ptr<const std::vector<std::int64_t>> perm) {
  Tensor out(std::move(out_shape));
  const Scalar* src = x.value().ptr();
  const auto& pm = *perm;
  for (std::size_t i = 0; i < pm.size(); ++i) out[pm[i]] = src[i];
  return make_result(std::move(out), {x}, [perm](Node& n) {
    Tensor g(n.inputs[0]->value.shape());
    const auto& pm = *perm;
    for (std::size_t i = 0; i < pm.size(); ++i) g[static_cast<std::int64_t>(i)] = n.grad[pm[i]];
    n.inputs[0]->accumulate(std::move(g));
  });
}

}  // namespace

Var nchw_to_tokens(const Var& x) {
  expect_rank(x, 4, "nchw_to_tokens");
  const std::int64_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto perm = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t p = 0; p < hw; ++p) (*perm)[static_cast<std::size_t>((b * c + ci) * hw + p)] = (b * hw + p) * c + ci;
  return permute_elements(x, {nb, hw, c}, std::move(perm));
}

Var tokens_to_nchw(const Var& x, std::int64_t h, std::int64_t w) {
  expect_rank(x, 3, "tokens_to_nchw");
  const std::int64_t nb = x.dim(0), hw = x.dim(1), c = x.dim(2);
  LAVI_EXPECT(hw == h * w, "tokens_to_nchw: token count does not match spatial size");
  auto perm = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t p = 0; p < hw; ++p)
      for (std::int64_t ci = 0; ci < c; ++ci) (*perm)[static_cast<std::size_t>((b * hw + p) * c + ci)] = (b * c + ci) * hw + p;
  return permute_elements(x, {nb, c, h, w}, std::move(perm));
}

namespace {
std::shared_ptr<std::vector<std::int64_t>> patch_perm(std::int64_t nb, std::int64_t c, std::int64_t h,
                                                      std::int64_t w, int p, bool forward) {
  const std::int64_t gh = h / p, gw = w / p, feat = c * p * p;
  auto perm = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(nb * c * h * w));
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t img = ((b * c + ci) * h + y) * w + x;
          const std::int64_t tok = (b * gh * gw + (y / p) * gw + (x / p)) * feat + ci * p * p + (y % p) * p + (x % p);
          if (forward)
            (*perm)[static_cast<std::size_t>(img)] = tok;
          else
            (*perm)[static_cast<std::size_t>(tok)] = img;
        }
  return perm;
}
}  // namespace

Var patchify(const Var& x, int patch) {
  expect_rank(x, 4, "patchify");
  const std::int64_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  LAVI_EXPECT(patch > 0 && h % patch == 0 && w % patch == 0, "patchify: resolution not divisible by patch size");
  return permute_elements(x, {nb, (h / patch) * (w / patch), c * patch * patch}, patch_perm(nb, c, h, w, patch, true));
}

Var unpatchify(const Var& x, int patch, std::int64_t channels, std::int64_t h, std::int64_t w) {
  expect_rank(x, 3, "unpatchify");
  LAVI_EXPECT(patch > 0 && h % patch == 0 && w % patch == 0, "unpatchify: resolution not divisible by patch size");
  LAVI_EXPECT(x.dim(1) == (h / patch) * (w / patch) && x.dim(2) == channels * patch * patch,
              "unpatchify: token shape " + shape_str(x.shape()) + " inconsistent with target");
  return permute_elements(x, {x.dim(0), channels, h, w}, patch_perm(x.dim(0), channels, h, w, patch, false));
}

Var concat_channels(const Var& a, const Var& b) {
  expect_rank(a, 4, "concat_channels");
  expect_rank(b, 4, "concat_channels");
  LAVI_EXPECT(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
              "concat_channels: batch/spatial mismatch");
  const std::int64_t nb = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out({nb, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t i = 0; i < nb; ++i) {
    std::copy_n(a.value().ptr() + i * ca * hw, ca * hw, out.ptr() + i * (ca + cb) * hw);
    std::copy_n(b.value().ptr() + i * cb * hw, cb * hw, out.ptr() + i * (ca + cb) * hw + ca * hw);
  }
  return make_result(std::move(out), {a, b}, [=](Node& n) {
    if (wants(n, 0)) {
      Tensor g(n.inputs[0]->value.shape());
      for (std::int64_t i = 0; i < nb; ++i) std::copy_n(n.grad.ptr() + i * (ca + cb) * hw, ca * hw, g.ptr() + i * ca * hw);
      n.inputs[0]->accumulate(std::move(g));
    }
    if (wants(n, 1)) {
      Tensor g(n.inputs[1]->value.shape());
      for (std::int64_t i = 0; i < nb; ++i)
        std::copy_n(n.grad.ptr() + i * (ca + cb) * hw + ca * hw, cb * hw, g.ptr() + i * cb * hw);
      n.inputs[1]->accumulate(std::move(g));
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  expect_rank(x, 4, "upsample_nearest2x");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::int64_t p = 0; p < planes; ++p) {
    const Scalar* src = x.value().ptr() + p * h * w;
    Scalar* dst = out.ptr() + p * 4 * h * w;
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_result(std::move(out), {x}, [=](Node& n) {
    Tensor g(n.inputs[0]->value.shape());
    for (std::int64_t p = 0; p < planes; ++p) {
      const Scalar* src = n.grad.ptr() + p * 4 * h * w;
      Scalar* dst = g.ptr() + p * h * w;
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
    n.inputs[0]->accumulate(std::move(g));
  });
}

Var embedding(const Var& table, std::span<const std::int64_t> ids, std::int64_t batch, std::int64_t length) {
  expect_rank(table, 2, "embedding table");
  LAVI_EXPECT(static_cast<std::int64_t>(ids.size()) == batch * length, "embedding: id count mismatch");
  const std::int64_t vocab = table.dim(0), d = table.dim(1);
  Tensor out({batch, length, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    LAVI_EXPECT(ids[i] >= 0 && ids[i] < vocab, "embedding: token id out of range");
    std::copy_n(table.value().ptr() + ids[i] * d, d, out.ptr() + static_cast<std::int64_t>(i) * d);
  }
  std::vector<std::int64_t> saved(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [d, saved = std::move(saved)](Node& n) {
    Tensor g(n.inputs[0]->value.shape());
    for (std::size_t i = 0; i < saved.size(); ++i) {
      const Scalar* src = n.grad.ptr() + static_cast<std::int64_t>(i) * d;
      Scalar* dst = g.ptr() + saved[i] * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    n.inputs[0]->accumulate(std::move(g));
  });
}

Var add_rows(const Var& x, const Var& rows) {
  expect_rank(x, 3, "add_rows input");
  expect_rank(rows, 2, "add_rows rows");
  const std::int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  LAVI_EXPECT(rows.dim(1) == d && rows.dim(0) >= l, "add_rows: row table " + shape_str(rows.shape()) +
                                                         " cannot cover " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < l * d; ++j) out[i * l * d + j] += rows.value()[j];
  return make_result(std::move(out), {x, rows}, [=](Node& n) {
    if (wants(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (wants(n, 1)) {
      Tensor g(n.inputs[1]->value.shape());
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < l * d; ++j) g[j] += n.grad[i * l * d + j];
      n.inputs[1]->accumulate(std::move(g));
    }
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  expect_rank(x, 4, "add_channel_bias input");
  const std::int64_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  LAVI_EXPECT(bias.value().rank() == 2 && bias.dim(0) == nb && bias.dim(1) == c,
              "add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::int64_t p = 0; p < nb * c; ++p)
    for (std::int64_t i = 0; i < hw; ++i) out[p * hw + i] += bias.value()[p];
  return make_result(std::move(out), {x, bias}, [=](Node& n) {
    if (wants(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (wants(n, 1)) {
      Tensor g({nb, c});
      for (std::int64_t p = 0; p < nb * c; ++p)
        for (std::int64_t i = 0; i < hw; ++i) g[p] += n.grad[p * hw + i];
      n.inputs[1]->accumulate(std::move(g));
    }
  });
}

Var add_token_bias(const Var& x, const Var& bias) {
  expect_rank(x, 3, "add_token_bias input");
  const std::int64_t nb = x.dim(0), l = x.dim(1), d = x.dim(2);
  LAVI_EXPECT(bias.value().rank() == 2 && bias.dim(0) == nb && bias.dim(1) == d,
              "add_token_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t i = 0; i < l; ++i)
      for (std::int64_t j = 0; j < d; ++j) out[(b * l + i) * d + j] += bias.value()[b * d + j];
  return make_result(std::move(out), {x, bias}, [=](Node& n) {
    if (wants(n, 0)) n.inputs[0]->accumulate(n.grad);
    if (wants(n, 1)) {
      Tensor g({nb, d});
      for (std::int64_t b = 0; b < nb; ++b)
        for (std::int64_t i = 0; i < l; ++i)
          for (std::int64_t j = 0; j < d; ++j) g[b * d + j] += n.grad[(b * l + i) * d + j];
      n.inputs[1]->accumulate(std::move(g));
    }
  });
}

Var zero_masked_rows(const Var& x, std::span<const std::uint8_t> mask) {
  expect_rank(x, 3, "zero_masked_rows");
  const std::int64_t rows = x.dim(0) * x.dim(1), d = x.dim(2);
  LAVI_EXPECT(static_cast<std::int64_t>(mask.size()) == rows, "zero_masked_rows: mask size mismatch");
  Tensor out = x.value();
  for (std::int64_t r = 0; r < rows; ++r)
    if (!mask[static_cast<std::size_t>(r)]) std::fill_n(out.ptr() + r * d, d, Scalar{0});
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return make_result(std::move(out), {x}, [rows, d, saved = std::move(saved)](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t r = 0; r < rows; ++r)
      if (!saved[static_cast<std::size_t>(r)]) std::fill_n(g.ptr() + r * d, d, Scalar{0});
    n.inputs[0]->accumulate(std::move(g));
  });
}

Var mse(const Var& prediction, const Var& target) {
  expect_same_shape(prediction, target, "mse");
  const std::int64_t n_el = prediction.numel();
  LAVI_EXPECT(n_el > 0, "mse: empty input");
  Scalar total = 0;
  for (std::int64_t i = 0; i < n_el; ++i) {
    const Scalar d = prediction.value()[i] - target.value()[i];
    total += d * d;
  }
  return make_result(Tensor::scalar(total / static_cast<Scalar>(n_el)), {prediction, target}, [n_el](Node& n) {
    const Scalar s = 2.0 * n.grad.item() / static_cast<Scalar>(n_el);
    const Tensor& p = n.inputs[0]->value;
    const Tensor& t = n.inputs[1]->value;
    Tensor g(p.shape());
    for (std::int64_t i = 0; i < n_el; ++i) g[i] = s * (p[i] - t[i]);
    if (wants(n, 1)) {
      Tensor gt = g;
      gt *= -1.0;
      n.inputs[1]->accumulate(std::move(gt));
    }
    if (wants(n, 0)) n.inputs[0]->accumulate(std::move(g));
  });
}

}  // namespace lavi::ops
