#include <algorithm>
#include <cmath>
#include <limits>

#include "tta/tensor.hpp"

namespace tta {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
}

void check_finite(const char* op, const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v))
      throw NumericFault(std::string(op) + ": non-finite value in output");
}

bool want(const Tensor& t) { return t.tracked_on(Tape::active()); }

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (want(*t)) return true;
  return false;
}

int div_ceil(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

}  // namespace

// ----------------------------------------------------------- elementwise ---

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  check_finite("add", out);
  if (recording({&a, &b})) {
    bool na = want(a), nb = want(b);
    Tape::active()->record("add", out, [a, b, out, na, nb]() mutable {
      const auto g = out.grad();
      if (na) {
        auto ga = a.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nb) {
        auto gb = b.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  check_finite("sub", out);
  if (recording({&a, &b})) {
    bool na = want(a), nb = want(b);
    Tape::active()->record("sub", out, [a, b, out, na, nb]() mutable {
      const auto g = out.grad();
      if (na) {
        auto ga = a.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nb) {
        auto gb = b.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  check_finite("mul", out);
  if (recording({&a, &b})) {
    bool na = want(a), nb = want(b);
    Tape::active()->record("mul", out, [a, b, out, na, nb]() mutable {
      const auto g = out.grad();
      const auto av = a.values(), bv = b.values();
      if (na) {
        auto ga = a.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (nb) {
        auto gb = b.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  check_finite("div", out);
  if (recording({&a, &b})) {
    bool na = want(a), nb = want(b);
    Tape::active()->record("div", out, [a, b, out, na, nb]() mutable {
      const auto g = out.grad();
      const auto bv = b.values();
      const auto yv = out.values();
      if (na) {
        auto ga = a.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
      }
      if (nb) {
        auto gb = b.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i)
          gb[i] -= g[i] * yv[i] / bv[i];
      }
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = c * av[i];
  check_finite("scale", out);
  if (recording({&a})) {
    Tape::active()->record("scale", out, [a, out, c]() mutable {
      const auto g = out.grad();
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
  check_finite("exp", out);
  if (recording({&a})) {
    Tape::active()->record("exp", out, [a, out]() mutable {
      const auto g = out.grad();
      const auto yv = out.values();
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
    });
  }
  return out;
}

Tensor log(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  check_finite("log", out);
  if (recording({&a})) {
    Tape::active()->record("log", out, [a, out]() mutable {
      const auto g = out.grad();
      const auto av = a.values();
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  check_finite("relu", out);
  if (recording({&a})) {
    Tape::active()->record("relu", out, [a, out]() mutable {
      const auto g = out.grad();
      const auto av = a.values();
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

// --------------------------------------------------------------- linear ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    const double* A = a.values().data();
    const double* B = b.values().data();
    double* C = out.values().data();
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  check_finite("matmul", out);
  if (recording({&a, &b})) {
    bool na = want(a), nb = want(b);
    Tape::active()->record("matmul", out, [a, b, out, na, nb, m, k,
                                           n]() mutable {
      const double* G = out.grad().data();
      if (na) {
        double* GA = a.grad_buf().data();
        const double* B = b.values().data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = G + i * n;
            const double* brow = B + p * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            GA[i * k + p] += acc;
          }
      }
      if (nb) {
        double* GB = b.grad_buf().data();
        const double* A = a.values().data();
        for (int i = 0; i < m; ++i) {
          const double* grow = G + i * n;
          for (int p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            double* gbrow = GB + p * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw ShapeError("transpose: rank-2 tensor required, got " +
                     shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  {
    const double* A = a.values().data();
    double* T = out.values().data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) T[j * m + i] = A[i * n + j];
  }
  if (recording({&a})) {
    Tape::active()->record("transpose", out, [a, out, m, n]() mutable {
      const double* G = out.grad().data();
      double* GA = a.grad_buf().data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) GA[i * n + j] += G[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor out = Tensor::from_data(std::move(shape),
                                 {a.values().begin(), a.values().end()});
  if (recording({&a})) {
    Tape::active()->record("reshape", out, [a, out]() mutable {
      const auto g = out.grad();
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// ----------------------------------------------------------- reductions ---

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  check_finite("sum", out);
  if (recording({&a})) {
    Tape::active()->record("sum", out, [a, out]() mutable {
      const double g = out.grad()[0];
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = Tensor::scalar(acc * inv);
  check_finite("mean", out);
  if (recording({&a})) {
    Tape::active()->record("mean", out, [a, out, inv]() mutable {
      const double g = out.grad()[0] * inv;
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor l2_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  Tensor out = Tensor::scalar(std::sqrt(acc));
  check_finite("l2_norm", out);
  if (recording({&a})) {
    Tape::active()->record("l2_norm", out, [a, out]() mutable {
      const double y = out.values()[0];
      if (y == 0.0) return;  // subgradient 0 at the origin
      const double g = out.grad()[0] / y;
      const auto av = a.values();
      auto ga = a.grad_buf();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * av[i];
    });
  }
  return out;
}

// -------------------------------------------------------------- softmax ---

Tensor softmax(const Tensor& a, int axis) {
  const auto& sh = a.shape();
  if (axis < 0 || axis >= static_cast<int>(sh.size()))
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(sh));
  const int n = sh[static_cast<std::size_t>(axis)];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(sh[i]);
  for (std::size_t i = axis + 1; i < sh.size(); ++i)
    inner *= static_cast<std::size_t>(sh[i]);

  Tensor out = Tensor::zeros(sh);
  {
    const double* X = a.values().data();
    double* Y = out.values().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c) m = std::max(m, X[base + c * inner]);
        double z = 0.0;
        for (int c = 0; c < n; ++c) {
          const double e = std::exp(X[base + c * inner] - m);
          Y[base + c * inner] = e;
          z += e;
        }
        const double invz = 1.0 / z;
        for (int c = 0; c < n; ++c) Y[base + c * inner] *= invz;
      }
  }
  check_finite("softmax", out);
  if (recording({&a})) {
    Tape::active()->record(
        "softmax", out, [a, out, n, outer, inner]() mutable {
          const double* G = out.grad().data();
          const double* Y = out.values().data();
          double* GA = a.grad_buf().data();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
              const std::size_t base = o * n * inner + in;
              double dot = 0.0;
              for (int c = 0; c < n; ++c)
                dot += G[base + c * inner] * Y[base + c * inner];
              for (int c = 0; c < n; ++c) {
                const std::size_t k = base + c * inner;
                GA[k] += Y[k] * (G[k] - dot);
              }
            }
        });
  }
  return out;
}

// ---------------------------------------------------------- convolution ---

namespace {

struct ConvDims {
  int N, Cin, H, W, Cout, kh, kw, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& bias,
                   int stride, int pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4)
    throw ShapeError("conv2d: expected x [N,Cin,H,W], w [Cout,Cin,kh,kw], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel mismatch, x " + shape_str(x.shape()) +
                     " vs w " + shape_str(w.shape()));
  if (stride < 1 || pad < 0)
    throw ShapeError("conv2d: invalid stride/pad");
  if (bias.defined() &&
      (bias.shape().size() != 1 || bias.dim(0) != w.dim(0)))
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                     " does not match Cout of " + shape_str(w.shape()));
  ConvDims d;
  d.N = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho < 1 || d.Wo < 1)
    throw ShapeError("conv2d: kernel larger than padded input");
  return d;
}

// Valid output range along one spatial dimension for a fixed kernel offset.
void conv_range(int k, int pad, int stride, int in_size, int out_size, int* lo,
                int* hi) {
  *lo = std::max(0, div_ceil(pad - k, stride));
  const int top = in_size - 1 + pad - k;
  *hi = top < 0 ? 0 : std::min(out_size, top / stride + 1);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad) {
  const ConvDims d = conv_dims(x, w, bias, stride, pad);
  Tensor out = Tensor::zeros({d.N, d.Cout, d.Ho, d.Wo});
  {
    const double* X = x.values().data();
    const double* K = w.values().data();
    double* Y = out.values().data();
    for (int n = 0; n < d.N; ++n)
      for (int oc = 0; oc < d.Cout; ++oc) {
        double* yplane = Y + (static_cast<std::size_t>(n) * d.Cout + oc) *
                                 d.Ho * d.Wo;
        if (bias.defined()) {
          const double b = bias.values()[static_cast<std::size_t>(oc)];
          for (int i = 0; i < d.Ho * d.Wo; ++i) yplane[i] = b;
        }
        for (int ic = 0; ic < d.Cin; ++ic) {
          const double* xplane =
              X + (static_cast<std::size_t>(n) * d.Cin + ic) * d.H * d.W;
          for (int ky = 0; ky < d.kh; ++ky) {
            int oy0, oy1;
            conv_range(ky, pad, stride, d.H, d.Ho, &oy0, &oy1);
            for (int kx = 0; kx < d.kw; ++kx) {
              const double wv =
                  K[((static_cast<std::size_t>(oc) * d.Cin + ic) * d.kh + ky) *
                        d.kw +
                    kx];
              int ox0, ox1;
              conv_range(kx, pad, stride, d.W, d.Wo, &ox0, &ox1);
              for (int oy = oy0; oy < oy1; ++oy) {
                const double* xrow =
                    xplane + (oy * stride + ky - pad) * d.W + (kx - pad);
                double* yrow = yplane + oy * d.Wo;
                if (stride == 1) {
                  for (int ox = ox0; ox < ox1; ++ox)
                    yrow[ox] += wv * xrow[ox];
                } else {
                  for (int ox = ox0; ox < ox1; ++ox)
                    yrow[ox] += wv * xrow[ox * stride];
                }
              }
            }
          }
        }
      }
  }
  check_finite("conv2d", out);
  if (recording({&x, &w, &bias})) {
    bool nx = want(x), nw = want(w);
    bool nb = bias.defined() && want(bias);
    Tape::active()->record("conv2d", out, [x, w, bias, out, d, stride, pad, nx,
                                           nw, nb]() mutable {
      const double* G = out.grad().data();
      if (nx) {
        double* GX = x.grad_buf().data();
        const double* K = w.values().data();
        for (int n = 0; n < d.N; ++n)
          for (int oc = 0; oc < d.Cout; ++oc) {
            const double* gplane =
                G + (static_cast<std::size_t>(n) * d.Cout + oc) * d.Ho * d.Wo;
            for (int ic = 0; ic < d.Cin; ++ic) {
              double* gxplane =
                  GX + (static_cast<std::size_t>(n) * d.Cin + ic) * d.H * d.W;
              for (int ky = 0; ky < d.kh; ++ky) {
                int oy0, oy1;
                conv_range(ky, pad, stride, d.H, d.Ho, &oy0, &oy1);
                for (int kx = 0; kx < d.kw; ++kx) {
                  const double wv = K[((static_cast<std::size_t>(oc) * d.Cin +
                                        ic) *
                                           d.kh +
                                       ky) *
                                          d.kw +
                                      kx];
                  int ox0, ox1;
                  conv_range(kx, pad, stride, d.W, d.Wo, &ox0, &ox1);
                  for (int oy = oy0; oy < oy1; ++oy) {
                    double* gxrow =
                        gxplane + (oy * stride + ky - pad) * d.W + (kx - pad);
                    const double* grow = gplane + oy * d.Wo;
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox)
                        gxrow[ox] += wv * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox)
                        gxrow[ox * stride] += wv * grow[ox];
                    }
                  }
                }
              }
            }
          }
      }
      if (nw) {
        double* GW = w.grad_buf().data();
        const double* X = x.values().data();
        for (int n = 0; n < d.N; ++n)
          for (int oc = 0; oc < d.Cout; ++oc) {
            const double* gplane =
                G + (static_cast<std::size_t>(n) * d.Cout + oc) * d.Ho * d.Wo;
            for (int ic = 0; ic < d.Cin; ++ic) {
              const double* xplane =
                  X + (static_cast<std::size_t>(n) * d.Cin + ic) * d.H * d.W;
              for (int ky = 0; ky < d.kh; ++ky) {
                int oy0, oy1;
                conv_range(ky, pad, stride, d.H, d.Ho, &oy0, &oy1);
                for (int kx = 0; kx < d.kw; ++kx) {
                  int ox0, ox1;
                  conv_range(kx, pad, stride, d.W, d.Wo, &ox0, &ox1);
                  double acc = 0.0;
                  for (int oy = oy0; oy < oy1; ++oy) {
                    const double* xrow =
                        xplane + (oy * stride + ky - pad) * d.W + (kx - pad);
                    const double* grow = gplane + oy * d.Wo;
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox)
                        acc += xrow[ox] * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox)
                        acc += xrow[ox * stride] * grow[ox];
                    }
                  }
                  GW[((static_cast<std::size_t>(oc) * d.Cin + ic) * d.kh + ky) *
                         d.kw +
                     kx] += acc;
                }
              }
            }
          }
      }
      if (nb) {
        auto gb = bias.grad_buf();
        for (int n = 0; n < d.N; ++n)
          for (int oc = 0; oc < d.Cout; ++oc) {
            const double* gplane =
                G + (static_cast<std::size_t>(n) * d.Cout + oc) * d.Ho * d.Wo;
            double acc = 0.0;
            for (int i = 0; i < d.Ho * d.Wo; ++i) acc += gplane[i];
            gb[static_cast<std::size_t>(oc)] += acc;
          }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

Tensor upsample_nearest_2x(const Tensor& x) {
  if (x.shape().size() != 4)
    throw ShapeError("upsample_nearest_2x: expected [N,C,H,W], got " +
                     shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
  {
    const double* X = x.values().data();
    double* Y = out.values().data();
    for (int p = 0; p < N * C; ++p) {
      const double* xp = X + static_cast<std::size_t>(p) * H * W;
      double* yp = Y + static_cast<std::size_t>(p) * 4 * H * W;
      for (int y = 0; y < H; ++y)
        for (int xcol = 0; xcol < W; ++xcol) {
          const double v = xp[y * W + xcol];
          double* r0 = yp + (2 * y) * 2 * W + 2 * xcol;
          double* r1 = r0 + 2 * W;
          r0[0] = r0[1] = r1[0] = r1[1] = v;
        }
    }
  }
  if (recording({&x})) {
    Tape::active()->record("upsample_nearest_2x", out,
                           [x, out, N, C, H, W]() mutable {
                             const double* G = out.grad().data();
                             double* GX = x.grad_buf().data();
                             for (int p = 0; p < N * C; ++p) {
                               const double* gp =
                                   G + static_cast<std::size_t>(p) * 4 * H * W;
                               double* gxp =
                                   GX + static_cast<std::size_t>(p) * H * W;
                               for (int y = 0; y < H; ++y)
                                 for (int xcol = 0; xcol < W; ++xcol) {
                                   const double* r0 =
                                       gp + (2 * y) * 2 * W + 2 * xcol;
                                   const double* r1 = r0 + 2 * W;
                                   gxp[y * W + xcol] +=
                                       r0[0] + r0[1] + r1[0] + r1[1];
                                 }
                             }
                           });
  }
  return out;
}

// ------------------------------------------------------------ batchnorm ---

Tensor batchnorm_fixed(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, std::span<const double> mu,
                       std::span<const double> var, double eps) {
  if (x.shape().size() != 4)
    throw ShapeError("batchnorm_fixed: expected [N,C,H,W], got " +
                     shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(C) ||
      beta.size() != static_cast<std::size_t>(C) ||
      mu.size() != static_cast<std::size_t>(C) ||
      var.size() != static_cast<std::size_t>(C))
    throw ShapeError("batchnorm_fixed: per-channel sizes do not match C=" +
                     std::to_string(C));
  std::vector<double> inv_std(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    if (var[static_cast<std::size_t>(c)] < 0.0)
      throw ContractError("batchnorm_fixed: negative variance");
    inv_std[static_cast<std::size_t>(c)] =
        1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  }
  std::vector<double> mu_copy(mu.begin(), mu.end());
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* X = x.values().data();
    const double* Gm = gamma.values().data();
    const double* Bt = beta.values().data();
    double* Y = out.values().data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double a = Gm[c] * inv_std[static_cast<std::size_t>(c)];
        const double b =
            Bt[c] - Gm[c] * mu_copy[static_cast<std::size_t>(c)] *
                        inv_std[static_cast<std::size_t>(c)];
        const double* xp = X + (static_cast<std::size_t>(n) * C + c) * HW;
        double* yp = Y + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) yp[i] = a * xp[i] + b;
      }
  }
  check_finite("batchnorm_fixed", out);
  if (recording({&x, &gamma, &beta})) {
    bool nx = want(x), ng = want(gamma), nb = want(beta);
    Tape::active()->record(
        "batchnorm_fixed", out,
        [x, gamma, beta, out, inv_std, mu_copy, N, C, HW, nx, ng,
         nb]() mutable {
          const double* G = out.grad().data();
          const double* X = x.values().data();
          const double* Gm = gamma.values().data();
          for (int c = 0; c < C; ++c) {
            const double inv = inv_std[static_cast<std::size_t>(c)];
            const double m = mu_copy[static_cast<std::size_t>(c)];
            double dgamma = 0.0, dbeta = 0.0;
            for (int n = 0; n < N; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
              const double* gp = G + off;
              const double* xp = X + off;
              for (int i = 0; i < HW; ++i) {
                dgamma += gp[i] * (xp[i] - m) * inv;
                dbeta += gp[i];
              }
            }
            if (nx) {
              double* GX = x.grad_buf().data();
              const double a = Gm[c] * inv;
              for (int n = 0; n < N; ++n) {
                const std::size_t off =
                    (static_cast<std::size_t>(n) * C + c) * HW;
                const double* gp = G + off;
                double* gxp = GX + off;
                for (int i = 0; i < HW; ++i) gxp[i] += a * gp[i];
              }
            }
            if (ng) gamma.grad_buf()[static_cast<std::size_t>(c)] += dgamma;
            if (nb) beta.grad_buf()[static_cast<std::size_t>(c)] += dbeta;
          }
        });
  }
  return out;
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps,
                       std::vector<double>* batch_mu,
                       std::vector<double>* batch_var) {
  if (x.shape().size() != 4)
    throw ShapeError("batchnorm_train: expected [N,C,H,W], got " +
                     shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(C) ||
      beta.size() != static_cast<std::size_t>(C))
    throw ShapeError("batchnorm_train: per-channel sizes do not match C=" +
                     std::to_string(C));
  const std::size_t M = static_cast<std::size_t>(N) * HW;
  if (M == 0) throw ContractError("batchnorm_train: empty activation");
  std::vector<double> mu(static_cast<std::size_t>(C), 0.0);
  std::vector<double> var(static_cast<std::size_t>(C), 0.0);
  const double invM = 1.0 / static_cast<double>(M);
  {
    const double* X = x.values().data();
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* xp = X + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) s += xp[i];
      }
      const double m = s * invM;
      double v = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* xp = X + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          const double dl = xp[i] - m;
          v += dl * dl;
        }
      }
      mu[static_cast<std::size_t>(c)] = m;
      var[static_cast<std::size_t>(c)] = v * invM;
    }
  }
  if (batch_mu) *batch_mu = mu;
  if (batch_var) *batch_var = var;

  std::vector<double> inv_std(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<std::size_t>(c)] =
        1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

  Tensor out = Tensor::zeros(x.shape());
  {
    const double* X = x.values().data();
    const double* Gm = gamma.values().data();
    const double* Bt = beta.values().data();
    double* Y = out.values().data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double inv = inv_std[static_cast<std::size_t>(c)];
        const double m = mu[static_cast<std::size_t>(c)];
        const double* xp = X + (static_cast<std::size_t>(n) * C + c) * HW;
        double* yp = Y + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i)
          yp[i] = Gm[c] * (xp[i] - m) * inv + Bt[c];
      }
  }
  check_finite("batchnorm_train", out);
  if (recording({&x, &gamma, &beta})) {
    bool nx = want(x), ng = want(gamma), nb = want(beta);
    Tape::active()->record(
        "batchnorm_train", out,
        [x, gamma, beta, out, mu, inv_std, N, C, HW, invM, nx, ng,
         nb]() mutable {
          const double* G = out.grad().data();
          const double* X = x.values().data();
          const double* Gm = gamma.values().data();
          for (int c = 0; c < C; ++c) {
            const double inv = inv_std[static_cast<std::size_t>(c)];
            const double m = mu[static_cast<std::size_t>(c)];
            // Per-channel sums over all N*HW elements.
            double sum_g = 0.0, sum_gx = 0.0;
            for (int n = 0; n < N; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
              const double* gp = G + off;
              const double* xp = X + off;
              for (int i = 0; i < HW; ++i) {
                sum_g += gp[i];
                sum_gx += gp[i] * (xp[i] - m) * inv;
              }
            }
            if (ng) gamma.grad_buf()[static_cast<std::size_t>(c)] += sum_gx;
            if (nb) beta.grad_buf()[static_cast<std::size_t>(c)] += sum_g;
            if (nx) {
              double* GX = x.grad_buf().data();
              const double gm = Gm[c];
              const double mean_dxhat = gm * sum_g * invM;
              const double mean_dxhat_xhat = gm * sum_gx * invM;
              for (int n = 0; n < N; ++n) {
                const std::size_t off =
                    (static_cast<std::size_t>(n) * C + c) * HW;
                const double* gp = G + off;
                const double* xp = X + off;
                double* gxp = GX + off;
                for (int i = 0; i < HW; ++i) {
                  const double xhat = (xp[i] - m) * inv;
                  gxp[i] += inv * (gm * gp[i] - mean_dxhat -
                                   xhat * mean_dxhat_xhat);
                }
              }
            }
          }
        });
  }
  return out;
}

// ----------------------------------------------------- map manipulation ---

Tensor flip_w(const Tensor& x) {
  const auto& sh = x.shape();
  if (sh.empty()) throw ShapeError("flip_w: undefined tensor");
  const int W = sh.back();
  const std::size_t rows = x.size() / static_cast<std::size_t>(W);
  Tensor out = Tensor::zeros(sh);
  {
    const double* X = x.values().data();
    double* Y = out.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = X + r * W;
      double* yr = Y + r * W;
      for (int j = 0; j < W; ++j) yr[j] = xr[W - 1 - j];
    }
  }
  if (recording({&x})) {
    Tape::active()->record("flip_w", out, [x, out, W, rows]() mutable {
      const double* G = out.grad().data();
      double* GX = x.grad_buf().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = G + r * W;
        double* gxr = GX + r * W;
        for (int j = 0; j < W; ++j) gxr[W - 1 - j] += gr[j];
      }
    });
  }
  return out;
}

Tensor pixels_to_rows(const Tensor& x, int batch_index, int stride) {
  Shape sh = x.shape();
  int N, C, H, W;
  if (sh.size() == 3) {
    N = 1;
    C = sh[0];
    H = sh[1];
    W = sh[2];
  } else if (sh.size() == 4) {
    N = sh[0];
    C = sh[1];
    H = sh[2];
    W = sh[3];
  } else {
    throw ShapeError("pixels_to_rows: expected [C,H,W] or [N,C,H,W], got " +
                     shape_str(sh));
  }
  if (batch_index < 0 || batch_index >= N)
    throw ShapeError("pixels_to_rows: batch index out of range");
  if (stride < 1) throw ContractError("pixels_to_rows: stride must be >= 1");
  const int rows_y = (H + stride - 1) / stride;
  const int rows_x = (W + stride - 1) / stride;
  const int R = rows_y * rows_x;
  Tensor out = Tensor::zeros({R, C});
  {
    const double* X = x.values().data() +
                      static_cast<std::size_t>(batch_index) * C * H * W;
    double* Y = out.values().data();
    int r = 0;
    for (int y = 0; y < H; y += stride)
      for (int xc = 0; xc < W; xc += stride, ++r)
        for (int c = 0; c < C; ++c)
          Y[static_cast<std::size_t>(r) * C + c] =
              X[(static_cast<std::size_t>(c) * H + y) * W + xc];
  }
  if (recording({&x})) {
    Tape::active()->record(
        "pixels_to_rows", out,
        [x, out, batch_index, stride, C, H, W]() mutable {
          const double* G = out.grad().data();
          double* GX = x.grad_buf().data() +
                       static_cast<std::size_t>(batch_index) * C * H * W;
          int r = 0;
          for (int y = 0; y < H; y += stride)
            for (int xc = 0; xc < W; xc += stride, ++r)
              for (int c = 0; c < C; ++c)
                GX[(static_cast<std::size_t>(c) * H + y) * W + xc] +=
                    G[static_cast<std::size_t>(r) * C + c];
        });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.shape().size() != 2)
    throw ShapeError("l2_normalize_rows: expected [R,C], got " +
                     shape_str(x.shape()));
  const int R = x.dim(0), C = x.dim(1);
  std::vector<double> norms(static_cast<std::size_t>(R));
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* X = x.values().data();
    double* Y = out.values().data();
    for (int r = 0; r < R; ++r) {
      const double* xr = X + static_cast<std::size_t>(r) * C;
      double s = 0.0;
      for (int c = 0; c < C; ++c) s += xr[c] * xr[c];
      const double nrm = std::sqrt(s);
      if (nrm == 0.0)
        throw ContractError("l2_normalize_rows: zero row " + std::to_string(r));
      norms[static_cast<std::size_t>(r)] = nrm;
      double* yr = Y + static_cast<std::size_t>(r) * C;
      for (int c = 0; c < C; ++c) yr[c] = xr[c] / nrm;
    }
  }
  check_finite("l2_normalize_rows", out);
  if (recording({&x})) {
    Tape::active()->record(
        "l2_normalize_rows", out, [x, out, norms, R, C]() mutable {
          const double* G = out.grad().data();
          const double* Y = out.values().data();
          double* GX = x.grad_buf().data();
          for (int r = 0; r < R; ++r) {
            const double* gr = G + static_cast<std::size_t>(r) * C;
            const double* yr = Y + static_cast<std::size_t>(r) * C;
            double* gxr = GX + static_cast<std::size_t>(r) * C;
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += gr[c] * yr[c];
            const double inv = 1.0 / norms[static_cast<std::size_t>(r)];
            for (int c = 0; c < C; ++c)
              gxr[c] += (gr[c] - yr[c] * dot) * inv;
          }
        });
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("concat_rows: incompatible shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int Ra = a.dim(0), Rb = b.dim(0), C = a.dim(1);
  Tensor out = Tensor::zeros({Ra + Rb, C});
  {
    auto ov = out.values();
    std::copy(a.values().begin(), a.values().end(), ov.begin());
    std::copy(b.values().begin(), b.values().end(),
              ov.begin() + static_cast<std::ptrdiff_t>(a.size()));
  }
  if (recording({&a, &b})) {
    bool na = want(a), nb = want(b);
    Tape::active()->record("concat_rows", out,
                           [a, b, out, na, nb, Ra, C]() mutable {
                             const auto g = out.grad();
                             if (na) {
                               auto ga = a.grad_buf();
                               for (std::size_t i = 0; i < ga.size(); ++i)
                                 ga[i] += g[i];
                             }
                             if (nb) {
                               auto gb = b.grad_buf();
                               const std::size_t off =
                                   static_cast<std::size_t>(Ra) * C;
                               for (std::size_t i = 0; i < gb.size(); ++i)
                                 gb[i] += g[off + i];
                             }
                           });
  }
  return out;
}

// --------------------------------------------------------- fused losses ---

Tensor masked_row_logsumexp(const Tensor& s, double inv_tau) {
  if (s.shape().size() != 2 || s.dim(0) != s.dim(1))
    throw ShapeError("masked_row_logsumexp: expected square [R,R], got " +
                     shape_str(s.shape()));
  const int R = s.dim(0);
  if (R < 2)
    throw ContractError("masked_row_logsumexp: needs at least 2 rows");
  Tensor out = Tensor::zeros({R});
  {
    const double* S = s.values().data();
    double* Y = out.values().data();
    for (int r = 0; r < R; ++r) {
      const double* row = S + static_cast<std::size_t>(r) * R;
      double m = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < R; ++k)
        if (k != r) m = std::max(m, row[k] * inv_tau);
      double z = 0.0;
      for (int k = 0; k < R; ++k)
        if (k != r) z += std::exp(row[k] * inv_tau - m);
      Y[r] = m + std::log(z);
    }
  }
  check_finite("masked_row_logsumexp", out);
  if (recording({&s})) {
    Tape::active()->record(
        "masked_row_logsumexp", out, [s, out, inv_tau, R]() mutable {
          const double* G = out.grad().data();
          const double* Y = out.values().data();
          const double* S = s.values().data();
          double* GS = s.grad_buf().data();
          for (int r = 0; r < R; ++r) {
            const double* row = S + static_cast<std::size_t>(r) * R;
            double* grow = GS + static_cast<std::size_t>(r) * R;
            for (int k = 0; k < R; ++k)
              if (k != r)
                grow[k] +=
                    G[r] * inv_tau * std::exp(row[k] * inv_tau - Y[r]);
          }
        });
  }
  return out;
}

Tensor gather_weighted_sum(const Tensor& s,
                           const std::vector<std::pair<int, int>>& entries,
                           const std::vector<double>& weights) {
  if (s.shape().size() != 2)
    throw ShapeError("gather_weighted_sum: expected rank-2, got " +
                     shape_str(s.shape()));
  if (entries.size() != weights.size())
    throw ContractError("gather_weighted_sum: entries/weights length mismatch");
  const int R = s.dim(0), C = s.dim(1);
  double acc = 0.0;
  const double* S = s.values().data();
  for (std::size_t t = 0; t < entries.size(); ++t) {
    const auto [i, j] = entries[t];
    if (i < 0 || i >= R || j < 0 || j >= C)
      throw ContractError("gather_weighted_sum: index out of range");
    acc += weights[t] * S[static_cast<std::size_t>(i) * C + j];
  }
  Tensor out = Tensor::scalar(acc);
  check_finite("gather_weighted_sum", out);
  if (recording({&s})) {
    Tape::active()->record("gather_weighted_sum", out,
                           [s, out, entries, weights, C]() mutable {
                             const double g = out.grad()[0];
                             double* GS = s.grad_buf().data();
                             for (std::size_t t = 0; t < entries.size(); ++t)
                               GS[static_cast<std::size_t>(entries[t].first) *
                                      C +
                                  entries[t].second] += g * weights[t];
                           });
  }
  return out;
}

Tensor cross_entropy_with_logits(const Tensor& logits,
                                 std::span<const int> labels) {
  if (logits.shape().size() != 4)
    throw ShapeError("cross_entropy_with_logits: expected [N,C,H,W], got " +
                     shape_str(logits.shape()));
  const int N = logits.dim(0), C = logits.dim(1), H = logits.dim(2),
            W = logits.dim(3);
  const std::size_t P = static_cast<std::size_t>(N) * H * W;
  if (labels.size() != P)
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(P) +
                     " pixels but " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::vector<double> probs(logits.size());
  double total = 0.0;
  const double* Z = logits.values().data();
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const std::size_t pix = static_cast<std::size_t>(n) * HW + p;
      const int lab = labels[pix];
      if (lab < 0 || lab >= C)
        throw ContractError("cross_entropy_with_logits: label " +
                            std::to_string(lab) + " outside [0," +
                            std::to_string(C) + ")");
      const std::size_t base = static_cast<std::size_t>(n) * C * HW + p;
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < C; ++c) m = std::max(m, Z[base + c * HW]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(Z[base + c * HW] - m);
        probs[base + c * HW] = e;
        z += e;
      }
      const double invz = 1.0 / z;
      for (int c = 0; c < C; ++c) probs[base + c * HW] *= invz;
      total += m + std::log(z) - Z[base + lab * HW];
    }
  const double invP = 1.0 / static_cast<double>(P);
  Tensor out = Tensor::scalar(total * invP);
  check_finite("cross_entropy_with_logits", out);
  if (recording({&logits})) {
    std::vector<int> labels_copy(labels.begin(), labels.end());
    Tape::active()->record(
        "cross_entropy_with_logits", out,
        [logits, out, probs = std::move(probs),
         labels = std::move(labels_copy), N, C, HW, invP]() mutable {
          const double g = out.grad()[0] * invP;
          double* GZ = logits.grad_buf().data();
          for (int n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t pix = static_cast<std::size_t>(n) * HW + p;
              const std::size_t base = static_cast<std::size_t>(n) * C * HW + p;
              for (int c = 0; c < C; ++c) {
                const double onehot = (c == labels[pix]) ? 1.0 : 0.0;
                GZ[base + c * HW] += g * (probs[base + c * HW] - onehot);
              }
            }
        });
  }
  return out;
}

Tensor mean_pixel_entropy(const Tensor& probs) {
  Shape sh = probs.shape();
  int N, C, H, W;
  if (sh.size() == 3) {
    N = 1;
    C = sh[0];
    H = sh[1];
    W = sh[2];
  } else if (sh.size() == 4) {
    N = sh[0];
    C = sh[1];
    H = sh[2];
    W = sh[3];
  } else {
    throw ShapeError("mean_pixel_entropy: expected [C,H,W] or [N,C,H,W], got " +
                     shape_str(sh));
  }
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  const std::size_t P = static_cast<std::size_t>(N) * HW;
  double total = 0.0;
  const double* Pr = probs.values().data();
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const std::size_t base = static_cast<std::size_t>(n) * C * HW + p;
      for (int c = 0; c < C; ++c) {
        const double v = Pr[base + c * HW];
        if (v > 0.0) total -= v * std::log(v);
      }
    }
  const double invP = 1.0 / static_cast<double>(P);
  Tensor out = Tensor::scalar(total * invP);
  check_finite("mean_pixel_entropy", out);
  if (recording({&probs})) {
    Tape::active()->record(
        "mean_pixel_entropy", out, [probs, out, N, C, HW, invP]() mutable {
          const double g = out.grad()[0] * invP;
          const double* Pr = probs.values().data();
          double* GP = probs.grad_buf().data();
          for (int n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t base = static_cast<std::size_t>(n) * C * HW + p;
              for (int c = 0; c < C; ++c) {
                const double v = Pr[base + c * HW];
                if (v > 0.0) GP[base + c * HW] -= g * (std::log(v) + 1.0);
              }
            }
        });
  }
  return out;
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ContractError("stack_images: empty input");
  const Shape& sh = images[0].shape();
  if (sh.size() != 3)
    throw ShapeError("stack_images: expected [C,H,W] images, got " +
                     shape_str(sh));
  for (const Tensor& t : images) {
    if (t.shape() != sh)
      throw ShapeError("stack_images: mismatched image shapes");
    if (t.tracked_on(Tape::active()) && Tape::active() != nullptr)
      throw ContractError("stack_images: not differentiable; detach inputs");
  }
  Tensor out =
      Tensor::zeros({static_cast<int>(images.size()), sh[0], sh[1], sh[2]});
  auto ov = out.values();
  std::size_t off = 0;
  for (const Tensor& t : images) {
    std::copy(t.values().begin(), t.values().end(), ov.begin() + off);
    off += t.size();
  }
  return out;
}

}  // namespace tta
