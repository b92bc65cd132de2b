#pragma once

// The operator set used by the feature extractors, the network and the
// losses. Every op computes its forward value eagerly and, when an input
// requires a gradient, records a backward rule on the graph.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "birqa/diff/tensor.hpp"

namespace birqa::ad {

namespace detail {

template <class T>
Graph<T>& graph_of(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw Error("op inputs belong to different graphs");
  return a.graph();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T softplus(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

// Elementwise unary op; df(x, y) is the local derivative.
template <class T, class F, class DF>
Var<T> unary(const char* name, const Var<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  const auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.ptr();
  return x.graph().make(name, x.shape(), std::move(out), x.requires_grad(),
                        [xn, df](Node<T>& self) {
                          T* gx = xn->grad_data();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            gx[i] += self.grad[i] * df(xn->value[i], self.value[i]);
                          }
                        });
}

// Broadcast geometry for equal-rank inputs whose dims match or are 1.
struct Broadcast {
  std::array<int, 4> out{};
  std::array<std::size_t, 4> sa{}, sb{};
  Shape shape;
};

inline Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.rank() != b.rank()) {
    throw Error(std::string(op) + ": rank mismatch " + a.str() + " vs " + b.str());
  }
  const auto da = a.padded(), db = b.padded();
  Broadcast bc;
  std::array<std::size_t, 4> ra{}, rb{};
  std::size_t accum_a = 1, accum_b = 1;
  for (int i = 3; i >= 0; --i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
      throw Error(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
    }
    bc.out[i] = std::max(da[i], db[i]);
    ra[i] = accum_a;
    rb[i] = accum_b;
    accum_a *= da[i];
    accum_b *= db[i];
    bc.sa[i] = da[i] == 1 ? 0 : ra[i];
    bc.sb[i] = db[i] == 1 ? 0 : rb[i];
  }
  switch (a.rank()) {
    case 0: bc.shape = Shape{}; break;
    case 1: bc.shape = Shape{bc.out[3]}; break;
    case 2: bc.shape = Shape{bc.out[2], bc.out[3]}; break;
    case 3: bc.shape = Shape{bc.out[1], bc.out[2], bc.out[3]}; break;
    default: bc.shape = Shape{bc.out[0], bc.out[1], bc.out[2], bc.out[3]}; break;
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) over the broadcast domain.
template <class Fn>
void for_each_broadcast(const Broadcast& bc, Fn fn) {
  std::size_t o = 0;
  for (int i0 = 0; i0 < bc.out[0]; ++i0) {
    for (int i1 = 0; i1 < bc.out[1]; ++i1) {
      for (int i2 = 0; i2 < bc.out[2]; ++i2) {
        const std::size_t ba = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
        const std::size_t bb = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
        for (int i3 = 0; i3 < bc.out[3]; ++i3, ++o) {
          fn(o, ba + i3 * bc.sa[3], bb + i3 * bc.sb[3]);
        }
      }
    }
  }
}

// Elementwise binary op with broadcasting; da/db return local partials.
template <class T, class F, class DA, class DB>
Var<T> binary(const char* name, const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
  Graph<T>& g = graph_of(a, b);
  const bool rg = a.requires_grad() || b.requires_grad();
  auto an = a.ptr(), bn = b.ptr();
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an->value[i], bn->value[i]);
    return g.make(name, a.shape(), std::move(out), rg, [an, bn, da, db](Node<T>& self) {
      const std::size_t n = self.grad.size();
      if (an->requires_grad) {
        T* ga = an->grad_data();
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += self.grad[i] * da(an->value[i], bn->value[i], self.value[i]);
        }
      }
      if (bn->requires_grad) {
        T* gb = bn->grad_data();
        for (std::size_t i = 0; i < n; ++i) {
          gb[i] += self.grad[i] * db(an->value[i], bn->value[i], self.value[i]);
        }
      }
    });
  }
  const Broadcast bc = broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(bc.shape.size());
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = f(an->value[ia], bn->value[ib]);
  });
  return g.make(name, bc.shape, std::move(out), rg, [an, bn, bc, da, db](Node<T>& self) {
    T* ga = an->requires_grad ? an->grad_data() : nullptr;
    T* gb = bn->requires_grad ? bn->grad_data() : nullptr;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const T av = an->value[ia], bv = bn->value[ib], go = self.grad[o];
      if (ga) ga[ia] += go * da(av, bv, self.value[o]);
      if (gb) gb[ib] += go * db(av, bv, self.value[o]);
    });
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

/// Elementwise max; ties route the gradient to the first argument.
template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; },
                          [](T, T) { return T(1); });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; },
                          [](T v, T) { return T(2) * v; });
}

template <class T>
Var<T> abs(const Var<T>& x) {
  return detail::unary<T>("abs", x, [](T v) { return std::fabs(v); },
                          [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return detail::sigmoid(v); },
                          [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); },
                          [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary<T>("softplus", x, [](T v) { return detail::softplus(v); },
                          [](T v, T) { return detail::sigmoid(v); });
}

/// Clamp to [lo,hi]; gradient passes inside the closed interval.
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return detail::unary<T>("clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
                          [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  detail::require(shape.size() == x.size(),
                  "reshape: " + x.shape().str() + " -> " + shape.str() + " changes size");
  auto xn = x.ptr();
  return x.graph().make("reshape", shape, xn->value, x.requires_grad(), [xn](Node<T>& self) {
    T* gx = xn->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Concatenation along the first axis; trailing dims must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat: empty input list");
  const Shape& s0 = xs[0].shape();
  int lead = 0;
  bool rg = false;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    detail::require(s.rank() == s0.rank() && s.rank() >= 1, "concat: rank mismatch");
    for (int i = 1; i < s.rank(); ++i) {
      detail::require(s[i] == s0[i], "concat: trailing dims differ " + s.str() + " vs " + s0.str());
    }
    detail::require(&x.graph() == &xs[0].graph(), "concat: inputs from different graphs");
    lead += s[0];
    rg = rg || x.requires_grad();
    nodes.push_back(x.ptr());
  }
  Shape out_shape;
  switch (s0.rank()) {
    case 1: out_shape = Shape{lead}; break;
    case 2: out_shape = Shape{lead, s0[1]}; break;
    case 3: out_shape = Shape{lead, s0[1], s0[2]}; break;
    default: out_shape = Shape{lead, s0[1], s0[2], s0[3]}; break;
  }
  std::vector<T> out;
  out.reserve(out_shape.size());
  for (const auto& n : nodes) out.insert(out.end(), n->value.begin(), n->value.end());
  return xs[0].graph().make("concat", out_shape, std::move(out), rg, [nodes](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        T* g = n->grad_data();
        for (std::size_t i = 0; i < n->value.size(); ++i) g[i] += self.grad[off + i];
      }
      off += n->value.size();
    }
  });
}

/// Rows [begin, begin+count) along the first axis.
template <class T>
Var<T> slice(const Var<T>& x, int begin, int count) {
  const Shape& s = x.shape();
  detail::require(s.rank() >= 1 && begin >= 0 && count >= 1 && begin + count <= s[0],
                  "slice: range out of bounds for " + s.str());
  Shape out_shape;
  switch (s.rank()) {
    case 1: out_shape = Shape{count}; break;
    case 2: out_shape = Shape{count, s[1]}; break;
    case 3: out_shape = Shape{count, s[1], s[2]}; break;
    default: out_shape = Shape{count, s[1], s[2], s[3]}; break;
  }
  const std::size_t inner = x.size() / s[0];
  const std::size_t off = begin * inner;
  auto xn = x.ptr();
  std::vector<T> out(xn->value.begin() + off, xn->value.begin() + off + out_shape.size());
  return x.graph().make("slice", out_shape, std::move(out), x.requires_grad(),
                        [xn, off](Node<T>& self) {
                          T* g = xn->grad_data() + off;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value()) s += v;
  auto xn = x.ptr();
  return x.graph().make("sum", Shape{}, {s}, x.requires_grad(), [xn](Node<T>& self) {
    T* g = xn->grad_data();
    for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  const T n = static_cast<T>(x.size());
  T s = T(0);
  for (T v : x.value()) s += v;
  auto xn = x.ptr();
  return x.graph().make("mean", Shape{}, {s / n}, x.requires_grad(), [xn, n](Node<T>& self) {
    T* g = xn->grad_data();
    const T go = self.grad[0] / n;
    for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += go;
  });
}

/// Global average pool: (C,H,W) -> (C).
template <class T>
Var<T> gap(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3, "gap: expected (C,H,W), got " + s.str());
  const int c = s[0];
  const std::size_t hw = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<T> out(c);
  for (int k = 0; k < c; ++k) {
    T acc = T(0);
    const T* p = x.value().data() + k * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    out[k] = acc / static_cast<T>(hw);
  }
  auto xn = x.ptr();
  return x.graph().make("gap", Shape{c}, std::move(out), x.requires_grad(),
                        [xn, c, hw](Node<T>& self) {
                          T* g = xn->grad_data();
                          for (int k = 0; k < c; ++k) {
                            const T go = self.grad[k] / static_cast<T>(hw);
                            for (std::size_t i = 0; i < hw; ++i) g[k * hw + i] += go;
                          }
                        });
}

/// Per-pixel mean over channels: (C,H,W) -> (1,H,W).
template <class T>
Var<T> channel_mean(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3, "channel_mean: expected (C,H,W)");
  const int c = s[0];
  const std::size_t hw = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<T> out(hw, T(0));
  const T* v = x.value().data();
  for (int k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) out[i] += v[k * hw + i];
  }
  for (auto& o : out) o /= static_cast<T>(c);
  auto xn = x.ptr();
  return x.graph().make("channel_mean", Shape{1, s[1], s[2]}, std::move(out), x.requires_grad(),
                        [xn, c, hw](Node<T>& self) {
                          T* g = xn->grad_data();
                          for (int k = 0; k < c; ++k) {
                            for (std::size_t i = 0; i < hw; ++i) {
                              g[k * hw + i] += self.grad[i] / static_cast<T>(c);
                            }
                          }
                        });
}

/// Per-pixel max over channels: (C,H,W) -> (1,H,W). Ties pick the lowest channel.
template <class T>
Var<T> channel_max(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3, "channel_max: expected (C,H,W)");
  const int c = s[0];
  const std::size_t hw = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<T> out(x.value().begin(), x.value().begin() + hw);
  auto arg = std::make_shared<std::vector<int>>(hw, 0);
  const T* v = x.value().data();
  for (int k = 1; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      if (v[k * hw + i] > out[i]) {
        out[i] = v[k * hw + i];
        (*arg)[i] = k;
      }
    }
  }
  auto xn = x.ptr();
  return x.graph().make("channel_max", Shape{1, s[1], s[2]}, std::move(out), x.requires_grad(),
                        [xn, arg, hw](Node<T>& self) {
                          T* g = xn->grad_data();
                          for (std::size_t i = 0; i < hw; ++i) g[(*arg)[i] * hw + i] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// Resampling

/// 2x2 box average, output dims floor(dim/2).
template <class T>
Var<T> downsample2(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3 && s[1] >= 2 && s[2] >= 2, "downsample2: need (C,H>=2,W>=2)");
  const int c = s[0], h = s[1], w = s[2], oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<std::size_t>(c) * oh * ow);
  const T* v = x.value().data();
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < oh; ++y) {
      const T* r0 = v + (static_cast<std::size_t>(k) * h + 2 * y) * w;
      const T* r1 = r0 + w;
      T* o = out.data() + (static_cast<std::size_t>(k) * oh + y) * ow;
      for (int xx = 0; xx < ow; ++xx) {
        o[xx] = T(0.25) * ((r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]));
      }
    }
  }
  auto xn = x.ptr();
  return x.graph().make("downsample2", Shape{c, oh, ow}, std::move(out), x.requires_grad(),
                        [xn, c, h, w, oh, ow](Node<T>& self) {
                          T* g = xn->grad_data();
                          for (int k = 0; k < c; ++k) {
                            for (int y = 0; y < oh; ++y) {
                              for (int xx = 0; xx < ow; ++xx) {
                                const T go = T(0.25) * self.grad[(static_cast<std::size_t>(k) * oh + y) * ow + xx];
                                T* r0 = g + (static_cast<std::size_t>(k) * h + 2 * y) * w + 2 * xx;
                                r0[0] += go;
                                r0[1] += go;
                                r0[w] += go;
                                r0[w + 1] += go;
                              }
                            }
                          }
                        });
}

/// Nearest-neighbour upsampling to (C,out_h,out_w); source index min(o/2, dim-1).
template <class T>
Var<T> upsample_nearest(const Var<T>& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3, "upsample_nearest: expected (C,H,W)");
  const int c = s[0], h = s[1], w = s[2];
  std::vector<int> sy(out_h), sx(out_w);
  for (int y = 0; y < out_h; ++y) sy[y] = std::min(y / 2, h - 1);
  for (int xx = 0; xx < out_w; ++xx) sx[xx] = std::min(xx / 2, w - 1);
  std::vector<T> out(static_cast<std::size_t>(c) * out_h * out_w);
  const T* v = x.value().data();
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < out_h; ++y) {
      const T* src = v + (static_cast<std::size_t>(k) * h + sy[y]) * w;
      T* dst = out.data() + (static_cast<std::size_t>(k) * out_h + y) * out_w;
      for (int xx = 0; xx < out_w; ++xx) dst[xx] = src[sx[xx]];
    }
  }
  auto xn = x.ptr();
  return x.graph().make("upsample_nearest", Shape{c, out_h, out_w}, std::move(out),
                        x.requires_grad(), [xn, c, h, w, out_h, out_w, sy, sx](Node<T>& self) {
                          T* g = xn->grad_data();
                          for (int k = 0; k < c; ++k) {
                            for (int y = 0; y < out_h; ++y) {
                              T* dst = g + (static_cast<std::size_t>(k) * h + sy[y]) * w;
                              const T* src = self.grad.data() + (static_cast<std::size_t>(k) * out_h + y) * out_w;
                              for (int xx = 0; xx < out_w; ++xx) dst[sx[xx]] += src[xx];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution and linear layers

namespace detail {

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <class T>
bool all_zero(const T* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] != T(0)) return false;
  }
  return true;
}

}  // namespace detail

/// 2-D convolution with mirror padding. x: (Ci,H,W); w: (Co,Ci,K,K) with K
/// odd; b: (Co) or an invalid Var for no bias. Stride 1 keeps (H,W); stride 2
/// gives floor(H/2) x floor(W/2) with kernel centers at even coordinates.
/// Input channels that are identically zero are skipped.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require(xs.rank() == 3, "conv2d: input must be (C,H,W), got " + xs.str());
  detail::require(ws.rank() == 4 && ws[1] == xs[0] && ws[2] == ws[3] && ws[2] % 2 == 1,
                  "conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  detail::require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  detail::require(!b.valid() || (b.shape().rank() == 1 && b.shape()[0] == ws[0]),
                  "conv2d: bias shape mismatch");
  const int ci_n = xs[0], h = xs[1], wd = xs[2], co_n = ws[0], k = ws[2], r = k / 2;
  const int oh = stride == 1 ? h : h / 2, ow = stride == 1 ? wd : wd / 2;
  detail::require(oh >= 1 && ow >= 1, "conv2d: output would be empty");
  const std::size_t in_plane = static_cast<std::size_t>(h) * wd;
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  const T* xv = x.value().data();
  const T* wv = w.value().data();

  std::vector<char> active(ci_n);
  for (int c = 0; c < ci_n; ++c) active[c] = !detail::all_zero(xv + c * in_plane, in_plane);

  // Mirror-padded copy of the input.
  const int hp = h + 2 * r, wp = wd + 2 * r;
  const std::size_t pad_plane = static_cast<std::size_t>(hp) * wp;
  std::vector<int> my(hp), mx(wp);
  for (int i = 0; i < hp; ++i) my[i] = detail::reflect(i - r, h);
  for (int i = 0; i < wp; ++i) mx[i] = detail::reflect(i - r, wd);
  auto padded = std::make_shared<std::vector<T>>();
  const T* pv = xv;
  if (r > 0) {
    padded->assign(static_cast<std::size_t>(ci_n) * pad_plane, T(0));
    for (int c = 0; c < ci_n; ++c) {
      if (!active[c]) continue;
      for (int y = 0; y < hp; ++y) {
        const T* src = xv + c * in_plane + static_cast<std::size_t>(my[y]) * wd;
        T* dst = padded->data() + c * pad_plane + static_cast<std::size_t>(y) * wp;
        for (int xx = 0; xx < wp; ++xx) dst[xx] = src[mx[xx]];
      }
    }
    pv = padded->data();
  }
  const std::size_t pplane = r > 0 ? pad_plane : in_plane;
  const int pw = r > 0 ? wp : wd;

  std::vector<T> out(static_cast<std::size_t>(co_n) * out_plane);
  for (int co = 0; co < co_n; ++co) {
    T* o = out.data() + co * out_plane;
    const T bias = b.valid() ? b.value()[co] : T(0);
    std::fill(o, o + out_plane, bias);
    for (int ci = 0; ci < ci_n; ++ci) {
      if (!active[ci]) continue;
      const T* src = pv + ci * pplane;
      const T* wk = wv + (static_cast<std::size_t>(co) * ci_n + ci) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const T wgt = wk[ky * k + kx];
          for (int y = 0; y < oh; ++y) {
            const T* row = src + static_cast<std::size_t>(y * stride + ky) * pw + kx;
            T* orow = o + static_cast<std::size_t>(y) * ow;
            if (stride == 1) {
              for (int xx = 0; xx < ow; ++xx) orow[xx] += wgt * row[xx];
            } else {
              for (int xx = 0; xx < ow; ++xx) orow[xx] += wgt * row[2 * xx];
            }
          }
        }
      }
    }
  }

  const bool rg = x.requires_grad() || w.requires_grad() || (b.valid() && b.requires_grad());
  auto xn = x.ptr(), wn = w.ptr();
  auto bn = b.valid() ? b.ptr() : nullptr;
  auto act = std::make_shared<std::vector<char>>(std::move(active));
  if (!rg) padded.reset();
  return x.graph().make(
      "conv2d", Shape{co_n, oh, ow}, std::move(out), rg,
      [=](Node<T>& self) {
        const T* go = self.grad.data();
        const T* src_all = r > 0 ? padded->data() : xn->value.data();
        if (bn && bn->requires_grad) {
          T* gb = bn->grad_data();
          for (int co = 0; co < co_n; ++co) {
            T acc = T(0);
            for (std::size_t i = 0; i < out_plane; ++i) acc += go[co * out_plane + i];
            gb[co] += acc;
          }
        }
        if (wn->requires_grad) {
          T* gw = wn->grad_data();
          for (int co = 0; co < co_n; ++co) {
            const T* g = go + co * out_plane;
            for (int ci = 0; ci < ci_n; ++ci) {
              if (!(*act)[ci]) continue;
              const T* src = src_all + ci * pplane;
              T* gk = gw + (static_cast<std::size_t>(co) * ci_n + ci) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  T acc = T(0);
                  for (int y = 0; y < oh; ++y) {
                    const T* row = src + static_cast<std::size_t>(y * stride + ky) * pw + kx;
                    const T* grow = g + static_cast<std::size_t>(y) * ow;
                    if (stride == 1) {
                      for (int xx = 0; xx < ow; ++xx) acc += grow[xx] * row[xx];
                    } else {
                      for (int xx = 0; xx < ow; ++xx) acc += grow[xx] * row[2 * xx];
                    }
                  }
                  gk[ky * k + kx] += acc;
                }
              }
            }
          }
        }
        if (xn->requires_grad) {
          std::vector<T> gpad(static_cast<std::size_t>(ci_n) * pplane, T(0));
          const T* wvals = wn->value.data();
          for (int co = 0; co < co_n; ++co) {
            const T* g = go + co * out_plane;
            for (int ci = 0; ci < ci_n; ++ci) {
              T* dst = gpad.data() + ci * pplane;
              const T* wk = wvals + (static_cast<std::size_t>(co) * ci_n + ci) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  const T wgt = wk[ky * k + kx];
                  for (int y = 0; y < oh; ++y) {
                    T* row = dst + static_cast<std::size_t>(y * stride + ky) * pw + kx;
                    const T* grow = g + static_cast<std::size_t>(y) * ow;
                    if (stride == 1) {
                      for (int xx = 0; xx < ow; ++xx) row[xx] += wgt * grow[xx];
                    } else {
                      for (int xx = 0; xx < ow; ++xx) row[2 * xx] += wgt * grow[xx];
                    }
                  }
                }
              }
            }
          }
          T* gx = xn->grad_data();
          if (r == 0) {
            for (std::size_t i = 0; i < gpad.size(); ++i) gx[i] += gpad[i];
          } else {
            for (int c = 0; c < ci_n; ++c) {
              for (int y = 0; y < hp; ++y) {
                const T* src = gpad.data() + c * pplane + static_cast<std::size_t>(y) * wp;
                T* dst = gx + c * in_plane + static_cast<std::size_t>(my[y]) * wd;
                for (int xx = 0; xx < wp; ++xx) dst[mx[xx]] += src[xx];
              }
            }
          }
        }
      });
}

/// Fully connected layer: flattened x (in) -> (out). w: (out,in), b: (out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& ws = w.shape();
  detail::require(ws.rank() == 2 && static_cast<std::size_t>(ws[1]) == x.size(),
                  "linear: weight " + ws.str() + " incompatible with input " + x.shape().str());
  detail::require(b.shape().rank() == 1 && b.shape()[0] == ws[0], "linear: bias shape mismatch");
  const int n_out = ws[0], n_in = ws[1];
  std::vector<T> out(n_out);
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  for (int o = 0; o < n_out; ++o) {
    T acc = b.value()[o];
    for (int i = 0; i < n_in; ++i) acc += wv[o * n_in + i] * xv[i];
    out[o] = acc;
  }
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  auto xn = x.ptr(), wn = w.ptr(), bn = b.ptr();
  return x.graph().make("linear", Shape{n_out}, std::move(out), rg,
                        [xn, wn, bn, n_out, n_in](Node<T>& self) {
                          const T* go = self.grad.data();
                          if (bn->requires_grad) {
                            T* gb = bn->grad_data();
                            for (int o = 0; o < n_out; ++o) gb[o] += go[o];
                          }
                          if (wn->requires_grad) {
                            T* gw = wn->grad_data();
                            for (int o = 0; o < n_out; ++o) {
                              for (int i = 0; i < n_in; ++i) gw[o * n_in + i] += go[o] * xn->value[i];
                            }
                          }
                          if (xn->requires_grad) {
                            T* gx = xn->grad_data();
                            for (int o = 0; o < n_out; ++o) {
                              for (int i = 0; i < n_in; ++i) gx[i] += go[o] * wn->value[o * n_in + i];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Pooling heads and statistics

inline constexpr double kGemFloor = 1e-6;

/// Softmax over a rank-1 vector.
template <class T>
Var<T> softmax(const Var<T>& x) {
  detail::require(x.shape().rank() == 1, "softmax: expected a vector");
  const auto xv = x.value();
  const T mx = *std::max_element(xv.begin(), xv.end());
  std::vector<T> out(xv.size());
  T s = T(0);
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] = std::exp(xv[i] - mx);
  for (auto& o : out) o /= s;
  auto xn = x.ptr();
  return x.graph().make("softmax", x.shape(), std::move(out), x.requires_grad(),
                        [xn](Node<T>& self) {
                          T dot = T(0);
                          for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * self.value[i];
                          T* g = xn->grad_data();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            g[i] += self.value[i] * (self.grad[i] - dot);
                          }
                        });
}

/// Generalized-mean pooling (C,H,W) -> (C) of relu(x)+1e-6 with exponent p
/// (a scalar Var, differentiable). Accumulates in double so that large p
/// does not underflow the channel means.
template <class T>
Var<T> gem(const Var<T>& x, const Var<T>& p) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3, "gem: expected (C,H,W)");
  detail::require(p.size() == 1, "gem: exponent must be scalar");
  detail::graph_of(x, p);
  const int c = s[0];
  const std::size_t hw = static_cast<std::size_t>(s[1]) * s[2];
  const double pe = static_cast<double>(p.value()[0]);
  auto means = std::make_shared<std::vector<double>>(c);
  std::vector<T> out(c);
  const T* xv = x.value().data();
  for (int k = 0; k < c; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double u = std::max(static_cast<double>(xv[k * hw + i]), 0.0) + kGemFloor;
      acc += std::pow(u, pe);
    }
    (*means)[k] = acc / static_cast<double>(hw);
    out[k] = static_cast<T>(std::pow((*means)[k], 1.0 / pe));
  }
  const bool rg = x.requires_grad() || p.requires_grad();
  auto xn = x.ptr(), pn = p.ptr();
  return x.graph().make("gem", Shape{c}, std::move(out), rg,
                        [xn, pn, means, c, hw](Node<T>& self) {
                          const double pe = static_cast<double>(pn->value[0]);
                          double gp = 0.0;
                          T* gx = xn->requires_grad ? xn->grad_data() : nullptr;
                          for (int k = 0; k < c; ++k) {
                            const double m = (*means)[k];
                            const double go = static_cast<double>(self.grad[k]);
                            if (go == 0.0) continue;
                            const double z = std::pow(m, 1.0 / pe);
                            // dz/du_i = m^{(1-p)/p} u_i^{p-1} / n
                            const double pref = std::pow(m, (1.0 - pe) / pe) / static_cast<double>(hw);
                            double ulogu = 0.0;
                            for (std::size_t i = 0; i < hw; ++i) {
                              const double xi = static_cast<double>(xn->value[k * hw + i]);
                              const double u = std::max(xi, 0.0) + kGemFloor;
                              const double up = std::pow(u, pe);
                              if (gx && xi > 0.0) gx[k * hw + i] += static_cast<T>(go * pref * up / u);
                              ulogu += up * std::log(u);
                            }
                            ulogu /= static_cast<double>(hw);
                            gp += go * z * (-std::log(m) / (pe * pe) + ulogu / (pe * m));
                          }
                          if (pn->requires_grad) pn->grad_data()[0] += static_cast<T>(gp);
                        });
}

inline constexpr double kPearsonGuard = 1e-8;

/// Pearson correlation of two equal-length vectors; the denominator is
/// guarded by +1e-8.
template <class T>
Var<T> pearson(const Var<T>& a, const Var<T>& b) {
  Graph<T>& g = detail::graph_of(a, b);
  detail::require(a.size() == b.size() && a.size() >= 2, "pearson: need equal lengths >= 2");
  const std::size_t n = a.size();
  T ma = T(0), mb = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.value()[i];
    mb += b.value()[i];
  }
  ma /= static_cast<T>(n);
  mb /= static_cast<T>(n);
  T sab = T(0), saa = T(0), sbb = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T da = a.value()[i] - ma, db = b.value()[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  const T sroot = std::sqrt(saa * sbb);
  const T den = sroot + static_cast<T>(kPearsonGuard);
  const bool rg = a.requires_grad() || b.requires_grad();
  auto an = a.ptr(), bn = b.ptr();
  return g.make("pearson", Shape{}, {sab / den}, rg,
                [=](Node<T>& self) {
                  const T go = self.grad[0];
                  auto push = [&](const std::shared_ptr<Node<T>>& self_in, T m_self,
                                  const std::shared_ptr<Node<T>>& other, T m_other, T s_other) {
                    if (!self_in->requires_grad) return;
                    T* gx = self_in->grad_data();
                    for (std::size_t i = 0; i < n; ++i) {
                      const T d_self = self_in->value[i] - m_self;
                      const T d_other = other->value[i] - m_other;
                      T v = d_other / den;
                      if (sroot > T(0)) v -= sab * s_other * d_self / (sroot * den * den);
                      gx[i] += go * v;
                    }
                  };
                  push(an, ma, bn, mb, sbb);
                  push(bn, mb, an, ma, saa);
                });
}

// ---------------------------------------------------------------------------
// Feature-extraction ops

/// Separable filtering of every channel of (C,H,W) with mirror padding.
template <class T>
Var<T> filter_separable(const Var<T>& x, std::span<const float> kernel) {
  const Shape& s = x.shape();
  detail::require(s.rank() == 3, "filter_separable: expected (C,H,W)");
  const int c = s[0], h = s[1], w = s[2];
  const int r = static_cast<int>(kernel.size()) / 2;
  const int kn = static_cast<int>(kernel.size());
  std::vector<T> kv(kernel.begin(), kernel.end());
  std::vector<int> xs(w + 2 * r), ys(h + 2 * r);
  for (int i = 0; i < w + 2 * r; ++i) xs[i] = detail::reflect(i - r, w);
  for (int i = 0; i < h + 2 * r; ++i) ys[i] = detail::reflect(i - r, h);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> tmp(x.size()), out(x.size(), T(0));
  const T* v = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      const T* row = v + ch * plane + static_cast<std::size_t>(y) * w;
      T* trow = tmp.data() + ch * plane + static_cast<std::size_t>(y) * w;
      for (int xx = 0; xx < w; ++xx) {
        T acc = T(0);
        for (int k = 0; k < kn; ++k) acc += kv[k] * row[xs[xx + k]];
        trow[xx] = acc;
      }
    }
    for (int y = 0; y < h; ++y) {
      T* orow = out.data() + ch * plane + static_cast<std::size_t>(y) * w;
      for (int k = 0; k < kn; ++k) {
        const T* srow = tmp.data() + ch * plane + static_cast<std::size_t>(ys[y + k]) * w;
        for (int xx = 0; xx < w; ++xx) orow[xx] += kv[k] * srow[xx];
      }
    }
  }
  auto xn = x.ptr();
  return x.graph().make("filter_separable", s, std::move(out), x.requires_grad(),
                        [xn, kv, xs, ys, c, h, w, kn, plane](Node<T>& self) {
                          std::vector<T> gt(self.grad.size(), T(0));
                          for (int ch = 0; ch < c; ++ch) {
                            for (int y = 0; y < h; ++y) {
                              const T* grow = self.grad.data() + ch * plane + static_cast<std::size_t>(y) * w;
                              for (int k = 0; k < kn; ++k) {
                                T* trow = gt.data() + ch * plane + static_cast<std::size_t>(ys[y + k]) * w;
                                for (int xx = 0; xx < w; ++xx) trow[xx] += kv[k] * grow[xx];
                              }
                            }
                          }
                          T* gx = xn->grad_data();
                          for (int ch = 0; ch < c; ++ch) {
                            for (int y = 0; y < h; ++y) {
                              const T* trow = gt.data() + ch * plane + static_cast<std::size_t>(y) * w;
                              T* grow = gx + ch * plane + static_cast<std::size_t>(y) * w;
                              for (int xx = 0; xx < w; ++xx) {
                                for (int k = 0; k < kn; ++k) grow[xs[xx + k]] += kv[k] * trow[xx];
                              }
                            }
                          }
                        });
}

inline constexpr double kLbpTemperature = 50.0;

/// Normalized 8-neighbor LBP code of a (1,H,W) plane. The forward value is
/// the exact hard code; the backward pass uses the derivative of the
/// sigmoid(50 * (neighbor - center)) relaxation (straight-through).
template <class T>
Var<T> lbp_straight_through(const Var<T>& x) {
  static constexpr int kOff[8][2] = {{-1, -1}, {0, -1}, {1, -1}, {1, 0},
                                     {1, 1},   {0, 1},  {-1, 1}, {-1, 0}};
  const Shape& s = x.shape();
  detail::require(s.rank() == 3 && s[0] == 1, "lbp_straight_through: expected (1,H,W)");
  const int h = s[1], w = s[2];
  const T* v = x.value().data();
  std::vector<T> out(x.size());
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const T center = v[static_cast<std::size_t>(y) * w + xx];
      int code = 0;
      for (int b = 0; b < 8; ++b) {
        const int nx = detail::reflect(xx + kOff[b][0], w);
        const int ny = detail::reflect(y + kOff[b][1], h);
        if (v[static_cast<std::size_t>(ny) * w + nx] >= center) code |= 1 << b;
      }
      out[static_cast<std::size_t>(y) * w + xx] = static_cast<T>(code) / T(255);
    }
  }
  auto xn = x.ptr();
  return x.graph().make("lbp_straight_through", s, std::move(out), x.requires_grad(),
                        [xn, h, w](Node<T>& self) {
                          const T temp = static_cast<T>(kLbpTemperature);
                          T* g = xn->grad_data();
                          const T* v = xn->value.data();
                          for (int y = 0; y < h; ++y) {
                            for (int xx = 0; xx < w; ++xx) {
                              const std::size_t ci = static_cast<std::size_t>(y) * w + xx;
                              const T go = self.grad[ci] / T(255);
                              if (go == T(0)) continue;
                              for (int b = 0; b < 8; ++b) {
                                const int nx = detail::reflect(xx + kOff[b][0], w);
                                const int ny = detail::reflect(y + kOff[b][1], h);
                                const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                                const T sg = detail::sigmoid(temp * (v[ni] - v[ci]));
                                const T d = go * static_cast<T>(1 << b) * temp * sg * (T(1) - sg);
                                g[ni] += d;
                                g[ci] -= d;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Ranking ops

/// Normalized nearest-anchor hinge per non-anchor:
/// max((p_j - p_hi)_+, (p_lo - p_j)_+) / R. Ties take the subgradient 0.
template <class T>
Var<T> anchor_hinge(const Var<T>& pred, std::span<const int> items, std::span<const int> lo,
                    std::span<const int> hi, T band) {
  detail::require(band > T(0), "anchor_hinge: R must be positive");
  detail::require(items.size() == lo.size() && items.size() == hi.size() && !items.empty(),
                  "anchor_hinge: index lists must be non-empty and aligned");
  const auto pv = pred.value();
  const std::size_t m = items.size();
  std::vector<T> out(m);
  // +1: upper violation active, -1: lower violation active, 0: none
  auto side = std::make_shared<std::vector<int>>(m, 0);
  for (std::size_t j = 0; j < m; ++j) {
    const T vp = std::max(T(0), pv[items[j]] - pv[hi[j]]);
    const T vm = std::max(T(0), pv[lo[j]] - pv[items[j]]);
    if (vp > T(0) && vp >= vm) (*side)[j] = 1;
    else if (vm > T(0)) (*side)[j] = -1;
    out[j] = std::max(vp, vm) / band;
  }
  auto pn = pred.ptr();
  std::vector<int> it(items.begin(), items.end()), l(lo.begin(), lo.end()), u(hi.begin(), hi.end());
  return pred.graph().make("anchor_hinge", Shape{static_cast<int>(m)}, std::move(out),
                           pred.requires_grad(), [pn, side, it, l, u, band](Node<T>& self) {
                             T* g = pn->grad_data();
                             for (std::size_t j = 0; j < it.size(); ++j) {
                               const T go = self.grad[j] / band;
                               if ((*side)[j] == 1) {
                                 g[it[j]] += go;
                                 g[u[j]] -= go;
                               } else if ((*side)[j] == -1) {
                                 g[l[j]] += go;
                                 g[it[j]] -= go;
                               }
                             }
                           });
}

/// Mean of the k largest entries (ties: lower index first).
template <class T>
Var<T> topk_mean(const Var<T>& v, int k) {
  detail::require(v.shape().rank() == 1 && k >= 1 && static_cast<std::size_t>(k) <= v.size(),
                  "topk_mean: need 1 <= k <= length");
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  const auto vals = v.value();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return vals[a] > vals[b]; });
  order.resize(k);
  T s = T(0);
  for (int i : order) s += vals[i];
  auto vn = v.ptr();
  return v.graph().make("topk_mean", Shape{}, {s / static_cast<T>(k)}, v.requires_grad(),
                        [vn, order, k](Node<T>& self) {
                          T* g = vn->grad_data();
                          for (int i : order) g[i] += self.grad[0] / static_cast<T>(k);
                        });
}

}  // namespace birqa::ad
