#pragma once

// Differentiable tensor operations. Layout is row-major NCHW for images and
// [rows, features] for token matrices. All heavy math funnels into the
// kernels in simd_gemm.hpp; everything else is simple sequential loops with
// a fixed accumulation order (bitwise reproducible run-to-run).

#include "repose/simd_gemm.hpp"
#include "repose/tensor.hpp"
#include "repose/rng.hpp"

#include <cmath>
#include <cstring>

namespace repose {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require_t<ShapeError>(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                                      shape_str(a.shape()) + " vs " +
                                                      shape_str(b.shape()));
}

// y2[b*OH*OW + p, c*kh*kw + i*kw + j] = x[b, c, oh*s+i-p, ow*s+j-p] (0 outside)
template <class T>
void im2col(const T* x, int64_t B, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* cols) {
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        for (int64_t b = 0; b < B; ++b)
            kern::transpose(C, H * W, x + b * C * H * W, cols + b * H * W * C);
        return;
    }
    const int64_t CKK = C * kh * kw;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                T* dst = cols + ((b * OH + oh) * OW + ow) * CKK;
                const int64_t ih0 = oh * stride - pad;
                const int64_t iw0 = ow * stride - pad;
                for (int64_t c = 0; c < C; ++c) {
                    const T* plane = x + (b * C + c) * H * W;
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = ih0 + i;
                        if (ih < 0 || ih >= H) {
                            for (int64_t j = 0; j < kw; ++j) *dst++ = T(0);
                        } else {
                            const T* row = plane + ih * W;
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t iw = iw0 + j;
                                *dst++ = (iw >= 0 && iw < W) ? row[iw] : T(0);
                            }
                        }
                    }
                }
            }
}

// Scatter-add inverse of im2col. Sequential over output positions.
template <class T>
void col2im_acc(const T* cols, int64_t B, int64_t C, int64_t H, int64_t W, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* dx) {
    const int64_t CKK = C * kh * kw;
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        std::vector<T> tmp(size_t(C * H * W));
        for (int64_t b = 0; b < B; ++b) {
            kern::transpose(H * W, C, cols + b * H * W * C, tmp.data());
            T* d = dx + b * C * H * W;
            for (int64_t i = 0; i < C * H * W; ++i) d[i] += tmp[i];
        }
        return;
    }
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                const T* src = cols + ((b * OH + oh) * OW + ow) * CKK;
                const int64_t ih0 = oh * stride - pad;
                const int64_t iw0 = ow * stride - pad;
                for (int64_t c = 0; c < C; ++c) {
                    T* plane = dx + (b * C + c) * H * W;
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = ih0 + i;
                        if (ih < 0 || ih >= H) {
                            src += kw;
                        } else {
                            T* row = plane + ih * W;
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t iw = iw0 + j;
                                if (iw >= 0 && iw < W) row[iw] += src[j];
                            }
                            src += kw;
                        }
                    }
                }
            }
}

}  // namespace detail

// ---------------------------------------------------------------- leaves

template <class T>
Tensor<T> randn(Shape shape, Rng& rng) {
    auto t = Tensor<T>::zeros(std::move(shape));
    // zeros() returns a leaf; filling values before first use is fine
    auto& v = const_cast<std::vector<T>&>(t.value());
    for (auto& x : v) x = T(rng.normal());
    return t;
}

// --------------------------------------------------------- elementwise ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> y(a.value());
    const auto& bv = b.value();
    for (size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("add", a.shape(), std::move(y), {an, bn}, [an, bn] {
        return [an, bn](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                auto& da = an->grad_buf();
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& db = bn->grad_buf();
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
            }
        };
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> y(a.value());
    const auto& bv = b.value();
    for (size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("sub", a.shape(), std::move(y), {an, bn}, [an, bn] {
        return [an, bn](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                auto& da = an->grad_buf();
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& db = bn->grad_buf();
                for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
            }
        };
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> y(a.value());
    const auto& bv = b.value();
    for (size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("mul", a.shape(), std::move(y), {an, bn}, [an, bn] {
        return [an, bn](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                auto& da = an->grad_buf();
                const auto& bv2 = bn->value;
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv2[i];
            }
            if (bn->requires_grad) {
                auto& db = bn->grad_buf();
                const auto& av2 = an->value;
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av2[i];
            }
        };
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> y(a.value());
    for (auto& v : y) v *= c;
    auto an = a.node();
    return detail::make_op<T>("scale", a.shape(), std::move(y), {an}, [an, c] {
        return [an, c](Node<T>& self) {
            if (!an->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& da = an->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
        };
    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> y(a.value());
    for (auto& v : y) v += c;
    auto an = a.node();
    return detail::make_op<T>("add_scalar", a.shape(), std::move(y), {an}, [an] {
        return [an](Node<T>& self) {
            if (!an->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& da = an->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        };
    });
}

// y[i, ...] = c[i] * x[i, ...] with one constant coefficient per leading-dim
// slice. c is plain data (per-sample schedule coefficients), not a tensor.
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, std::vector<T> c) {
    require_t<ShapeError>(!x.shape().empty() && x.shape()[0] == int64_t(c.size()),
                          "scale_rows: coefficient count " + std::to_string(c.size()) +
                              " vs leading extent of " + shape_str(x.shape()));
    const int64_t rows = x.shape()[0];
    const int64_t inner = numel(x.shape()) / rows;
    std::vector<T> y(x.value());
    for (int64_t i = 0; i < rows; ++i) {
        const T ci = c[i];
        T* p = y.data() + i * inner;
        for (int64_t j = 0; j < inner; ++j) p[j] *= ci;
    }
    auto xn = x.node();
    return detail::make_op<T>("scale_rows", x.shape(), std::move(y), {xn},
                              [xn, c = std::move(c), rows, inner] {
                                  return [xn, c, rows, inner](Node<T>& self) {
                                      if (!xn->requires_grad) return;
                                      const auto& g = self.grad_buf();
                                      auto& dx = xn->grad_buf();
                                      for (int64_t i = 0; i < rows; ++i) {
                                          const T ci = c[size_t(i)];
                                          const T* gp = g.data() + i * inner;
                                          T* dp = dx.data() + i * inner;
                                          for (int64_t j = 0; j < inner; ++j) dp[j] += ci * gp[j];
                                      }
                                  };
                              });
}

// Elementwise clamp to [lo, hi]; gradient passes only where x is strictly inside.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    require_t<ConfigError>(lo < hi, "clamp: lo must be < hi");
    std::vector<T> y(x.value());
    for (auto& v : y) v = v < lo ? lo : (v > hi ? hi : v);
    auto xn = x.node();
    return detail::make_op<T>("clamp", x.shape(), std::move(y), {xn}, [xn, lo, hi] {
        return [xn, lo, hi](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            const auto& xv = xn->value;
            auto& dx = xn->grad_buf();
            for (size_t i = 0; i < g.size(); ++i)
                if (xv[i] > lo && xv[i] < hi) dx[i] += g[i];
        };
    });
}

// ---------------------------------------------------------------- activations

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
    std::vector<T> y(x.value());
    for (auto& v : y) {
        const T s = T(1) / (T(1) + std::exp(-v));
        v = v * s;
    }
    auto xn = x.node();
    return detail::make_op<T>("silu", x.shape(), std::move(y), {xn}, [xn] {
        return [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            const auto& xv = xn->value;
            for (size_t i = 0; i < g.size(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-xv[i]));
                dx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
            }
        };
    });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<T> y(x.value());
    for (auto& v : y) v = T(0.5) * v * T(1.0 + std::erf(double(v) * inv_sqrt2));
    auto xn = x.node();
    return detail::make_op<T>("gelu", x.shape(), std::move(y), {xn}, [xn] {
        return [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            const auto& xv = xn->value;
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = double(xv[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                dx[i] += g[i] * T(cdf + v * pdf);
            }
        };
    });
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    const int64_t n = x.numel();
    double acc = 0;
    for (const T v : x.value()) acc += double(v);
    std::vector<T> y{T(acc / double(n))};
    auto xn = x.node();
    return detail::make_op<T>("mean_all", Shape{}, std::move(y), {xn}, [xn, n] {
        return [xn, n](Node<T>& self) {
            if (!xn->requires_grad) return;
            const T g = self.grad_buf()[0] / T(n);
            auto& dx = xn->grad_buf();
            for (auto& v : dx) v += g;
        };
    });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    double acc = 0;
    for (const T v : x.value()) acc += double(v);
    std::vector<T> y{T(acc)};
    auto xn = x.node();
    return detail::make_op<T>("sum_all", Shape{}, std::move(y), {xn}, [xn] {
        return [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            const T g = self.grad_buf()[0];
            auto& dx = xn->grad_buf();
            for (auto& v : dx) v += g;
        };
    });
}

// Mean squared error over every element.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require_same_shape(pred, target, "mse_loss");
    const int64_t n = pred.numel();
    const auto& pv = pred.value();
    const auto& tv = target.value();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(pv[i]) - double(tv[i]);
        acc += d * d;
    }
    std::vector<T> y{T(acc / double(n))};
    auto pn = pred.node(), tn = target.node();
    return detail::make_op<T>("mse_loss", Shape{}, std::move(y), {pn, tn}, [pn, tn, n] {
        return [pn, tn, n](Node<T>& self) {
            const T g = self.grad_buf()[0] * T(2) / T(n);
            const auto& pv2 = pn->value;
            const auto& tv2 = tn->value;
            if (pn->requires_grad) {
                auto& dp = pn->grad_buf();
                for (int64_t i = 0; i < n; ++i) dp[i] += g * (pv2[i] - tv2[i]);
            }
            if (tn->requires_grad) {
                auto& dt = tn->grad_buf();
                for (int64_t i = 0; i < n; ++i) dt[i] -= g * (pv2[i] - tv2[i]);
            }
        };
    });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require_t<ShapeError>(numel(shape) == x.numel(), "reshape: element count mismatch " +
                                                         shape_str(x.shape()) + " -> " +
                                                         shape_str(shape));
    std::vector<T> y(x.value());
    auto xn = x.node();
    return detail::make_op<T>("reshape", std::move(shape), std::move(y), {xn}, [xn] {
        return [xn](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    });
}

namespace detail {
template <class T>
inline void axis_split(const Tensor<T>& x, int64_t axis, int64_t& outer, int64_t& inner) {
    const Shape& s = x.shape();
    require_t<ShapeError>(axis >= 0 && axis < int64_t(s.size()),
                          "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    outer = inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

// General concatenation of two tensors along one axis.
template <class T>
Tensor<T> concat_axis(const Tensor<T>& a, const Tensor<T>& b, int64_t axis) {
    require_t<ShapeError>(a.shape().size() == b.shape().size(),
                          "concat_axis: rank mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    for (size_t i = 0; i < a.shape().size(); ++i)
        require_t<ShapeError>(int64_t(i) == axis || a.shape()[i] == b.shape()[i],
                              "concat_axis: shapes differ off-axis: " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
    int64_t outer, inner;
    detail::axis_split(a, axis, outer, inner);
    const int64_t da = a.shape()[axis], db = b.shape()[axis];
    Shape out = a.shape();
    out[axis] = da + db;
    std::vector<T> y(size_t(outer * (da + db) * inner));
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(y.data() + o * (da + db) * inner, a.value().data() + o * da * inner,
                    size_t(da * inner) * sizeof(T));
        std::memcpy(y.data() + o * (da + db) * inner + da * inner,
                    b.value().data() + o * db * inner, size_t(db * inner) * sizeof(T));
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("concat_axis", std::move(out), std::move(y), {an, bn},
                              [an, bn, outer, inner, da, db] {
        return [an, bn, outer, inner, da, db](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                auto& dst = an->grad_buf();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* gs = g.data() + o * (da + db) * inner;
                    T* d = dst.data() + o * da * inner;
                    for (int64_t k = 0; k < da * inner; ++k) d[k] += gs[k];
                }
            }
            if (bn->requires_grad) {
                auto& dst = bn->grad_buf();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* gs = g.data() + o * (da + db) * inner + da * inner;
                    T* d = dst.data() + o * db * inner;
                    for (int64_t k = 0; k < db * inner; ++k) d[k] += gs[k];
                }
            }
        };
    });
}

// y = x[..., start:start+len, ...] along one axis.
template <class T>
Tensor<T> slice_axis(const Tensor<T>& x, int64_t axis, int64_t start, int64_t len) {
    int64_t outer, inner;
    detail::axis_split(x, axis, outer, inner);
    const int64_t d = x.shape()[axis];
    require_t<ShapeError>(start >= 0 && len > 0 && start + len <= d,
                          "slice_axis: range [" + std::to_string(start) + "," +
                              std::to_string(start + len) + ") outside extent " +
                              std::to_string(d));
    Shape out = x.shape();
    out[axis] = len;
    std::vector<T> y(size_t(outer * len * inner));
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(y.data() + o * len * inner, x.value().data() + (o * d + start) * inner,
                    size_t(len * inner) * sizeof(T));
    auto xn = x.node();
    return detail::make_op<T>("slice_axis", std::move(out), std::move(y), {xn},
                              [xn, outer, inner, d, start, len] {
        return [xn, outer, inner, d, start, len](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            for (int64_t o = 0; o < outer; ++o) {
                const T* gs = g.data() + o * len * inner;
                T* dst = dx.data() + (o * d + start) * inner;
                for (int64_t k = 0; k < len * inner; ++k) dst[k] += gs[k];
            }
        };
    });
}

// [B,C,H,W] -> [B, H*W, C]
template <class T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
    require_t<ShapeError>(x.shape().size() == 4, "nchw_to_tokens: need 4D input");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t P = H * W;
    std::vector<T> y(size_t(B * P * C));
    for (int64_t b = 0; b < B; ++b)
        kern::transpose(C, P, x.value().data() + b * C * P, y.data() + b * P * C);
    auto xn = x.node();
    return detail::make_op<T>("nchw_to_tokens", Shape{B, P, C}, std::move(y), {xn}, [xn, B, C, P] {
        return [xn, B, C, P](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            std::vector<T> tmp(size_t(C * P));
            for (int64_t b = 0; b < B; ++b) {
                kern::transpose(P, C, g.data() + b * P * C, tmp.data());
                T* d = dx.data() + b * C * P;
                for (int64_t i = 0; i < C * P; ++i) d[i] += tmp[i];
            }
        };
    });
}

// [B,T,C] -> [B,C,H,W] with T == H*W
template <class T>
Tensor<T> tokens_to_nchw(const Tensor<T>& x, int64_t H, int64_t W) {
    require_t<ShapeError>(x.shape().size() == 3 && x.dim(1) == H * W,
                          "tokens_to_nchw: token count must equal H*W");
    const int64_t B = x.dim(0), P = H * W, C = x.dim(2);
    std::vector<T> y(size_t(B * C * P));
    for (int64_t b = 0; b < B; ++b)
        kern::transpose(P, C, x.value().data() + b * P * C, y.data() + b * C * P);
    auto xn = x.node();
    return detail::make_op<T>("tokens_to_nchw", Shape{B, C, H, W}, std::move(y), {xn},
                              [xn, B, C, P] {
        return [xn, B, C, P](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            std::vector<T> tmp(size_t(P * C));
            for (int64_t b = 0; b < B; ++b) {
                kern::transpose(C, P, g.data() + b * C * P, tmp.data());
                T* d = dx.data() + b * P * C;
                for (int64_t i = 0; i < P * C; ++i) d[i] += tmp[i];
            }
        };
    });
}

// Concatenate along the token axis. b may have batch 1, in which case its
// rows are shared by (broadcast to) every sample of a.
template <class T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
    require_t<ShapeError>(a.shape().size() == 3 && b.shape().size() == 3 &&
                              a.dim(2) == b.dim(2) && (b.dim(0) == a.dim(0) || b.dim(0) == 1),
                          "concat_tokens: need [B,Ta,C] and [B|1,Tb,C]");
    const int64_t B = a.dim(0), Ta = a.dim(1), Tb = b.dim(1), C = a.dim(2);
    const bool bcast = b.dim(0) == 1;
    std::vector<T> y(size_t(B * (Ta + Tb) * C));
    for (int64_t i = 0; i < B; ++i) {
        std::memcpy(y.data() + i * (Ta + Tb) * C, a.value().data() + i * Ta * C,
                    size_t(Ta * C) * sizeof(T));
        std::memcpy(y.data() + i * (Ta + Tb) * C + Ta * C,
                    b.value().data() + (bcast ? 0 : i) * Tb * C, size_t(Tb * C) * sizeof(T));
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("concat_tokens", Shape{B, Ta + Tb, C}, std::move(y), {an, bn},
                              [an, bn, B, Ta, Tb, C, bcast] {
        return [an, bn, B, Ta, Tb, C, bcast](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                auto& da = an->grad_buf();
                for (int64_t i = 0; i < B; ++i) {
                    const T* gs = g.data() + i * (Ta + Tb) * C;
                    T* d = da.data() + i * Ta * C;
                    for (int64_t k = 0; k < Ta * C; ++k) d[k] += gs[k];
                }
            }
            if (bn->requires_grad) {
                auto& db = bn->grad_buf();
                for (int64_t i = 0; i < B; ++i) {
                    const T* gs = g.data() + i * (Ta + Tb) * C + Ta * C;
                    T* d = db.data() + (bcast ? 0 : i) * Tb * C;
                    for (int64_t k = 0; k < Tb * C; ++k) d[k] += gs[k];
                }
            }
        };
    });
}

// Concatenate along the channel axis of NCHW maps.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_t<ShapeError>(a.shape().size() == 4 && b.shape().size() == 4 &&
                              a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                              a.dim(3) == b.dim(3),
                          "concat_channels: incompatible shapes " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
    const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), P = a.dim(2) * a.dim(3);
    std::vector<T> y(size_t(B * (Ca + Cb) * P));
    for (int64_t i = 0; i < B; ++i) {
        std::memcpy(y.data() + i * (Ca + Cb) * P, a.value().data() + i * Ca * P,
                    size_t(Ca * P) * sizeof(T));
        std::memcpy(y.data() + i * (Ca + Cb) * P + Ca * P, b.value().data() + i * Cb * P,
                    size_t(Cb * P) * sizeof(T));
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("concat_channels", Shape{B, Ca + Cb, a.dim(2), a.dim(3)},
                              std::move(y), {an, bn}, [an, bn, B, Ca, Cb, P] {
        return [an, bn, B, Ca, Cb, P](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                auto& da = an->grad_buf();
                for (int64_t i = 0; i < B; ++i) {
                    const T* gs = g.data() + i * (Ca + Cb) * P;
                    T* d = da.data() + i * Ca * P;
                    for (int64_t k = 0; k < Ca * P; ++k) d[k] += gs[k];
                }
            }
            if (bn->requires_grad) {
                auto& db = bn->grad_buf();
                for (int64_t i = 0; i < B; ++i) {
                    const T* gs = g.data() + i * (Ca + Cb) * P + Ca * P;
                    T* d = db.data() + i * Cb * P;
                    for (int64_t k = 0; k < Cb * P; ++k) d[k] += gs[k];
                }
            }
        };
    });
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    require_t<ShapeError>(x.shape().size() == 4, "upsample_nearest2x: need 4D input");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> y(size_t(B * C * 4 * H * W));
    const T* src = x.value().data();
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t h = 0; h < H; ++h) {
            const T* row = src + bc * H * W + h * W;
            T* out0 = y.data() + bc * 4 * H * W + (2 * h) * 2 * W;
            T* out1 = out0 + 2 * W;
            for (int64_t w = 0; w < W; ++w) {
                out0[2 * w] = out0[2 * w + 1] = row[w];
                out1[2 * w] = out1[2 * w + 1] = row[w];
            }
        }
    auto xn = x.node();
    return detail::make_op<T>("upsample_nearest2x", Shape{B, C, 2 * H, 2 * W}, std::move(y),
                              {xn}, [xn, B, C, H, W] {
        return [xn, B, C, H, W](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t h = 0; h < H; ++h) {
                    const T* g0 = g.data() + bc * 4 * H * W + (2 * h) * 2 * W;
                    const T* g1 = g0 + 2 * W;
                    T* d = dx.data() + bc * H * W + h * W;
                    for (int64_t w = 0; w < W; ++w)
                        d[w] += g0[2 * w] + g0[2 * w + 1] + g1[2 * w] + g1[2 * w + 1];
                }
        };
    });
}

// y[b,c,h,w] = x[b,c,h,w] + v[b,c]  (per-sample per-channel shift)
template <class T>
Tensor<T> add_channel_vec(const Tensor<T>& x, const Tensor<T>& v) {
    require_t<ShapeError>(x.shape().size() == 4 && v.shape().size() == 2 &&
                              v.dim(0) == x.dim(0) && v.dim(1) == x.dim(1),
                          "add_channel_vec: need [B,C,H,W] and [B,C]");
    const int64_t BC = x.dim(0) * x.dim(1), P = x.dim(2) * x.dim(3);
    std::vector<T> y(x.value());
    for (int64_t bc = 0; bc < BC; ++bc) {
        const T s = v.value()[bc];
        T* row = y.data() + bc * P;
        for (int64_t p = 0; p < P; ++p) row[p] += s;
    }
    auto xn = x.node(), vn = v.node();
    return detail::make_op<T>("add_channel_vec", x.shape(), std::move(y), {xn, vn},
                              [xn, vn, BC, P] {
        return [xn, vn, BC, P](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (xn->requires_grad) {
                auto& dx = xn->grad_buf();
                for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (vn->requires_grad) {
                auto& dv = vn->grad_buf();
                for (int64_t bc = 0; bc < BC; ++bc) {
                    const T* row = g.data() + bc * P;
                    T acc = T(0);
                    for (int64_t p = 0; p < P; ++p) acc += row[p];
                    dv[bc] += acc;
                }
            }
        };
    });
}

// [B,T,C] -> [B*heads, T, C/heads]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads) {
    require_t<ShapeError>(x.shape().size() == 3 && x.dim(2) % heads == 0,
                          "split_heads: feature dim must divide by head count");
    const int64_t B = x.dim(0), Tk = x.dim(1), C = x.dim(2), D = C / heads;
    std::vector<T> y(size_t(B * Tk * C));
    const T* src = x.value().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < Tk; ++t)
                std::memcpy(y.data() + (((b * heads + h) * Tk) + t) * D,
                            src + (b * Tk + t) * C + h * D, size_t(D) * sizeof(T));
    auto xn = x.node();
    return detail::make_op<T>("split_heads", Shape{B * heads, Tk, D}, std::move(y), {xn},
                              [xn, B, Tk, D, heads] {
        return [xn, B, Tk, D, heads](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            const int64_t C = heads * D;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t t = 0; t < Tk; ++t) {
                        const T* gs = g.data() + (((b * heads + h) * Tk) + t) * D;
                        T* d = dx.data() + (b * Tk + t) * C + h * D;
                        for (int64_t k = 0; k < D; ++k) d[k] += gs[k];
                    }
        };
    });
}

// [B*heads, T, D] -> [B, T, heads*D]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, int64_t heads) {
    require_t<ShapeError>(x.shape().size() == 3 && x.dim(0) % heads == 0,
                          "merge_heads: leading dim must divide by head count");
    const int64_t B = x.dim(0) / heads, Tk = x.dim(1), D = x.dim(2), C = heads * D;
    std::vector<T> y(size_t(B * Tk * C));
    const T* src = x.value().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < Tk; ++t)
                std::memcpy(y.data() + (b * Tk + t) * C + h * D,
                            src + (((b * heads + h) * Tk) + t) * D, size_t(D) * sizeof(T));
    auto xn = x.node();
    return detail::make_op<T>("merge_heads", Shape{B, Tk, C}, std::move(y), {xn},
                              [xn, B, Tk, D, heads] {
        return [xn, B, Tk, D, heads](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            auto& dx = xn->grad_buf();
            const int64_t C = heads * D;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t t = 0; t < Tk; ++t) {
                        const T* gs = g.data() + (b * Tk + t) * C + h * D;
                        T* d = dx.data() + (((b * heads + h) * Tk) + t) * D;
                        for (int64_t k = 0; k < D; ++k) d[k] += gs[k];
                    }
        };
    });
}

// ---------------------------------------------------------------- norms

// GroupNorm over [B,C,H,W]: statistics per (sample, group), affine per channel.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, int64_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
    require_t<ShapeError>(x.shape().size() == 4, "group_norm: need 4D input");
    const int64_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    require_t<ShapeError>(C % groups == 0, "group_norm: channels must divide by groups");
    require_t<ShapeError>(gamma.numel() == C && beta.numel() == C,
                          "group_norm: affine params must have C elements");
    const int64_t CG = C / groups;
    const int64_t m = CG * P;
    std::vector<T> y(x.value().size());
    std::vector<T> mu(size_t(B * groups)), ivar(size_t(B * groups));
    const T* xv = x.value().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t g = 0; g < groups; ++g) {
            const T* xs = xv + (b * C + g * CG) * P;
            double s = 0;
            for (int64_t i = 0; i < m; ++i) s += double(xs[i]);
            const double mean = s / double(m);
            double vs = 0;
            for (int64_t i = 0; i < m; ++i) {
                const double d = double(xs[i]) - mean;
                vs += d * d;
            }
            const double var = vs / double(m);
            mu[b * groups + g] = T(mean);
            ivar[b * groups + g] = T(1.0 / std::sqrt(var + double(eps)));
        }
    const T* gv = gamma.value().data();
    const T* bv = beta.value().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T mn = mu[b * groups + c / CG];
            const T iv = ivar[b * groups + c / CG];
            const T ga = gv[c], be = bv[c];
            const T* xs = xv + (b * C + c) * P;
            T* ys = y.data() + (b * C + c) * P;
            for (int64_t p = 0; p < P; ++p) ys[p] = (xs[p] - mn) * iv * ga + be;
        }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op<T>("group_norm", x.shape(), std::move(y), {xn, gn, bn},
                              [xn, gn, bn, B, C, P, groups, CG, m, mu = std::move(mu),
                               ivar = std::move(ivar)] {
        return [xn, gn, bn, B, C, P, groups, CG, m, mu, ivar](Node<T>& self) {
            const auto& g = self.grad_buf();
            const T* xv2 = xn->value.data();
            const T* gv2 = gn->value.data();
            std::vector<T>* dxp = xn->requires_grad ? &xn->grad_buf() : nullptr;
            std::vector<T>* dgp = gn->requires_grad ? &gn->grad_buf() : nullptr;
            std::vector<T>* dbp = bn->requires_grad ? &bn->grad_buf() : nullptr;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t gr = 0; gr < groups; ++gr) {
                    const T mn = mu[b * groups + gr];
                    const T iv = ivar[b * groups + gr];
                    const T* xs = xv2 + (b * C + gr * CG) * P;
                    const T* gs = g.data() + (b * C + gr * CG) * P;
                    if (dxp) {
                        // two reductions then the pointwise rule
                        double s1 = 0, s2 = 0;
                        for (int64_t c = 0; c < CG; ++c) {
                            const T ga = gv2[gr * CG + c];
                            for (int64_t p = 0; p < P; ++p) {
                                const T dxh = gs[c * P + p] * ga;
                                const T xh = (xs[c * P + p] - mn) * iv;
                                s1 += double(dxh);
                                s2 += double(dxh) * double(xh);
                            }
                        }
                        const T c1 = T(s1 / double(m)), c2 = T(s2 / double(m));
                        T* dx = dxp->data() + (b * C + gr * CG) * P;
                        for (int64_t c = 0; c < CG; ++c) {
                            const T ga = gv2[gr * CG + c];
                            for (int64_t p = 0; p < P; ++p) {
                                const T dxh = gs[c * P + p] * ga;
                                const T xh = (xs[c * P + p] - mn) * iv;
                                dx[c * P + p] += iv * (dxh - c1 - xh * c2);
                            }
                        }
                    }
                    if (dgp || dbp) {
                        for (int64_t c = 0; c < CG; ++c) {
                            double sg = 0, sb = 0;
                            for (int64_t p = 0; p < P; ++p) {
                                const T xh = (xs[c * P + p] - mn) * iv;
                                sg += double(gs[c * P + p]) * double(xh);
                                sb += double(gs[c * P + p]);
                            }
                            if (dgp) (*dgp)[gr * CG + c] += T(sg);
                            if (dbp) (*dbp)[gr * CG + c] += T(sb);
                        }
                    }
                }
        };
    });
}

// LayerNorm over the last axis of [..., C].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const int64_t C = x.shape().back();
    require_t<ShapeError>(gamma.numel() == C && beta.numel() == C,
                          "layer_norm: affine params must match last axis");
    const int64_t R = x.numel() / C;
    std::vector<T> y(x.value().size());
    std::vector<T> mu(static_cast<size_t>(R));
    std::vector<T> ivar(static_cast<size_t>(R));
    const T* xv = x.value().data();
    const T* gv = gamma.value().data();
    const T* bv = beta.value().data();
    for (int64_t r = 0; r < R; ++r) {
        const T* xs = xv + r * C;
        double s = 0;
        for (int64_t i = 0; i < C; ++i) s += double(xs[i]);
        const double mean = s / double(C);
        double vs = 0;
        for (int64_t i = 0; i < C; ++i) {
            const double d = double(xs[i]) - mean;
            vs += d * d;
        }
        mu[r] = T(mean);
        ivar[r] = T(1.0 / std::sqrt(vs / double(C) + double(eps)));
        T* ys = y.data() + r * C;
        for (int64_t i = 0; i < C; ++i) ys[i] = (xs[i] - mu[r]) * ivar[r] * gv[i] + bv[i];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op<T>("layer_norm", x.shape(), std::move(y), {xn, gn, bn},
                              [xn, gn, bn, R, C, mu = std::move(mu), ivar = std::move(ivar)] {
        return [xn, gn, bn, R, C, mu, ivar](Node<T>& self) {
            const auto& g = self.grad_buf();
            const T* xv2 = xn->value.data();
            const T* gv2 = gn->value.data();
            std::vector<T>* dxp = xn->requires_grad ? &xn->grad_buf() : nullptr;
            std::vector<T>* dgp = gn->requires_grad ? &gn->grad_buf() : nullptr;
            std::vector<T>* dbp = bn->requires_grad ? &bn->grad_buf() : nullptr;
            for (int64_t r = 0; r < R; ++r) {
                const T* xs = xv2 + r * C;
                const T* gs = g.data() + r * C;
                const T mn = mu[r], iv = ivar[r];
                if (dxp) {
                    double s1 = 0, s2 = 0;
                    for (int64_t i = 0; i < C; ++i) {
                        const T dxh = gs[i] * gv2[i];
                        const T xh = (xs[i] - mn) * iv;
                        s1 += double(dxh);
                        s2 += double(dxh) * double(xh);
                    }
                    const T c1 = T(s1 / double(C)), c2 = T(s2 / double(C));
                    T* dx = dxp->data() + r * C;
                    for (int64_t i = 0; i < C; ++i) {
                        const T dxh = gs[i] * gv2[i];
                        const T xh = (xs[i] - mn) * iv;
                        dx[i] += iv * (dxh - c1 - xh * c2);
                    }
                }
                if (dgp)
                    for (int64_t i = 0; i < C; ++i)
                        (*dgp)[i] += gs[i] * (xs[i] - mn) * iv;
                if (dbp)
                    for (int64_t i = 0; i < C; ++i) (*dbp)[i] += gs[i];
            }
        };
    });
}

// Row softmax of x/scale over the last axis (scale = sqrt(d) in attention),
// with max subtraction for numerical stability (mandatory: exp of raw
// logits overflows fast).
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, T scl) {
    require_t<ConfigError>(scl > T(0), "softmax_rows: scale must be positive");
    const int64_t N = x.shape().back();
    require_t<ShapeError>(N >= 1, "softmax_rows: empty rows");
    const int64_t R = x.numel() / N;
    const T inv_scl = T(1) / scl;
    std::vector<T> y(x.value().size());
    const T* xv = x.value().data();
    for (int64_t r = 0; r < R; ++r) {
        const T* xs = xv + r * N;
        T* ys = y.data() + r * N;
        T mx = xs[0] * inv_scl;
        for (int64_t i = 1; i < N; ++i) mx = std::max(mx, xs[i] * inv_scl);
        double s = 0;
        for (int64_t i = 0; i < N; ++i) {
            const T e = std::exp(xs[i] * inv_scl - mx);
            ys[i] = e;
            s += double(e);
        }
        const T inv = T(1.0 / s);
        for (int64_t i = 0; i < N; ++i) ys[i] *= inv;
    }
    auto xn = x.node();
    return detail::make_op<T>("softmax_rows", x.shape(), std::move(y), {xn},
                              [xn, R, N, inv_scl] {
        return [xn, R, N, inv_scl](Node<T>& self) {
            if (!xn->requires_grad) return;
            const auto& g = self.grad_buf();
            const T* yv = self.value.data();
            auto& dx = xn->grad_buf();
            for (int64_t r = 0; r < R; ++r) {
                const T* ys = yv + r * N;
                const T* gs = g.data() + r * N;
                double dot = 0;
                for (int64_t i = 0; i < N; ++i) dot += double(gs[i]) * double(ys[i]);
                T* d = dx.data() + r * N;
                for (int64_t i = 0; i < N; ++i) d[i] += inv_scl * ys[i] * (gs[i] - T(dot));
            }
        };
    });
}

// ---------------------------------------------------------------- matmuls

// [M,K] x [K,N] -> [M,N]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_t<ShapeError>(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
                          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> y(size_t(M * N));
    kern::gemm(M, N, K, a.value().data(), b.value().data(), y.data());
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("matmul", Shape{M, N}, std::move(y), {an, bn}, [an, bn, M, K, N] {
        return [an, bn, M, K, N](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                std::vector<T> bT(size_t(K * N));
                kern::transpose(K, N, bn->value.data(), bT.data());
                kern::gemm_acc(M, K, N, g.data(), bT.data(), an->grad_buf().data());
            }
            if (bn->requires_grad) {
                std::vector<T> aT(size_t(M * K));
                kern::transpose(M, K, an->value.data(), aT.data());
                kern::gemm_acc(K, N, M, aT.data(), g.data(), bn->grad_buf().data());
            }
        };
    });
}

// x[..., N] x W[O,N]^T + b -> [..., O]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
    const Shape& xs = x.shape();
    require_t<ShapeError>(W.shape().size() == 2 && xs.back() == W.dim(1),
                          "linear: input features " + shape_str(xs) + " do not match weight " +
                              shape_str(W.shape()));
    const int64_t N = W.dim(1), O = W.dim(0);
    const int64_t M = x.numel() / N;
    const bool has_bias = b.defined();
    if (has_bias)
        require_t<ShapeError>(b.numel() == O, "linear: bias must have one value per output");
    std::vector<T> y(size_t(M * O));
    {
        std::vector<T> WT(size_t(N * O));
        kern::transpose(O, N, W.value().data(), WT.data());
        kern::gemm(M, O, N, x.value().data(), WT.data(), y.data());
    }
    if (has_bias) {
        const T* bv = b.value().data();
        for (int64_t i = 0; i < M; ++i) {
            T* row = y.data() + i * O;
            for (int64_t j = 0; j < O; ++j) row[j] += bv[j];
        }
    }
    Shape out(xs.begin(), xs.end() - 1);
    out.push_back(O);
    auto xn = x.node(), Wn = W.node();
    std::vector<NodePtr<T>> parents{xn, Wn};
    NodePtr<T> bn = has_bias ? b.node() : nullptr;
    if (bn) parents.push_back(bn);
    return detail::make_op<T>("linear", std::move(out), std::move(y), std::move(parents),
                              [xn, Wn, bn, M, N, O] {
        return [xn, Wn, bn, M, N, O](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (xn->requires_grad)
                kern::gemm_acc(M, N, O, g.data(), Wn->value.data(), xn->grad_buf().data());
            if (Wn->requires_grad) {
                std::vector<T> gT(size_t(O * M));
                kern::transpose(M, O, g.data(), gT.data());
                kern::gemm_acc(O, N, M, gT.data(), xn->value.data(), Wn->grad_buf().data());
            }
            if (bn && bn->requires_grad) kern::colsum_acc(M, O, g.data(), bn->grad_buf().data());
        };
    });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W) {
    return linear(x, W, Tensor<T>());
}

// A[G,M,K] x B[G,N,K]^T -> [G,M,N]  (attention logits)
template <class T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_t<ShapeError>(a.shape().size() == 3 && b.shape().size() == 3 &&
                              a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                          "bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    const int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
    std::vector<T> y(size_t(G * M * N));
    {
        std::vector<T> bT(size_t(K * N));
        for (int64_t g = 0; g < G; ++g) {
            kern::transpose(N, K, b.value().data() + g * N * K, bT.data());
            kern::gemm(M, N, K, a.value().data() + g * M * K, bT.data(), y.data() + g * M * N);
        }
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("bmm_nt", Shape{G, M, N}, std::move(y), {an, bn},
                              [an, bn, G, M, K, N] {
        return [an, bn, G, M, K, N](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad)
                for (int64_t i = 0; i < G; ++i)
                    kern::gemm_acc(M, K, N, g.data() + i * M * N, bn->value.data() + i * N * K,
                                   an->grad_buf().data() + i * M * K);
            if (bn->requires_grad) {
                std::vector<T> gT(size_t(N * M));
                for (int64_t i = 0; i < G; ++i) {
                    kern::transpose(M, N, g.data() + i * M * N, gT.data());
                    kern::gemm_acc(N, K, M, gT.data(), an->value.data() + i * M * K,
                                   bn->grad_buf().data() + i * N * K);
                }
            }
        };
    });
}

// A[G,M,K] x B[G,K,N] -> [G,M,N]  (attention value mix)
template <class T>
Tensor<T> bmm_nn(const Tensor<T>& a, const Tensor<T>& b) {
    require_t<ShapeError>(a.shape().size() == 3 && b.shape().size() == 3 &&
                              a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                          "bmm_nn: incompatible shapes " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    const int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    std::vector<T> y(size_t(G * M * N));
    for (int64_t g = 0; g < G; ++g)
        kern::gemm(M, N, K, a.value().data() + g * M * K, b.value().data() + g * K * N,
                   y.data() + g * M * N);
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>("bmm_nn", Shape{G, M, N}, std::move(y), {an, bn},
                              [an, bn, G, M, K, N] {
        return [an, bn, G, M, K, N](Node<T>& self) {
            const auto& g = self.grad_buf();
            if (an->requires_grad) {
                std::vector<T> bT(size_t(N * K));
                for (int64_t i = 0; i < G; ++i) {
                    kern::transpose(K, N, bn->value.data() + i * K * N, bT.data());
                    kern::gemm_acc(M, K, N, g.data() + i * M * N, bT.data(),
                                   an->grad_buf().data() + i * M * K);
                }
            }
            if (bn->requires_grad) {
                std::vector<T> aT(size_t(K * M));
                for (int64_t i = 0; i < G; ++i) {
                    kern::transpose(M, K, an->value.data() + i * M * K, aT.data());
                    kern::gemm_acc(K, N, M, aT.data(), g.data() + i * M * N,
                                   bn->grad_buf().data() + i * K * N);
                }
            }
        };
    });
}

// ---------------------------------------------------------------- conv2d

// x[B,C,H,W] * W[O,C,kh,kw] (+ bias[O]) with given stride/padding -> [B,O,OH,OW]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
    require_t<ShapeError>(x.shape().size() == 4 && W.shape().size() == 4 &&
                              x.dim(1) == W.dim(1),
                          "conv2d: incompatible shapes " + shape_str(x.shape()) + " * " +
                              shape_str(W.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
    const int64_t O = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    require_t<ShapeError>(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    require_t<ShapeError>((H + 2 * pad - kh) % stride == 0 && (Wd + 2 * pad - kw) % stride == 0,
                          "conv2d: non-integral output extent for input " +
                              shape_str(x.shape()) + ", kernel " + shape_str(W.shape()) +
                              ", stride " + std::to_string(stride) + ", pad " +
                              std::to_string(pad));
    const int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const int64_t OW = (Wd + 2 * pad - kw) / stride + 1;
    require_t<ShapeError>(OH > 0 && OW > 0, "conv2d: kernel larger than padded input");
    const int64_t CKK = C * kh * kw;
    const int64_t MR = B * OH * OW;
    const bool has_bias = bias.defined();
    if (has_bias)
        require_t<ShapeError>(bias.numel() == O, "conv2d: bias must have one value per filter");

    std::vector<T> y2(size_t(MR * O));
    {
        std::vector<T> cols(size_t(MR * CKK));
        detail::im2col(x.value().data(), B, C, H, Wd, kh, kw, stride, pad, OH, OW, cols.data());
        std::vector<T> WT(size_t(CKK * O));
        kern::transpose(O, CKK, W.value().data(), WT.data());
        kern::gemm(MR, O, CKK, cols.data(), WT.data(), y2.data());
    }
    if (has_bias) {
        const T* bv = bias.value().data();
        for (int64_t i = 0; i < MR; ++i) {
            T* row = y2.data() + i * O;
            for (int64_t j = 0; j < O; ++j) row[j] += bv[j];
        }
    }
    // rows are (b,oh,ow) x O; rearrange to NCHW
    std::vector<T> y(size_t(B * O * OH * OW));
    for (int64_t b = 0; b < B; ++b)
        kern::transpose(OH * OW, O, y2.data() + b * OH * OW * O, y.data() + b * O * OH * OW);
    y2.clear();
    y2.shrink_to_fit();

    auto xn = x.node(), Wn = W.node();
    std::vector<NodePtr<T>> parents{xn, Wn};
    NodePtr<T> bn = has_bias ? bias.node() : nullptr;
    if (bn) parents.push_back(bn);
    return detail::make_op<T>("conv2d", Shape{B, O, OH, OW}, std::move(y), std::move(parents),
                              [xn, Wn, bn, B, C, H, Wd, O, kh, kw, stride, pad, OH, OW, CKK,
                               MR] {
        return [xn, Wn, bn, B, C, H, Wd, O, kh, kw, stride, pad, OH, OW, CKK,
                MR](Node<T>& self) {
            const auto& g = self.grad_buf();
            // NCHW grad -> (b,oh,ow) rows
            std::vector<T> g2(size_t(MR * O));
            for (int64_t b = 0; b < B; ++b)
                kern::transpose(O, OH * OW, g.data() + b * O * OH * OW,
                                g2.data() + b * OH * OW * O);
            if (xn->requires_grad) {
                std::vector<T> dcols(size_t(MR * CKK));
                kern::gemm(MR, CKK, O, g2.data(), Wn->value.data(), dcols.data());
                detail::col2im_acc(dcols.data(), B, C, H, Wd, kh, kw, stride, pad, OH, OW,
                                   xn->grad_buf().data());
            }
            if (Wn->requires_grad) {
                // cols are recomputed here instead of retained by the tape:
                // the im2col pass is much cheaper than holding B*OH*OW*CKK
                // floats alive for every conv in the graph.
                std::vector<T> cols(size_t(MR * CKK));
                detail::im2col(xn->value.data(), B, C, H, Wd, kh, kw, stride, pad, OH, OW,
                               cols.data());
                std::vector<T> g2T(size_t(O * MR));
                kern::transpose(MR, O, g2.data(), g2T.data());
                kern::gemm_acc(O, CKK, MR, g2T.data(), cols.data(), Wn->grad_buf().data());
            }
            if (bn && bn->requires_grad)
                kern::colsum_acc(MR, O, g2.data(), bn->grad_buf().data());
        };
    });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& W, int64_t stride, int64_t pad) {
    return conv2d(x, W, Tensor<T>(), stride, pad);
}

// ----------------------------------------------------- timestep embedding

// Sinusoidal embedding of (integer) diffusion timesteps; a plain leaf.
// emb[b] = [cos(t_b * f_0) .. cos(t_b * f_{h-1}), sin(t_b * f_0) .. ],
// f_i = exp(-ln(10000) * i / h), h = dim/2.
template <class T>
Tensor<T> timestep_embedding(const std::vector<int64_t>& ts, int64_t dim) {
    require_t<ConfigError>(dim % 2 == 0, "timestep_embedding: dim must be even");
    const int64_t B = int64_t(ts.size()), half = dim / 2;
    std::vector<T> v(size_t(B * dim));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
            const double arg = double(ts[b]) * f;
            v[b * dim + i] = T(std::cos(arg));
            v[b * dim + half + i] = T(std::sin(arg));
        }
    return Tensor<T>::from_data(Shape{B, dim}, std::move(v));
}

}  // namespace repose
