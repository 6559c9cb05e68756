#pragma once

#include <array>

#include "echocotr/ops.hpp"

namespace echocotr {

using Dims3 = std::array<int64_t, 3>;

enum class ConvAlgo {
    Auto,    // pointwise/depthwise/im2col specializations where they apply
    Direct,  // the 7-nested-loop reference path
    Im2col,  // force the column-buffer GEMM path
};

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

namespace detail {

struct ConvGeom {
    int64_t n, ci, ti, hi, wi;
    int64_t co, kt, kh, kw;
    int64_t st, sh, sw, pt, ph, pw;
    int64_t to, ho, wo;
    int64_t groups, cig, cog;  // channels per group on each side
    int64_t k3() const { return kt * kh * kw; }
    int64_t in_spatial() const { return ti * hi * wi; }
    int64_t out_spatial() const { return to * ho * wo; }
};

template <typename T>
ConvGeom conv_check(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                    Dims3 stride, Dims3 padding, int64_t groups) {
    if (x.rank() != 5) throw ShapeError("conv3d: input must be [N,C,T,H,W], got " + shape_str(x.shape));
    if (w.rank() != 5) throw ShapeError("conv3d: weight must be [Co,Ci/g,kT,kH,kW], got " + shape_str(w.shape));
    ConvGeom g;
    g.n = x.shape[0]; g.ci = x.shape[1]; g.ti = x.shape[2]; g.hi = x.shape[3]; g.wi = x.shape[4];
    g.co = w.shape[0]; g.kt = w.shape[2]; g.kh = w.shape[3]; g.kw = w.shape[4];
    g.st = stride[0]; g.sh = stride[1]; g.sw = stride[2];
    g.pt = padding[0]; g.ph = padding[1]; g.pw = padding[2];
    g.groups = groups;
    if (groups < 1) throw ConfigError("conv3d: groups must be >= 1");
    if (g.ci % groups != 0 || g.co % groups != 0)
        throw ConfigError("conv3d: groups=" + std::to_string(groups) + " must divide channels " +
                          std::to_string(g.ci) + "/" + std::to_string(g.co));
    g.cig = g.ci / groups;
    g.cog = g.co / groups;
    if (w.shape[1] != g.cig)
        throw ShapeError("conv3d: weight in-channels " + std::to_string(w.shape[1]) +
                         " != input channels per group " + std::to_string(g.cig));
    if (g.st < 1 || g.sh < 1 || g.sw < 1) throw ConfigError("conv3d: stride must be positive");
    if (g.pt < 0 || g.ph < 0 || g.pw < 0) throw ConfigError("conv3d: padding must be non-negative");
    g.to = conv_out_dim(g.ti, g.kt, g.st, g.pt);
    g.ho = conv_out_dim(g.hi, g.kh, g.sh, g.ph);
    g.wo = conv_out_dim(g.wi, g.kw, g.sw, g.pw);
    if (g.to < 1 || g.ho < 1 || g.wo < 1)
        throw ShapeError("conv3d: kernel does not fit padded input " + shape_str(x.shape));
    if (bias && (bias->rank() != 1 || bias->shape[0] != g.co))
        throw ShapeError("conv3d: bias must be [" + std::to_string(g.co) + "]");
    return g;
}

// Reference path: plain nested loops, double accumulation, zero padding.
template <typename T>
void conv_forward_direct(const ConvGeom& d, const T* x, const T* w, const T* bias, T* y) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t co = 0; co < d.co; ++co) {
            const int64_t grp = co / d.cog;
            T* yrow = y + (n * d.co + co) * d.out_spatial();
            const T* wbase = w + co * d.cig * d.k3();
            for (int64_t to = 0; to < d.to; ++to)
                for (int64_t ho = 0; ho < d.ho; ++ho)
                    for (int64_t wo = 0; wo < d.wo; ++wo) {
                        double acc = bias ? double(bias[co]) : 0.0;
                        for (int64_t cg = 0; cg < d.cig; ++cg) {
                            const int64_t ci = grp * d.cig + cg;
                            const T* xc = x + (n * d.ci + ci) * d.in_spatial();
                            const T* wc = wbase + cg * d.k3();
                            for (int64_t kt = 0; kt < d.kt; ++kt) {
                                const int64_t ti = to * d.st - d.pt + kt;
                                if (ti < 0 || ti >= d.ti) continue;
                                for (int64_t kh = 0; kh < d.kh; ++kh) {
                                    const int64_t hi = ho * d.sh - d.ph + kh;
                                    if (hi < 0 || hi >= d.hi) continue;
                                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                                        const int64_t wi = wo * d.sw - d.pw + kw;
                                        if (wi < 0 || wi >= d.wi) continue;
                                        acc += double(xc[(ti * d.hi + hi) * d.wi + wi]) *
                                               double(wc[(kt * d.kh + kh) * d.kw + kw]);
                                    }
                                }
                            }
                        }
                        yrow[(to * d.ho + ho) * d.wo + wo] = static_cast<T>(acc);
                    }
        }
}

// y[n,g] = W_g [cog, cig*k3] * cols [cig*k3, P]
template <typename T>
void conv_forward_im2col(const ConvGeom& d, const T* x, const T* w, const T* bias, T* y) {
    const int64_t p_total = d.out_spatial();
    const int64_t rows = d.cig * d.k3();
    std::vector<T> cols(static_cast<size_t>(rows * p_total));
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t grp = 0; grp < d.groups; ++grp) {
            T* col = cols.data();
            for (int64_t cg = 0; cg < d.cig; ++cg) {
                const int64_t ci = grp * d.cig + cg;
                const T* xc = x + (n * d.ci + ci) * d.in_spatial();
                for (int64_t kt = 0; kt < d.kt; ++kt)
                    for (int64_t kh = 0; kh < d.kh; ++kh)
                        for (int64_t kw = 0; kw < d.kw; ++kw) {
                            for (int64_t to = 0; to < d.to; ++to) {
                                const int64_t ti = to * d.st - d.pt + kt;
                                if (ti < 0 || ti >= d.ti) {
                                    std::fill(col, col + d.ho * d.wo, T(0));
                                    col += d.ho * d.wo;
                                    continue;
                                }
                                for (int64_t ho = 0; ho < d.ho; ++ho) {
                                    const int64_t hi = ho * d.sh - d.ph + kh;
                                    if (hi < 0 || hi >= d.hi) {
                                        std::fill(col, col + d.wo, T(0));
                                        col += d.wo;
                                        continue;
                                    }
                                    const T* xrow = xc + (ti * d.hi + hi) * d.wi;
                                    for (int64_t wo = 0; wo < d.wo; ++wo) {
                                        const int64_t wi = wo * d.sw - d.pw + kw;
                                        *col++ = (wi < 0 || wi >= d.wi) ? T(0) : xrow[wi];
                                    }
                                }
                            }
                        }
            }
            T* yg = y + (n * d.co + grp * d.cog) * p_total;
            if (bias) {
                for (int64_t c = 0; c < d.cog; ++c)
                    std::fill(yg + c * p_total, yg + (c + 1) * p_total, bias[grp * d.cog + c]);
            } else {
                std::fill(yg, yg + d.cog * p_total, T(0));
            }
            gemm_acc(w + grp * d.cog * rows, cols.data(), yg, d.cog, rows, p_total);
        }
}

// Depthwise: groups == ci == co, one kernel per channel.
template <typename T>
void conv_forward_depthwise(const ConvGeom& d, const T* x, const T* w, const T* bias, T* y) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.co; ++c) {
            const T* xc = x + (n * d.ci + c) * d.in_spatial();
            const T* wc = w + c * d.k3();
            T* yc = y + (n * d.co + c) * d.out_spatial();
            const T b = bias ? bias[c] : T(0);
            for (int64_t to = 0; to < d.to; ++to) {
                const int64_t t0 = to * d.st - d.pt;
                for (int64_t ho = 0; ho < d.ho; ++ho) {
                    const int64_t h0 = ho * d.sh - d.ph;
                    for (int64_t wo = 0; wo < d.wo; ++wo) {
                        const int64_t w0 = wo * d.sw - d.pw;
                        T acc = b;
                        for (int64_t kt = 0; kt < d.kt; ++kt) {
                            const int64_t ti = t0 + kt;
                            if (ti < 0 || ti >= d.ti) continue;
                            for (int64_t kh = 0; kh < d.kh; ++kh) {
                                const int64_t hi = h0 + kh;
                                if (hi < 0 || hi >= d.hi) continue;
                                const T* xrow = xc + (ti * d.hi + hi) * d.wi;
                                const T* wrow = wc + (kt * d.kh + kh) * d.kw;
                                const int64_t lo = std::max<int64_t>(0, -w0);
                                const int64_t hi_k = std::min(d.kw, d.wi - w0);
                                for (int64_t kw = lo; kw < hi_k; ++kw)
                                    acc += xrow[w0 + kw] * wrow[kw];
                            }
                        }
                        yc[(to * d.ho + ho) * d.wo + wo] = acc;
                    }
                }
            }
        }
}

// Gather-form input gradient: each input element sums its contributions.
template <typename T>
void conv_backward_input(const ConvGeom& d, const T* w, const T* gy, T* gx) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t ci = 0; ci < d.ci; ++ci) {
            const int64_t grp = ci / d.cig;
            const int64_t cg = ci % d.cig;
            T* gxc = gx + (n * d.ci + ci) * d.in_spatial();
            for (int64_t ti = 0; ti < d.ti; ++ti)
                for (int64_t hi = 0; hi < d.hi; ++hi)
                    for (int64_t wi = 0; wi < d.wi; ++wi) {
                        double acc = 0.0;
                        for (int64_t kt = 0; kt < d.kt; ++kt) {
                            const int64_t tn = ti + d.pt - kt;
                            if (tn < 0 || tn % d.st != 0) continue;
                            const int64_t to = tn / d.st;
                            if (to >= d.to) continue;
                            for (int64_t kh = 0; kh < d.kh; ++kh) {
                                const int64_t hn = hi + d.ph - kh;
                                if (hn < 0 || hn % d.sh != 0) continue;
                                const int64_t ho = hn / d.sh;
                                if (ho >= d.ho) continue;
                                for (int64_t kw = 0; kw < d.kw; ++kw) {
                                    const int64_t wn = wi + d.pw - kw;
                                    if (wn < 0 || wn % d.sw != 0) continue;
                                    const int64_t wo = wn / d.sw;
                                    if (wo >= d.wo) continue;
                                    for (int64_t cog_i = 0; cog_i < d.cog; ++cog_i) {
                                        const int64_t co = grp * d.cog + cog_i;
                                        acc += double(w[((co * d.cig + cg) * d.kt + kt) * d.kh * d.kw +
                                                        kh * d.kw + kw]) *
                                               double(gy[(n * d.co + co) * d.out_spatial() +
                                                         (to * d.ho + ho) * d.wo + wo]);
                                    }
                                }
                            }
                        }
                        gxc[(ti * d.hi + hi) * d.wi + wi] += static_cast<T>(acc);
                    }
        }
}

// Gather-form weight gradient: each weight element sums over the batch.
template <typename T>
void conv_backward_weight(const ConvGeom& d, const T* x, const T* gy, T* gw) {
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < d.co; ++co) {
        const int64_t grp = co / d.cog;
        for (int64_t cg = 0; cg < d.cig; ++cg) {
            const int64_t ci = grp * d.cig + cg;
            for (int64_t kt = 0; kt < d.kt; ++kt)
                for (int64_t kh = 0; kh < d.kh; ++kh)
                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                        double acc = 0.0;
                        for (int64_t n = 0; n < d.n; ++n) {
                            const T* xc = x + (n * d.ci + ci) * d.in_spatial();
                            const T* gyc = gy + (n * d.co + co) * d.out_spatial();
                            for (int64_t to = 0; to < d.to; ++to) {
                                const int64_t ti = to * d.st - d.pt + kt;
                                if (ti < 0 || ti >= d.ti) continue;
                                for (int64_t ho = 0; ho < d.ho; ++ho) {
                                    const int64_t hi = ho * d.sh - d.ph + kh;
                                    if (hi < 0 || hi >= d.hi) continue;
                                    const T* xrow = xc + (ti * d.hi + hi) * d.wi;
                                    const T* gyrow = gyc + (to * d.ho + ho) * d.wo;
                                    for (int64_t wo = 0; wo < d.wo; ++wo) {
                                        const int64_t wi = wo * d.sw - d.pw + kw;
                                        if (wi < 0 || wi >= d.wi) continue;
                                        acc += double(xrow[wi]) * double(gyrow[wo]);
                                    }
                                }
                            }
                        }
                        gw[((co * d.cig + cg) * d.kt + kt) * d.kh * d.kw + kh * d.kw + kw] +=
                            static_cast<T>(acc);
                    }
        }
    }
}

template <typename T>
void conv_backward_bias(const ConvGeom& d, const T* gy, T* gb) {
    for (int64_t co = 0; co < d.co; ++co) {
        double acc = 0.0;
        for (int64_t n = 0; n < d.n; ++n) {
            const T* gyc = gy + (n * d.co + co) * d.out_spatial();
            for (int64_t i = 0; i < d.out_spatial(); ++i) acc += gyc[i];
        }
        gb[co] += static_cast<T>(acc);
    }
}

}  // namespace detail

/// 3D convolution over [N,C,T,H,W] with zero padding and grouped channels.
/// Auto picks a pointwise GEMM, a depthwise kernel, or im2col for groups==1;
/// Direct forces the loop-nest reference all paths are tested against.
template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias, Dims3 stride,
                  Dims3 padding, int64_t groups = 1, TapeT<T>* tape = nullptr,
                  ConvAlgo algo = ConvAlgo::Auto) {
    const detail::ConvGeom d = detail::conv_check(x, w, bias, stride, padding, groups);
    TensorT<T> out({d.n, d.co, d.to, d.ho, d.wo});
    const T* pbias = bias ? bias->ptr() : nullptr;

    const bool pointwise = d.k3() == 1 && d.st == 1 && d.sh == 1 && d.sw == 1 && d.pt == 0 &&
                           d.ph == 0 && d.pw == 0 && groups == 1;
    const bool depthwise = groups == d.ci && d.ci == d.co;

    if (algo == ConvAlgo::Direct) {
        detail::conv_forward_direct(d, x.ptr(), w.ptr(), pbias, out.ptr());
    } else if (pointwise) {
        // 1x1x1 stride-1: y[n] = W * x[n] as a plain GEMM per sample
        const int64_t p_total = d.out_spatial();
        T* po = out.ptr();
        if (pbias) {
            for (int64_t n = 0; n < d.n; ++n)
                for (int64_t c = 0; c < d.co; ++c)
                    std::fill(po + (n * d.co + c) * p_total, po + (n * d.co + c + 1) * p_total,
                              pbias[c]);
        }
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < d.n; ++n)
            detail::gemm_acc(w.ptr(), x.ptr() + n * d.ci * p_total, po + n * d.co * p_total, d.co,
                             d.ci, p_total);
    } else if (depthwise && algo == ConvAlgo::Auto) {
        detail::conv_forward_depthwise(d, x.ptr(), w.ptr(), pbias, out.ptr());
    } else if (algo == ConvAlgo::Im2col || groups == 1) {
        detail::conv_forward_im2col(d, x.ptr(), w.ptr(), pbias, out.ptr());
    } else {
        detail::conv_forward_direct(d, x.ptr(), w.ptr(), pbias, out.ptr());
    }
    detail::check_finite(out, "conv3d");

    const bool tracked =
        bias ? detail::track(tape, {&x, &w, bias}) : detail::track(tape, {&x, &w});
    if (tracked) {
        detail::mark_output(out);
        std::optional<TensorT<T>> bcopy;
        if (bias) bcopy = *bias;
        tape->record([x, w, bcopy, out, d, pointwise]() {
            const T* gy = out.grad_ptr();
            if (x.requires_grad) {
                if (pointwise) {
                    const int64_t p_total = d.out_spatial();
#pragma omp parallel for schedule(static)
                    for (int64_t n = 0; n < d.n; ++n)
                        detail::gemm_at_b(w.ptr(), gy + n * d.co * p_total,
                                          x.grad_ptr() + n * d.ci * p_total, d.co, d.ci, p_total);
                } else {
                    detail::conv_backward_input(d, w.ptr(), gy, x.grad_ptr());
                }
            }
            if (w.requires_grad) {
                if (pointwise) {
                    const int64_t p_total = d.out_spatial();
                    for (int64_t n = 0; n < d.n; ++n)
                        detail::gemm_a_bt(gy + n * d.co * p_total, x.ptr() + n * d.ci * p_total,
                                          w.grad_ptr(), d.co, d.ci, p_total);
                } else {
                    detail::conv_backward_weight(d, x.ptr(), gy, w.grad_ptr());
                }
            }
            if (bcopy && bcopy->requires_grad) detail::conv_backward_bias(d, gy, bcopy->grad_ptr());
        });
    }
    return out;
}

}  // namespace echocotr
