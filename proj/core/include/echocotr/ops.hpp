#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <initializer_list>
#include <optional>

#include "echocotr/tape.hpp"
#include "echocotr/tensor.hpp"

namespace echocotr {

namespace detail {

template <typename T>
inline void check_finite(const TensorT<T>& t, const char* op) {
    for (T v : *t.data)
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value produced by ") + op);
}

template <typename T>
inline bool track(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
    if (!tape) return false;
    bool any = false;
    for (const TensorT<T>* t : inputs) any |= t->requires_grad;
    if (!any) return false;
    for (const TensorT<T>* t : inputs)
        if (t->requires_grad) t->ensure_grad();
    return true;
}

template <typename T>
inline void mark_output(TensorT<T>& out) {
    out.requires_grad = true;
    out.ensure_grad();
}

/// Walks the row-major index space of `shape` while maintaining a second flat
/// index given by per-axis strides `mapped` (entries may be zero or permuted).
/// fn(flat, mapped_flat) is called once per element, in row-major order.
template <typename F>
inline void walk_mapped(const Shape& shape, const Shape& mapped, F&& fn) {
    const int r = static_cast<int>(shape.size());
    const int64_t n = numel(shape);
    if (r == 0) {
        fn(int64_t(0), int64_t(0));
        return;
    }
    Shape coord(static_cast<size_t>(r), 0);
    int64_t m = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        fn(flat, m);
        for (int ax = r - 1; ax >= 0; --ax) {
            coord[ax] += 1;
            m += mapped[ax];
            if (coord[ax] < shape[ax]) break;
            m -= coord[ax] * mapped[ax];
            coord[ax] = 0;
        }
    }
}

// ---- serial-inner GEMM kernels; deterministic accumulation order ----------
// C[M,N] += A[M,K] * B[K,N]
template <typename T>
inline void gemm_acc(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t m = 0; m < M; ++m) {
        T* crow = c + m * N;
        const T* arow = a + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            if (av == T(0)) continue;
            const T* brow = b + k * N;
            for (int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

// C[K,N] += A^T * B with A[M,K], B[M,N]
template <typename T>
inline void gemm_at_b(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        const T* brow = b + m * N;
        for (int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            if (av == T(0)) continue;
            T* crow = c + k * N;
            for (int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

// C[M,K] += A * B^T with A[M,N], B[K,N]
template <typename T>
inline void gemm_a_bt(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t m = 0; m < M; ++m) {
        const T* arow = a + m * N;
        T* crow = c + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const T* brow = b + k * N;
            T acc = T(0);
            for (int64_t n = 0; n < N; ++n) acc += arow[n] * brow[n];
            crow[k] += acc;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    if (a.shape != b.shape)
        throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    TensorT<T> out(a.shape);
    const int64_t n = out.size();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::check_finite(out, "add");
    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(out);
        tape->record([a, b, out]() {
            const T* g = out.grad_ptr();
            const int64_t n = out.size();
            if (a.requires_grad) {
                T* ga = a.grad_ptr();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b.requires_grad) {
                T* gb = b.grad_ptr();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    if (a.shape != b.shape)
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    TensorT<T> out(a.shape);
    const int64_t n = out.size();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    detail::check_finite(out, "mul");
    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(out);
        tape->record([a, b, out]() {
            const T* g = out.grad_ptr();
            const int64_t n = out.size();
            if (a.requires_grad) {
                T* ga = a.grad_ptr();
                const T* pb = b.ptr();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
            }
            if (b.requires_grad) {
                T* gb = b.grad_ptr();
                const T* pa = a.ptr();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s, TapeT<T>* tape = nullptr) {
    TensorT<T> out(a.shape);
    const int64_t n = out.size();
    const T* pa = a.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = s * pa[i];
    detail::check_finite(out, "scale");
    if (detail::track(tape, {&a})) {
        detail::mark_output(out);
        tape->record([a, out, s]() {
            const T* g = out.grad_ptr();
            T* ga = a.grad_ptr();
            const int64_t n = out.size();
            for (int64_t i = 0; i < n; ++i) ga[i] += s * g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    TensorT<T> out(x.shape);
    const int64_t n = out.size();
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const double v = px[i];
        po[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
    }
    detail::check_finite(out, "gelu");
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        tape->record([x, out]() {
            const T* g = out.grad_ptr();
            T* gx = x.grad_ptr();
            const T* px = x.ptr();
            const int64_t n = out.size();
            for (int64_t i = 0; i < n; ++i) {
                const double v = px[i];
                const double u = kC * (v + kA * v * v * v);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                gx[i] += static_cast<T>(g[i] * d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape, TapeT<T>* tape = nullptr) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
    TensorT<T> out;
    out.shape = std::move(new_shape);
    out.data = x.data;  // shared storage, fresh grad store
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        tape->record([x, out]() {
            const T* g = out.grad_ptr();
            T* gx = x.grad_ptr();
            const int64_t n = out.size();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> transpose_axes(const TensorT<T>& x, const std::vector<int>& perm, TapeT<T>* tape = nullptr) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeError("transpose_axes: bad permutation length");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
            throw ShapeError("transpose_axes: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[i] = x.shape[perm[i]];
    const Shape in_strides = strides_of(x.shape);
    Shape mapped(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) mapped[i] = in_strides[perm[i]];

    TensorT<T> out(out_shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    detail::walk_mapped(out_shape, mapped, [&](int64_t o, int64_t i) { po[o] = px[i]; });
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        tape->record([x, out, out_shape, mapped]() {
            const T* g = out.grad_ptr();
            T* gx = x.grad_ptr();
            detail::walk_mapped(out_shape, mapped, [&](int64_t o, int64_t i) { gx[i] += g[o]; });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    double acc = 0.0;
    for (T v : *x.data) acc += v;
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc));
    detail::check_finite(out, "sum_all");
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        tape->record([x, out]() {
            const T g = out.grad_ptr()[0];
            T* gx = x.grad_ptr();
            const int64_t n = x.size();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

/// Mean over the given axes (e.g. the global average pool over T,H,W).
/// Reduced axes are dropped from the output shape.
template <typename T>
TensorT<T> mean_over_axes(const TensorT<T>& x, const std::vector<int>& axes, TapeT<T>* tape = nullptr) {
    const int r = x.rank();
    std::vector<bool> reduce(static_cast<size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r) throw ShapeError("mean_over_axes: axis out of range");
        if (reduce[static_cast<size_t>(ax)]) throw ShapeError("mean_over_axes: duplicate axis");
        reduce[static_cast<size_t>(ax)] = true;
    }
    Shape out_shape;
    int64_t count = 1;
    for (int i = 0; i < r; ++i) {
        if (reduce[static_cast<size_t>(i)]) count *= x.shape[i];
        else out_shape.push_back(x.shape[i]);
    }
    const Shape out_strides = strides_of(out_shape);
    Shape mapped(static_cast<size_t>(r), 0);
    int kept = 0;
    for (int i = 0; i < r; ++i)
        if (!reduce[static_cast<size_t>(i)]) mapped[i] = out_strides[kept++];

    TensorT<T> out(out_shape);
    {
        std::vector<double> acc(static_cast<size_t>(numel(out_shape)), 0.0);
        const T* px = x.ptr();
        detail::walk_mapped(x.shape, mapped, [&](int64_t i, int64_t o) { acc[o] += px[i]; });
        T* po = out.ptr();
        for (int64_t i = 0; i < out.size(); ++i) po[i] = static_cast<T>(acc[i] / double(count));
    }
    detail::check_finite(out, "mean_over_axes");
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        const Shape in_shape = x.shape;
        tape->record([x, out, in_shape, mapped, count]() {
            const T* g = out.grad_ptr();
            T* gx = x.grad_ptr();
            const T inv = T(1) / static_cast<T>(count);
            detail::walk_mapped(in_shape, mapped, [&](int64_t i, int64_t o) { gx[i] += g[o] * inv; });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

/// [..., M, K] x [..., K, N] -> [..., M, N]; leading (batch) dims must match.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
        throw ShapeError("matmul: need equal-rank tensors of rank >= 2");
    const int r = a.rank();
    for (int i = 0; i < r - 2; ++i)
        if (a.shape[i] != b.shape[i]) throw ShapeError("matmul: batch dims differ");
    const int64_t M = a.shape[r - 2], K = a.shape[r - 1];
    const int64_t Kb = b.shape[r - 2], N = b.shape[r - 1];
    if (K != Kb)
        throw ShapeError("matmul: inner dims differ: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    int64_t batch = 1;
    for (int i = 0; i < r - 2; ++i) batch *= a.shape[i];
    Shape out_shape(a.shape);
    out_shape[r - 2] = M;
    out_shape[r - 1] = N;
    TensorT<T> out(out_shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t g = 0; g < batch; ++g)
        detail::gemm_acc(pa + g * M * K, pb + g * K * N, po + g * M * N, M, K, N);
    detail::check_finite(out, "matmul");
    if (detail::track(tape, {&a, &b})) {
        detail::mark_output(out);
        tape->record([a, b, out, batch, M, K, N]() {
            const T* g = out.grad_ptr();
            if (a.requires_grad) {
                T* ga = a.grad_ptr();
                const T* pb = b.ptr();
                for (int64_t i = 0; i < batch; ++i)  // dA = dC * B^T
                    detail::gemm_a_bt(g + i * M * N, pb + i * K * N, ga + i * M * K, M, K, N);
            }
            if (b.requires_grad) {
                T* gb = b.grad_ptr();
                const T* pa = a.ptr();
                for (int64_t i = 0; i < batch; ++i)  // dB = A^T * dC
                    detail::gemm_at_b(pa + i * M * K, g + i * M * N, gb + i * K * N, M, K, N);
            }
        });
    }
    return out;
}

/// Affine map along the last axis: y = x W^T + b, W is [D_out, D_in].
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias = nullptr,
                  TapeT<T>* tape = nullptr) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
    const int64_t d_in = w.shape[1], d_out = w.shape[0];
    if (x.rank() < 1 || x.shape.back() != d_in)
        throw ShapeError("linear: input last dim " + shape_str(x.shape) + " does not match weight " +
                         shape_str(w.shape));
    if (bias && (bias->rank() != 1 || bias->shape[0] != d_out))
        throw ShapeError("linear: bias shape mismatch");
    const int64_t rows = x.size() / d_in;
    Shape out_shape(x.shape);
    out_shape.back() = d_out;
    TensorT<T> out(out_shape);
    T* po = out.ptr();
    if (bias) {
        const T* pbias = bias->ptr();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < d_out; ++c) po[r * d_out + c] = pbias[c];
    }
    detail::gemm_a_bt(x.ptr(), w.ptr(), po, rows, d_out, d_in);  // out += x * W^T
    detail::check_finite(out, "linear");

    const bool tracked = bias ? detail::track(tape, {&x, &w, bias}) : detail::track(tape, {&x, &w});
    if (tracked) {
        detail::mark_output(out);
        std::optional<TensorT<T>> bcopy;
        if (bias) bcopy = *bias;
        tape->record([x, w, bcopy, out, rows, d_in, d_out]() {
            const T* g = out.grad_ptr();
            if (x.requires_grad)  // dX = dY * W
                detail::gemm_acc(g, w.ptr(), x.grad_ptr(), rows, d_out, d_in);
            if (w.requires_grad)  // dW = dY^T * X
                detail::gemm_at_b(g, x.ptr(), w.grad_ptr(), rows, d_out, d_in);
            if (bcopy && bcopy->requires_grad) {
                T* gb = bcopy->grad_ptr();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < d_out; ++c) gb[c] += g[r * d_out + c];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

/// Softmax along the last axis, stabilized by max subtraction.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    if (x.rank() < 1) throw ShapeError("softmax: rank >= 1 required");
    const int64_t k = x.shape.back();
    const int64_t rows = x.size() / k;
    TensorT<T> out(x.shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = px + r * k;
        T* o = po + r * k;
        T mx = in[0];
        for (int64_t i = 1; i < k; ++i) mx = std::max(mx, in[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < k; ++i) {
            const double e = std::exp(double(in[i] - mx));
            o[i] = static_cast<T>(e);
            denom += e;
        }
        const T inv = static_cast<T>(1.0 / denom);
        for (int64_t i = 0; i < k; ++i) o[i] *= inv;
    }
    detail::check_finite(out, "softmax");
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        tape->record([x, out, rows, k]() {
            const T* g = out.grad_ptr();
            const T* y = out.ptr();
            T* gx = x.grad_ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * k;
                const T* yr = y + r * k;
                T* gxr = gx + r * k;
                double dot = 0.0;
                for (int64_t i = 0; i < k; ++i) dot += double(gr[i]) * yr[i];
                for (int64_t i = 0; i < k; ++i)
                    gxr[i] += yr[i] * (gr[i] - static_cast<T>(dot));
            }
        });
    }
    return out;
}

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// gamma/beta affine.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5), TapeT<T>* tape = nullptr) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
    const int64_t d = x.shape.back();
    if (gamma.shape != Shape{d} || beta.shape != Shape{d})
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
    if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
    const int64_t rows = x.size() / d;
    TensorT<T> out(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* px = x.ptr();
    const T* pg = gamma.ptr();
    const T* pb = beta.ptr();
    T* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = px + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += in[i];
        mean /= double(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double c = in[i] - mean;
            var += c * c;
        }
        var /= double(d);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + double(eps)));
        (*inv_std)[r] = istd;
        T* xh = xhat->data() + r * d;
        T* o = po + r * d;
        for (int64_t i = 0; i < d; ++i) {
            xh[i] = static_cast<T>((in[i] - mean) * istd);
            o[i] = pg[i] * xh[i] + pb[i];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::track(tape, {&x, &gamma, &beta})) {
        detail::mark_output(out);
        tape->record([x, gamma, beta, out, xhat, inv_std, rows, d]() {
            const T* g = out.grad_ptr();
            const T* pg = gamma.ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* xh = xhat->data() + r * d;
                if (x.requires_grad) {
                    T* gx = x.grad_ptr() + r * d;
                    double s1 = 0.0, s2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
                    for (int64_t i = 0; i < d; ++i) {
                        const double dxh = double(gr[i]) * pg[i];
                        s1 += dxh;
                        s2 += dxh * xh[i];
                    }
                    s1 /= double(d);
                    s2 /= double(d);
                    const T istd = (*inv_std)[r];
                    for (int64_t i = 0; i < d; ++i) {
                        const double dxh = double(gr[i]) * pg[i];
                        gx[i] += static_cast<T>(istd * (dxh - s1 - double(xh[i]) * s2));
                    }
                }
                if (gamma.requires_grad) {
                    T* gg = gamma.grad_ptr();
                    for (int64_t i = 0; i < d; ++i) gg[i] += gr[i] * xh[i];
                }
                if (beta.requires_grad) {
                    T* gb = beta.grad_ptr();
                    for (int64_t i = 0; i < d; ++i) gb[i] += gr[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch_norm3d
// ---------------------------------------------------------------------------

/// Per-channel batch normalization state for [N,C,T,H,W] tensors. Running
/// stats live in plain tensors so they serialize with the weights.
template <typename T>
struct BatchNorm3dT {
    TensorT<T> gamma, beta;              // trainable
    TensorT<T> running_mean, running_var;  // state
    TensorT<T> running_count;            // [1]; > 0 once stats were ever updated
    T momentum = T(0.1);
    T eps = T(1e-5);

    explicit BatchNorm3dT(int64_t channels = 1)
        : gamma(TensorT<T>::ones({channels})),
          beta(TensorT<T>::zeros({channels})),
          running_mean(TensorT<T>::zeros({channels})),
          running_var(TensorT<T>::ones({channels})),
          running_count(TensorT<T>::zeros({1})) {}

    bool initialized() const { return running_count[0] > T(0); }
};

using BatchNorm3d = BatchNorm3dT<float>;

template <typename T>
TensorT<T> batch_norm3d(const TensorT<T>& x, BatchNorm3dT<T>& bn, bool training,
                        TapeT<T>* tape = nullptr) {
    if (x.rank() != 5) throw ShapeError("batch_norm3d: input must be [N,C,T,H,W]");
    const int64_t n = x.shape[0], c = x.shape[1];
    const int64_t spatial = x.shape[2] * x.shape[3] * x.shape[4];
    if (bn.gamma.shape != Shape{c})
        throw ShapeError("batch_norm3d: channel count mismatch");
    if (!training && !bn.initialized())
        throw ConfigError("batch_norm3d: eval mode before any training update");

    const int64_t m = n * spatial;  // elements per channel
    std::vector<T> mean_c(static_cast<size_t>(c)), istd_c(static_cast<size_t>(c));
    const T* px = x.ptr();
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double mean = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const T* p = px + (b * c + ch) * spatial;
                for (int64_t i = 0; i < spatial; ++i) mean += p[i];
            }
            mean /= double(m);
            double var = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const T* p = px + (b * c + ch) * spatial;
                for (int64_t i = 0; i < spatial; ++i) {
                    const double d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= double(m);  // population variance for normalization
            mean_c[ch] = static_cast<T>(mean);
            istd_c[ch] = static_cast<T>(1.0 / std::sqrt(var + double(bn.eps)));
            const double unbiased = m > 1 ? var * double(m) / double(m - 1) : var;
            bn.running_mean[ch] =
                static_cast<T>((1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean);
            bn.running_var[ch] =
                static_cast<T>((1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * unbiased);
        }
        bn.running_count[0] += T(1);
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean_c[ch] = bn.running_mean[ch];
            istd_c[ch] = static_cast<T>(1.0 / std::sqrt(double(bn.running_var[ch]) + double(bn.eps)));
        }
    }

    TensorT<T> out(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    {
        T* po = out.ptr();
        T* ph = xhat->data();
        const T* pg = bn.gamma.ptr();
        const T* pb = bn.beta.ptr();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t ch = 0; ch < c; ++ch) {
                const int64_t base = (b * c + ch) * spatial;
                const T mu = mean_c[ch], istd = istd_c[ch], ga = pg[ch], be = pb[ch];
                for (int64_t i = 0; i < spatial; ++i) {
                    const T xh = (px[base + i] - mu) * istd;
                    ph[base + i] = xh;
                    po[base + i] = ga * xh + be;
                }
            }
    }
    detail::check_finite(out, "batch_norm3d");

    if (detail::track(tape, {&x, &bn.gamma, &bn.beta})) {
        detail::mark_output(out);
        TensorT<T> gamma = bn.gamma, beta = bn.beta;
        auto istd_keep = std::make_shared<std::vector<T>>(istd_c);
        tape->record([x, gamma, beta, out, xhat, istd_keep, n, c, spatial, m, training]() {
            const T* g = out.grad_ptr();
            const T* ph = xhat->data();
            const T* pg = gamma.ptr();
            for (int64_t ch = 0; ch < c; ++ch) {
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (int64_t b = 0; b < n; ++b) {
                    const int64_t base = (b * c + ch) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        sum_dy += g[base + i];
                        sum_dy_xh += double(g[base + i]) * ph[base + i];
                    }
                }
                if (gamma.requires_grad) gamma.grad_ptr()[ch] += static_cast<T>(sum_dy_xh);
                if (beta.requires_grad) beta.grad_ptr()[ch] += static_cast<T>(sum_dy);
                if (x.requires_grad) {
                    T* gx = x.grad_ptr();
                    const T istd = (*istd_keep)[ch];
                    const T ga = pg[ch];
                    if (training) {
                        const double mean_dxh = double(ga) * sum_dy / double(m);
                        const double mean_dxh_xh = double(ga) * sum_dy_xh / double(m);
                        for (int64_t b = 0; b < n; ++b) {
                            const int64_t base = (b * c + ch) * spatial;
                            for (int64_t i = 0; i < spatial; ++i) {
                                const double dxh = double(ga) * g[base + i];
                                gx[base + i] += static_cast<T>(
                                    istd * (dxh - mean_dxh - double(ph[base + i]) * mean_dxh_xh));
                            }
                        }
                    } else {
                        for (int64_t b = 0; b < n; ++b) {
                            const int64_t base = (b * c + ch) * spatial;
                            for (int64_t i = 0; i < spatial; ++i)
                                gx[base + i] += static_cast<T>(double(ga) * istd * g[base + i]);
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// drop_path
// ---------------------------------------------------------------------------

/// Stochastic depth on the residual branch: in training, zeroes the whole
/// per-sample branch with probability `rate` and rescales survivors by
/// 1/(1-rate). Identity in eval mode or at rate 0.
template <typename T>
TensorT<T> drop_path(const TensorT<T>& x, double rate, bool training, RngStream& rng,
                     TapeT<T>* tape = nullptr) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("drop_path: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    if (x.rank() < 1) throw ShapeError("drop_path: rank >= 1 required");
    const int64_t n = x.shape[0];
    const int64_t per = x.size() / n;
    auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < n; ++i)
        (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;
    TensorT<T> out(x.shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const T s = (*mask)[i];
        for (int64_t j = 0; j < per; ++j) po[i * per + j] = s * px[i * per + j];
    }
    if (detail::track(tape, {&x})) {
        detail::mark_output(out);
        tape->record([x, out, mask, n, per]() {
            const T* g = out.grad_ptr();
            T* gx = x.grad_ptr();
            for (int64_t i = 0; i < n; ++i) {
                const T s = (*mask)[i];
                for (int64_t j = 0; j < per; ++j) gx[i * per + j] += s * g[i * per + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> mse_loss(const TensorT<T>& pred, const TensorT<T>& target, TapeT<T>* tape = nullptr) {
    if (pred.shape != target.shape)
        throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape) + " vs " +
                         shape_str(target.shape));
    const int64_t n = pred.size();
    const T* pp = pred.ptr();
    const T* pt = target.ptr();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(pp[i]) - double(pt[i]);
        acc += d * d;
    }
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / double(n)));
    detail::check_finite(out, "mse_loss");
    if (detail::track(tape, {&pred, &target})) {
        detail::mark_output(out);
        tape->record([pred, target, out, n]() {
            const T g = out.grad_ptr()[0];
            const T* pp = pred.ptr();
            const T* pt = target.ptr();
            const T f = g * T(2) / static_cast<T>(n);
            if (pred.requires_grad) {
                T* gp = pred.grad_ptr();
                for (int64_t i = 0; i < n; ++i) gp[i] += f * (pp[i] - pt[i]);
            }
            if (target.requires_grad) {
                T* gt = target.grad_ptr();
                for (int64_t i = 0; i < n; ++i) gt[i] -= f * (pp[i] - pt[i]);
            }
        });
    }
    return out;
}

}  // namespace echocotr
