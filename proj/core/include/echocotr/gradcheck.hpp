#pragma once

#include <functional>
#include <vector>

#include "echocotr/tensor.hpp"

namespace echocotr {

/// Central-difference gradient of a scalar-valued closure w.r.t. each listed
/// tensor. Mutates elements in place (+/- step) and restores them, so `f`
/// must re-read the tensors on every call. Meant as a test oracle, usually
/// instantiated at double precision.
template <typename T, typename F>
std::vector<std::vector<T>> finite_diff_grad(const std::vector<TensorT<T>*>& params, F&& f,
                                             T step) {
    std::vector<std::vector<T>> grads;
    grads.reserve(params.size());
    for (TensorT<T>* p : params) {
        std::vector<T> g(static_cast<size_t>(p->size()), T(0));
        for (int64_t i = 0; i < p->size(); ++i) {
            const T saved = p->ptr()[i];
            p->ptr()[i] = saved + step;
            const T up = f();
            p->ptr()[i] = saved - step;
            const T down = f();
            p->ptr()[i] = saved;
            g[static_cast<size_t>(i)] = (up - down) / (T(2) * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

/// Max absolute elementwise difference, used to compare analytic vs numeric.
template <typename T>
T max_abs_diff(const T* a, const T* b, int64_t n) {
    T worst = T(0);
    for (int64_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace echocotr
