#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "echocotr/error.hpp"
#include "echocotr/rng.hpp"

namespace echocotr {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

/// Row-major strides in elements.
inline Shape strides_of(const Shape& shape) {
    Shape s(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        s[i] = acc;
        acc *= shape[i];
    }
    return s;
}

/// Dense row-major n-d array. Buffers are shared so copies alias the same
/// storage; autodiff closures capture tensors by value and write through the
/// shared grad store (empty until first use, so allocation through any copy
/// is visible to all). Rank 0 is a scalar (one element).
template <typename T>
struct TensorT {
    static_assert(std::is_floating_point_v<T>);

    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<std::vector<T>> grad;  // empty vector until ensure_grad()
    bool requires_grad = false;

    TensorT()
        : shape{},
          data(std::make_shared<std::vector<T>>(1, T(0))),
          grad(std::make_shared<std::vector<T>>()) {}

    explicit TensorT(Shape s, T fill = T(0))
        : shape(std::move(s)), grad(std::make_shared<std::vector<T>>()) {
        check_shape(shape);
        data = std::make_shared<std::vector<T>>(static_cast<size_t>(numel(shape)), fill);
    }

    TensorT(Shape s, std::vector<T> values)
        : shape(std::move(s)), grad(std::make_shared<std::vector<T>>()) {
        check_shape(shape);
        if (static_cast<int64_t>(values.size()) != numel(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        data = std::make_shared<std::vector<T>>(std::move(values));
    }

    static TensorT zeros(Shape s) { return TensorT(std::move(s), T(0)); }
    static TensorT ones(Shape s) { return TensorT(std::move(s), T(1)); }
    static TensorT full(Shape s, T v) { return TensorT(std::move(s), v); }
    static TensorT scalar(T v) {
        TensorT t;
        (*t.data)[0] = v;
        return t;
    }
    static TensorT randn(Shape s, RngStream& rng, double stddev = 1.0) {
        TensorT t(std::move(s));
        for (T& v : *t.data) v = static_cast<T>(rng.normal(0.0, stddev));
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(data->size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    /// Null until ensure_grad() has run (through this tensor or any copy).
    T* grad_ptr() const { return grad->empty() ? nullptr : grad->data(); }

    T& operator[](int64_t i) { return (*data)[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }

    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape));
        return (*data)[0];
    }

    void ensure_grad() const {
        if (grad->empty()) grad->assign(data->size(), T(0));
    }
    void zero_grad() const { std::fill(grad->begin(), grad->end(), T(0)); }

    /// Same storage, fresh grad store, no tracking.
    TensorT detached() const {
        TensorT t;
        t.shape = shape;
        t.data = data;
        return t;
    }

    /// Deep copy of values (grad not copied).
    TensorT clone() const {
        TensorT t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<T>>(*data);
        t.requires_grad = requires_grad;
        return t;
    }

    bool all_finite() const {
        for (T v : *data)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    static void check_shape(const Shape& s) {
        for (int64_t d : s)
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Flat binary serialization: "ECT1", u8 dtype, u8 rank, rank x u64 LE dims,
// raw LE element bytes.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
constexpr uint8_t dtype_code() {
    if constexpr (std::is_same_v<T, float>) return 0;
    else return 1;  // double
}

inline void write_u64_le(std::ostream& os, uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t read_u64_le(std::istream& is) {
    uint8_t b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw FormatError("truncated tensor header");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

template <typename T>
void save_tensor(std::ostream& os, const TensorT<T>& t) {
    os.write("ECT1", 4);
    uint8_t dtype = detail::dtype_code<T>();
    uint8_t rank = static_cast<uint8_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int64_t d : t.shape) detail::write_u64_le(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!os) throw IoError("tensor write failed");
}

template <typename T>
TensorT<T> load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ECT1", 4) != 0) throw FormatError("bad tensor magic");
    uint8_t dtype = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is) throw FormatError("truncated tensor header");
    if (dtype != detail::dtype_code<T>())
        throw FormatError("tensor dtype code " + std::to_string(int(dtype)) +
                          " does not match requested element type");
    Shape shape(rank);
    for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int64_t>(detail::read_u64_le(is));
    TensorT<T> t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!is) throw FormatError("truncated tensor payload");
    return t;
}

template <typename T>
void save_tensor(const std::string& path, const TensorT<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    save_tensor(os, t);
}

template <typename T>
TensorT<T> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return load_tensor<T>(is);
}

}  // namespace echocotr
