#pragma once

#include <functional>
#include <vector>

#include "echocotr/error.hpp"
#include "echocotr/tensor.hpp"

namespace echocotr {

/// Reverse-mode tape. Ops append one backward rule per executed forward op;
/// backward() replays them in reverse order, which visits each node after all
/// of its consumers because the forward recording order is a topological
/// order of the DAG. Single-owner: one tape per forward pass, not shared.
template <typename T>
class TapeT {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    /// Seeds grad(output) = 1 and propagates to every requires_grad leaf.
    void backward(TensorT<T>& scalar_output) {
        if (scalar_output.size() != 1)
            throw ShapeError("backward requires a scalar output, got " +
                             shape_str(scalar_output.shape));
        if (!scalar_output.requires_grad)
            throw ConfigError("backward on an output that does not require grad");
        scalar_output.ensure_grad();
        scalar_output.grad_ptr()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

}  // namespace echocotr
