#pragma once

#include "echocotr/model.hpp"

namespace echocotr {

/// Multiply-accumulate count for one sample; 1 MAC = 1 FLOP. Convs and
/// matmuls only; normalizations, activations, softmax and pooling excluded.
/// Negative t/h/w fall back to the config's input size.
int64_t count_flops(const ModelConfig& cfg, int64_t t = -1, int64_t h = -1, int64_t w = -1);

}  // namespace echocotr
