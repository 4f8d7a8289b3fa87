#pragma once

#include <cstdint>

#include "attnseq/tensor.hpp"

namespace attnseq {

// Interpolation weight matrix caching w(t,m) = (1 - |M*t/T - m|/M)^2 for
// 1-based t, m. Immutable after construction.
struct InterpWeights {
    std::int64_t T = 0;
    std::int64_t M = 0;
    Tensor W;  // [T,M], no gradient participation

    double at(std::int64_t t, std::int64_t m) const {  // 0-based accessors
        return W.data()[static_cast<std::size_t>(t * M + m)];
    }
};

InterpWeights build_weights(std::int64_t T, std::int64_t M);

// Collapses S [B,T,d] into [B, d*M]: u = stacked columns of U = S^T x W,
// m-major (all of column m=1 first). Differentiable in S.
Tensor dense_interpolate(const Tensor& S, const InterpWeights& W);

}  // namespace attnseq
