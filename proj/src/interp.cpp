#include "attnseq/interp.hpp"

#include <cmath>
#include <string>

#include "attnseq/error.hpp"
#include "attnseq/ops.hpp"

namespace attnseq {

InterpWeights build_weights(std::int64_t T, std::int64_t M) {
    if (T < 1) throw ConfigError("build_weights: T must be >= 1, got " + std::to_string(T));
    if (M < 1 || M > T) {
        throw ConfigError("build_weights: M must satisfy 1 <= M <= T, got M=" + std::to_string(M) +
                          " with T=" + std::to_string(T));
    }
    std::vector<double> w(static_cast<std::size_t>(T * M));
    for (std::int64_t t = 1; t <= T; ++t) {
        const double s = static_cast<double>(M) * static_cast<double>(t) / static_cast<double>(T);
        for (std::int64_t m = 1; m <= M; ++m) {
            const double dist = std::fabs(s - static_cast<double>(m));
            // The squared form would rebound upward past dist == M; weights
            // are zero from there on.
            const double base = dist >= static_cast<double>(M) ? 0.0 : 1.0 - dist / static_cast<double>(M);
            w[static_cast<std::size_t>((t - 1) * M + (m - 1))] = base * base;
        }
    }
    return InterpWeights{T, M, Tensor({T, M}, std::move(w), false)};
}

Tensor dense_interpolate(const Tensor& S, const InterpWeights& W) {
    if (S.rank() != 3) {
        throw ShapeError("dense_interpolate: expected [B,T,d], got " + shape_str(S.shape()));
    }
    const std::int64_t B = S.dim(0), T = S.dim(1), d = S.dim(2);
    if (T != W.T) {
        throw ShapeError("dense_interpolate: sequence length " + std::to_string(T) +
                         " does not match weights built for T=" + std::to_string(W.T));
    }
    // U = S^T x W is [B,d,M]; transposing makes rows the columns of U, so the
    // flattened layout is exactly the m-major stacking.
    Tensor U = matmul(transpose_last2(S), W.W);
    return reshape(transpose_last2(U), {B, d * W.M});
}

}  // namespace attnseq
