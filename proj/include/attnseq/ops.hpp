#pragma once

#include <iosfwd>

#include "attnseq/tensor.hpp"

namespace attnseq {

// Elementwise / structural primitives. Every op records a backward rule when
// grads are enabled and any input requires them.

// b must have the same shape as a, or a shape that is a suffix of a's
// (broadcast over the leading dimensions, e.g. bias or positional adds).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Batched matrix product; batch dimensions broadcast numpy-style.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t begin, std::int64_t end);

// Stable softmax over the last axis; -inf entries map to exactly 0. A row
// that is entirely -inf raises NumericError.
Tensor softmax_last(const Tensor& a);

// x: [B,T,Cin], w: [Cout,Cin,h] with h odd, bias: [Cout] -> [B,T,Cout].
// Symmetric zero padding keeps the output length at T.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);

// Normalizes over the last axis (size d); gamma/beta: [d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Inverted-scaling dropout. The mask form is deterministic given the mask and
// is what gradient checks use; the rng form draws a fresh mask.
Tensor make_dropout_mask(const Shape& shape, double p, Rng& rng);
Tensor apply_dropout_mask(const Tensor& x, const Tensor& mask, double keep);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// Tensor blob: u32 rank, u32 dims, then the f64 payload, all little-endian.
void write_tensor_blob(std::ostream& out, const Tensor& t);
Tensor read_tensor_blob(std::istream& in);

}  // namespace attnseq
