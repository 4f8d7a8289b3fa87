#pragma once

#include <cstdint>
#include <vector>

#include "attnseq/config.hpp"
#include "attnseq/rng.hpp"
#include "attnseq/tensor.hpp"

namespace attnseq {

// Dense T x T additive mask: 0 where position t may attend to t', -inf
// elsewhere. Allowed set: t' in [max(1, t-r), t-1], plus t itself when
// include_self (1-based description; storage is 0-based row-major).
Tensor build_mask(std::int64_t T, std::int64_t r, bool include_self);

struct PositionalTable {
    Tensor table;  // [T_max, d], drawn once from uniform(-1,1)
    bool frozen = true;
};

PositionalTable make_positional_table(std::int64_t T_max, std::int64_t d, Rng& rng, bool frozen = true);

struct AttentionBlockParams {
    std::vector<Tensor> W_Q, W_K, W_V;  // per head, each [d, d/heads]
    Tensor W_O;                         // [d, d]
    Tensor ff_w1, ff_b1;                // [4d, d, 1], [4d]
    Tensor ff_w2, ff_b2;                // [d, 4d, 1], [d]
    Tensor ln1_gamma, ln1_beta;
    Tensor ln2_gamma, ln2_beta;
};

struct EncoderParams {
    Tensor embed_w;  // [d, R, h]
    Tensor embed_b;  // [d]
    PositionalTable pos;
    std::vector<AttentionBlockParams> blocks;
};

EncoderParams init_encoder_params(const ModelConfig& cfg, Rng& rng);

// Runtime knobs threaded through the forward pass. rng is consulted only
// when training and a dropout probability is nonzero.
struct ForwardCtx {
    bool training = false;
    Rng* rng = nullptr;
    // Full self-attention with no window restriction (complexity baseline).
    bool unmasked = false;
    // Route attention through the dense T x T score matrix instead of the
    // banded kernel; same math, quadratic cost.
    bool dense_attention = false;
};

// softmax(Q K^T * scale + mask) V over the last two dims; scale defaults to
// 1/sqrt(dk). mask may be undefined (no masking) or broadcastable to [T,T].
Tensor scaled_dot_attention(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& mask,
                            double dropout_p = 0.0, Rng* rng = nullptr, bool training = false);

// Same result as scaled_dot_attention with build_mask(T, r, include_self),
// computed in O(T * r * dk) by touching only in-window scores.
Tensor banded_attention(const Tensor& Q, const Tensor& K, const Tensor& V, std::int64_t r, bool include_self,
                        double dropout_p = 0.0, Rng* rng = nullptr, bool training = false);

// Conv embedding + positional rows + input dropout: [B,T,R] -> [B,T,d].
Tensor embed_input(const Tensor& x, const EncoderParams& params, const ModelConfig& cfg, const ForwardCtx& ctx);

// One attention module: multi-head masked self-attention sub-layer and
// conv feed-forward sub-layer, each with residue dropout, residual add, and
// post-norm.
Tensor attention_module(const Tensor& x, const AttentionBlockParams& params, const ModelConfig& cfg,
                        const ForwardCtx& ctx);

// embed_input followed by the N stacked attention modules.
Tensor encoder_forward(const Tensor& x, const EncoderParams& params, const ModelConfig& cfg, const ForwardCtx& ctx);

}  // namespace attnseq
