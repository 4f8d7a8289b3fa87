#include "attnseq/encoder.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "attnseq/error.hpp"
#include "attnseq/ops.hpp"

namespace attnseq {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor build_mask(std::int64_t T, std::int64_t r, bool include_self) {
    if (T < 1) throw ConfigError("build_mask: T must be >= 1, got " + std::to_string(T));
    if (r < 1) throw ConfigError("build_mask: r must be >= 1, got " + std::to_string(r));
    if (!include_self) {
        // Position 1 has no strict-past positions, so its row would be all
        // -inf for every T.
        throw ConfigError("build_mask: include_self=false leaves row 1 with an empty window");
    }
    std::vector<double> m(static_cast<std::size_t>(T * T), kNegInf);
    for (std::int64_t t = 0; t < T; ++t) {
        const std::int64_t lo = std::max<std::int64_t>(0, t - r);
        for (std::int64_t u = lo; u <= t; ++u) m[static_cast<std::size_t>(t * T + u)] = 0.0;
    }
    return Tensor({T, T}, std::move(m), false);
}

PositionalTable make_positional_table(std::int64_t T_max, std::int64_t d, Rng& rng, bool frozen) {
    std::vector<double> v(static_cast<std::size_t>(T_max * d));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return PositionalTable{Tensor({T_max, d}, std::move(v), !frozen), frozen};
}

namespace {

Tensor glorot(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.uniform(-s, s);
    return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

EncoderParams init_encoder_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::int64_t d = cfg.d, dk = cfg.d / cfg.heads, dff = 4 * cfg.d;
    EncoderParams p;
    p.embed_w = glorot({d, cfg.R, cfg.h}, cfg.R * cfg.h, d, rng);
    p.embed_b = Tensor::zeros({d}, true);
    p.pos = make_positional_table(cfg.T_max, d, rng, !cfg.learn_positional);
    p.blocks.resize(static_cast<std::size_t>(cfg.N));
    for (auto& b : p.blocks) {
        for (std::int64_t h = 0; h < cfg.heads; ++h) {
            b.W_Q.push_back(glorot({d, dk}, d, dk, rng));
            b.W_K.push_back(glorot({d, dk}, d, dk, rng));
            b.W_V.push_back(glorot({d, dk}, d, dk, rng));
        }
        b.W_O = glorot({d, d}, d, d, rng);
        b.ff_w1 = glorot({dff, d, 1}, d, dff, rng);
        b.ff_b1 = Tensor::zeros({dff}, true);
        b.ff_w2 = glorot({d, dff, 1}, dff, d, rng);
        b.ff_b2 = Tensor::zeros({d}, true);
        b.ln1_gamma = Tensor::ones({d}, true);
        b.ln1_beta = Tensor::zeros({d}, true);
        b.ln2_gamma = Tensor::ones({d}, true);
        b.ln2_beta = Tensor::zeros({d}, true);
    }
    return p;
}

Tensor scaled_dot_attention(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& mask,
                            double dropout_p, Rng* rng, bool training) {
    const std::int64_t dk = Q.dim(Q.rank() - 1);
    Tensor scores = mul_scalar(matmul(Q, transpose_last2(K)), 1.0 / std::sqrt(static_cast<double>(dk)));
    if (mask.defined()) scores = add(scores, mask);
    Tensor weights = softmax_last(scores);
    if (training && dropout_p > 0.0) {
        if (!rng) throw ConfigError("attention dropout requested without an RNG");
        weights = dropout(weights, dropout_p, *rng, true);
    }
    return matmul(weights, V);
}

Tensor banded_attention(const Tensor& Q, const Tensor& K, const Tensor& V, std::int64_t r, bool include_self,
                        double dropout_p, Rng* rng, bool training) {
    if (Q.rank() != 3 || K.shape() != Q.shape() || V.shape() != Q.shape()) {
        throw ShapeError("banded_attention: Q, K, V must share shape [B,T,dk], got " + shape_str(Q.shape()) +
                         ", " + shape_str(K.shape()) + ", " + shape_str(V.shape()));
    }
    if (r < 1) throw ConfigError("banded_attention: r must be >= 1, got " + std::to_string(r));
    if (!include_self) throw ConfigError("banded_attention: include_self=false leaves row 1 with an empty window");
    const std::int64_t B = Q.dim(0), T = Q.dim(1), dk = Q.dim(2);
    const std::int64_t w = std::min(r + 1, T);  // widest window: r past + self
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const bool dropping = training && dropout_p > 0.0;
    if (dropping && !rng) throw ConfigError("attention dropout requested without an RNG");
    const double keep = 1.0 - dropout_p;

    const double* q = Q.data().data();
    const double* k = K.data().data();
    const double* v = V.data().data();

    // Softmax weights (pre-dropout) and the dropout mask, padded to stride w.
    std::vector<double> weights(static_cast<std::size_t>(B * T * w), 0.0);
    std::vector<double> dmask;
    if (dropping) dmask.assign(static_cast<std::size_t>(B * T * w), 1.0);
    std::vector<double> out(static_cast<std::size_t>(B * T * dk), 0.0);

    for (std::int64_t b = 0; b < B; ++b) {
        const double* qb = q + b * T * dk;
        const double* kb = k + b * T * dk;
        const double* vb = v + b * T * dk;
        double* ob = out.data() + b * T * dk;
        for (std::int64_t t = 0; t < T; ++t) {
            const std::int64_t lo = std::max<std::int64_t>(0, t - r);
            const std::int64_t n = t - lo + 1;
            const double* qt = qb + t * dk;
            double* wrow = weights.data() + (b * T + t) * w;
            double mx = kNegInf;
            for (std::int64_t j = 0; j < n; ++j) {
                const double* kj = kb + (lo + j) * dk;
                double s = 0.0;
                for (std::int64_t c = 0; c < dk; ++c) s += qt[c] * kj[c];
                wrow[j] = s * scale;
                mx = std::max(mx, wrow[j]);
            }
            double z = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                wrow[j] = std::exp(wrow[j] - mx);
                z += wrow[j];
            }
            const double inv = 1.0 / z;
            for (std::int64_t j = 0; j < n; ++j) wrow[j] *= inv;

            double* orow = ob + t * dk;
            if (dropping) {
                double* mrow = dmask.data() + (b * T + t) * w;
                for (std::int64_t j = 0; j < n; ++j) mrow[j] = rng->uniform() < dropout_p ? 0.0 : 1.0;
                for (std::int64_t j = 0; j < n; ++j) {
                    const double a = wrow[j] * mrow[j] / keep;
                    if (a == 0.0) continue;
                    const double* vj = vb + (lo + j) * dk;
                    for (std::int64_t c = 0; c < dk; ++c) orow[c] += a * vj[c];
                }
            } else {
                for (std::int64_t j = 0; j < n; ++j) {
                    const double a = wrow[j];
                    const double* vj = vb + (lo + j) * dk;
                    for (std::int64_t c = 0; c < dk; ++c) orow[c] += a * vj[c];
                }
            }
        }
    }

    bool needs_grad = grad_enabled() && (Q.requires_grad() || K.requires_grad() || V.requires_grad());
    auto node = std::make_shared<Node>();
    node->shape = Shape{B, T, dk};
    node->data = std::move(out);
    node->op = "banded_attention";
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents = {Q.node_ptr(), K.node_ptr(), V.node_ptr()};
        node->backward_fn = [B, T, dk, w, r, scale, dropping, keep, weights = std::move(weights),
                             dmask = std::move(dmask)](Node& nd) {
            Node& pq = *nd.parents[0];
            Node& pk = *nd.parents[1];
            Node& pv = *nd.parents[2];
            pq.ensure_grad();
            pk.ensure_grad();
            pv.ensure_grad();
            std::vector<double> da(static_cast<std::size_t>(w));
            std::vector<double> ds(static_cast<std::size_t>(w));
            for (std::int64_t b = 0; b < B; ++b) {
                const double* qb = pq.data.data() + b * T * dk;
                const double* kb = pk.data.data() + b * T * dk;
                const double* vb = pv.data.data() + b * T * dk;
                double* dqb = pq.grad.data() + b * T * dk;
                double* dkb = pk.grad.data() + b * T * dk;
                double* dvb = pv.grad.data() + b * T * dk;
                const double* gb = nd.grad.data() + b * T * dk;
                for (std::int64_t t = 0; t < T; ++t) {
                    const std::int64_t lo = std::max<std::int64_t>(0, t - r);
                    const std::int64_t n = t - lo + 1;
                    const double* g = gb + t * dk;
                    const double* wrow = weights.data() + (b * T + t) * w;
                    const double* mrow = dropping ? dmask.data() + (b * T + t) * w : nullptr;

                    // dV and the gradient reaching each post-dropout weight.
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double* vj = vb + (lo + j) * dk;
                        const double aj = dropping ? wrow[j] * mrow[j] / keep : wrow[j];
                        double dot = 0.0;
                        if (aj != 0.0) {
                            double* dvj = dvb + (lo + j) * dk;
                            for (std::int64_t c = 0; c < dk; ++c) {
                                dvj[c] += aj * g[c];
                            }
                        }
                        for (std::int64_t c = 0; c < dk; ++c) dot += g[c] * vj[c];
                        da[static_cast<std::size_t>(j)] = dropping ? dot * mrow[j] / keep : dot;
                    }
                    // Softmax backward within the window.
                    double inner = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) inner += da[static_cast<std::size_t>(j)] * wrow[j];
                    for (std::int64_t j = 0; j < n; ++j) {
                        ds[static_cast<std::size_t>(j)] = wrow[j] * (da[static_cast<std::size_t>(j)] - inner) * scale;
                    }
                    // Score gradients fan out to Q and K.
                    const double* qt = qb + t * dk;
                    double* dqt = dqb + t * dk;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double dsj = ds[static_cast<std::size_t>(j)];
                        if (dsj == 0.0) continue;
                        const double* kj = kb + (lo + j) * dk;
                        double* dkj = dkb + (lo + j) * dk;
                        for (std::int64_t c = 0; c < dk; ++c) {
                            dqt[c] += dsj * kj[c];
                            dkj[c] += dsj * qt[c];
                        }
                    }
                }
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor embed_input(const Tensor& x, const EncoderParams& params, const ModelConfig& cfg, const ForwardCtx& ctx) {
    if (x.rank() != 3) throw ShapeError("embed_input: expected [B,T,R], got " + shape_str(x.shape()));
    const std::int64_t T = x.dim(1);
    if (x.dim(2) != cfg.R) {
        throw ShapeError("embed_input: input has " + std::to_string(x.dim(2)) + " variables, config expects " +
                         std::to_string(cfg.R));
    }
    if (T > cfg.T_max) {
        throw ConfigError("embed_input: sequence length " + std::to_string(T) + " exceeds T_max " +
                          std::to_string(cfg.T_max));
    }
    Tensor e = conv1d(x, params.embed_w, params.embed_b);
    Tensor pos_rows = T == cfg.T_max ? params.pos.table : slice(params.pos.table, 0, 0, T);
    Tensor h = add(e, pos_rows);
    if (ctx.training && cfg.dropout_input > 0.0) {
        if (!ctx.rng) throw ConfigError("input dropout requested without an RNG");
        h = dropout(h, cfg.dropout_input, *ctx.rng, true);
    }
    return h;
}

namespace {

Tensor residue_dropout(const Tensor& t, const ModelConfig& cfg, const ForwardCtx& ctx) {
    if (!ctx.training || cfg.dropout_residue == 0.0) return t;
    if (!ctx.rng) throw ConfigError("residue dropout requested without an RNG");
    return dropout(t, cfg.dropout_residue, *ctx.rng, true);
}

}  // namespace

Tensor attention_module(const Tensor& x, const AttentionBlockParams& params, const ModelConfig& cfg,
                        const ForwardCtx& ctx) {
    const std::int64_t T = x.dim(1);

    std::vector<Tensor> head_outs;
    head_outs.reserve(params.W_Q.size());
    Tensor dense_mask;
    const bool dense = ctx.dense_attention || ctx.unmasked;
    if (dense && !ctx.unmasked) dense_mask = build_mask(T, cfg.r, cfg.include_self);
    for (std::size_t hh = 0; hh < params.W_Q.size(); ++hh) {
        Tensor q = matmul(x, params.W_Q[hh]);
        Tensor k = matmul(x, params.W_K[hh]);
        Tensor v = matmul(x, params.W_V[hh]);
        Tensor o = dense ? scaled_dot_attention(q, k, v, dense_mask, cfg.dropout_attention, ctx.rng, ctx.training)
                         : banded_attention(q, k, v, cfg.r, cfg.include_self, cfg.dropout_attention, ctx.rng,
                                            ctx.training);
        head_outs.push_back(o);
    }
    Tensor attn = matmul(concat(head_outs, 2), params.W_O);
    Tensor h = layer_norm(add(x, residue_dropout(attn, cfg, ctx)), params.ln1_gamma, params.ln1_beta);

    Tensor ff = conv1d(relu(conv1d(h, params.ff_w1, params.ff_b1)), params.ff_w2, params.ff_b2);
    return layer_norm(add(h, residue_dropout(ff, cfg, ctx)), params.ln2_gamma, params.ln2_beta);
}

Tensor encoder_forward(const Tensor& x, const EncoderParams& params, const ModelConfig& cfg, const ForwardCtx& ctx) {
    Tensor h = embed_input(x, params, cfg, ctx);
    for (const auto& block : params.blocks) h = attention_module(h, block, cfg, ctx);
    return h;
}

}  // namespace attnseq
