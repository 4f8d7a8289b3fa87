#include "attnseq/heads.hpp"

#include <cmath>
#include <string>

#include "attnseq/error.hpp"
#include "attnseq/ops.hpp"

namespace attnseq {

namespace {
constexpr double kProbFloor = 1e-12;

Tensor clamp_probs(const Tensor& p) { return clamp(p, kProbFloor, 1.0 - kProbFloor); }
}  // namespace

std::int64_t head_out_dim(HeadKind kind, std::int64_t num_labels) {
    switch (kind) {
        case HeadKind::binary: return 2;
        case HeadKind::multilabel: return num_labels;
        case HeadKind::multiclass: return num_labels;
        case HeadKind::per_step_regression: return 1;
        case HeadKind::per_step_binary: return 1;
    }
    throw ConfigError("invalid head kind value");
}

std::int64_t TaskHeadParams::out_dim() const { return head_out_dim(kind, num_labels); }

TaskHeadParams init_task_head(HeadKind kind, std::int64_t num_labels, std::int64_t in_dim, Rng& rng) {
    if (in_dim < 1) throw ConfigError("task head input dimension must be >= 1");
    if (num_labels < 1) throw ConfigError("task head num_labels must be >= 1");
    if (kind == HeadKind::multiclass && num_labels < 2) {
        throw ConfigError("multiclass head needs num_labels >= 2, got " + std::to_string(num_labels));
    }
    const std::int64_t out = head_out_dim(kind, num_labels);
    const double s = std::sqrt(6.0 / static_cast<double>(in_dim + out));
    std::vector<double> w(static_cast<std::size_t>(in_dim * out));
    for (auto& x : w) x = rng.uniform(-s, s);
    TaskHeadParams head;
    head.kind = kind;
    head.num_labels = num_labels;
    head.W = Tensor({in_dim, out}, std::move(w), true);
    head.b = Tensor::zeros({out}, true);
    return head;
}

Tensor head_logits(const TaskHeadParams& head, const Tensor& features) {
    const bool per_step = is_per_step(head.kind);
    if (per_step && features.rank() != 3) {
        throw ShapeError("per-step head expects [B,T,d] features, got " + shape_str(features.shape()));
    }
    if (!per_step && features.rank() != 2) {
        throw ShapeError("sequence head expects [B,in_dim] features, got " + shape_str(features.shape()));
    }
    if (features.dim(features.rank() - 1) != head.W.dim(0)) {
        throw ShapeError("head expects feature dimension " + std::to_string(head.W.dim(0)) + ", got " +
                         shape_str(features.shape()));
    }
    return add(matmul(features, head.W), head.b);
}

Tensor head_probs(const TaskHeadParams& head, const Tensor& logits) {
    switch (head.kind) {
        case HeadKind::binary:
        case HeadKind::multiclass:
            return softmax_last(logits);
        case HeadKind::multilabel:
            return sigmoid(logits);
        case HeadKind::per_step_binary: {
            Tensor p = sigmoid(logits);  // [B,T,1]
            return reshape(p, {p.dim(0), p.dim(1)});
        }
        case HeadKind::per_step_regression: {
            Tensor p = relu(logits);
            return reshape(p, {p.dim(0), p.dim(1)});
        }
    }
    throw ConfigError("invalid head kind value");
}

namespace {

// -(y log p + (1-y) log(1-p)) elementwise, y constant.
Tensor bce_elementwise(const Tensor& y, const Tensor& p_raw) {
    Tensor p = clamp_probs(p_raw);
    Tensor ones = Tensor::ones(y.shape());
    Tensor pos = mul(y, log(p));
    Tensor negt = mul(sub(ones, y), log(sub(ones, p)));
    return neg(add(pos, negt));
}

}  // namespace

Tensor binary_loss(const Tensor& y, const Tensor& y_hat) {
    if (y.shape() != y_hat.shape()) {
        throw ShapeError("binary_loss: label shape " + shape_str(y.shape()) + " vs prediction " +
                         shape_str(y_hat.shape()));
    }
    return mean(bce_elementwise(y, y_hat));
}

Tensor multilabel_loss(const Tensor& y, const Tensor& y_hat) {
    if (y.shape() != y_hat.shape()) {
        throw ShapeError("multilabel_loss: label shape " + shape_str(y.shape()) + " vs prediction " +
                         shape_str(y_hat.shape()));
    }
    if (y.rank() != 2) throw ShapeError("multilabel_loss: expected [B,K], got " + shape_str(y.shape()));
    // mean over B*K = (1/K) sum_k BCE_k averaged over the batch.
    return mean(bce_elementwise(y, y_hat));
}

Tensor regression_loss(const Tensor& l, const Tensor& l_hat, const Tensor& valid_mask) {
    if (l.shape() != l_hat.shape() || l.shape() != valid_mask.shape()) {
        throw ShapeError("regression_loss: mismatched shapes " + shape_str(l.shape()) + ", " +
                         shape_str(l_hat.shape()) + ", " + shape_str(valid_mask.shape()));
    }
    double valid = 0.0;
    for (double v : valid_mask.data()) valid += v;
    if (valid == 0.0) throw DataError("regression_loss: no valid steps in batch");
    Tensor diff = sub(l_hat, l);
    Tensor sq = mul(mul(diff, diff), valid_mask);
    return mul_scalar(sum(sq), 1.0 / valid);
}

Tensor multiclass_loss(const std::vector<std::int64_t>& y, const Tensor& y_hat) {
    if (y_hat.rank() != 2) throw ShapeError("multiclass_loss: expected [B,C], got " + shape_str(y_hat.shape()));
    const std::int64_t B = y_hat.dim(0), C = y_hat.dim(1);
    if (static_cast<std::int64_t>(y.size()) != B) {
        throw ShapeError("multiclass_loss: " + std::to_string(y.size()) + " labels for batch of " +
                         std::to_string(B));
    }
    // One-hot pick keeps the whole computation on the tape.
    std::vector<double> onehot(static_cast<std::size_t>(B * C), 0.0);
    for (std::int64_t i = 0; i < B; ++i) {
        if (y[static_cast<std::size_t>(i)] < 0 || y[static_cast<std::size_t>(i)] >= C) {
            throw DataError("multiclass_loss: label " + std::to_string(y[static_cast<std::size_t>(i)]) +
                            " outside [0," + std::to_string(C) + ")");
        }
        onehot[static_cast<std::size_t>(i * C + y[static_cast<std::size_t>(i)])] = 1.0;
    }
    Tensor picked = sum(mul(Tensor({B, C}, std::move(onehot)), log(clamp_probs(y_hat))));
    return mul_scalar(neg(picked), 1.0 / static_cast<double>(B));
}

Tensor per_step_binary_loss(const Tensor& y, const Tensor& y_hat, const Tensor& valid_mask) {
    if (y.shape() != y_hat.shape() || y.shape() != valid_mask.shape()) {
        throw ShapeError("per_step_binary_loss: mismatched shapes " + shape_str(y.shape()) + ", " +
                         shape_str(y_hat.shape()) + ", " + shape_str(valid_mask.shape()));
    }
    double valid = 0.0;
    for (double v : valid_mask.data()) valid += v;
    if (valid == 0.0) throw DataError("per_step_binary_loss: no valid steps in batch");
    Tensor ce = mul(bce_elementwise(y, y_hat), valid_mask);
    return mul_scalar(sum(ce), 1.0 / valid);
}

void MultiTaskWeights::validate() const {
    for (double v : {lambda_p, lambda_i, lambda_d, lambda_l}) {
        if (v < 0.0) throw ConfigError("multi-task loss weights must be nonnegative");
    }
    if (lambda_p == 0.0 && lambda_i == 0.0 && lambda_d == 0.0 && lambda_l == 0.0) {
        throw ConfigError("at least one multi-task loss weight must be positive");
    }
}

Tensor weighted_loss_sum(const std::vector<Tensor>& losses, const std::vector<double>& lambdas) {
    if (losses.empty() || losses.size() != lambdas.size()) {
        throw ConfigError("weighted_loss_sum: need matching nonempty losses and weights");
    }
    Tensor total = mul_scalar(losses[0], lambdas[0]);
    for (std::size_t i = 1; i < losses.size(); ++i) {
        total = add(total, mul_scalar(losses[i], lambdas[i]));
    }
    return total;
}

Tensor multitask_loss(const Tensor& l_ph, const Tensor& l_ihm, const Tensor& l_dc, const Tensor& l_los,
                      const MultiTaskWeights& w) {
    w.validate();
    return weighted_loss_sum({l_ph, l_ihm, l_dc, l_los}, {w.lambda_p, w.lambda_i, w.lambda_d, w.lambda_l});
}

}  // namespace attnseq
