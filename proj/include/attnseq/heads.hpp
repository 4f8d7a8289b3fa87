#pragma once

#include <cstdint>
#include <vector>

#include "attnseq/config.hpp"
#include "attnseq/rng.hpp"
#include "attnseq/tensor.hpp"

namespace attnseq {

// Linear map from features to task outputs. Sequence-level kinds consume the
// d*M interpolation vector; per-step kinds consume each position's d vector.
struct TaskHeadParams {
    HeadKind kind = HeadKind::binary;
    std::int64_t num_labels = 2;  // K (multilabel) or C (multiclass)
    Tensor W;                     // [in_dim, out_dim]
    Tensor b;                     // [out_dim]

    std::int64_t out_dim() const;
};

std::int64_t head_out_dim(HeadKind kind, std::int64_t num_labels);
TaskHeadParams init_task_head(HeadKind kind, std::int64_t num_labels, std::int64_t in_dim, Rng& rng);

// features: [B, in_dim] for sequence-level heads, [B, T, d] for per-step.
Tensor head_logits(const TaskHeadParams& head, const Tensor& features);

// Kind-specific activation. binary/multiclass -> simplex rows; multilabel /
// per-step-binary -> elementwise (0,1); per-step-regression -> ReLU, >= 0.
// Per-step outputs drop the trailing singleton: [B,T].
Tensor head_probs(const TaskHeadParams& head, const Tensor& logits);

// All losses are batch-averaged scalars on the gradient tape. Probabilities
// are clamped to [1e-12, 1-1e-12] before any log.

// y in {0,1} per row; y_hat is the positive-class probability, shape [B].
Tensor binary_loss(const Tensor& y, const Tensor& y_hat);

// y in {0,1}^K, y_hat in (0,1)^K, both [B,K]; mean over K of per-label
// cross-entropy, then over the batch.
Tensor multilabel_loss(const Tensor& y, const Tensor& y_hat);

// Squared error over valid steps divided by the valid-step count.
// l, l_hat, valid_mask all [B,T]; mask entries are 0 or 1.
Tensor regression_loss(const Tensor& l, const Tensor& l_hat, const Tensor& valid_mask);

// y: class indices [B]; y_hat: simplex rows [B,C]. Mean of -log y_hat[y].
Tensor multiclass_loss(const std::vector<std::int64_t>& y, const Tensor& y_hat);

// Per-step binary cross-entropy pooled over valid (step, sequence) pairs.
Tensor per_step_binary_loss(const Tensor& y, const Tensor& y_hat, const Tensor& valid_mask);

struct MultiTaskWeights {
    double lambda_p = 0.8;  // phenotyping
    double lambda_i = 0.5;  // in-hospital mortality
    double lambda_d = 1.1;  // decompensation
    double lambda_l = 0.8;  // length of stay

    void validate() const;  // nonnegative, at least one positive
};

Tensor multitask_loss(const Tensor& l_ph, const Tensor& l_ihm, const Tensor& l_dc, const Tensor& l_los,
                      const MultiTaskWeights& w);

// General form used by the trainer: sum of lambda[i] * losses[i].
Tensor weighted_loss_sum(const std::vector<Tensor>& losses, const std::vector<double>& lambdas);

}  // namespace attnseq
