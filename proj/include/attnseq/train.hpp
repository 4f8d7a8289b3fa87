#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnseq/data.hpp"
#include "attnseq/metrics.hpp"
#include "attnseq/model.hpp"

namespace attnseq {

// Adam with bias correction. Moment arrays mirror the trainable parameter
// list by position.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<NamedTensor>& params);
};

// One update from the gradients accumulated by backward; parameters without a
// gradient stay put. Gradients are cleared after the update. A non-finite
// gradient aborts with NumericError naming the parameter.
void adam_step(std::vector<NamedTensor>& params, AdamState& state);

// Scales all gradients so their joint Euclidean norm is at most max_norm.
// Returns the pre-clip norm; max_norm <= 0 disables clipping.
double clip_gradients(std::vector<NamedTensor>& params, double max_norm);

// Seeded shuffle of [0, n) cut into ceil(n / chunk_size) chunks; all but the
// last have exactly chunk_size entries.
std::vector<std::vector<std::int64_t>> chunked_iterate(std::int64_t n, std::int64_t chunk_size,
                                                       std::uint64_t seed);

struct TrainConfig {
    double lr = 1e-3;
    std::int64_t batch_size = 32;
    std::int64_t epochs = 20;
    std::int64_t chunk_size = 20000;
    std::int64_t chunks_per_epoch = 0;  // 0 = use every chunk
    std::int64_t patience = 5;          // epochs without improvement before stopping
    std::string eval_metric = "auto";   // auto, auroc, auroc_micro, auroc_macro,
                                        // auprc, kappa, neg_mse, neg_loss
    double clip_norm = 5.0;             // <= 0 disables
    std::uint64_t seed = 0;

    void validate() const;
};

// One task = one model head plus its train/validation data and loss weight.
struct TaskData {
    const Dataset* train = nullptr;
    const Dataset* val = nullptr;
    double lambda = 1.0;
};

struct EpochRecord {
    std::int64_t epoch = 0;      // 1-based
    double train_loss = 0.0;     // per-sample mean joint loss over the epoch
    double val_loss = 0.0;       // lambda-weighted validation loss
    double val_metric = 0.0;     // mean headline metric, larger is better
    std::vector<double> task_metrics;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::int64_t best_epoch = 0;  // 1-based; 0 when no epoch completed
    double best_metric = 0.0;
    bool early_stopped = false;
};

// Metric name "auto" resolves to, for a head kind; explicit names are
// validated against the kind. Throws ConfigError on a bad pairing.
std::string resolve_metric_name(HeadKind kind, const std::string& metric);

// Full metric set for one task on a dataset, by head kind: binary ->
// auroc/auprc/min_se_pplus; multilabel -> micro/macro/weighted auroc plus the
// excluded single-class label count; multiclass -> linear-weighted kappa plus
// value-scale mse/mape through the bucket-value map when present; per-step
// binary -> auroc/auprc pooled over valid steps; per-step regression ->
// mse/mape over valid steps. Every report carries the mean loss.
MetricsReport evaluate(const SequenceModel& model, std::size_t task, const Dataset& ds,
                       InterpCache& cache, std::int64_t batch_size);

// Headline validation metric for one task, oriented so larger is better.
// "auto" resolves by head kind: binary -> auroc, multilabel -> micro auroc,
// multiclass -> linear-weighted kappa, per-step binary -> auprc, per-step
// regression -> negated mse.
double headline_metric(const SequenceModel& model, std::size_t task, const Dataset& ds,
                       InterpCache& cache, std::int64_t batch_size, const std::string& metric);

// Scalar task loss for rows [b0, b1) of ds, recorded on the tape when grads
// are enabled. ctx.training drives dropout.
Tensor task_loss(const SequenceModel& model, std::size_t task, const Dataset& ds, std::int64_t b0,
                 std::int64_t b1, InterpCache& cache, const ForwardCtx& ctx);

// Mean task loss over a dataset without touching the tape.
double dataset_loss(const SequenceModel& model, std::size_t task, const Dataset& ds,
                    InterpCache& cache, std::int64_t batch_size);

// Chunked mini-batch training with early stopping on the validation metric.
// The model is left holding the best-validation parameters. A non-finite
// joint loss, or any numeric failure inside a training step, restores those
// parameters and raises DivergenceError.
TrainResult train_model(SequenceModel& model, const std::vector<TaskData>& tasks,
                        const TrainConfig& cfg);

// CSV history: epoch,train_loss,val_loss,val_metric[,task{i}_metric...].
std::string history_csv(const TrainResult& result, std::size_t num_tasks);
void write_history_csv(const TrainResult& result, std::size_t num_tasks, const std::string& path);

}  // namespace attnseq
