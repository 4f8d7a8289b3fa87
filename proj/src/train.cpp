#include "attnseq/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "attnseq/error.hpp"
#include "attnseq/heads.hpp"
#include "attnseq/metrics.hpp"
#include "attnseq/ops.hpp"
#include "attnseq/rng.hpp"

namespace attnseq {

void AdamState::init(const std::vector<NamedTensor>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const NamedTensor& p : params) {
        m.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
        v.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
    }
}

void adam_step(std::vector<NamedTensor>& params, AdamState& state) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ConfigError("adam_step: state tracks " + std::to_string(state.m.size()) +
                          " parameters, got " + std::to_string(params.size()));
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        const bool has = p.has_grad();
        const std::vector<double>* g = has ? &p.grad() : nullptr;
        if (has && static_cast<std::int64_t>(g->size()) != p.size()) {
            throw ShapeError("adam_step: gradient size mismatch for " + params[i].name);
        }
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        auto& data = p.data_mut();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double gj = has ? (*g)[j] : 0.0;
            if (!std::isfinite(gj)) {
                throw NumericError("adam_step: non-finite gradient in " + params[i].name +
                                   " at step " + std::to_string(state.step));
            }
            mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * gj;
            vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * gj * gj;
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        if (has) p.zero_grad();
    }
}

double clip_gradients(std::vector<NamedTensor>& params, double max_norm) {
    double sq = 0.0;
    for (const NamedTensor& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm <= 0.0 || norm <= max_norm || norm == 0.0) return norm;
    const double scale = max_norm / norm;
    for (NamedTensor& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double& g : p.tensor.node()->grad) g *= scale;
    }
    return norm;
}

std::vector<std::vector<std::int64_t>> chunked_iterate(std::int64_t n, std::int64_t chunk_size,
                                                       std::uint64_t seed) {
    if (n < 1) throw ConfigError("chunked_iterate: need at least one sample");
    if (chunk_size < 1) throw ConfigError("chunked_iterate: chunk_size must be positive");
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<std::vector<std::int64_t>> chunks;
    for (std::int64_t at = 0; at < n; at += chunk_size) {
        const std::int64_t end = std::min(n, at + chunk_size);
        chunks.emplace_back(order.begin() + at, order.begin() + end);
    }
    return chunks;
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (chunk_size < batch_size) throw ConfigError("train: chunk_size must be >= batch_size");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (chunks_per_epoch < 0) throw ConfigError("train: chunks_per_epoch must be >= 0");
    if (patience < 0) throw ConfigError("train: patience must be >= 0");
}

namespace {

// Canonical headline metric for a head kind, or validates an explicit choice.
std::string resolve_metric(HeadKind kind, const std::string& name) {
    if (name == "auto") {
        switch (kind) {
            case HeadKind::binary: return "auroc";
            case HeadKind::multilabel: return "auroc_micro";
            case HeadKind::multiclass: return "kappa";
            case HeadKind::per_step_binary: return "auprc";
            case HeadKind::per_step_regression: return "neg_mse";
        }
    }
    if (name == "neg_loss") return name;
    const bool ok = (name == "auroc" && kind == HeadKind::binary) ||
                    ((name == "auroc_micro" || name == "auroc_macro") && kind == HeadKind::multilabel) ||
                    (name == "auprc" && (kind == HeadKind::binary || kind == HeadKind::per_step_binary)) ||
                    (name == "kappa" && kind == HeadKind::multiclass) ||
                    (name == "neg_mse" && (kind == HeadKind::per_step_regression || kind == HeadKind::multiclass));
    if (!ok) {
        throw ConfigError("eval metric '" + name + "' does not apply to a " + head_kind_name(kind) +
                          " task");
    }
    return name;
}

// Forward through encoder and head for rows [b0, b1) of ds, on the current
// tape. Sequence-level kinds interpolate; per-step kinds read positions.
Tensor range_probs(const SequenceModel& model, std::size_t task, const Dataset& ds,
                   std::int64_t b0, std::int64_t b1, InterpCache& cache, const ForwardCtx& ctx) {
    const TaskHeadParams& head = model.heads[task];
    Tensor x = batch_x(ds, b0, b1);
    const std::vector<std::int64_t> lengths = batch_lengths(ds, b0, b1);
    Tensor encoded = model_encode(model, x, lengths, ctx);
    Tensor feats = is_per_step(head.kind) ? encoded : collapse_features(model, encoded, lengths, cache);
    return head_probs(head, head_logits(head, feats));
}

Tensor range_loss(const SequenceModel& model, std::size_t task, const Dataset& ds, std::int64_t b0,
                  std::int64_t b1, InterpCache& cache, const ForwardCtx& ctx) {
    const TaskHeadParams& head = model.heads[task];
    Tensor probs = range_probs(model, task, ds, b0, b1, cache, ctx);
    switch (head.kind) {
        case HeadKind::binary: {
            Tensor pos = reshape(slice(probs, 1, 1, 2), {b1 - b0});
            return binary_loss(batch_labels(ds, b0, b1), pos);
        }
        case HeadKind::multilabel:
            return multilabel_loss(batch_labels(ds, b0, b1), probs);
        case HeadKind::multiclass:
            return multiclass_loss(batch_classes(ds, b0, b1), probs);
        case HeadKind::per_step_binary:
            return per_step_binary_loss(batch_labels(ds, b0, b1), probs, batch_label_mask(ds, b0, b1));
        case HeadKind::per_step_regression:
            return regression_loss(batch_labels(ds, b0, b1), probs, batch_label_mask(ds, b0, b1));
    }
    throw ConfigError("unreachable");
}

void check_task_data(const SequenceModel& model, const std::vector<TaskData>& tasks) {
    if (tasks.empty()) throw ConfigError("train: no tasks given");
    if (tasks.size() != model.heads.size()) {
        throw ConfigError("train: " + std::to_string(tasks.size()) + " tasks for a model with " +
                          std::to_string(model.heads.size()) + " heads");
    }
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        const TaskData& td = tasks[k];
        if (td.train == nullptr || td.val == nullptr) {
            throw ConfigError("train: task " + std::to_string(k) + " is missing a split");
        }
        if (!(td.lambda >= 0.0)) throw ConfigError("train: task weights must be >= 0");
        for (const Dataset* ds : {td.train, td.val}) {
            if (ds->task != model.heads[k].kind) {
                throw ConfigError("train: task " + std::to_string(k) + " data is " +
                                  head_kind_name(ds->task) + " but the head is " +
                                  head_kind_name(model.heads[k].kind));
            }
            const std::int64_t want = model.heads[k].kind == HeadKind::multilabel ||
                                              model.heads[k].kind == HeadKind::multiclass
                                          ? model.heads[k].num_labels
                                          : 1;
            if (ds->num_labels != want) {
                throw ConfigError("train: task " + std::to_string(k) + " data has " +
                                  std::to_string(ds->num_labels) + " labels, head expects " +
                                  std::to_string(want));
            }
            if (ds->R != model.cfg.R) {
                throw ConfigError("train: task " + std::to_string(k) + " data has " +
                                  std::to_string(ds->R) + " channels, model expects " +
                                  std::to_string(model.cfg.R));
            }
        }
    }
}

// Model outputs and ground truth pooled across batches, in the vector forms
// the metric functions take. Per-step kinds pool valid (sequence, step) pairs.
struct Gathered {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<int> true_bins, pred_bins;
    std::vector<double> true_vals, pred_vals;
};

Gathered gather_predictions(const SequenceModel& model, std::size_t task, const Dataset& ds,
                            InterpCache& cache, std::int64_t batch_size) {
    NoGradGuard no_grad;
    const HeadKind kind = model.heads[task].kind;
    const std::int64_t n = ds.size();
    Gathered g;

    for (std::int64_t b0 = 0; b0 < n; b0 += batch_size) {
        const std::int64_t b1 = std::min(n, b0 + batch_size);
        Tensor probs = range_probs(model, task, ds, b0, b1, cache, ForwardCtx{});
        const auto& pd = probs.data();
        switch (kind) {
            case HeadKind::binary:
                for (std::int64_t i = 0; i < b1 - b0; ++i) {
                    g.scores.push_back(pd[static_cast<std::size_t>(i * 2 + 1)]);
                    g.labels.push_back(
                        static_cast<int>(ds.labels[static_cast<std::size_t>(b0 + i)]));
                }
                break;
            case HeadKind::multilabel:
                for (std::int64_t i = 0; i < (b1 - b0) * ds.num_labels; ++i) {
                    g.scores.push_back(pd[static_cast<std::size_t>(i)]);
                    g.labels.push_back(static_cast<int>(
                        ds.labels[static_cast<std::size_t>(b0 * ds.num_labels + i)]));
                }
                break;
            case HeadKind::multiclass:
                for (std::int64_t i = 0; i < b1 - b0; ++i) {
                    const double* row = pd.data() + i * ds.num_labels;
                    const auto arg = std::max_element(row, row + ds.num_labels) - row;
                    g.pred_bins.push_back(static_cast<int>(arg));
                    g.true_bins.push_back(
                        static_cast<int>(ds.class_labels[static_cast<std::size_t>(b0 + i)]));
                }
                break;
            case HeadKind::per_step_binary:
            case HeadKind::per_step_regression:
                for (std::int64_t i = 0; i < b1 - b0; ++i) {
                    for (std::int64_t t = 0; t < ds.T; ++t) {
                        const auto at = static_cast<std::size_t>((b0 + i) * ds.T + t);
                        if (ds.label_mask[at] != 1.0) continue;
                        const double p = pd[static_cast<std::size_t>(i * ds.T + t)];
                        if (kind == HeadKind::per_step_binary) {
                            g.scores.push_back(p);
                            g.labels.push_back(static_cast<int>(ds.labels[at]));
                        } else {
                            g.pred_vals.push_back(p);
                            g.true_vals.push_back(ds.labels[at]);
                        }
                    }
                }
                break;
        }
    }
    return g;
}

// Predicted and true values on the original scale for a bucketed task: the
// prediction reads the bucket's representative value, the truth prefers the
// stored continuous target when present.
void bins_to_values(const Dataset& ds, const Gathered& g, std::vector<double>& true_vals,
                    std::vector<double>& pred_vals) {
    if (ds.bucket_values.empty()) {
        throw DataError("value-scale metrics on a multiclass task need bucket_values");
    }
    for (std::size_t i = 0; i < g.pred_bins.size(); ++i) {
        pred_vals.push_back(ds.bucket_values[static_cast<std::size_t>(g.pred_bins[i])]);
        true_vals.push_back(!ds.continuous.empty()
                                ? ds.continuous[i]
                                : ds.bucket_values[static_cast<std::size_t>(g.true_bins[i])]);
    }
}

std::vector<std::vector<double>> snapshot_values(const std::vector<NamedTensor>& params) {
    std::vector<std::vector<double>> values;
    values.reserve(params.size());
    for (const NamedTensor& p : params) values.push_back(p.tensor.data());
    return values;
}

void restore_values(std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.data_mut() = values[i];
}

}  // namespace

std::string resolve_metric_name(HeadKind kind, const std::string& metric) {
    return resolve_metric(kind, metric);
}

double headline_metric(const SequenceModel& model, std::size_t task, const Dataset& ds,
                       InterpCache& cache, std::int64_t batch_size, const std::string& metric) {
    const std::string name = resolve_metric(model.heads[task].kind, metric);
    if (name == "neg_loss") return -dataset_loss(model, task, ds, cache, batch_size);

    const HeadKind kind = model.heads[task].kind;
    Gathered g = gather_predictions(model, task, ds, cache, batch_size);

    if (name == "auroc") return auroc(g.scores, g.labels);
    if (name == "auprc") return auprc(g.scores, g.labels);
    if (name == "auroc_micro") return multilabel_auc(g.scores, g.labels, ds.size(), ds.num_labels).micro;
    if (name == "auroc_macro") return multilabel_auc(g.scores, g.labels, ds.size(), ds.num_labels).macro;
    if (name == "kappa") return weighted_kappa(g.true_bins, g.pred_bins, static_cast<int>(ds.num_labels));
    if (name == "neg_mse") {
        std::vector<double> true_vals = g.true_vals, pred_vals = g.pred_vals;
        if (kind == HeadKind::multiclass) bins_to_values(ds, g, true_vals, pred_vals);
        return -mse_mape(true_vals, pred_vals).mse;
    }
    throw ConfigError("unknown eval metric '" + name + "'");
}

MetricsReport evaluate(const SequenceModel& model, std::size_t task, const Dataset& ds,
                       InterpCache& cache, std::int64_t batch_size) {
    if (task >= model.heads.size()) {
        throw ConfigError("task index " + std::to_string(task) + " out of range for " +
                          std::to_string(model.heads.size()) + " heads");
    }
    const HeadKind kind = model.heads[task].kind;
    if (ds.task != kind) {
        throw ConfigError("evaluate: dataset is " + head_kind_name(ds.task) +
                          " but the head is " + head_kind_name(kind));
    }
    Gathered g = gather_predictions(model, task, ds, cache, batch_size);

    MetricsReport rep;
    rep.task = head_kind_name(kind);
    rep.samples = ds.size();
    rep.values["loss"] = dataset_loss(model, task, ds, cache, batch_size);
    switch (kind) {
        case HeadKind::binary:
            rep.values["auroc"] = auroc(g.scores, g.labels);
            rep.values["auprc"] = auprc(g.scores, g.labels);
            rep.values["min_se_pplus"] = min_se_pplus(g.scores, g.labels);
            break;
        case HeadKind::multilabel: {
            const MultilabelAuc a = multilabel_auc(g.scores, g.labels, ds.size(), ds.num_labels);
            rep.values["auroc_micro"] = a.micro;
            rep.values["auroc_macro"] = a.macro;
            rep.values["auroc_weighted"] = a.weighted;
            rep.values["excluded_labels"] = static_cast<double>(a.excluded_labels);
            break;
        }
        case HeadKind::multiclass: {
            rep.values["kappa"] =
                weighted_kappa(g.true_bins, g.pred_bins, static_cast<int>(ds.num_labels));
            if (!ds.bucket_values.empty()) {
                std::vector<double> true_vals, pred_vals;
                bins_to_values(ds, g, true_vals, pred_vals);
                const MseMape mm = mse_mape(true_vals, pred_vals);
                rep.values["mse"] = mm.mse;
                rep.values["mape"] = mm.mape;
                rep.values["excluded_zero_true"] = static_cast<double>(mm.excluded_zero_true);
            }
            break;
        }
        case HeadKind::per_step_binary:
            rep.values["auroc"] = auroc(g.scores, g.labels);
            rep.values["auprc"] = auprc(g.scores, g.labels);
            rep.values["valid_steps"] = static_cast<double>(g.labels.size());
            break;
        case HeadKind::per_step_regression: {
            const MseMape mm = mse_mape(g.true_vals, g.pred_vals);
            rep.values["mse"] = mm.mse;
            rep.values["mape"] = mm.mape;
            rep.values["excluded_zero_true"] = static_cast<double>(mm.excluded_zero_true);
            rep.values["valid_steps"] = static_cast<double>(g.true_vals.size());
            break;
        }
    }
    return rep;
}

Tensor task_loss(const SequenceModel& model, std::size_t task, const Dataset& ds, std::int64_t b0,
                 std::int64_t b1, InterpCache& cache, const ForwardCtx& ctx) {
    if (task >= model.heads.size()) {
        throw ConfigError("task index " + std::to_string(task) + " out of range for " +
                          std::to_string(model.heads.size()) + " heads");
    }
    return range_loss(model, task, ds, b0, b1, cache, ctx);
}

double dataset_loss(const SequenceModel& model, std::size_t task, const Dataset& ds,
                    InterpCache& cache, std::int64_t batch_size) {
    NoGradGuard no_grad;
    double total = 0.0;
    for (std::int64_t b0 = 0; b0 < ds.size(); b0 += batch_size) {
        const std::int64_t b1 = std::min(ds.size(), b0 + batch_size);
        total += range_loss(model, task, ds, b0, b1, cache, ForwardCtx{}).item() *
                 static_cast<double>(b1 - b0);
    }
    return total / static_cast<double>(ds.size());
}

TrainResult train_model(SequenceModel& model, const std::vector<TaskData>& tasks,
                        const TrainConfig& cfg) {
    cfg.validate();
    check_task_data(model, tasks);
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        resolve_metric(model.heads[k].kind, cfg.eval_metric);  // fail before any work
    }

    std::vector<NamedTensor> params = trainable_params(model);
    AdamState state;
    state.lr = cfg.lr;
    state.init(params);
    Rng dropout_rng(sub_seed(cfg.seed, "train.dropout"));
    InterpCache cache(model.cfg.M);

    std::vector<double> lambdas;
    for (const TaskData& td : tasks) lambdas.push_back(td.lambda);

    TrainResult res;
    std::vector<std::vector<double>> best = snapshot_values(params);
    double best_metric = -std::numeric_limits<double>::infinity();
    std::int64_t since_best = 0;

    for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fresh chunk assignment per epoch and task; optionally only the first
        // chunks_per_epoch chunks are visited.
        std::vector<std::vector<std::int64_t>> orders(tasks.size());
        std::int64_t longest = 0;
        for (std::size_t k = 0; k < tasks.size(); ++k) {
            const std::string tag = "train.epoch." + std::to_string(epoch) + ".task." + std::to_string(k);
            auto chunks = chunked_iterate(tasks[k].train->size(), cfg.chunk_size,
                                          sub_seed(cfg.seed, tag));
            std::size_t take = chunks.size();
            if (cfg.chunks_per_epoch > 0) {
                take = std::min<std::size_t>(take, static_cast<std::size_t>(cfg.chunks_per_epoch));
            }
            for (std::size_t c = 0; c < take; ++c) {
                orders[k].insert(orders[k].end(), chunks[c].begin(), chunks[c].end());
            }
            longest = std::max(longest, static_cast<std::int64_t>(orders[k].size()));
        }
        const std::int64_t steps = (longest + cfg.batch_size - 1) / cfg.batch_size;

        double loss_sum = 0.0;
        double weight_sum = 0.0;
        for (std::int64_t s = 0; s < steps; ++s) {
            // Any numeric blow-up inside the step means the optimizer left the
            // finite regime: hand back the best parameters and report it.
            auto diverged = [&](const std::string& what) -> DivergenceError {
                restore_values(params, best);
                return DivergenceError(what + " at epoch " + std::to_string(epoch) + " step " +
                                       std::to_string(s + 1) +
                                       "; model restored to the best checkpoint");
            };
            double jl = 0.0;
            try {
                std::vector<Tensor> losses;
                losses.reserve(tasks.size());
                for (std::size_t k = 0; k < tasks.size(); ++k) {
                    const auto& order = orders[k];
                    const auto len = static_cast<std::int64_t>(order.size());
                    std::vector<std::int64_t> idx;
                    if (s * cfg.batch_size < len) {
                        const std::int64_t at = s * cfg.batch_size;
                        const std::int64_t end = std::min(len, at + cfg.batch_size);
                        idx.assign(order.begin() + at, order.begin() + end);
                    } else {
                        // Shorter tasks recycle their epoch order.
                        const std::int64_t at = (s * cfg.batch_size) % len;
                        for (std::int64_t j = 0; j < cfg.batch_size; ++j) {
                            idx.push_back(order[static_cast<std::size_t>((at + j) % len)]);
                        }
                    }
                    Dataset sub = gather(*tasks[k].train, idx);
                    ForwardCtx ctx;
                    ctx.training = true;
                    ctx.rng = &dropout_rng;
                    losses.push_back(range_loss(model, k, sub, 0, sub.size(), cache, ctx));
                }
                Tensor joint = weighted_loss_sum(losses, lambdas);
                jl = joint.item();
                if (!std::isfinite(jl)) throw diverged("loss became non-finite");
                joint.backward();
                clip_gradients(params, cfg.clip_norm);
                adam_step(params, state);
            } catch (const DivergenceError&) {
                throw;
            } catch (const NumericError& e) {
                throw diverged(std::string("numeric failure (") + e.what() + ")");
            }
            // Weight each step by the fresh samples it draws from the longest
            // task, so the epoch loss is a per-sample mean and a frozen model
            // reports the same value regardless of the shuffle.
            const double w = static_cast<double>(std::min(cfg.batch_size, longest - s * cfg.batch_size));
            loss_sum += jl * w;
            weight_sum += w;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / weight_sum;
        double metric_sum = 0.0;
        for (std::size_t k = 0; k < tasks.size(); ++k) {
            rec.val_loss += tasks[k].lambda *
                            dataset_loss(model, k, *tasks[k].val, cache, cfg.batch_size);
            const double mk = headline_metric(model, k, *tasks[k].val, cache, cfg.batch_size,
                                              cfg.eval_metric);
            rec.task_metrics.push_back(mk);
            metric_sum += mk;
        }
        rec.val_metric = metric_sum / static_cast<double>(tasks.size());
        res.history.push_back(rec);

        if (rec.val_metric > best_metric) {
            best_metric = rec.val_metric;
            res.best_epoch = epoch;
            best = snapshot_values(params);
            since_best = 0;
        } else if (++since_best > cfg.patience) {
            res.early_stopped = true;
            break;
        }
    }

    restore_values(params, best);
    res.best_metric = best_metric;
    return res;
}

std::string history_csv(const TrainResult& result, std::size_t num_tasks) {
    std::ostringstream ss;
    ss << "epoch,train_loss,val_loss,val_metric";
    if (num_tasks > 1) {
        for (std::size_t k = 0; k < num_tasks; ++k) ss << ",task" << k << "_metric";
    }
    ss << '\n';
    for (const EpochRecord& rec : result.history) {
        ss << rec.epoch << ',' << kv::fmt_f64(rec.train_loss) << ',' << kv::fmt_f64(rec.val_loss)
           << ',' << kv::fmt_f64(rec.val_metric);
        if (num_tasks > 1) {
            for (double mk : rec.task_metrics) ss << ',' << kv::fmt_f64(mk);
        }
        ss << '\n';
    }
    return ss.str();
}

void write_history_csv(const TrainResult& result, std::size_t num_tasks, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << history_csv(result, num_tasks);
    if (!out) throw DataError("short write to " + path);
}

}  // namespace attnseq
