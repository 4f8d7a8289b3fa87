#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnseq/kvtext.hpp"

namespace attnseq {

// Ranking and agreement metrics over plain vectors. Labels are 0/1 ints for
// the binary family; every function throws DataError when the metric is
// undefined for the given inputs (single-class, no positives, empty).

// Trapezoidal area under the ROC curve, sweeping distinct scores descending.
// Ties contribute diagonal segments, so the value equals the rank statistic
// (concordant + half of tied pairs) / (positives * negatives).
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Area under the precision-recall curve with step-wise interpolation: over
// each recall segment the curve takes the precision envelope
// max{precision at recall >= segment end}, i.e. the staircase through the
// attained operating points. No linear interpolation between points.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

// Best attained balanced operating point: max over thresholds (each distinct
// score, predict positive at score >= threshold) of min(sensitivity,
// precision).
double min_se_pplus(const std::vector<double>& scores, const std::vector<int>& labels);

struct MultilabelAuc {
    double micro = 0.0;     // AUROC over the flattened (score, label) pool
    double macro = 0.0;     // unweighted mean of per-label AUROC
    double weighted = 0.0;  // positive-prevalence-weighted mean of per-label AUROC
    std::int64_t excluded_labels = 0;  // single-class columns dropped from macro/weighted
};

// scores/labels: n rows by K columns, row-major.
MultilabelAuc multilabel_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                             std::int64_t n, std::int64_t K);

// Cohen's kappa with linear weights w_ij = |i-j| / (C-1): bins in [0, C).
double weighted_kappa(const std::vector<int>& true_bins, const std::vector<int>& pred_bins, int C);

struct MseMape {
    double mse = 0.0;   // mean over all pairs
    double mape = 0.0;  // 100 * mean(|l - l_hat| / l) over pairs with l != 0
    std::int64_t excluded_zero_true = 0;
};

MseMape mse_mape(const std::vector<double>& true_values, const std::vector<double>& pred_values);

struct MetricsReport {
    std::string task;  // head kind name
    std::int64_t samples = 0;
    std::map<std::string, double> values;

    kv::Map to_kv() const;
    static MetricsReport from_kv(const kv::Map& m);
    // One header + one row for sweep aggregation; columns sorted by name.
    std::string csv_header() const;
    std::string csv_row() const;
};

}  // namespace attnseq
