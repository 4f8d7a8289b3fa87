#include "attnseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "attnseq/error.hpp"

namespace attnseq {

namespace {

struct SweepPoint {
    std::int64_t tp = 0, fp = 0;  // cumulative counts at score >= threshold
};

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels, const char* who) {
    if (scores.size() != labels.size()) {
        throw ShapeError(std::string(who) + ": " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    }
    if (scores.empty()) throw DataError(std::string(who) + " undefined on empty input");
    for (int l : labels) {
        if (l != 0 && l != 1) throw DataError(std::string(who) + ": labels must be 0/1, got " + std::to_string(l));
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw DataError(std::string(who) + ": scores must be finite");
    }
}

// Cumulative (tp, fp) after each distinct score, descending. Ties collapse
// into one sweep point.
std::vector<SweepPoint> sweep_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<SweepPoint> pts;
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double s = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == s) {
            (labels[idx[i]] ? tp : fp) += 1;
            ++i;
        }
        pts.push_back({tp, fp});
    }
    return pts;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "auroc");
    const auto pts = sweep_curve(scores, labels);
    const std::int64_t P = pts.back().tp, N = pts.back().fp;
    if (P == 0 || N == 0) throw DataError("auroc undefined: needs both a positive and a negative label");

    double area = 0.0;
    double prev_tpr = 0.0, prev_fpr = 0.0;
    for (const auto& pt : pts) {
        const double tpr = static_cast<double>(pt.tp) / static_cast<double>(P);
        const double fpr = static_cast<double>(pt.fp) / static_cast<double>(N);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    return clamp01(area);
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "auprc");
    const auto pts = sweep_curve(scores, labels);
    const std::int64_t P = pts.back().tp;
    if (P == 0) throw DataError("auprc undefined: no positive labels");

    // Envelope precision at each point: the best precision attainable at this
    // recall or deeper into the ranking.
    std::vector<double> recall(pts.size()), envelope(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        recall[i] = static_cast<double>(pts[i].tp) / static_cast<double>(P);
        envelope[i] = static_cast<double>(pts[i].tp) / static_cast<double>(pts[i].tp + pts[i].fp);
    }
    for (std::size_t i = pts.size(); i-- > 1;) {
        envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
    }
    double area = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        area += (recall[i] - prev_recall) * envelope[i];
        prev_recall = recall[i];
    }
    return clamp01(area);
}

double min_se_pplus(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "min_se_pplus");
    const auto pts = sweep_curve(scores, labels);
    const std::int64_t P = pts.back().tp;
    if (P == 0) throw DataError("min_se_pplus undefined: no positive labels");

    double best = 0.0;
    for (const auto& pt : pts) {
        const double se = static_cast<double>(pt.tp) / static_cast<double>(P);
        const double pp = static_cast<double>(pt.tp) / static_cast<double>(pt.tp + pt.fp);
        best = std::max(best, std::min(se, pp));
    }
    return clamp01(best);
}

MultilabelAuc multilabel_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                             std::int64_t n, std::int64_t K) {
    if (n < 1 || K < 1) throw DataError("multilabel_auc undefined on empty input");
    if (scores.size() != labels.size() || static_cast<std::int64_t>(scores.size()) != n * K) {
        throw ShapeError("multilabel_auc: expected " + std::to_string(n * K) + " entries, got " +
                         std::to_string(scores.size()) + " scores and " + std::to_string(labels.size()) + " labels");
    }
    MultilabelAuc out;
    double macro_sum = 0.0, weighted_sum = 0.0;
    std::int64_t kept = 0, weight_total = 0;
    for (std::int64_t k = 0; k < K; ++k) {
        std::vector<double> col_s(static_cast<std::size_t>(n));
        std::vector<int> col_l(static_cast<std::size_t>(n));
        std::int64_t pos = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            col_s[static_cast<std::size_t>(i)] = scores[static_cast<std::size_t>(i * K + k)];
            col_l[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i * K + k)];
            pos += col_l[static_cast<std::size_t>(i)];
        }
        if (pos == 0 || pos == n) {
            out.excluded_labels += 1;
            continue;
        }
        const double a = auroc(col_s, col_l);
        macro_sum += a;
        weighted_sum += static_cast<double>(pos) * a;
        weight_total += pos;
        kept += 1;
    }
    if (kept == 0) throw DataError("multilabel_auc undefined: every label column is single-class");
    out.macro = macro_sum / static_cast<double>(kept);
    out.weighted = weighted_sum / static_cast<double>(weight_total);
    out.micro = auroc(scores, labels);
    return out;
}

double weighted_kappa(const std::vector<int>& true_bins, const std::vector<int>& pred_bins, int C) {
    if (true_bins.size() != pred_bins.size()) {
        throw ShapeError("weighted_kappa: " + std::to_string(true_bins.size()) + " true vs " +
                         std::to_string(pred_bins.size()) + " predicted bins");
    }
    if (true_bins.empty()) throw DataError("weighted_kappa undefined on empty input");
    if (C < 2) throw DataError("weighted_kappa needs C >= 2 bins, got " + std::to_string(C));

    const auto c = static_cast<std::size_t>(C);
    std::vector<double> observed(c * c, 0.0), row(c, 0.0), col(c, 0.0);
    for (std::size_t i = 0; i < true_bins.size(); ++i) {
        const int t = true_bins[i], p = pred_bins[i];
        if (t < 0 || t >= C || p < 0 || p >= C) {
            throw DataError("weighted_kappa: bin outside [0, " + std::to_string(C) + ")");
        }
        observed[static_cast<std::size_t>(t) * c + static_cast<std::size_t>(p)] += 1.0;
        row[static_cast<std::size_t>(t)] += 1.0;
        col[static_cast<std::size_t>(p)] += 1.0;
    }
    const auto total = static_cast<double>(true_bins.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double w = std::fabs(static_cast<double>(i) - static_cast<double>(j)) / static_cast<double>(C - 1);
            num += w * observed[i * c + j];
            den += w * row[i] * col[j] / total;
        }
    }
    if (den == 0.0) throw DataError("weighted_kappa undefined: no chance disagreement in the marginals");
    const double kappa = 1.0 - num / den;
    return std::min(1.0, std::max(-1.0, kappa));
}

MseMape mse_mape(const std::vector<double>& true_values, const std::vector<double>& pred_values) {
    if (true_values.size() != pred_values.size()) {
        throw ShapeError("mse_mape: " + std::to_string(true_values.size()) + " true vs " +
                         std::to_string(pred_values.size()) + " predicted values");
    }
    if (true_values.empty()) throw DataError("mse_mape undefined on empty input");

    MseMape out;
    double se = 0.0, ape = 0.0;
    std::int64_t mape_n = 0;
    for (std::size_t i = 0; i < true_values.size(); ++i) {
        const double d = true_values[i] - pred_values[i];
        se += d * d;
        if (true_values[i] == 0.0) {
            out.excluded_zero_true += 1;
        } else {
            ape += std::fabs(d) / std::fabs(true_values[i]);
            mape_n += 1;
        }
    }
    out.mse = se / static_cast<double>(true_values.size());
    if (mape_n == 0) throw DataError("mape undefined: every true value is zero");
    out.mape = 100.0 * ape / static_cast<double>(mape_n);
    return out;
}

kv::Map MetricsReport::to_kv() const {
    kv::Map m;
    m["version"] = "1";
    m["task"] = task;
    m["samples"] = kv::fmt_i64(samples);
    for (const auto& [name, value] : values) m["metric." + name] = kv::fmt_f64(value);
    return m;
}

MetricsReport MetricsReport::from_kv(const kv::Map& m) {
    MetricsReport r;
    r.task = kv::get_str(m, "task");
    r.samples = kv::get_i64(m, "samples", 0);
    const std::string prefix = "metric.";
    for (const auto& [key, value] : m) {
        if (key.rfind(prefix, 0) == 0) r.values[key.substr(prefix.size())] = kv::parse_f64(key, value);
    }
    return r;
}

std::string MetricsReport::csv_header() const {
    std::ostringstream ss;
    ss << "task,samples";
    for (const auto& [name, value] : values) ss << ',' << name;
    return ss.str();
}

std::string MetricsReport::csv_row() const {
    std::ostringstream ss;
    ss << task << ',' << samples;
    for (const auto& [name, value] : values) ss << ',' << kv::fmt_f64(value);
    return ss.str();
}

}  // namespace attnseq
