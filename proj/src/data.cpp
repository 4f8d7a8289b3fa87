#include "attnseq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>

#include "attnseq/error.hpp"
#include "attnseq/rng.hpp"

#include "json.hpp"

namespace attnseq {

namespace {

using nlohmann::json;

// Threshold putting round(count * rate) scores strictly above it. Midpoint of
// the gap at the cut keeps the rule "score > theta" exact under replay.
double quantile_threshold(std::vector<double> scores, double rate) {
    const auto count = static_cast<std::int64_t>(scores.size());
    std::int64_t k = std::llround(rate * static_cast<double>(count));
    k = std::clamp<std::int64_t>(k, 0, count);
    std::sort(scores.begin(), scores.end(), std::greater<>());
    if (k == 0) return scores.front() + 1.0;
    if (k == count) return scores.back() - 1.0;
    return 0.5 * (scores[static_cast<std::size_t>(k - 1)] + scores[static_cast<std::size_t>(k)]);
}

void check_gen_args(std::int64_t n, std::int64_t T, std::int64_t R, double skew) {
    if (n < 1) throw ConfigError("generate: need at least one sample");
    if (T < 2) throw ConfigError("generate: need T >= 2");
    if (R < 1) throw ConfigError("generate: need R >= 1");
    if (!(skew >= 0.0 && skew <= 1.0)) throw ConfigError("generate: skew must lie in [0,1]");
}

Dataset base_dataset(HeadKind task, std::int64_t num_labels, std::int64_t n, std::int64_t T,
                     std::int64_t R, std::int64_t id_offset) {
    Dataset ds;
    ds.task = task;
    ds.num_labels = num_labels;
    ds.R = R;
    ds.T = T;
    ds.ids.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) ds.ids[static_cast<std::size_t>(i)] = id_offset + i;
    ds.lengths.assign(static_cast<std::size_t>(n), T);
    ds.x.assign(static_cast<std::size_t>(n * T * R), 0.0);
    return ds;
}

// Variable lengths in [max(4,T/2), T], floored at 1 for tiny T.
std::int64_t draw_length(Rng& rng, std::int64_t T) {
    const std::int64_t lo = std::max<std::int64_t>(std::min<std::int64_t>(T, 4), T / 2);
    return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(T - lo + 1)));
}

void fill_noise(Dataset& ds, std::int64_t b, Rng& rng) {
    const std::int64_t len = ds.lengths[static_cast<std::size_t>(b)];
    double* row = ds.x.data() + b * ds.T * ds.R;
    for (std::int64_t i = 0; i < len * ds.R; ++i) row[i] = rng.normal();
}

Dataset gen_windowed_mean(std::int64_t n, std::int64_t T, std::int64_t R, std::uint64_t seed,
                          double skew, std::int64_t id_offset) {
    Dataset ds = base_dataset(HeadKind::binary, 1, n, T, R, id_offset);
    Rng rng(seed);
    for (std::int64_t b = 0; b < n; ++b) fill_noise(ds, b, rng);

    const std::int64_t w = std::min<std::int64_t>(8, T);
    std::vector<double> score(static_cast<std::size_t>(n));
    for (std::int64_t b = 0; b < n; ++b) {
        double s = 0.0;
        for (std::int64_t t = T - w; t < T; ++t) s += ds.x[static_cast<std::size_t>((b * T + t) * R)];
        score[static_cast<std::size_t>(b)] = s / static_cast<double>(w);
    }
    const double theta = quantile_threshold(score, skew);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t b = 0; b < n; ++b) {
        ds.labels[static_cast<std::size_t>(b)] = score[static_cast<std::size_t>(b)] > theta ? 1.0 : 0.0;
    }
    return ds;
}

Dataset gen_long_range(std::int64_t n, std::int64_t T, std::int64_t R, std::uint64_t seed,
                       double skew, std::int64_t id_offset) {
    const std::int64_t K = R;
    Dataset ds = base_dataset(HeadKind::multilabel, K, n, T, R, id_offset);
    Rng rng(seed);
    const double amp = 3.0;
    ds.labels.assign(static_cast<std::size_t>(n * K), 0.0);
    for (std::int64_t b = 0; b < n; ++b) {
        fill_noise(ds, b, rng);
        double* row = ds.x.data() + b * T * R;
        for (std::int64_t k = 0; k < K; ++k) {
            const double motif = rng.uniform() < 0.5 ? -1.0 : 1.0;
            const double key = rng.uniform() < skew ? motif : -motif;
            row[k] = amp * motif;
            row[(T - 1) * R + k] = amp * key;
            ds.labels[static_cast<std::size_t>(b * K + k)] = motif == key ? 1.0 : 0.0;
        }
    }
    return ds;
}

double leaky_acc_at(const Dataset& ds, std::int64_t b, std::int64_t upto) {
    double a = 0.0;
    for (std::int64_t t = 0; t <= upto; ++t) {
        a = 0.9 * a + ds.x[static_cast<std::size_t>((b * ds.T + t) * ds.R)];
    }
    return a;
}

Dataset gen_leaky_acc(std::int64_t n, std::int64_t T, std::int64_t R, std::uint64_t seed,
                      double skew, std::int64_t id_offset) {
    Dataset ds = base_dataset(HeadKind::per_step_binary, 1, n, T, R, id_offset);
    Rng rng(seed);
    for (std::int64_t b = 0; b < n; ++b) {
        ds.lengths[static_cast<std::size_t>(b)] = draw_length(rng, T);
        fill_noise(ds, b, rng);
    }

    std::vector<double> score;
    for (std::int64_t b = 0; b < n; ++b) {
        double a = 0.0;
        for (std::int64_t t = 0; t < ds.lengths[static_cast<std::size_t>(b)]; ++t) {
            a = 0.9 * a + ds.x[static_cast<std::size_t>((b * T + t) * R)];
            score.push_back(a);
        }
    }
    const double theta = quantile_threshold(score, skew);

    ds.labels.assign(static_cast<std::size_t>(n * T), 0.0);
    ds.label_mask.assign(static_cast<std::size_t>(n * T), 0.0);
    std::size_t cursor = 0;
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t t = 0; t < ds.lengths[static_cast<std::size_t>(b)]; ++t) {
            ds.labels[static_cast<std::size_t>(b * T + t)] = score[cursor] > theta ? 1.0 : 0.0;
            ds.label_mask[static_cast<std::size_t>(b * T + t)] = 1.0;
            ++cursor;
        }
    }
    return ds;
}

Dataset gen_remaining_length(std::int64_t n, std::int64_t T, std::int64_t R, std::uint64_t seed,
                             std::int64_t id_offset) {
    const std::int64_t C = 10;
    Dataset ds = base_dataset(HeadKind::multiclass, C, n, T, R, id_offset);
    Rng rng(seed);
    for (std::int64_t b = 0; b < n; ++b) {
        ds.lengths[static_cast<std::size_t>(b)] = draw_length(rng, T);
        fill_noise(ds, b, rng);
    }

    ds.class_labels.resize(static_cast<std::size_t>(n));
    ds.continuous.resize(static_cast<std::size_t>(n));
    std::vector<double> sum(static_cast<std::size_t>(C), 0.0);
    std::vector<std::int64_t> cnt(static_cast<std::size_t>(C), 0);
    for (std::int64_t b = 0; b < n; ++b) {
        const double a = leaky_acc_at(ds, b, ds.lengths[static_cast<std::size_t>(b)] - 1);
        const auto m = std::min<std::int64_t>(29, static_cast<std::int64_t>(std::floor(3.0 * std::abs(a))));
        const std::int64_t bucket = std::min<std::int64_t>(9, m / 3);
        ds.class_labels[static_cast<std::size_t>(b)] = bucket;
        ds.continuous[static_cast<std::size_t>(b)] = static_cast<double>(m);
        sum[static_cast<std::size_t>(bucket)] += static_cast<double>(m);
        cnt[static_cast<std::size_t>(bucket)] += 1;
    }
    ds.bucket_values.resize(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        // Empty buckets fall back to the bucket's midpoint count.
        ds.bucket_values[static_cast<std::size_t>(c)] =
            cnt[static_cast<std::size_t>(c)] > 0
                ? sum[static_cast<std::size_t>(c)] / static_cast<double>(cnt[static_cast<std::size_t>(c)])
                : static_cast<double>(3 * c + 1);
    }
    return ds;
}

double positive_rate(const Dataset& ds) {
    double pos = 0.0, total = 0.0;
    if (ds.task == HeadKind::binary || ds.task == HeadKind::multilabel) {
        for (double v : ds.labels) pos += v;
        total = static_cast<double>(ds.labels.size());
    } else {
        for (std::size_t i = 0; i < ds.labels.size(); ++i) {
            if (ds.label_mask[i] == 1.0) {
                pos += ds.labels[i];
                total += 1.0;
            }
        }
    }
    return pos / total;
}

}  // namespace

Dataset generate(const std::string& generator, std::int64_t n, std::int64_t T, std::int64_t R,
                 std::uint64_t seed, double skew, std::int64_t id_offset) {
    check_gen_args(n, T, R, skew);
    if (generator == "windowed_mean") return gen_windowed_mean(n, T, R, seed, skew, id_offset);
    if (generator == "long_range") return gen_long_range(n, T, R, seed, skew, id_offset);
    if (generator == "leaky_acc") return gen_leaky_acc(n, T, R, seed, skew, id_offset);
    if (generator == "remaining_length") return gen_remaining_length(n, T, R, seed, id_offset);
    throw ConfigError("unknown generator: " + generator +
                      " (expected windowed_mean, long_range, leaky_acc, or remaining_length)");
}

SplitData generate_splits(const SplitSpec& spec) {
    if (spec.n_train < 1 || spec.n_val < 1 || spec.n_test < 1) {
        throw ConfigError("generate_splits: every split needs at least one sample");
    }
    SplitData out;
    out.train = generate(spec.generator, spec.n_train, spec.T, spec.R, spec.seed, spec.skew, 0);
    out.val = generate(spec.generator, spec.n_val, spec.T, spec.R, spec.seed + 1, spec.skew,
                       spec.n_train);
    out.test = generate(spec.generator, spec.n_test, spec.T, spec.R, spec.seed + 2, spec.skew,
                        spec.n_train + spec.n_val);

    kv::Map& m = out.manifest;
    m["format"] = "attnseq-manifest";
    m["version"] = "1";
    m["generator"] = spec.generator;
    m["task"] = head_kind_name(out.train.task);
    m["num_labels"] = kv::fmt_i64(out.train.num_labels);
    m["R"] = kv::fmt_i64(spec.R);
    m["T"] = kv::fmt_i64(spec.T);
    m["seed"] = std::to_string(spec.seed);
    m["skew"] = kv::fmt_f64(spec.skew);
    m["split.train"] = kv::fmt_i64(spec.n_train);
    m["split.val"] = kv::fmt_i64(spec.n_val);
    m["split.test"] = kv::fmt_i64(spec.n_test);

    const auto [lo, hi] =
        std::minmax_element(out.train.lengths.begin(), out.train.lengths.end());
    m["lengths.min"] = kv::fmt_i64(*lo);
    m["lengths.max"] = kv::fmt_i64(*hi);
    if (out.train.task == HeadKind::multiclass) {
        std::vector<std::int64_t> hist(static_cast<std::size_t>(out.train.num_labels), 0);
        for (std::int64_t c : out.train.class_labels) hist[static_cast<std::size_t>(c)] += 1;
        for (std::int64_t c = 0; c < out.train.num_labels; ++c) {
            m["balance.train.bucket" + std::to_string(c)] =
                kv::fmt_f64(static_cast<double>(hist[static_cast<std::size_t>(c)]) /
                           static_cast<double>(out.train.size()));
        }
    } else {
        m["balance.train"] = kv::fmt_f64(positive_rate(out.train));
    }
    return out;
}

SplitData regenerate(const kv::Map& manifest) {
    if (kv::get_str(manifest, "format", "") != "attnseq-manifest") {
        throw DataError("not a dataset manifest");
    }
    if (kv::get_i64(manifest, "version") != 1) throw DataError("unsupported manifest version");
    SplitSpec spec;
    spec.generator = kv::get_str(manifest, "generator");
    spec.n_train = kv::get_i64(manifest, "split.train");
    spec.n_val = kv::get_i64(manifest, "split.val");
    spec.n_test = kv::get_i64(manifest, "split.test");
    spec.T = kv::get_i64(manifest, "T");
    spec.R = kv::get_i64(manifest, "R");
    spec.seed = std::stoull(kv::get_str(manifest, "seed"));
    spec.skew = kv::get_f64(manifest, "skew");
    return generate_splits(spec);
}

namespace {

[[noreturn]] void line_error(std::int64_t line, const std::string& what) {
    throw DataError("line " + std::to_string(line) + ": " + what);
}

double number_at(const json& v, std::int64_t line, const char* what) {
    if (!v.is_number()) line_error(line, std::string(what) + " must be a number");
    return v.get<double>();
}

double binary_label_at(const json& v, std::int64_t line) {
    const double d = number_at(v, line, "label");
    if (d != 0.0 && d != 1.0) line_error(line, "label must be 0 or 1");
    return d;
}

struct RawRecord {
    std::int64_t id = 0;
    std::int64_t len = 0;
    std::vector<double> values;   // [len * R_raw], nulls as 0
    std::vector<double> missing;  // [len * R_raw], 1 where null
    double scalar_label = 0.0;
    std::int64_t class_label = 0;
    std::vector<double> vec_label;
    std::vector<double> mask;
    double value = 0.0;
    bool has_value = false;
};

}  // namespace

Dataset load_ndjson(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);

    std::string line;
    std::int64_t line_no = 0;

    auto next_line = [&]() -> bool {
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) return true;
        }
        return false;
    };
    auto parse_line = [&]() -> json {
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) line_error(line_no, "invalid JSON");
        if (!j.is_object()) line_error(line_no, "expected a JSON object");
        return j;
    };

    if (!next_line()) throw DataError("line 1: missing header record");
    const json header = parse_line();
    if (header.value("format", "") != "attnseq-ndjson") {
        line_error(line_no, "header must set \"format\":\"attnseq-ndjson\"");
    }
    if (!header.contains("version") || !header["version"].is_number_integer() ||
        header["version"].get<std::int64_t>() != 1) {
        line_error(line_no, "unsupported version");
    }
    if (!header.contains("task") || !header["task"].is_string()) {
        line_error(line_no, "header missing task");
    }
    HeadKind task;
    try {
        task = parse_head_kind(header["task"].get<std::string>());
    } catch (const Error& e) {
        line_error(line_no, e.what());
    }
    if (!header.contains("R") || !header["R"].is_number_integer() ||
        header["R"].get<std::int64_t>() < 1) {
        line_error(line_no, "header missing positive R");
    }
    const std::int64_t R_raw = header["R"].get<std::int64_t>();
    std::int64_t num_labels = 1;
    if (task == HeadKind::multilabel || task == HeadKind::multiclass) {
        if (!header.contains("num_labels") || !header["num_labels"].is_number_integer() ||
            header["num_labels"].get<std::int64_t>() < (task == HeadKind::multiclass ? 2 : 1)) {
            line_error(line_no, "header missing num_labels for this task");
        }
        num_labels = header["num_labels"].get<std::int64_t>();
    }
    std::vector<double> bucket_values;
    if (header.contains("bucket_values")) {
        if (!header["bucket_values"].is_array() ||
            static_cast<std::int64_t>(header["bucket_values"].size()) != num_labels) {
            line_error(line_no, "bucket_values must list one value per class");
        }
        for (const auto& v : header["bucket_values"]) {
            bucket_values.push_back(number_at(v, line_no, "bucket_values entry"));
        }
    }

    std::vector<RawRecord> records;
    while (next_line()) {
        const json j = parse_line();
        RawRecord rec;
        if (!j.contains("id") || !j["id"].is_number_integer()) line_error(line_no, "missing integer id");
        rec.id = j["id"].get<std::int64_t>();

        if (!j.contains("series") || !j["series"].is_array() || j["series"].empty()) {
            line_error(line_no, "missing non-empty series");
        }
        const json& series = j["series"];
        rec.len = static_cast<std::int64_t>(series.size());
        rec.values.reserve(static_cast<std::size_t>(rec.len * R_raw));
        rec.missing.assign(static_cast<std::size_t>(rec.len * R_raw), 0.0);
        for (std::int64_t t = 0; t < rec.len; ++t) {
            const json& row = series[static_cast<std::size_t>(t)];
            if (!row.is_array() || static_cast<std::int64_t>(row.size()) != R_raw) {
                line_error(line_no, "series row " + std::to_string(t) + " must have " +
                                        std::to_string(R_raw) + " entries");
            }
            for (std::int64_t c = 0; c < R_raw; ++c) {
                const json& cell = row[static_cast<std::size_t>(c)];
                if (cell.is_null()) {
                    rec.values.push_back(0.0);
                    rec.missing[static_cast<std::size_t>(t * R_raw + c)] = 1.0;
                } else if (cell.is_number()) {
                    rec.values.push_back(cell.get<double>());
                } else {
                    line_error(line_no, "series entries must be numbers or null");
                }
            }
        }

        if (!j.contains("label")) line_error(line_no, "missing label");
        const json& lab = j["label"];
        switch (task) {
            case HeadKind::binary:
                rec.scalar_label = binary_label_at(lab, line_no);
                break;
            case HeadKind::multilabel: {
                if (!lab.is_array() || static_cast<std::int64_t>(lab.size()) != num_labels) {
                    line_error(line_no, "label must be an array of " + std::to_string(num_labels));
                }
                for (const auto& v : lab) rec.vec_label.push_back(binary_label_at(v, line_no));
                break;
            }
            case HeadKind::multiclass: {
                if (!lab.is_number_integer()) line_error(line_no, "label must be an integer class");
                rec.class_label = lab.get<std::int64_t>();
                if (rec.class_label < 0 || rec.class_label >= num_labels) {
                    line_error(line_no, "class label out of range");
                }
                if (j.contains("value")) {
                    rec.value = number_at(j["value"], line_no, "value");
                    rec.has_value = true;
                }
                break;
            }
            case HeadKind::per_step_binary:
            case HeadKind::per_step_regression: {
                if (!lab.is_array() || static_cast<std::int64_t>(lab.size()) != rec.len) {
                    line_error(line_no, "label must be an array with one entry per step");
                }
                for (const auto& v : lab) {
                    rec.vec_label.push_back(task == HeadKind::per_step_binary
                                                ? binary_label_at(v, line_no)
                                                : number_at(v, line_no, "label"));
                }
                if (j.contains("label_mask")) {
                    const json& mk = j["label_mask"];
                    if (!mk.is_array() || static_cast<std::int64_t>(mk.size()) != rec.len) {
                        line_error(line_no, "label_mask must be an array with one entry per step");
                    }
                    for (const auto& v : mk) rec.mask.push_back(binary_label_at(v, line_no));
                } else {
                    rec.mask.assign(static_cast<std::size_t>(rec.len), 1.0);
                }
                break;
            }
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw DataError("no records after the header");

    const std::int64_t n = static_cast<std::int64_t>(records.size());
    std::int64_t T = 0;
    for (const RawRecord& r : records) T = std::max(T, r.len);

    Dataset ds;
    ds.task = task;
    ds.num_labels = num_labels;
    ds.R = 2 * R_raw;
    ds.T = T;
    ds.indicator_from = R_raw;
    ds.bucket_values = std::move(bucket_values);
    ds.ids.resize(static_cast<std::size_t>(n));
    ds.lengths.resize(static_cast<std::size_t>(n));
    ds.x.assign(static_cast<std::size_t>(n * T * ds.R), 0.0);
    const bool per_step = is_per_step(task);
    if (task == HeadKind::binary) ds.labels.assign(static_cast<std::size_t>(n), 0.0);
    if (task == HeadKind::multilabel) ds.labels.assign(static_cast<std::size_t>(n * num_labels), 0.0);
    if (task == HeadKind::multiclass) ds.class_labels.assign(static_cast<std::size_t>(n), 0);
    if (per_step) {
        ds.labels.assign(static_cast<std::size_t>(n * T), 0.0);
        ds.label_mask.assign(static_cast<std::size_t>(n * T), 0.0);
    }

    bool any_value = false;
    for (const RawRecord& r : records) any_value = any_value || r.has_value;
    if (any_value) ds.continuous.assign(static_cast<std::size_t>(n), 0.0);

    for (std::int64_t b = 0; b < n; ++b) {
        const RawRecord& r = records[static_cast<std::size_t>(b)];
        ds.ids[static_cast<std::size_t>(b)] = r.id;
        ds.lengths[static_cast<std::size_t>(b)] = r.len;
        for (std::int64_t t = 0; t < r.len; ++t) {
            double* cell = ds.x.data() + (b * T + t) * ds.R;
            for (std::int64_t c = 0; c < R_raw; ++c) {
                cell[c] = r.values[static_cast<std::size_t>(t * R_raw + c)];
                cell[R_raw + c] = r.missing[static_cast<std::size_t>(t * R_raw + c)];
            }
        }
        switch (task) {
            case HeadKind::binary:
                ds.labels[static_cast<std::size_t>(b)] = r.scalar_label;
                break;
            case HeadKind::multilabel:
                std::copy(r.vec_label.begin(), r.vec_label.end(),
                          ds.labels.begin() + b * num_labels);
                break;
            case HeadKind::multiclass:
                ds.class_labels[static_cast<std::size_t>(b)] = r.class_label;
                if (any_value) ds.continuous[static_cast<std::size_t>(b)] = r.value;
                break;
            case HeadKind::per_step_binary:
            case HeadKind::per_step_regression:
                std::copy(r.vec_label.begin(), r.vec_label.end(), ds.labels.begin() + b * T);
                std::copy(r.mask.begin(), r.mask.end(), ds.label_mask.begin() + b * T);
                break;
        }
    }
    return ds;
}

void save_ndjson(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);

    const std::int64_t R_raw = ds.indicator_from < 0 ? ds.R : ds.indicator_from;
    json header;
    header["format"] = "attnseq-ndjson";
    header["version"] = 1;
    header["task"] = head_kind_name(ds.task);
    header["R"] = R_raw;
    header["num_labels"] = ds.num_labels;
    if (!ds.bucket_values.empty()) header["bucket_values"] = ds.bucket_values;
    out << header.dump() << '\n';

    for (std::int64_t b = 0; b < ds.size(); ++b) {
        const std::int64_t len = ds.lengths[static_cast<std::size_t>(b)];
        json rec;
        rec["id"] = ds.ids[static_cast<std::size_t>(b)];
        json series = json::array();
        for (std::int64_t t = 0; t < len; ++t) {
            const double* cell = ds.x.data() + (b * ds.T + t) * ds.R;
            json row = json::array();
            for (std::int64_t c = 0; c < R_raw; ++c) {
                if (ds.indicator_from >= 0 && cell[ds.indicator_from + c] == 1.0) {
                    row.push_back(nullptr);
                } else {
                    row.push_back(cell[c]);
                }
            }
            series.push_back(std::move(row));
        }
        rec["series"] = std::move(series);

        switch (ds.task) {
            case HeadKind::binary:
                rec["label"] = ds.labels[static_cast<std::size_t>(b)];
                break;
            case HeadKind::multilabel: {
                json lab = json::array();
                for (std::int64_t k = 0; k < ds.num_labels; ++k) {
                    lab.push_back(ds.labels[static_cast<std::size_t>(b * ds.num_labels + k)]);
                }
                rec["label"] = std::move(lab);
                break;
            }
            case HeadKind::multiclass:
                rec["label"] = ds.class_labels[static_cast<std::size_t>(b)];
                if (!ds.continuous.empty()) rec["value"] = ds.continuous[static_cast<std::size_t>(b)];
                break;
            case HeadKind::per_step_binary:
            case HeadKind::per_step_regression: {
                json lab = json::array();
                json mask = json::array();
                for (std::int64_t t = 0; t < len; ++t) {
                    lab.push_back(ds.labels[static_cast<std::size_t>(b * ds.T + t)]);
                    mask.push_back(ds.label_mask[static_cast<std::size_t>(b * ds.T + t)]);
                }
                rec["label"] = std::move(lab);
                rec["label_mask"] = std::move(mask);
                break;
            }
        }
        out << rec.dump() << '\n';
    }
    if (!out) throw DataError("short write to " + path);
}

void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);

    out << "id,length,step";
    for (std::int64_t c = 0; c < ds.R; ++c) out << ",x" << c;
    switch (ds.task) {
        case HeadKind::binary:
        case HeadKind::multiclass:
            out << ",label";
            break;
        case HeadKind::multilabel:
            for (std::int64_t k = 0; k < ds.num_labels; ++k) out << ",label" << k;
            break;
        case HeadKind::per_step_binary:
        case HeadKind::per_step_regression:
            out << ",label,label_mask";
            break;
    }
    out << '\n';

    for (std::int64_t b = 0; b < ds.size(); ++b) {
        const std::int64_t len = ds.lengths[static_cast<std::size_t>(b)];
        for (std::int64_t t = 0; t < len; ++t) {
            out << ds.ids[static_cast<std::size_t>(b)] << ',' << len << ',' << t;
            const double* cell = ds.x.data() + (b * ds.T + t) * ds.R;
            for (std::int64_t c = 0; c < ds.R; ++c) out << ',' << kv::fmt_f64(cell[c]);
            switch (ds.task) {
                case HeadKind::binary:
                    out << ',' << kv::fmt_f64(ds.labels[static_cast<std::size_t>(b)]);
                    break;
                case HeadKind::multiclass:
                    out << ',' << ds.class_labels[static_cast<std::size_t>(b)];
                    break;
                case HeadKind::multilabel:
                    for (std::int64_t k = 0; k < ds.num_labels; ++k) {
                        out << ',' << kv::fmt_f64(ds.labels[static_cast<std::size_t>(b * ds.num_labels + k)]);
                    }
                    break;
                case HeadKind::per_step_binary:
                case HeadKind::per_step_regression:
                    out << ',' << kv::fmt_f64(ds.labels[static_cast<std::size_t>(b * ds.T + t)]) << ','
                        << kv::fmt_f64(ds.label_mask[static_cast<std::size_t>(b * ds.T + t)]);
                    break;
            }
            out << '\n';
        }
    }
    if (!out) throw DataError("short write to " + path);
}

NormStats compute_norm_stats(const std::vector<const Dataset*>& splits) {
    if (splits.empty() || splits[0] == nullptr) throw DataError("compute_norm_stats: no data");
    const std::int64_t R = splits[0]->R;
    const std::int64_t indicator_from = splits[0]->indicator_from;
    const std::int64_t limit = indicator_from < 0 ? R : indicator_from;
    NormStats stats;
    stats.mean.assign(static_cast<std::size_t>(R), 0.0);
    stats.stddev.assign(static_cast<std::size_t>(R), 1.0);

    std::vector<double> sum(static_cast<std::size_t>(limit), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(limit), 0.0);
    double steps = 0.0;
    for (const Dataset* ds : splits) {
        if (ds == nullptr || ds->size() == 0) throw DataError("compute_norm_stats: empty dataset");
        if (ds->R != R || ds->indicator_from != indicator_from) {
            throw ShapeError("compute_norm_stats: datasets disagree on channel layout");
        }
        for (std::int64_t b = 0; b < ds->size(); ++b) {
            const std::int64_t len = ds->lengths[static_cast<std::size_t>(b)];
            steps += static_cast<double>(len);
            for (std::int64_t t = 0; t < len; ++t) {
                const double* cell = ds->x.data() + (b * ds->T + t) * ds->R;
                for (std::int64_t c = 0; c < limit; ++c) {
                    sum[static_cast<std::size_t>(c)] += cell[c];
                    sumsq[static_cast<std::size_t>(c)] += cell[c] * cell[c];
                }
            }
        }
    }
    for (std::int64_t c = 0; c < limit; ++c) {
        const double mu = sum[static_cast<std::size_t>(c)] / steps;
        const double var = std::max(0.0, sumsq[static_cast<std::size_t>(c)] / steps - mu * mu);
        stats.mean[static_cast<std::size_t>(c)] = mu;
        stats.stddev[static_cast<std::size_t>(c)] = std::max(std::sqrt(var), 1e-8);
    }
    return stats;
}

NormStats compute_norm_stats(const Dataset& train) { return compute_norm_stats({&train}); }

namespace {

void check_stats(const Dataset& ds, const NormStats& stats) {
    if (static_cast<std::int64_t>(stats.mean.size()) != ds.R ||
        static_cast<std::int64_t>(stats.stddev.size()) != ds.R) {
        throw ShapeError("normalization stats cover " + std::to_string(stats.mean.size()) +
                         " channels, dataset has " + std::to_string(ds.R));
    }
}

}  // namespace

void apply_norm(Dataset& ds, const NormStats& stats) {
    check_stats(ds, stats);
    for (std::int64_t b = 0; b < ds.size(); ++b) {
        const std::int64_t len = ds.lengths[static_cast<std::size_t>(b)];
        for (std::int64_t t = 0; t < len; ++t) {
            double* cell = ds.x.data() + (b * ds.T + t) * ds.R;
            for (std::int64_t c = 0; c < ds.R; ++c) {
                cell[c] = (cell[c] - stats.mean[static_cast<std::size_t>(c)]) /
                          stats.stddev[static_cast<std::size_t>(c)];
            }
        }
    }
}

void invert_norm(Dataset& ds, const NormStats& stats) {
    check_stats(ds, stats);
    for (std::int64_t b = 0; b < ds.size(); ++b) {
        const std::int64_t len = ds.lengths[static_cast<std::size_t>(b)];
        for (std::int64_t t = 0; t < len; ++t) {
            double* cell = ds.x.data() + (b * ds.T + t) * ds.R;
            for (std::int64_t c = 0; c < ds.R; ++c) {
                cell[c] = cell[c] * stats.stddev[static_cast<std::size_t>(c)] +
                          stats.mean[static_cast<std::size_t>(c)];
            }
        }
    }
}

Dataset gather(const Dataset& ds, const std::vector<std::int64_t>& rows) {
    Dataset out;
    out.task = ds.task;
    out.num_labels = ds.num_labels;
    out.R = ds.R;
    out.T = ds.T;
    out.indicator_from = ds.indicator_from;
    out.bucket_values = ds.bucket_values;

    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    const bool per_step = is_per_step(ds.task);
    out.ids.resize(static_cast<std::size_t>(n));
    out.lengths.resize(static_cast<std::size_t>(n));
    out.x.resize(static_cast<std::size_t>(n * ds.T * ds.R));
    if (!ds.labels.empty()) {
        const std::int64_t width = ds.task == HeadKind::binary ? 1
                                   : per_step                  ? ds.T
                                                               : ds.num_labels;
        out.labels.resize(static_cast<std::size_t>(n * width));
    }
    if (!ds.class_labels.empty()) out.class_labels.resize(static_cast<std::size_t>(n));
    if (!ds.label_mask.empty()) out.label_mask.resize(static_cast<std::size_t>(n * ds.T));
    if (!ds.continuous.empty()) out.continuous.resize(static_cast<std::size_t>(n));

    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t b = rows[static_cast<std::size_t>(i)];
        if (b < 0 || b >= ds.size()) throw DataError("gather: row index out of range");
        out.ids[static_cast<std::size_t>(i)] = ds.ids[static_cast<std::size_t>(b)];
        out.lengths[static_cast<std::size_t>(i)] = ds.lengths[static_cast<std::size_t>(b)];
        std::copy_n(ds.x.begin() + b * ds.T * ds.R, ds.T * ds.R, out.x.begin() + i * ds.T * ds.R);
        if (!ds.labels.empty()) {
            const std::int64_t width = ds.task == HeadKind::binary ? 1
                                       : per_step                  ? ds.T
                                                                   : ds.num_labels;
            std::copy_n(ds.labels.begin() + b * width, width, out.labels.begin() + i * width);
        }
        if (!ds.class_labels.empty()) {
            out.class_labels[static_cast<std::size_t>(i)] = ds.class_labels[static_cast<std::size_t>(b)];
        }
        if (!ds.label_mask.empty()) {
            std::copy_n(ds.label_mask.begin() + b * ds.T, ds.T, out.label_mask.begin() + i * ds.T);
        }
        if (!ds.continuous.empty()) {
            out.continuous[static_cast<std::size_t>(i)] = ds.continuous[static_cast<std::size_t>(b)];
        }
    }
    return out;
}

namespace {

void check_range(const Dataset& ds, std::int64_t begin, std::int64_t end) {
    if (begin < 0 || end > ds.size() || begin >= end) {
        throw ShapeError("batch range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for " + std::to_string(ds.size()) + " rows");
    }
}

}  // namespace

Tensor batch_x(const Dataset& ds, std::int64_t begin, std::int64_t end) {
    check_range(ds, begin, end);
    const std::int64_t b = end - begin;
    std::vector<double> buf(ds.x.begin() + begin * ds.T * ds.R, ds.x.begin() + end * ds.T * ds.R);
    return Tensor({b, ds.T, ds.R}, std::move(buf));
}

std::vector<std::int64_t> batch_lengths(const Dataset& ds, std::int64_t begin, std::int64_t end) {
    check_range(ds, begin, end);
    return {ds.lengths.begin() + begin, ds.lengths.begin() + end};
}

Tensor batch_labels(const Dataset& ds, std::int64_t begin, std::int64_t end) {
    check_range(ds, begin, end);
    const std::int64_t b = end - begin;
    switch (ds.task) {
        case HeadKind::binary:
            return Tensor({b}, {ds.labels.begin() + begin, ds.labels.begin() + end});
        case HeadKind::multilabel:
            return Tensor({b, ds.num_labels}, {ds.labels.begin() + begin * ds.num_labels,
                                               ds.labels.begin() + end * ds.num_labels});
        case HeadKind::per_step_binary:
        case HeadKind::per_step_regression:
            return Tensor({b, ds.T},
                          {ds.labels.begin() + begin * ds.T, ds.labels.begin() + end * ds.T});
        case HeadKind::multiclass:
            throw ConfigError("multiclass targets are class indices; use batch_classes");
    }
    throw ConfigError("unreachable");
}

std::vector<std::int64_t> batch_classes(const Dataset& ds, std::int64_t begin, std::int64_t end) {
    check_range(ds, begin, end);
    if (ds.task != HeadKind::multiclass) throw ConfigError("batch_classes needs a multiclass dataset");
    return {ds.class_labels.begin() + begin, ds.class_labels.begin() + end};
}

Tensor batch_label_mask(const Dataset& ds, std::int64_t begin, std::int64_t end) {
    check_range(ds, begin, end);
    const std::int64_t b = end - begin;
    if (!ds.label_mask.empty()) {
        return Tensor({b, ds.T},
                      {ds.label_mask.begin() + begin * ds.T, ds.label_mask.begin() + end * ds.T});
    }
    std::vector<double> mask(static_cast<std::size_t>(b * ds.T), 0.0);
    for (std::int64_t i = 0; i < b; ++i) {
        const std::int64_t len = ds.lengths[static_cast<std::size_t>(begin + i)];
        std::fill_n(mask.begin() + i * ds.T, len, 1.0);
    }
    return Tensor({b, ds.T}, std::move(mask));
}

}  // namespace attnseq
