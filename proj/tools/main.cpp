// attnseq: generate synthetic datasets, train and evaluate sequence models,
// benchmark the encoder, and sweep hyperparameters.
//
// Exit codes: 0 success, 1 usage, 2 data or configuration error,
// 3 training divergence.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "attnseq/data.hpp"
#include "attnseq/error.hpp"
#include "attnseq/kvtext.hpp"
#include "attnseq/model.hpp"
#include "attnseq/rng.hpp"
#include "attnseq/train.hpp"

namespace fs = std::filesystem;
using namespace attnseq;

namespace {

const std::vector<std::string> kGenerators = {"windowed_mean", "long_range", "leaky_acc",
                                              "remaining_length"};

std::string default_out() {
    const char* env = std::getenv("ATTNSEQ_OUT");
    return env != nullptr && *env != '\0' ? env : ".";
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir + ": " + ec.message());
}

void refuse_overwrite(const std::vector<std::string>& paths, bool force) {
    if (force) return;
    for (const std::string& p : paths) {
        if (fs::exists(p)) throw DataError(p + " exists; pass --force to overwrite");
    }
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw DataError("short write to " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::int64_t> parse_i64_list(const std::string& flag, const std::string& text) {
    std::vector<std::int64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(kv::parse_i64(flag, kv::trim(item)));
    }
    if (out.empty()) throw ConfigError(flag + ": empty list");
    return out;
}

std::vector<double> parse_f64_list(const std::string& flag, const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(kv::parse_f64(flag, kv::trim(item)));
    }
    if (out.empty()) throw ConfigError(flag + ": empty list");
    return out;
}

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

// Label balance for one split, printable: positive rate for the binary
// family, per-bucket counts for multiclass.
std::string balance_string(const Dataset& ds) {
    switch (ds.task) {
        case HeadKind::binary:
        case HeadKind::multilabel: {
            double s = 0.0;
            for (double v : ds.labels) s += v;
            return fmt3(s / static_cast<double>(ds.labels.size()));
        }
        case HeadKind::per_step_binary:
        case HeadKind::per_step_regression: {
            double s = 0.0, n = 0.0;
            for (std::size_t i = 0; i < ds.labels.size(); ++i) {
                if (ds.label_mask[i] != 1.0) continue;
                s += ds.labels[i];
                n += 1.0;
            }
            return ds.task == HeadKind::per_step_binary ? fmt3(s / n)
                                                        : "mean " + fmt3(s / n);
        }
        case HeadKind::multiclass: {
            std::vector<std::int64_t> counts(static_cast<std::size_t>(ds.num_labels), 0);
            for (std::int64_t c : ds.class_labels) ++counts[static_cast<std::size_t>(c)];
            std::string out = "buckets";
            for (std::int64_t c : counts) out += " " + std::to_string(c);
            return out;
        }
    }
    return "?";
}

TaskSpec spec_for(const Dataset& ds) {
    TaskSpec spec;
    spec.kind = ds.task;
    switch (ds.task) {
        case HeadKind::binary: spec.num_labels = 2; break;
        case HeadKind::multilabel:
        case HeadKind::multiclass: spec.num_labels = ds.num_labels; break;
        case HeadKind::per_step_binary:
        case HeadKind::per_step_regression: spec.num_labels = 1; break;
    }
    return spec;
}

void set_norm_stats(SequenceModel& model, const NormStats& stats) {
    const auto R = static_cast<std::int64_t>(stats.mean.size());
    model.norm_mean = Tensor({R}, stats.mean);
    model.norm_std = Tensor({R}, stats.stddev);
}

// ---------------------------------------------------------------- gen ----

struct GenArgs {
    std::string generator;
    std::int64_t n = 1000;
    std::int64_t T = 48;
    std::int64_t R = 3;
    std::uint64_t seed = 1;
    double skew = 0.5;
    std::string split = "0.7,0.15,0.15";
    std::string out;
    std::string name;
    bool force = false;
};

int cmd_gen(const GenArgs& a) {
    const std::vector<double> f = parse_f64_list("--split", a.split);
    if (f.size() != 3) throw ConfigError("--split: expected three fractions, got " + a.split);
    double sum = 0.0;
    for (double v : f) {
        if (v < 0.0) throw ConfigError("--split: fractions must be >= 0");
        sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6) throw ConfigError("--split: fractions must sum to 1");

    SplitSpec spec;
    spec.generator = a.generator;
    // Rounding rule: train and val round to nearest, test takes the rest.
    spec.n_train = std::llround(static_cast<double>(a.n) * f[0]);
    spec.n_val = std::llround(static_cast<double>(a.n) * f[1]);
    spec.n_test = a.n - spec.n_train - spec.n_val;
    if (spec.n_train < 1 || spec.n_val < 1 || spec.n_test < 1) {
        throw ConfigError("--split: every split needs at least one sample");
    }
    spec.T = a.T;
    spec.R = a.R;
    spec.seed = a.seed;
    spec.skew = a.skew;

    const std::string out = a.out.empty() ? default_out() : a.out;
    ensure_dir(out);
    const std::string prefix = join_path(out, a.name.empty() ? a.generator : a.name);
    const std::vector<std::string> files = {prefix + ".train.ndjson", prefix + ".val.ndjson",
                                            prefix + ".test.ndjson", prefix + ".manifest"};
    refuse_overwrite(files, a.force);

    SplitData data = generate_splits(spec);
    save_ndjson(data.train, files[0]);
    save_ndjson(data.val, files[1]);
    save_ndjson(data.test, files[2]);
    write_file(files[3], kv::serialize(data.manifest));

    for (const std::string& p : files) std::cout << "wrote " << p << "\n";
    std::cout << "\nsplit  samples  balance\n";
    std::cout << "train  " << data.train.size() << "  " << balance_string(data.train) << "\n";
    std::cout << "val    " << data.val.size() << "  " << balance_string(data.val) << "\n";
    std::cout << "test   " << data.test.size() << "  " << balance_string(data.test) << "\n";
    return 0;
}

// -------------------------------------------------------------- train ----

struct TrainArgs {
    std::string config;
    std::vector<std::string> data;  // dataset prefixes, one per task
    bool multi_task = false;
    std::string lambdas;  // comma list, overrides config
    double lr = 0.0;
    bool lr_set = false;
    std::int64_t epochs = 0;
    bool epochs_set = false;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    std::string name = "run";
    bool force = false;
};

// Every key a train config file may contain; anything else is an error.
void check_config_keys(const kv::Map& m) {
    static const std::set<std::string> exact = {
        "version", "seed",
        "model.R", "model.d", "model.h", "model.N", "model.heads", "model.r", "model.M",
        "model.T_max", "model.dropout_residue", "model.dropout_attention", "model.dropout_input",
        "model.include_self", "model.learn_positional",
        "train.lr", "train.batch_size", "train.epochs", "train.chunk_size",
        "train.chunks_per_epoch", "train.patience", "train.eval_metric", "train.clip_norm"};
    static const std::regex task_key("^task\\.[0-9]+\\.(lambda|data)$");
    for (const auto& [k, v] : m) {
        if (exact.count(k) != 0 || std::regex_match(k, task_key)) continue;
        throw ConfigError("unknown config key '" + k + "'");
    }
}

int cmd_train(const TrainArgs& a) {
    const kv::Map conf = kv::parse(read_file(a.config));
    check_config_keys(conf);
    const std::int64_t version = kv::get_i64(conf, "version");
    if (version != 1) {
        throw ConfigError("config version " + std::to_string(version) + " is not supported");
    }

    // Dataset prefixes: command line wins, else task.N.data keys in order.
    std::vector<std::string> prefixes = a.data;
    if (prefixes.empty()) {
        for (std::int64_t i = 0;; ++i) {
            const auto it = conf.find("task." + std::to_string(i) + ".data");
            if (it == conf.end()) break;
            prefixes.push_back(it->second);
        }
    }
    if (prefixes.empty()) {
        throw ConfigError("no datasets: pass --data PREFIX or set task.0.data in the config");
    }
    if (prefixes.size() > 1 && !a.multi_task) {
        throw ConfigError("got " + std::to_string(prefixes.size()) +
                          " datasets; pass --multi-task to train one head per dataset");
    }
    if (prefixes.size() == 1 && a.multi_task) {
        throw ConfigError("--multi-task needs more than one dataset");
    }

    std::vector<Dataset> train_sets, val_sets;
    for (const std::string& p : prefixes) {
        train_sets.push_back(load_ndjson(p + ".train.ndjson"));
        val_sets.push_back(load_ndjson(p + ".val.ndjson"));
    }

    const std::uint64_t run_seed =
        a.seed_set ? a.seed : static_cast<std::uint64_t>(kv::get_i64(conf, "seed", 1));

    // Model configuration: file keys over defaults; R and T_max can come
    // from the data.
    ModelConfig mc;
    mc.R = kv::get_i64(conf, "model.R", train_sets[0].R);
    mc.d = kv::get_i64(conf, "model.d", mc.d);
    mc.h = kv::get_i64(conf, "model.h", mc.h);
    mc.N = kv::get_i64(conf, "model.N", mc.N);
    mc.heads = kv::get_i64(conf, "model.heads", mc.heads);
    mc.r = kv::get_i64(conf, "model.r", mc.r);
    mc.M = kv::get_i64(conf, "model.M", mc.M);
    std::int64_t t_max = 0;
    for (const auto& sets : {std::cref(train_sets), std::cref(val_sets)}) {
        for (const Dataset& ds : sets.get()) t_max = std::max(t_max, ds.T);
    }
    mc.T_max = kv::get_i64(conf, "model.T_max", t_max);
    mc.dropout_residue = kv::get_f64(conf, "model.dropout_residue", mc.dropout_residue);
    mc.dropout_attention = kv::get_f64(conf, "model.dropout_attention", mc.dropout_attention);
    mc.dropout_input = kv::get_f64(conf, "model.dropout_input", mc.dropout_input);
    mc.include_self = kv::get_bool(conf, "model.include_self", mc.include_self);
    mc.learn_positional = kv::get_bool(conf, "model.learn_positional", mc.learn_positional);
    mc.seed = sub_seed(run_seed, "init");

    std::vector<TaskSpec> specs;
    for (const Dataset& ds : train_sets) specs.push_back(spec_for(ds));
    mc.head_kind = specs[0].kind;
    mc.num_labels = specs[0].num_labels;

    TrainConfig tc;
    tc.lr = kv::get_f64(conf, "train.lr", tc.lr);
    tc.batch_size = kv::get_i64(conf, "train.batch_size", tc.batch_size);
    tc.epochs = kv::get_i64(conf, "train.epochs", tc.epochs);
    tc.chunk_size = kv::get_i64(conf, "train.chunk_size", tc.chunk_size);
    tc.chunks_per_epoch = kv::get_i64(conf, "train.chunks_per_epoch", tc.chunks_per_epoch);
    tc.patience = kv::get_i64(conf, "train.patience", tc.patience);
    tc.eval_metric = kv::get_str(conf, "train.eval_metric", tc.eval_metric);
    tc.clip_norm = kv::get_f64(conf, "train.clip_norm", tc.clip_norm);
    tc.seed = run_seed;
    if (a.lr_set) tc.lr = a.lr;
    if (a.epochs_set) tc.epochs = a.epochs;

    // Task weights: flag, then config keys, then the four-task defaults.
    std::vector<double> lambdas(prefixes.size(), 1.0);
    if (prefixes.size() == 4) {
        const MultiTaskWeights w;
        lambdas = {w.lambda_p, w.lambda_i, w.lambda_d, w.lambda_l};
    }
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
        lambdas[i] = kv::get_f64(conf, "task." + std::to_string(i) + ".lambda", lambdas[i]);
    }
    if (!a.lambdas.empty()) {
        lambdas = parse_f64_list("--lambda", a.lambdas);
        if (lambdas.size() != prefixes.size()) {
            throw ConfigError("--lambda: got " + std::to_string(lambdas.size()) +
                              " weights for " + std::to_string(prefixes.size()) + " tasks");
        }
    }

    const std::string out = a.out.empty() ? default_out() : a.out;
    ensure_dir(out);
    const std::string prefix = join_path(out, a.name);
    const std::vector<std::string> files = {prefix + ".ckpt", prefix + ".history.csv",
                                            prefix + ".summary"};
    refuse_overwrite(files, a.force);

    SequenceModel model = init_model(mc, specs);
    std::vector<const Dataset*> train_ptrs;
    for (const Dataset& ds : train_sets) train_ptrs.push_back(&ds);
    set_norm_stats(model, compute_norm_stats(train_ptrs));

    std::vector<TaskData> tasks;
    for (std::size_t i = 0; i < train_sets.size(); ++i) {
        tasks.push_back(TaskData{&train_sets[i], &val_sets[i], lambdas[i]});
    }

    const TrainResult res = train_model(model, tasks, tc);

    save_model(model, files[0]);
    std::string hist;
    if (tasks.size() > 1) {
        hist += "# lambda =";
        for (std::size_t i = 0; i < lambdas.size(); ++i) {
            hist += (i == 0 ? " " : ",") + kv::fmt_f64(lambdas[i]);
        }
        hist += "\n";
    }
    hist += history_csv(res, tasks.size());
    write_file(files[1], hist);

    kv::Map summary;
    summary["version"] = "1";
    summary["seed"] = std::to_string(run_seed);
    summary["tasks"] = std::to_string(tasks.size());
    summary["epochs_run"] = std::to_string(res.history.size());
    summary["best_epoch"] = std::to_string(res.best_epoch);
    summary["best_metric"] = kv::fmt_f64(res.best_metric);
    summary["early_stopped"] = res.early_stopped ? "true" : "false";
    const EpochRecord& best = res.history[static_cast<std::size_t>(res.best_epoch - 1)];
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const std::string t = "task." + std::to_string(i) + ".";
        summary[t + "data"] = prefixes[i];
        summary[t + "lambda"] = kv::fmt_f64(lambdas[i]);
        summary[t + "metric"] = resolve_metric_name(specs[i].kind, tc.eval_metric);
        summary[t + "val"] = kv::fmt_f64(best.task_metrics[i]);
    }
    write_file(files[2], kv::serialize(summary));

    std::cout << "trained " << tasks.size() << (tasks.size() == 1 ? " task" : " tasks") << " for "
              << res.history.size() << " epochs" << (res.early_stopped ? " (early stop)" : "")
              << "\n";
    std::cout << "best epoch " << res.best_epoch << "  mean val metric "
              << kv::fmt_f64(res.best_metric) << "\n";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        std::cout << "  task " << i << "  val "
                  << resolve_metric_name(specs[i].kind, tc.eval_metric) << " = "
                  << kv::fmt_f64(best.task_metrics[i]) << "  (lambda "
                  << kv::fmt_f64(lambdas[i]) << ")\n";
    }
    for (const std::string& p : files) std::cout << "wrote " << p << "\n";
    return 0;
}

// --------------------------------------------------------------- eval ----

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::int64_t task = 0;
    std::int64_t batch = 64;
    std::string out;
    std::string name = "eval";
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    SequenceModel model = load_model(a.checkpoint);
    Dataset ds = load_ndjson(a.data);
    if (a.task < 0 || a.task >= static_cast<std::int64_t>(model.heads.size())) {
        throw ConfigError("--task " + std::to_string(a.task) + " out of range for " +
                          std::to_string(model.heads.size()) + " heads");
    }
    if (ds.R != model.cfg.R) {
        throw ConfigError("dataset has " + std::to_string(ds.R) + " channels, model expects " +
                          std::to_string(model.cfg.R));
    }
    if (ds.T > model.cfg.T_max) {
        throw ConfigError("dataset sequences span " + std::to_string(ds.T) +
                          " steps, model supports " + std::to_string(model.cfg.T_max));
    }

    const std::string out = a.out.empty() ? default_out() : a.out;
    ensure_dir(out);
    const std::string prefix = join_path(out, a.name);
    const std::vector<std::string> files = {prefix + ".metrics", prefix + ".metrics.csv"};
    refuse_overwrite(files, a.force);

    InterpCache cache(model.cfg.M);
    const MetricsReport rep =
        evaluate(model, static_cast<std::size_t>(a.task), ds, cache, a.batch);

    const std::string kv_text = kv::serialize(rep.to_kv());
    std::cout << kv_text;
    write_file(files[0], kv_text);
    write_file(files[1], rep.csv_header() + "\n" + rep.csv_row() + "\n");
    for (const std::string& p : files) std::cout << "wrote " << p << "\n";
    return 0;
}

// -------------------------------------------------------------- bench ----

struct BenchArgs {
    std::string T = "256,512";
    std::string r = "16";
    std::string d = "64";
    std::string N = "2";
    std::int64_t heads = 4;
    std::int64_t R = 4;
    std::int64_t batch = 8;
    std::int64_t repeats = 5;
    std::string attention = "banded";
    std::uint64_t seed = 1;
    std::string out;
    std::string name = "bench";
    bool force = false;
};

// Median wall-clock of one forward + backward pass, in milliseconds.
double time_step(const SequenceModel& model, const Dataset& ds, std::int64_t repeats,
                 bool dense) {
    InterpCache cache(model.cfg.M);
    ForwardCtx ctx;
    ctx.dense_attention = dense;
    std::vector<double> ms;
    for (std::int64_t k = 0; k <= repeats; ++k) {  // first pass warms up, untimed
        const auto t0 = std::chrono::steady_clock::now();
        Tensor loss = task_loss(model, 0, ds, 0, ds.size(), cache, ctx);
        loss.backward();
        const auto t1 = std::chrono::steady_clock::now();
        if (k > 0) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        for (NamedTensor& p : trainable_params(model)) p.tensor.zero_grad();
    }
    std::sort(ms.begin(), ms.end());
    const std::size_t n = ms.size();
    return n % 2 == 1 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
}

Dataset bench_dataset(std::int64_t batch, std::int64_t T, std::int64_t R, std::uint64_t seed) {
    Dataset ds;
    ds.task = HeadKind::binary;
    ds.num_labels = 1;
    ds.R = R;
    ds.T = T;
    Rng rng(seed);
    for (std::int64_t b = 0; b < batch; ++b) {
        ds.ids.push_back(b);
        ds.lengths.push_back(T);
        ds.labels.push_back(rng.below(2) == 0 ? 0.0 : 1.0);
    }
    ds.x.resize(static_cast<std::size_t>(batch * T * R));
    for (double& v : ds.x) v = rng.normal();
    return ds;
}

int cmd_bench(const BenchArgs& a) {
    const auto Ts = parse_i64_list("--T", a.T);
    const auto rs = parse_i64_list("--r", a.r);
    const auto ds_ = parse_i64_list("--d", a.d);
    const auto Ns = parse_i64_list("--N", a.N);
    if (a.repeats < 1) throw ConfigError("--repeats must be >= 1");
    const bool dense = a.attention == "dense";

    const std::string out = a.out.empty() ? default_out() : a.out;
    ensure_dir(out);
    const std::string csv_path = join_path(out, a.name) + ".csv";
    refuse_overwrite({csv_path}, a.force);

    std::string csv = "T,r,d,N,median_ms\n";
    std::cout << "T,r,d,N,median_ms\n";
    for (std::int64_t T : Ts) {
        for (std::int64_t r : rs) {
            for (std::int64_t d : ds_) {
                for (std::int64_t N : Ns) {
                    ModelConfig mc;
                    mc.R = a.R;
                    mc.d = d;
                    mc.h = 3;
                    mc.N = N;
                    mc.heads = a.heads;
                    mc.r = r;
                    mc.M = 4;
                    mc.T_max = T;
                    mc.dropout_residue = 0.0;
                    mc.dropout_attention = 0.0;
                    mc.dropout_input = 0.0;
                    mc.head_kind = HeadKind::binary;
                    mc.num_labels = 2;
                    mc.seed = sub_seed(a.seed, "bench.init");
                    SequenceModel model = init_model(mc);
                    Dataset data = bench_dataset(a.batch, T, a.R, sub_seed(a.seed, "bench.data"));
                    const double med = time_step(model, data, a.repeats, dense);
                    const std::string row = std::to_string(T) + "," + std::to_string(r) + "," +
                                            std::to_string(d) + "," + std::to_string(N) + "," +
                                            fmt3(med);
                    csv += row + "\n";
                    std::cout << row << "\n";
                }
            }
        }
    }
    write_file(csv_path, csv);
    std::cout << "wrote " << csv_path << "\n";
    return 0;
}

// -------------------------------------------------------------- sweep ----

struct SweepArgs {
    std::string generator;
    std::string N = "1,2";
    std::string M = "6,12";
    std::string r = "8,16";
    std::int64_t budget = 0;  // 0 = no cap
    std::int64_t n = 512;
    std::int64_t n_val = 0;  // 0 = n / 4
    std::int64_t T = 32;
    std::int64_t R = 3;
    std::int64_t d = 32;
    std::int64_t heads = 4;
    std::int64_t epochs = 8;
    std::int64_t batch = 32;
    double lr = 1e-3;
    double skew = 0.5;
    std::uint64_t seed = 1;
    std::int64_t jobs = 1;
    std::string out;
    std::string name = "sweep";
    bool force = false;
};

int cmd_sweep(const SweepArgs& a) {
    const auto Ns = parse_i64_list("--N", a.N);
    const auto Ms = parse_i64_list("--M", a.M);
    const auto rs = parse_i64_list("--r", a.r);
    if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");

    const std::string out = a.out.empty() ? default_out() : a.out;
    ensure_dir(out);
    const std::string csv_path = join_path(out, a.name) + ".csv";
    refuse_overwrite({csv_path}, a.force);

    struct Point {
        std::int64_t N, M, r;
    };
    std::vector<Point> grid;
    for (std::int64_t N : Ns) {
        for (std::int64_t M : Ms) {
            for (std::int64_t r : rs) grid.push_back({N, M, r});
        }
    }
    if (a.budget > 0 && static_cast<std::int64_t>(grid.size()) > a.budget) {
        std::cerr << "warning: budget " << a.budget << " truncates the " << grid.size()
                  << "-point grid to the first " << a.budget << " runs\n";
        grid.resize(static_cast<std::size_t>(a.budget));
    }

    const std::int64_t n_val = a.n_val > 0 ? a.n_val : std::max<std::int64_t>(32, a.n / 4);
    const Dataset train =
        generate(a.generator, a.n, a.T, a.R, sub_seed(a.seed, "sweep.data.train"), a.skew);
    const Dataset val = generate(a.generator, n_val, a.T, a.R, sub_seed(a.seed, "sweep.data.val"),
                                 a.skew, a.n);
    const NormStats stats = compute_norm_stats(train);

    std::vector<double> metrics(grid.size(), std::nan(""));
    std::vector<std::exception_ptr> failures(grid.size());

    // Each grid point derives its own seeds, so results do not depend on
    // scheduling order.
    auto run_point = [&](std::size_t i) {
        const Point& pt = grid[i];
        const std::string tag = "sweep.N" + std::to_string(pt.N) + ".M" + std::to_string(pt.M) +
                                ".r" + std::to_string(pt.r);
        ModelConfig mc;
        mc.R = train.R;
        mc.d = a.d;
        mc.h = 3;
        mc.N = pt.N;
        mc.heads = a.heads;
        mc.r = pt.r;
        mc.M = pt.M;
        mc.T_max = a.T;
        mc.dropout_residue = 0.0;
        mc.dropout_attention = 0.0;
        mc.dropout_input = 0.0;
        const TaskSpec spec = spec_for(train);
        mc.head_kind = spec.kind;
        mc.num_labels = spec.num_labels;
        mc.seed = sub_seed(a.seed, tag + ".init");

        TrainConfig tc;
        tc.lr = a.lr;
        tc.batch_size = a.batch;
        tc.epochs = a.epochs;
        tc.chunk_size = std::max(a.n, a.batch);
        tc.patience = a.epochs;  // run every epoch; keep grid points comparable
        tc.seed = sub_seed(a.seed, tag + ".train");

        SequenceModel model = init_model(mc, {spec});
        set_norm_stats(model, stats);
        std::vector<TaskData> tasks = {TaskData{&train, &val, 1.0}};
        try {
            const TrainResult res = train_model(model, tasks, tc);
            metrics[i] = res.best_metric;
        } catch (const DivergenceError&) {
            // Divergence at one grid point is a result (nan), not a failure.
        } catch (...) {
            failures[i] = std::current_exception();
        }
    };

    const auto workers = static_cast<std::size_t>(
        std::min<std::int64_t>(a.jobs, static_cast<std::int64_t>(grid.size())));
    if (workers <= 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) run_point(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (std::size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1)) {
                    run_point(i);
                }
            });
        }
        for (std::thread& t : pool) t.join();
    }
    for (const std::exception_ptr& e : failures) {
        if (e) std::rethrow_exception(e);
    }

    std::string csv = "N,M,r,metric\n";
    std::cout << "N,M,r,metric\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const std::string row = std::to_string(grid[i].N) + "," + std::to_string(grid[i].M) +
                                "," + std::to_string(grid[i].r) + "," + kv::fmt_f64(metrics[i]);
        csv += row + "\n";
        std::cout << row << "\n";
    }
    write_file(csv_path, csv);
    std::cout << "wrote " << csv_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequence modeling with masked self-attention: data, training, evaluation."};
    app.require_subcommand(1);

    GenArgs gen;
    CLI::App* g = app.add_subcommand("gen", "Generate NDJSON dataset splits plus a manifest");
    g->add_option("--generator,--task", gen.generator, "Synthetic task")
        ->required()
        ->check(CLI::IsMember(kGenerators));
    g->add_option("--n", gen.n, "Total samples across splits")->check(CLI::PositiveNumber);
    g->add_option("--T", gen.T, "Maximum sequence length")->check(CLI::PositiveNumber);
    g->add_option("--R", gen.R, "Input channels")->check(CLI::PositiveNumber);
    g->add_option("--seed", gen.seed, "Generation seed");
    g->add_option("--skew", gen.skew, "Positive-class rate where the task has one");
    g->add_option("--split", gen.split, "Train,val,test fractions (default 0.7,0.15,0.15)");
    g->add_option("--out", gen.out, "Output directory (default $ATTNSEQ_OUT or .)");
    g->add_option("--name", gen.name, "Output file prefix (default: generator name)");
    g->add_flag("--force", gen.force, "Overwrite existing outputs");

    TrainArgs tr;
    CLI::App* t = app.add_subcommand("train", "Train a model from a config file");
    t->add_option("--config", tr.config, "key = value config file")
        ->required()
        ->check(CLI::ExistingFile);
    t->add_option("--data", tr.data,
                  "Dataset prefix (expects PREFIX.train.ndjson and PREFIX.val.ndjson); repeat "
                  "for multi-task");
    t->add_flag("--multi-task", tr.multi_task, "Train one head per dataset jointly");
    t->add_option("--lambda", tr.lambdas, "Comma list of task loss weights");
    t->add_option("--lr", tr.lr, "Override train.lr");
    t->add_option("--epochs", tr.epochs, "Override train.epochs")->check(CLI::PositiveNumber);
    t->add_option("--seed", tr.seed, "Override the run seed");
    t->add_option("--out", tr.out, "Output directory (default $ATTNSEQ_OUT or .)");
    t->add_option("--name", tr.name, "Output file prefix (default run)");
    t->add_flag("--force", tr.force, "Overwrite existing outputs");

    EvalArgs ev;
    CLI::App* e = app.add_subcommand("eval", "Evaluate a checkpoint on an NDJSON dataset");
    e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    e->add_option("--data", ev.data, "NDJSON dataset file")->required()->check(CLI::ExistingFile);
    e->add_option("--task", ev.task, "Head index for multi-task checkpoints");
    e->add_option("--batch", ev.batch, "Evaluation batch size")->check(CLI::PositiveNumber);
    e->add_option("--out", ev.out, "Output directory (default $ATTNSEQ_OUT or .)");
    e->add_option("--name", ev.name, "Output file prefix (default eval)");
    e->add_flag("--force", ev.force, "Overwrite existing outputs");

    BenchArgs be;
    CLI::App* b = app.add_subcommand("bench", "Time forward + backward across configurations");
    b->add_option("--T", be.T, "Comma list of sequence lengths");
    b->add_option("--r", be.r, "Comma list of attention windows");
    b->add_option("--d", be.d, "Comma list of model widths");
    b->add_option("--N", be.N, "Comma list of encoder depths");
    b->add_option("--heads", be.heads, "Attention heads")->check(CLI::PositiveNumber);
    b->add_option("--R", be.R, "Input channels")->check(CLI::PositiveNumber);
    b->add_option("--batch", be.batch, "Batch size")->check(CLI::PositiveNumber);
    b->add_option("--repeats", be.repeats, "Timed repetitions per configuration (median)");
    b->add_option("--attention", be.attention, "banded (windowed mask) or dense")
        ->check(CLI::IsMember({"banded", "dense"}));
    b->add_option("--seed", be.seed, "Seed for weights and data");
    b->add_option("--out", be.out, "Output directory (default $ATTNSEQ_OUT or .)");
    b->add_option("--name", be.name, "Output file prefix (default bench)");
    b->add_flag("--force", be.force, "Overwrite existing outputs");

    SweepArgs sw;
    CLI::App* s = app.add_subcommand("sweep", "Train across an (N, M, r) grid and tabulate");
    s->add_option("--generator,--task", sw.generator, "Synthetic task")
        ->required()
        ->check(CLI::IsMember(kGenerators));
    s->add_option("--N", sw.N, "Comma list of encoder depths");
    s->add_option("--M", sw.M, "Comma list of interpolation factors");
    s->add_option("--r", sw.r, "Comma list of attention windows");
    s->add_option("--budget", sw.budget, "Cap on grid runs (0 = unlimited)");
    s->add_option("--n", sw.n, "Training samples")->check(CLI::PositiveNumber);
    s->add_option("--n-val", sw.n_val, "Validation samples (default n/4, at least 32)");
    s->add_option("--T", sw.T, "Maximum sequence length")->check(CLI::PositiveNumber);
    s->add_option("--R", sw.R, "Input channels")->check(CLI::PositiveNumber);
    s->add_option("--d", sw.d, "Model width")->check(CLI::PositiveNumber);
    s->add_option("--heads", sw.heads, "Attention heads")->check(CLI::PositiveNumber);
    s->add_option("--epochs", sw.epochs, "Epochs per run")->check(CLI::PositiveNumber);
    s->add_option("--batch", sw.batch, "Batch size")->check(CLI::PositiveNumber);
    s->add_option("--lr", sw.lr, "Learning rate");
    s->add_option("--skew", sw.skew, "Positive-class rate where the task has one");
    s->add_option("--seed", sw.seed, "Seed for data, weights, and training");
    s->add_option("--jobs", sw.jobs, "Parallel worker threads");
    s->add_option("--out", sw.out, "Output directory (default $ATTNSEQ_OUT or .)");
    s->add_option("--name", sw.name, "Output file prefix (default sweep)");
    s->add_flag("--force", sw.force, "Overwrite existing outputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        std::cerr << "error: " << ex.what() << "\n\n" << app.help() << "\n";
        return 1;
    }
    tr.lr_set = t->count("--lr") > 0;
    tr.epochs_set = t->count("--epochs") > 0;
    tr.seed_set = t->count("--seed") > 0;

    try {
        if (*g) return cmd_gen(gen);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_eval(ev);
        if (*b) return cmd_bench(be);
        if (*s) return cmd_sweep(sw);
    } catch (const DivergenceError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 3;
    } catch (const Error& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
    return 0;
}
