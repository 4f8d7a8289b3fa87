#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attnseq/error.hpp"
#include "attnseq/ops.hpp"
#include "attnseq/train.hpp"

using namespace attnseq;

namespace {

ModelConfig toy_config(std::int64_t R, std::int64_t T) {
    ModelConfig cfg;
    cfg.R = R;
    cfg.d = 16;
    cfg.h = 3;
    cfg.N = 1;
    cfg.heads = 2;
    cfg.r = 8;
    cfg.M = 4;
    cfg.T_max = T;
    cfg.seed = 7;
    cfg.dropout_residue = 0.0;
    cfg.dropout_attention = 0.0;
    cfg.dropout_input = 0.0;
    cfg.head_kind = HeadKind::binary;
    cfg.num_labels = 2;
    return cfg;
}

std::vector<NamedTensor> single_param(Tensor t) {
    return {NamedTensor{"p", std::move(t)}};
}

void set_grad(Tensor& t, const std::vector<double>& g) {
    t.node()->grad = g;
}

bool params_equal(const std::vector<NamedTensor>& a, const std::vector<std::vector<double>>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].tensor.data() != b[i]) return false;
    }
    return true;
}

std::vector<std::vector<double>> values_of(const std::vector<NamedTensor>& params) {
    std::vector<std::vector<double>> out;
    for (const NamedTensor& p : params) out.push_back(p.tensor.data());
    return out;
}

}  // namespace

TEST_CASE("adam first step follows the bias-corrected rule") {
    Tensor p({1}, {0.0}, true);
    auto params = single_param(p);
    AdamState st;
    st.lr = 0.001;
    st.init(params);

    set_grad(params[0].tensor, {1.0});
    adam_step(params, st);
    // m-hat = g, v-hat = g^2 at step 1: update = -lr * g / (|g| + eps).
    const double want = -0.001 * 1.0 / (1.0 + 1e-8);
    CHECK(params[0].tensor.data()[0] == doctest::Approx(want).epsilon(1e-12));
    CHECK(std::fabs(params[0].tensor.data()[0] - (-0.001)) < 1e-10);
    CHECK(st.step == 1);
    for (double g : params[0].tensor.grad()) CHECK(g == 0.0);  // cleared after the update
}

TEST_CASE("adam first step moves every coordinate by -lr * sign(g)") {
    Rng rng(3);
    std::vector<double> g(40);
    for (double& v : g) v = rng.normal() * 10.0;
    Tensor p = Tensor::zeros({40}, true);
    auto params = single_param(p);
    AdamState st;
    st.lr = 0.01;
    st.init(params);
    set_grad(params[0].tensor, g);
    adam_step(params, st);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = params[0].tensor.data()[i];
        CHECK(d * g[i] < 0.0);
        CHECK(std::fabs(d) == doctest::Approx(0.01).epsilon(1e-6));
    }
}

TEST_CASE("adam with zero or absent gradient leaves fresh parameters alone") {
    Tensor p({3}, {1.0, -2.0, 3.0}, true);
    auto params = single_param(p);
    AdamState st;
    st.init(params);

    adam_step(params, st);  // no gradient accumulated at all
    CHECK(params[0].tensor.data() == std::vector<double>{1.0, -2.0, 3.0});

    set_grad(params[0].tensor, {0.0, 0.0, 0.0});
    adam_step(params, st);
    CHECK(params[0].tensor.data() == std::vector<double>{1.0, -2.0, 3.0});
    CHECK(st.step == 2);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
    Tensor p({2}, {0.0, 0.0}, true);
    std::vector<NamedTensor> params = {NamedTensor{"block0.ff1.w", p}};
    AdamState st;
    st.init(params);
    set_grad(params[0].tensor, {1.0, std::nan("")});
    CHECK_THROWS_WITH_AS(adam_step(params, st), doctest::Contains("block0.ff1.w"), NumericError);

    AdamState st2;
    st2.init(params);
    set_grad(params[0].tensor, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS_AS(adam_step(params, st2), NumericError);
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
    Tensor a = Tensor::zeros({2}, true);
    Tensor b = Tensor::zeros({1}, true);
    std::vector<NamedTensor> params = {NamedTensor{"a", a}, NamedTensor{"b", b}};
    // Joint norm sqrt(6^2 + 8^2) = 10.
    set_grad(params[0].tensor, {6.0, 0.0});
    set_grad(params[1].tensor, {8.0});

    CHECK(clip_gradients(params, 5.0) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(params[0].tensor.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(params[1].tensor.grad()[0] == doctest::Approx(4.0).epsilon(1e-12));

    // Already within bounds: untouched.
    const double n2 = clip_gradients(params, 5.0);
    CHECK(n2 == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(params[0].tensor.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));

    // Disabled clipping only reports the norm.
    set_grad(params[0].tensor, {30.0, 40.0});
    set_grad(params[1].tensor, {0.0});
    CHECK(clip_gradients(params, 0.0) == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(params[0].tensor.grad()[0] == 30.0);
}

TEST_CASE("chunked_iterate partitions a seeded shuffle") {
    auto chunks = chunked_iterate(5, 2, 11);
    REQUIRE(chunks.size() == 3);
    CHECK(chunks[0].size() == 2);
    CHECK(chunks[1].size() == 2);
    CHECK(chunks[2].size() == 1);
    std::set<std::int64_t> seen;
    for (const auto& c : chunks) {
        for (std::int64_t i : c) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == 5);

    CHECK(chunked_iterate(5, 2, 11) == chunks);
    CHECK(chunked_iterate(5, 2, 12) != chunks);

    auto big = chunked_iterate(60000, 20000, 1);
    CHECK(big.size() == 3);
    for (const auto& c : big) CHECK(c.size() == 20000);

    CHECK_THROWS_AS(chunked_iterate(0, 2, 1), ConfigError);
    CHECK_THROWS_AS(chunked_iterate(5, 0, 1), ConfigError);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.batch_size = 64;
    cfg.chunk_size = 32;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.chunk_size = 64;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.epochs = 1;
    cfg.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.lr = 0.1;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("task data validation catches mismatches") {
    ModelConfig cfg = toy_config(2, 8);
    SequenceModel model = init_model(cfg);
    Dataset bin = generate("windowed_mean", 16, 8, 2, 1, 0.5);
    Dataset ml = generate("long_range", 16, 8, 2, 1, 0.5);

    TrainConfig tc;
    tc.batch_size = 8;
    tc.chunk_size = 16;
    tc.epochs = 1;

    CHECK_THROWS_AS(train_model(model, {}, tc), ConfigError);
    CHECK_THROWS_AS(train_model(model, {TaskData{&bin, nullptr, 1.0}}, tc), ConfigError);
    CHECK_THROWS_AS(train_model(model, {TaskData{&ml, &ml, 1.0}}, tc), ConfigError);
    CHECK_THROWS_AS(
        train_model(model, {TaskData{&bin, &bin, 1.0}, TaskData{&bin, &bin, 1.0}}, tc),
        ConfigError);

    // Channel-count mismatch.
    Dataset wide = generate("windowed_mean", 16, 8, 3, 1, 0.5);
    CHECK_THROWS_AS(train_model(model, {TaskData{&wide, &wide, 1.0}}, tc), ConfigError);

    // Metric incompatible with the head kind.
    tc.eval_metric = "kappa";
    CHECK_THROWS_AS(train_model(model, {TaskData{&bin, &bin, 1.0}}, tc), ConfigError);
}

TEST_CASE("lr zero leaves parameters and losses frozen") {
    ModelConfig cfg = toy_config(2, 8);
    SequenceModel model = init_model(cfg);
    Dataset train = generate("windowed_mean", 24, 8, 2, 5, 0.5);
    Dataset val = generate("windowed_mean", 12, 8, 2, 6, 0.5);

    auto before = values_of(trainable_params(model));

    TrainConfig tc;
    tc.lr = 0.0;
    tc.batch_size = 8;
    tc.chunk_size = 24;
    tc.epochs = 3;
    tc.patience = 10;
    TrainResult res = train_model(model, {TaskData{&train, &val, 1.0}}, tc);

    auto after = trainable_params(model);
    CHECK(params_equal(after, before));
    REQUIRE(res.history.size() == 3);
    // Reshuffling only permutes the summation order of a frozen model's losses.
    CHECK(res.history[0].train_loss ==
          doctest::Approx(res.history[1].train_loss).epsilon(1e-9));
    CHECK(res.history[1].train_loss ==
          doctest::Approx(res.history[2].train_loss).epsilon(1e-9));
    CHECK(res.history[0].val_metric == res.history[2].val_metric);
    CHECK(res.best_epoch == 1);
}

TEST_CASE("one small step on a single sample decreases its loss") {
    ModelConfig cfg = toy_config(2, 8);
    Dataset pool = generate("windowed_mean", 10, 8, 2, 21, 0.5);
    InterpCache cache(cfg.M);

    int improved = 0;
    for (std::int64_t trial = 0; trial < 10; ++trial) {
        ModelConfig mc = cfg;
        mc.seed = 100 + static_cast<std::uint64_t>(trial);
        SequenceModel model = init_model(mc);
        Dataset one = gather(pool, {trial});

        auto params = trainable_params(model);
        AdamState st;
        st.lr = 1e-4;
        st.init(params);

        const double before = dataset_loss(model, 0, one, cache, 1);
        Tensor loss = task_loss(model, 0, one, 0, 1, cache, ForwardCtx{});
        CHECK(loss.item() == doctest::Approx(before).epsilon(1e-12));
        loss.backward();
        clip_gradients(params, 5.0);
        adam_step(params, st);
        const double after = dataset_loss(model, 0, one, cache, 1);
        if (after < before) ++improved;
    }
    CHECK(improved == 10);
}

TEST_CASE("training with a fixed seed is bitwise reproducible") {
    ModelConfig cfg = toy_config(2, 8);
    cfg.dropout_residue = 0.1;  // exercise the dropout rng stream
    Dataset train = generate("windowed_mean", 32, 8, 2, 9, 0.5);
    Dataset val = generate("windowed_mean", 16, 8, 2, 10, 0.5);

    TrainConfig tc;
    tc.lr = 1e-3;
    tc.batch_size = 8;
    tc.chunk_size = 16;
    tc.epochs = 4;
    tc.patience = 10;
    tc.seed = 17;

    auto run = [&]() {
        SequenceModel model = init_model(cfg);
        TrainResult res = train_model(model, {TaskData{&train, &val, 1.0}}, tc);
        return std::make_pair(res, values_of(trainable_params(model)));
    };
    auto [res_a, params_a] = run();
    auto [res_b, params_b] = run();

    REQUIRE(res_a.history.size() == res_b.history.size());
    for (std::size_t e = 0; e < res_a.history.size(); ++e) {
        CHECK(res_a.history[e].train_loss == res_b.history[e].train_loss);
        CHECK(res_a.history[e].val_loss == res_b.history[e].val_loss);
        CHECK(res_a.history[e].val_metric == res_b.history[e].val_metric);
    }
    CHECK(res_a.best_epoch == res_b.best_epoch);
    CHECK(params_a == params_b);
}

TEST_CASE("early stopping fires after patience epochs without improvement") {
    ModelConfig cfg = toy_config(2, 8);
    SequenceModel model = init_model(cfg);
    Dataset train = generate("windowed_mean", 24, 8, 2, 5, 0.5);
    Dataset val = generate("windowed_mean", 12, 8, 2, 6, 0.5);

    TrainConfig tc;
    tc.lr = 0.0;  // metric can never improve past epoch 1
    tc.batch_size = 8;
    tc.chunk_size = 24;
    tc.epochs = 50;
    tc.patience = 2;
    TrainResult res = train_model(model, {TaskData{&train, &val, 1.0}}, tc);

    CHECK(res.early_stopped);
    CHECK(res.best_epoch == 1);
    CHECK(res.history.size() == 4);  // epoch 1 best + patience 2 + the one that trips
}

TEST_CASE("divergence restores the best checkpoint and raises") {
    ModelConfig cfg = toy_config(2, 8);
    SequenceModel model = init_model(cfg);
    Dataset train = generate("windowed_mean", 16, 8, 2, 5, 0.5);
    Dataset val = generate("windowed_mean", 8, 8, 2, 6, 0.5);

    TrainConfig tc;
    tc.lr = 1e150;
    tc.clip_norm = 0.0;
    tc.batch_size = 8;
    tc.chunk_size = 16;
    tc.epochs = 10;

    CHECK_THROWS_WITH_AS(train_model(model, {TaskData{&train, &val, 1.0}}, tc),
                         doctest::Contains("restored to the best checkpoint"), DivergenceError);
    for (const NamedTensor& p : trainable_params(model)) {
        for (double v : p.tensor.data()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("toy binary task reaches strong validation auroc") {
    ModelConfig cfg = toy_config(2, 16);
    SequenceModel model = init_model(cfg);
    Dataset train = generate("windowed_mean", 256, 16, 2, 41, 0.5);
    Dataset val = generate("windowed_mean", 96, 16, 2, 42, 0.5);

    TrainConfig tc;
    tc.lr = 1e-3;
    tc.batch_size = 32;
    tc.chunk_size = 256;
    tc.epochs = 15;
    tc.patience = 15;
    tc.seed = 2;
    TrainResult res = train_model(model, {TaskData{&train, &val, 1.0}}, tc);

    CHECK(res.best_metric >= 0.9);
    // The model now holds the best parameters: re-evaluating reproduces it.
    InterpCache cache(cfg.M);
    const double again = headline_metric(model, 0, val, cache, 32, "auto");
    CHECK(again == doctest::Approx(res.best_metric).epsilon(1e-12));
}

TEST_CASE("joint two-task loss decreases over the first epochs") {
    ModelConfig cfg = toy_config(2, 8);
    cfg.head_kind = HeadKind::binary;
    std::vector<TaskSpec> specs = {{HeadKind::binary, 2}, {HeadKind::multilabel, 2}};
    SequenceModel model = init_model(cfg, specs);

    Dataset bin_train = generate("windowed_mean", 64, 8, 2, 31, 0.5);
    Dataset bin_val = generate("windowed_mean", 32, 8, 2, 32, 0.5);
    Dataset ml_train = generate("long_range", 64, 8, 2, 33, 0.5);
    Dataset ml_val = generate("long_range", 32, 8, 2, 34, 0.5);

    TrainConfig tc;
    tc.lr = 5e-4;
    tc.batch_size = 16;
    tc.chunk_size = 64;
    tc.epochs = 5;
    tc.patience = 10;
    tc.seed = 3;
    TrainResult res = train_model(
        model,
        {TaskData{&bin_train, &bin_val, 0.8}, TaskData{&ml_train, &ml_val, 1.1}}, tc);

    REQUIRE(res.history.size() == 5);
    for (std::size_t e = 1; e < 5; ++e) {
        CHECK(res.history[e].train_loss < res.history[e - 1].train_loss);
    }
    CHECK(res.history[0].task_metrics.size() == 2);
}

TEST_CASE("history csv lists one row per epoch with task columns") {
    TrainResult res;
    EpochRecord r1;
    r1.epoch = 1;
    r1.train_loss = 0.5;
    r1.val_loss = 0.25;
    r1.val_metric = 0.75;
    r1.task_metrics = {0.7, 0.8};
    EpochRecord r2 = r1;
    r2.epoch = 2;
    r2.train_loss = 0.375;
    res.history = {r1, r2};

    CHECK(history_csv(res, 2) ==
          "epoch,train_loss,val_loss,val_metric,task0_metric,task1_metric\n"
          "1,0.5,0.25,0.75,0.7,0.8\n"
          "2,0.375,0.25,0.75,0.7,0.8\n");
    CHECK(history_csv(res, 1) ==
          "epoch,train_loss,val_loss,val_metric\n"
          "1,0.5,0.25,0.75\n"
          "2,0.375,0.25,0.75\n");

    write_history_csv(res, 2, "/tmp/attnseq_train_history.csv");
    std::ifstream in("/tmp/attnseq_train_history.csv");
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == history_csv(res, 2));
    std::remove("/tmp/attnseq_train_history.csv");
}

TEST_CASE("headline metric covers every head kind") {
    TrainConfig tc;
    InterpCache cache4(4);

    // multiclass: kappa and value-scale neg_mse.
    {
        ModelConfig cfg = toy_config(2, 12);
        cfg.head_kind = HeadKind::multiclass;
        cfg.num_labels = 10;
        SequenceModel model = init_model(cfg);
        Dataset ds = generate("remaining_length", 40, 12, 2, 71, 0.5);
        InterpCache cache(cfg.M);
        const double kappa = headline_metric(model, 0, ds, cache, 16, "auto");
        CHECK(kappa >= -1.0);
        CHECK(kappa <= 1.0);
        const double neg_mse = headline_metric(model, 0, ds, cache, 16, "neg_mse");
        CHECK(neg_mse <= 0.0);
    }
    // per-step binary: auprc in [0,1].
    {
        ModelConfig cfg = toy_config(2, 12);
        cfg.head_kind = HeadKind::per_step_binary;
        cfg.num_labels = 1;
        SequenceModel model = init_model(cfg);
        Dataset ds = generate("leaky_acc", 30, 12, 2, 72, 0.3);
        InterpCache cache(cfg.M);
        const double pr = headline_metric(model, 0, ds, cache, 16, "auto");
        CHECK(pr >= 0.0);
        CHECK(pr <= 1.0);
        const double nl = headline_metric(model, 0, ds, cache, 16, "neg_loss");
        CHECK(nl < 0.0);
    }
    // multilabel: micro and macro.
    {
        ModelConfig cfg = toy_config(3, 8);
        cfg.head_kind = HeadKind::multilabel;
        cfg.num_labels = 3;
        SequenceModel model = init_model(cfg);
        Dataset ds = generate("long_range", 40, 8, 3, 73, 0.5);
        InterpCache cache(cfg.M);
        const double micro = headline_metric(model, 0, ds, cache, 16, "auroc_micro");
        const double macro = headline_metric(model, 0, ds, cache, 16, "auroc_macro");
        CHECK(micro >= 0.0);
        CHECK(micro <= 1.0);
        CHECK(macro >= 0.0);
        CHECK(macro <= 1.0);
    }
}
