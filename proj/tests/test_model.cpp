#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "attnseq/gradcheck.hpp"
#include "attnseq/heads.hpp"
#include "attnseq/model.hpp"
#include "attnseq/ops.hpp"

using namespace attnseq;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.R = 3;
    cfg.d = 8;
    cfg.h = 3;
    cfg.N = 2;
    cfg.heads = 2;
    cfg.r = 2;
    cfg.M = 3;
    cfg.T_max = 12;
    cfg.dropout_residue = cfg.dropout_attention = cfg.dropout_input = 0.0;
    cfg.seed = 11;
    return cfg;
}

Tensor rand_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
    return Tensor::uniform(shape, rng, -scale, scale, requires_grad);
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/attnseq_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

TEST_CASE("init is deterministic and heads are sized by kind") {
    ModelConfig cfg = tiny_config();
    SequenceModel a = init_model(cfg);
    SequenceModel b = init_model(cfg);
    const auto sa = persisted_state(a), sb = persisted_state(b);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i].name == sb[i].name);
        CHECK(sa[i].tensor.data() == sb[i].tensor.data());
    }

    CHECK(a.heads.size() == 1);
    CHECK(a.heads[0].W.shape() == Shape{cfg.d * cfg.M, 2});

    std::vector<TaskSpec> tasks = {{HeadKind::binary, 2},
                                   {HeadKind::multilabel, 5},
                                   {HeadKind::per_step_binary, 1}};
    SequenceModel mt = init_model(cfg, tasks);
    CHECK(mt.heads.size() == 3);
    CHECK(mt.heads[1].W.shape() == Shape{cfg.d * cfg.M, 5});
    CHECK(mt.heads[2].W.shape() == Shape{cfg.d, 1});

    CHECK_THROWS_AS(init_model(cfg, {}), ConfigError);
}

TEST_CASE("parameter listings distinguish trainable from persisted") {
    ModelConfig cfg = tiny_config();
    SequenceModel model = init_model(cfg);

    auto names = [](const std::vector<NamedTensor>& v) {
        std::set<std::string> s;
        for (const auto& nt : v) s.insert(nt.name);
        return s;
    };
    const auto train_names = names(trainable_params(model));
    const auto persist_names = names(persisted_state(model));

    CHECK(train_names.size() == trainable_params(model).size());
    CHECK(persist_names.size() == persisted_state(model).size());
    CHECK(!train_names.count("pos.table"));
    CHECK(persist_names.count("pos.table"));
    CHECK(train_names.count("embed.w"));
    CHECK(train_names.count("block1.ln2.b"));
    CHECK(train_names.count("head0.w"));
    for (const auto& n : train_names) CHECK(persist_names.count(n));

    ModelConfig learned = cfg;
    learned.learn_positional = true;
    SequenceModel lm = init_model(learned);
    CHECK(names(trainable_params(lm)).count("pos.table"));

    model.norm_mean = Tensor::zeros({cfg.R});
    model.norm_std = Tensor::ones({cfg.R});
    const auto with_norm = names(persisted_state(model));
    CHECK(with_norm.count("norm.mean"));
    CHECK(with_norm.count("norm.std"));
    CHECK(!names(trainable_params(model)).count("norm.mean"));
}

TEST_CASE("length_mask marks valid prefixes") {
    Tensor m = length_mask({2, 0, 3}, 3);
    CHECK(m.shape() == Shape{3, 3});
    CHECK(m.data() == std::vector<double>{1, 1, 0, 0, 0, 0, 1, 1, 1});
    CHECK_THROWS_AS(length_mask({4}, 3), DataError);
}

TEST_CASE("collapse fast path equals explicit uniform lengths") {
    ModelConfig cfg = tiny_config();
    SequenceModel model = init_model(cfg);
    Rng xr(31);
    const std::int64_t T = 7;
    Tensor x = rand_tensor({3, T, cfg.R}, xr);
    InterpCache cache(cfg.M);
    Tensor enc = model_encode(model, x, ForwardCtx{});
    Tensor implicit = collapse_features(model, enc, {}, cache);
    Tensor explicit_full = collapse_features(model, enc, {T, T, T}, cache);
    CHECK(implicit.shape() == Shape{3, cfg.d * cfg.M});
    CHECK(implicit.data() == explicit_full.data());
}

TEST_CASE("ragged collapse equals running each valid prefix alone") {
    ModelConfig cfg = tiny_config();
    SequenceModel model = init_model(cfg);
    const std::int64_t T = 8;
    const std::vector<std::int64_t> lengths = {3, 8, 5};
    Rng xr(33);
    std::vector<double> xd(static_cast<std::size_t>(3 * T * cfg.R), 0.0);
    for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t t = 0; t < lengths[static_cast<std::size_t>(b)]; ++t) {
            for (std::int64_t c = 0; c < cfg.R; ++c) {
                xd[static_cast<std::size_t>((b * T + t) * cfg.R + c)] = xr.uniform(-1.0, 1.0);
            }
        }
    }
    Tensor x({3, T, cfg.R}, xd);
    InterpCache cache(cfg.M);
    Tensor batched = collapse_features(model, model_encode(model, x, ForwardCtx{}), lengths, cache);
    CHECK(batched.shape() == Shape{3, cfg.d * cfg.M});

    for (std::int64_t b = 0; b < 3; ++b) {
        const std::int64_t len = lengths[static_cast<std::size_t>(b)];
        std::vector<double> row(static_cast<std::size_t>(len * cfg.R));
        for (std::int64_t t = 0; t < len; ++t) {
            for (std::int64_t c = 0; c < cfg.R; ++c) {
                row[static_cast<std::size_t>(t * cfg.R + c)] =
                    xd[static_cast<std::size_t>((b * T + t) * cfg.R + c)];
            }
        }
        Tensor alone = collapse_features(model, model_encode(model, Tensor({1, len, cfg.R}, row), ForwardCtx{}),
                                         {}, cache);
        for (std::int64_t j = 0; j < cfg.d * cfg.M; ++j) {
            const double got = batched.data()[static_cast<std::size_t>(b * cfg.d * cfg.M + j)];
            const double want = alone.data()[static_cast<std::size_t>(j)];
            CHECK(std::fabs(got - want) <= 1e-12);
        }
    }

    CHECK_THROWS_AS(collapse_features(model, model_encode(model, x, ForwardCtx{}), {3, 8, 2}, cache), DataError);
    CHECK_THROWS_AS(collapse_features(model, model_encode(model, x, ForwardCtx{}), {3, 8}, cache), ShapeError);
}

TEST_CASE("predict respects head kinds") {
    ModelConfig cfg = tiny_config();
    std::vector<TaskSpec> tasks = {{HeadKind::binary, 2},
                                   {HeadKind::multiclass, 4},
                                   {HeadKind::per_step_binary, 1},
                                   {HeadKind::per_step_regression, 1}};
    SequenceModel model = init_model(cfg, tasks);
    Rng xr(35);
    const std::int64_t B = 3, T = 6;
    Tensor x = rand_tensor({B, T, cfg.R}, xr);
    InterpCache cache(cfg.M);

    Tensor p0 = model_predict(model, 0, x, {}, cache);
    CHECK(p0.shape() == Shape{B, 2});
    for (std::int64_t i = 0; i < B; ++i) {
        CHECK(std::fabs(p0.data()[static_cast<std::size_t>(2 * i)] +
                        p0.data()[static_cast<std::size_t>(2 * i + 1)] - 1.0) <= 1e-12);
    }

    Tensor p1 = model_predict(model, 1, x, {}, cache);
    CHECK(p1.shape() == Shape{B, 4});

    Tensor p2 = model_predict(model, 2, x, {}, cache);
    CHECK(p2.shape() == Shape{B, T});
    for (double v : p2.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    Tensor p3 = model_predict(model, 3, x, {}, cache);
    CHECK(p3.shape() == Shape{B, T});
    for (double v : p3.data()) CHECK(v >= 0.0);

    CHECK_THROWS_AS(model_predict(model, 4, x, {}, cache), ConfigError);
}

TEST_CASE("normalization stats standardize the input before embedding") {
    ModelConfig cfg = tiny_config();
    SequenceModel model = init_model(cfg);
    Rng xr(37);
    Tensor x = rand_tensor({2, 5, cfg.R}, xr, 3.0);

    model.norm_mean = Tensor({cfg.R}, {0.5, -1.0, 2.0});
    model.norm_std = Tensor({cfg.R}, {2.0, 0.5, 1.0});

    Tensor got = model_encode(model, x, ForwardCtx{});

    std::vector<double> sd = x.data();
    for (std::size_t i = 0; i < sd.size(); ++i) {
        const std::size_t c = i % static_cast<std::size_t>(cfg.R);
        sd[i] = (sd[i] - model.norm_mean.data()[c]) / model.norm_std.data()[c];
    }
    Tensor want = encoder_forward(Tensor(x.shape(), sd), model.enc, model.cfg, ForwardCtx{});
    for (std::size_t i = 0; i < want.data().size(); ++i) {
        CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("normalization keeps padded steps equal to a truncated run") {
    ModelConfig cfg = tiny_config();
    SequenceModel model = init_model(cfg);
    model.norm_mean = Tensor({cfg.R}, {0.5, -1.0, 2.0});
    model.norm_std = Tensor({cfg.R}, {2.0, 0.5, 1.0});

    const std::int64_t T = 9;
    Rng xr(53);
    Tensor x = rand_tensor({3, T, cfg.R}, xr, 1.0);
    const std::vector<std::int64_t> lengths = {9, 5, 7};
    // Zero the padding as a ragged batch would have it.
    std::vector<double> xd = x.data();
    for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t t = lengths[static_cast<std::size_t>(b)]; t < T; ++t) {
            for (std::int64_t c = 0; c < cfg.R; ++c) {
                xd[static_cast<std::size_t>((b * T + t) * cfg.R + c)] = 0.0;
            }
        }
    }
    x = Tensor({3, T, cfg.R}, xd);

    InterpCache cache(cfg.M);
    Tensor enc = model_encode(model, x, lengths, ForwardCtx{});
    Tensor batched = collapse_features(model, enc, lengths, cache);

    for (std::int64_t b = 0; b < 3; ++b) {
        const std::int64_t len = lengths[static_cast<std::size_t>(b)];
        std::vector<double> row(static_cast<std::size_t>(len * cfg.R));
        for (std::int64_t t = 0; t < len; ++t) {
            for (std::int64_t c = 0; c < cfg.R; ++c) {
                row[static_cast<std::size_t>(t * cfg.R + c)] =
                    xd[static_cast<std::size_t>((b * T + t) * cfg.R + c)];
            }
        }
        Tensor alone_enc = model_encode(model, Tensor({1, len, cfg.R}, row), ForwardCtx{});
        Tensor alone = collapse_features(model, alone_enc, {}, cache);
        for (std::int64_t j = 0; j < alone.size(); ++j) {
            CHECK(batched.data()[b * alone.size() + j] ==
                  doctest::Approx(alone.data()[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("checkpoint round-trips bitwise") {
    ModelConfig cfg = tiny_config();
    cfg.learn_positional = true;
    std::vector<TaskSpec> tasks = {{HeadKind::binary, 2}, {HeadKind::multilabel, 4}};
    SequenceModel model = init_model(cfg, tasks);
    model.norm_mean = Tensor({cfg.R}, {0.25, -0.5, 1.5});
    model.norm_std = Tensor({cfg.R}, {1.25, 0.75, 3.0});

    TempFile file("roundtrip.ckpt");
    save_model(model, file.path);
    SequenceModel loaded = load_model(file.path);

    const auto sa = persisted_state(model), sb = persisted_state(loaded);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i].name == sb[i].name);
        CHECK(sa[i].tensor.data() == sb[i].tensor.data());
        CHECK(sa[i].tensor.requires_grad() == sb[i].tensor.requires_grad());
    }
    CHECK(kv::serialize(model.cfg.to_kv()) == kv::serialize(loaded.cfg.to_kv()));
    REQUIRE(loaded.heads.size() == 2);
    CHECK(loaded.heads[1].kind == HeadKind::multilabel);
    CHECK(loaded.heads[1].num_labels == 4);
    CHECK(loaded.enc.pos.frozen == model.enc.pos.frozen);

    Rng xr(41);
    Tensor x = rand_tensor({2, 9, cfg.R}, xr);
    InterpCache ca(cfg.M), cb(cfg.M);
    for (std::size_t task = 0; task < 2; ++task) {
        Tensor pa = model_predict(model, task, x, {}, ca);
        Tensor pb = model_predict(loaded, task, x, {}, cb);
        CHECK(pa.data() == pb.data());
    }

    // Saving the loaded model reproduces the file byte for byte.
    TempFile file2("roundtrip2.ckpt");
    save_model(loaded, file2.path);
    CHECK(slurp(file.path) == slurp(file2.path));
}

TEST_CASE("checkpoint rejects corruption") {
    ModelConfig cfg = tiny_config();
    SequenceModel model = init_model(cfg);
    TempFile file("corrupt.ckpt");
    save_model(model, file.path);
    const std::string good = slurp(file.path);

    std::string flipped = good;
    flipped[flipped.size() / 2] = static_cast<char>(flipped[flipped.size() / 2] ^ 0x40);
    spit(file.path, flipped);
    CHECK_THROWS_AS(load_model(file.path), DataError);

    spit(file.path, good.substr(0, good.size() - 17));
    CHECK_THROWS_AS(load_model(file.path), DataError);

    spit(file.path, "not a checkpoint at all");
    CHECK_THROWS_AS(load_model(file.path), DataError);

    // Valid checksum over a wrong magic exercises the magic test itself.
    std::string bad_magic = good.substr(0, good.size() - 8);
    bad_magic[0] = 'Z';
    const std::uint64_t sum = fnv1a(bad_magic);
    for (int i = 0; i < 8; ++i) bad_magic.push_back(static_cast<char>(sum >> (8 * i) & 0xff));
    spit(file.path, bad_magic);
    CHECK_THROWS_WITH_AS(load_model(file.path), doctest::Contains("not a checkpoint"), DataError);

    CHECK_THROWS_AS(load_model("/tmp/attnseq_no_such_file.ckpt"), DataError);

    spit(file.path, good);
    CHECK_NOTHROW(load_model(file.path));
}

TEST_CASE("full-model gradient check") {
    ModelConfig cfg;
    cfg.R = 4;
    cfg.d = 16;
    cfg.h = 3;
    cfg.N = 2;
    cfg.heads = 4;
    cfg.r = 8;
    cfg.M = 4;
    cfg.T_max = 8;
    cfg.dropout_residue = cfg.dropout_attention = cfg.dropout_input = 0.0;
    cfg.seed = 1;
    SequenceModel model = init_model(cfg);
    Rng xr(101);
    Tensor x = rand_tensor({2, 8, cfg.R}, xr, 1.0, true);
    InterpCache cache(cfg.M);
    Rng wr(999);
    Tensor wts;
    auto f = [&] {
        Tensor enc = model_encode(model, x, ForwardCtx{});
        Tensor feats = collapse_features(model, enc, {}, cache);
        Tensor logits = head_logits(model.heads[0], feats);
        if (!wts.defined()) wts = Tensor::uniform(logits.shape(), wr, -1.0, 1.0);
        return sum(mul(logits, wts));
    };
    std::vector<Tensor> inputs = {x};
    for (auto& nt : trainable_params(model)) inputs.push_back(nt.tensor);
    // Multiscale steps: fine rescues coordinates whose ReLU pre-activation
    // sits within the base step of zero, coarse rescues tiny gradients whose
    // fine-step difference drowns in f64 cancellation noise.
    CHECK(grad_check(f, inputs, 1e-6, {1e-5, 1e-7}) < 1e-4);
}

TEST_CASE("multitask gradient equals weighted per-task gradients through the shared encoder") {
    ModelConfig cfg = tiny_config();
    std::vector<TaskSpec> tasks = {{HeadKind::binary, 2}, {HeadKind::multilabel, 3}};
    SequenceModel model = init_model(cfg, tasks);
    Rng xr(43);
    const std::int64_t B = 2, T = 6;
    Tensor x = rand_tensor({B, T, cfg.R}, xr);
    Tensor y0({B}, {1.0, 0.0});
    Tensor y1({B, 3}, {1, 0, 1, 0, 1, 0});
    InterpCache cache(cfg.M);

    auto task_loss = [&](std::size_t k) {
        Tensor enc = model_encode(model, x, ForwardCtx{});
        Tensor feats = collapse_features(model, enc, {}, cache);
        Tensor probs = head_probs(model.heads[k], head_logits(model.heads[k], feats));
        if (k == 0) return binary_loss(y0, reshape(slice(probs, 1, 1, 2), {B}));
        return multilabel_loss(y1, probs);
    };

    const double lam0 = 0.8, lam1 = 1.1;
    std::vector<NamedTensor> enc_params;
    for (auto& nt : trainable_params(model)) {
        if (nt.name.rfind("head", 0) != 0) enc_params.push_back(nt);
    }

    std::vector<std::vector<double>> g0, g1, gj;
    for (auto& nt : enc_params) nt.tensor.zero_grad();
    task_loss(0).backward();
    for (auto& nt : enc_params) g0.push_back(nt.tensor.has_grad() ? nt.tensor.grad() : std::vector<double>(static_cast<std::size_t>(nt.tensor.size()), 0.0));
    for (auto& nt : enc_params) nt.tensor.zero_grad();
    task_loss(1).backward();
    for (auto& nt : enc_params) g1.push_back(nt.tensor.has_grad() ? nt.tensor.grad() : std::vector<double>(static_cast<std::size_t>(nt.tensor.size()), 0.0));
    for (auto& nt : enc_params) nt.tensor.zero_grad();
    weighted_loss_sum({task_loss(0), task_loss(1)}, {lam0, lam1}).backward();
    for (auto& nt : enc_params) gj.push_back(nt.tensor.has_grad() ? nt.tensor.grad() : std::vector<double>(static_cast<std::size_t>(nt.tensor.size()), 0.0));

    for (std::size_t p = 0; p < enc_params.size(); ++p) {
        for (std::size_t i = 0; i < gj[p].size(); ++i) {
            CHECK(std::fabs(gj[p][i] - (lam0 * g0[p][i] + lam1 * g1[p][i])) <= 1e-10);
        }
    }
}
