#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attnseq/encoder.hpp"
#include "attnseq/gradcheck.hpp"
#include "attnseq/heads.hpp"
#include "attnseq/interp.hpp"
#include "attnseq/ops.hpp"
#include "attnseq/rng.hpp"

using namespace attnseq;

namespace {

Tensor rand_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor(shape, std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("binary loss values") {
    Tensor y1({1}, {1.0});
    Tensor half({1}, {0.5});
    CHECK(binary_loss(y1, half).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor y0({1}, {0.0});
    Tensor tiny({1}, {1e-9});
    CHECK(binary_loss(y0, tiny).item() == doctest::Approx(0.0).epsilon(1e-8));

    Tensor p9({1}, {0.9});
    CHECK(binary_loss(y1, p9).item() == doctest::Approx(-std::log(0.9)).epsilon(1e-12));
    CHECK(binary_loss(y1, p9).item() == doctest::Approx(0.10536).epsilon(1e-4));

    // Saturated predictions survive thanks to the clamp.
    Tensor zero({1}, {0.0});
    CHECK(std::isfinite(binary_loss(y1, zero).item()));
    CHECK(binary_loss(y1, zero).item() == doctest::Approx(-std::log(1e-12)).epsilon(1e-9));

    // Batch averaging.
    Tensor yb({2}, {1.0, 0.0});
    Tensor pb({2}, {0.9, 0.2});
    CHECK(binary_loss(yb, pb).item() ==
          doctest::Approx((-std::log(0.9) - std::log(0.8)) / 2.0).epsilon(1e-12));

    CHECK_THROWS_AS(binary_loss(yb, half), ShapeError);
}

TEST_CASE("multilabel loss values") {
    Tensor y({1, 3}, {1, 0, 1});
    Tensor half({1, 3}, {0.5, 0.5, 0.5});
    CHECK(multilabel_loss(y, half).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor y2({1, 2}, {1, 0});
    Tensor p2({1, 2}, {0.9, 0.2});
    CHECK(multilabel_loss(y2, p2).item() ==
          doctest::Approx((-std::log(0.9) - std::log(0.8)) / 2.0).epsilon(1e-12));
    CHECK(multilabel_loss(y2, p2).item() == doctest::Approx(0.16425).epsilon(1e-4));

    // K=1 collapses to the binary loss.
    Tensor yk({4, 1}, {1, 0, 1, 0});
    Tensor pk({4, 1}, {0.8, 0.3, 0.6, 0.1});
    Tensor yb({4}, {1, 0, 1, 0});
    Tensor pb({4}, {0.8, 0.3, 0.6, 0.1});
    CHECK(multilabel_loss(yk, pk).item() == doctest::Approx(binary_loss(yb, pb).item()).epsilon(1e-15));

    CHECK_THROWS_AS(multilabel_loss(y, p2), ShapeError);
}

TEST_CASE("regression loss values and masking") {
    Tensor l({1, 2}, {1, 2});
    Tensor zero({1, 2}, {0, 0});
    Tensor all({1, 2}, {1, 1});
    CHECK(regression_loss(l, l, all).item() == 0.0);
    CHECK(regression_loss(l, zero, all).item() == doctest::Approx(2.5).epsilon(1e-12));

    Tensor first_only({1, 2}, {1, 0});
    CHECK(regression_loss(l, zero, first_only).item() == doctest::Approx(1.0).epsilon(1e-12));

    Tensor none({1, 2}, {0, 0});
    CHECK_THROWS_AS(regression_loss(l, zero, none), DataError);
    CHECK_THROWS_AS(regression_loss(l, zero, Tensor::ones({1, 3})), ShapeError);
}

TEST_CASE("multiclass loss values") {
    Tensor uniform({1, 10}, std::vector<double>(10, 0.1));
    CHECK(multiclass_loss({3}, uniform).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK(multiclass_loss({3}, uniform).item() == doctest::Approx(2.302585).epsilon(1e-6));

    std::vector<double> onehot(4, 0.0);
    onehot[2] = 1.0;
    CHECK(multiclass_loss({2}, Tensor({1, 4}, onehot)).item() == doctest::Approx(0.0).epsilon(1e-9));

    Tensor p({1, 3}, {0.2, 0.3, 0.5});
    CHECK(multiclass_loss({2}, p).item() == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
    CHECK(multiclass_loss({2}, p).item() == doctest::Approx(0.693147).epsilon(1e-6));

    CHECK_THROWS_AS(multiclass_loss({3}, p), DataError);
    CHECK_THROWS_AS(multiclass_loss({0, 1}, p), ShapeError);
}

TEST_CASE("per-step binary loss pools valid steps") {
    Tensor y({1, 3}, {1, 0, 1});
    Tensor p({1, 3}, {0.9, 0.2, 0.5});
    Tensor mask({1, 3}, {1, 1, 0});
    const double want = (-std::log(0.9) - std::log(0.8)) / 2.0;
    CHECK(per_step_binary_loss(y, p, mask).item() == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_AS(per_step_binary_loss(y, p, Tensor::zeros({1, 3})), DataError);
}

TEST_CASE("losses are nonnegative and zero only at exact match") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor y({4}, {static_cast<double>(rng.below(2)), static_cast<double>(rng.below(2)),
                       static_cast<double>(rng.below(2)), static_cast<double>(rng.below(2))});
        std::vector<double> pv(4);
        for (auto& v : pv) v = rng.uniform(0.05, 0.95);
        const double loss = binary_loss(y, Tensor({4}, pv)).item();
        CHECK(loss > 0.0);
    }
    Tensor exact({2}, {1, 0});
    CHECK(binary_loss(exact, exact).item() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("multitask weighting") {
    Tensor lp = Tensor::scalar(1.0);
    Tensor li = Tensor::scalar(1.0);
    Tensor ld = Tensor::scalar(1.0);
    Tensor ll = Tensor::scalar(1.0);

    MultiTaskWeights w;  // defaults 0.8, 0.5, 1.1, 0.8
    CHECK(multitask_loss(lp, li, ld, ll, w).item() == doctest::Approx(3.2).epsilon(1e-12));

    MultiTaskWeights only_i{0.0, 1.0, 0.0, 0.0};
    Tensor varied = Tensor::scalar(0.37);
    CHECK(multitask_loss(lp, varied, ld, ll, only_i).item() == doctest::Approx(0.37).epsilon(1e-15));

    MultiTaskWeights zero{0.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(multitask_loss(lp, li, ld, ll, zero), ConfigError);
    MultiTaskWeights negw{-0.1, 1.0, 0.0, 0.0};
    CHECK_THROWS_AS(multitask_loss(lp, li, ld, ll, negw), ConfigError);
}

TEST_CASE("doubling the weights doubles loss and gradients") {
    Rng rng(3);
    Tensor x = rand_tensor({6}, rng, 1.0, true);
    auto lossify = [&](double scale) {
        Tensor l1 = mean(mul(x, x));
        Tensor l2 = mean(sigmoid(x));
        Tensor l3 = mean(relu(x));
        Tensor l4 = mean(mul(x, sigmoid(x)));
        MultiTaskWeights w{0.8 * scale, 0.5 * scale, 1.1 * scale, 0.8 * scale};
        return multitask_loss(l1, l2, l3, l4, w);
    };
    x.zero_grad();
    Tensor a = lossify(1.0);
    a.backward();
    auto g1 = x.grad();
    x.zero_grad();
    Tensor b = lossify(2.0);
    b.backward();
    auto g2 = x.grad();
    CHECK(b.item() == doctest::Approx(2.0 * a.item()).epsilon(1e-14));
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
    }
}

TEST_CASE("multitask gradient equals weighted sum of per-task gradients") {
    Rng rng(5);
    Tensor x = rand_tensor({8}, rng, 1.0, true);
    const double lam1 = 0.8, lam2 = 1.1;
    auto task1 = [&] { return mean(mul(x, x)); };
    auto task2 = [&] { return mean(sigmoid(mul_scalar(x, 2.0))); };

    x.zero_grad();
    task1().backward();
    auto g1 = x.grad();
    x.zero_grad();
    task2().backward();
    auto g2 = x.grad();
    x.zero_grad();
    weighted_loss_sum({task1(), task2()}, {lam1, lam2}).backward();
    auto gj = x.grad();
    for (std::size_t i = 0; i < gj.size(); ++i) {
        CHECK(std::fabs(gj[i] - (lam1 * g1[i] + lam2 * g2[i])) <= 1e-10);
    }
}

TEST_CASE("head outputs respect their codomain") {
    Rng rng(7);
    const std::int64_t in_dim = 12, B = 5;
    Tensor feats = rand_tensor({B, in_dim}, rng, 2.0);

    TaskHeadParams bin = init_task_head(HeadKind::binary, 2, in_dim, rng);
    Tensor bp = head_probs(bin, head_logits(bin, feats));
    CHECK(bp.shape() == Shape{B, 2});
    for (std::int64_t i = 0; i < B; ++i) {
        const double s = bp.data()[static_cast<std::size_t>(i * 2)] + bp.data()[static_cast<std::size_t>(i * 2 + 1)];
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }

    TaskHeadParams ml = init_task_head(HeadKind::multilabel, 4, in_dim, rng);
    Tensor mp = head_probs(ml, head_logits(ml, feats));
    CHECK(mp.shape() == Shape{B, 4});
    for (double v : mp.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    TaskHeadParams mc = init_task_head(HeadKind::multiclass, 10, in_dim, rng);
    Tensor cp = head_probs(mc, head_logits(mc, feats));
    for (std::int64_t i = 0; i < B; ++i) {
        double s = 0;
        for (std::int64_t c = 0; c < 10; ++c) s += cp.data()[static_cast<std::size_t>(i * 10 + c)];
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }

    const std::int64_t T = 6, d = 12;
    Tensor steps = rand_tensor({B, T, d}, rng, 2.0);
    TaskHeadParams reg = init_task_head(HeadKind::per_step_regression, 1, d, rng);
    Tensor rp = head_probs(reg, head_logits(reg, steps));
    CHECK(rp.shape() == Shape{B, T});
    for (double v : rp.data()) CHECK(v >= 0.0);

    TaskHeadParams psb = init_task_head(HeadKind::per_step_binary, 1, d, rng);
    Tensor sp = head_probs(psb, head_logits(psb, steps));
    CHECK(sp.shape() == Shape{B, T});
    for (double v : sp.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    CHECK_THROWS_AS(head_logits(bin, steps), ShapeError);
    CHECK_THROWS_AS(head_logits(reg, feats), ShapeError);
    CHECK_THROWS_AS(head_logits(bin, rand_tensor({B, in_dim + 1}, rng)), ShapeError);
    CHECK_THROWS_AS(init_task_head(HeadKind::multiclass, 1, in_dim, rng), ConfigError);
}

TEST_CASE("loss gradient flows through head, collapse, and encoder") {
    ModelConfig cfg;
    cfg.R = 2;
    cfg.d = 8;
    cfg.h = 3;
    cfg.N = 1;
    cfg.heads = 2;
    cfg.r = 2;
    cfg.M = 2;
    cfg.T_max = 8;
    cfg.dropout_residue = cfg.dropout_attention = cfg.dropout_input = 0.0;

    // Seed chosen so no FFN ReLU pre-activation sits within the finite-difference
    // step of zero; at a kink the central difference averages the one-sided slopes
    // and disagrees with the tape even when the tape is right.
    Rng rng(23);
    EncoderParams enc = init_encoder_params(cfg, rng);
    TaskHeadParams head = init_task_head(HeadKind::binary, 2, cfg.d * cfg.M, rng);
    InterpWeights iw = build_weights(4, cfg.M);

    Rng xr(24);
    Tensor x = rand_tensor({2, 4, cfg.R}, xr, 1.0, true);
    Tensor y({2}, {1.0, 0.0});

    auto f = [&] {
        Tensor s = encoder_forward(x, enc, cfg, ForwardCtx{});
        Tensor u = dense_interpolate(s, iw);
        Tensor probs = head_probs(head, head_logits(head, u));
        Tensor pos = reshape(slice(probs, 1, 1, 2), {2});
        return binary_loss(y, pos);
    };
    auto& blk = enc.blocks[0];
    std::vector<Tensor> checked = {x,          head.W,    head.b,    enc.embed_w,
                                   blk.W_Q[0], blk.W_K[1], blk.W_V[0], blk.W_O,
                                   blk.ff_w1,  blk.ff_w2, blk.ln1_gamma, blk.ln2_beta};
    CHECK(grad_check(f, checked, 1e-6, {1e-5, 1e-7}) < 1e-5);
}
