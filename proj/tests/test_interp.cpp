#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attnseq/gradcheck.hpp"
#include "attnseq/interp.hpp"
#include "attnseq/ops.hpp"
#include "attnseq/rng.hpp"
#include "support/oracles.hpp"

using namespace attnseq;

namespace {

Tensor rand_tensor(const Shape& shape, Rng& rng, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return Tensor(shape, std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("weight matrix basics") {
    InterpWeights w11 = build_weights(1, 1);
    CHECK(w11.W.shape() == Shape{1, 1});
    CHECK(w11.at(0, 0) == 1.0);

    // t=1 row for T=5, M=3: s=0.6, weights (1-|0.6-m|/3)^2.
    InterpWeights w = build_weights(5, 3);
    CHECK(w.at(0, 0) == doctest::Approx(0.75111).epsilon(1e-5));
    CHECK(w.at(0, 1) == doctest::Approx(0.28444).epsilon(1e-5));
    CHECK(w.at(0, 2) == doctest::Approx(0.04000).epsilon(1e-5));

    CHECK_THROWS_AS(build_weights(3, 4), ConfigError);
    CHECK_THROWS_AS(build_weights(0, 0), ConfigError);
    CHECK_THROWS_AS(build_weights(3, 0), ConfigError);
}

TEST_CASE("M=T puts ones on the diagonal") {
    for (std::int64_t T : {1, 2, 4, 7, 16}) {
        InterpWeights w = build_weights(T, T);
        for (std::int64_t t = 0; t < T; ++t) CHECK(w.at(t, t) == 1.0);
    }
}

TEST_CASE("weights stay in the unit interval") {
    for (std::int64_t T = 1; T <= 20; ++T) {
        for (std::int64_t M = 1; M <= T; ++M) {
            InterpWeights w = build_weights(T, M);
            for (double v : w.W.data()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
}

TEST_CASE("matrix path matches the accumulation loop") {
    Rng rng(101);
    for (std::int64_t T = 1; T <= 64; ++T) {
        for (std::int64_t M = 1; M <= T; M += (T > 8 ? 7 : 1)) {
            const std::int64_t d = 3;
            Tensor S = rand_tensor({1, T, d}, rng);
            Tensor out = dense_interpolate(S, build_weights(T, M));
            CHECK(out.shape() == Shape{1, d * M});
            auto ref = oracles::interp_loop(S.data(), T, d, M);
            for (std::size_t i = 0; i < ref.size(); ++i) {
                CHECK(std::fabs(out.data()[i] - ref[i]) <= 1e-12);
            }
        }
    }
    // Exhaustive M for the small lengths the loop above strides over.
    for (std::int64_t T = 9; T <= 64; T += 11) {
        for (std::int64_t M = 1; M <= T; ++M) {
            const std::int64_t d = 2;
            Tensor S = rand_tensor({1, T, d}, rng);
            Tensor out = dense_interpolate(S, build_weights(T, M));
            auto ref = oracles::interp_loop(S.data(), T, d, M);
            for (std::size_t i = 0; i < ref.size(); ++i) {
                CHECK(std::fabs(out.data()[i] - ref[i]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("degenerate and constant inputs") {
    Tensor s1({1, 1, 4}, {1, 2, 3, 4});
    Tensor out = dense_interpolate(s1, build_weights(1, 1));
    CHECK(out.data() == std::vector<double>{1, 2, 3, 4});

    // Constant steps: each block m is c * column-sum of W.
    const std::int64_t T = 6, M = 3, d = 2;
    InterpWeights w = build_weights(T, M);
    const double c = 1.7;
    Tensor S({1, T, d}, std::vector<double>(T * d, c));
    Tensor u = dense_interpolate(S, w);
    for (std::int64_t m = 0; m < M; ++m) {
        double colsum = 0;
        for (std::int64_t t = 0; t < T; ++t) colsum += w.at(t, m);
        for (std::int64_t i = 0; i < d; ++i) {
            CHECK(u.data()[static_cast<std::size_t>(m * d + i)] == doctest::Approx(c * colsum).epsilon(1e-12));
        }
    }
}

TEST_CASE("shape contracts") {
    InterpWeights w = build_weights(4, 2);
    CHECK_THROWS_AS(dense_interpolate(Tensor::zeros({1, 5, 3}), w), ShapeError);
    CHECK_THROWS_AS(dense_interpolate(Tensor::zeros({5, 3}), w), ShapeError);

    // Batched output keeps per-sequence results independent.
    Rng rng(5);
    Tensor a = rand_tensor({1, 4, 3}, rng);
    Tensor b = rand_tensor({1, 4, 3}, rng);
    std::vector<double> both = a.data();
    both.insert(both.end(), b.data().begin(), b.data().end());
    Tensor stacked = dense_interpolate(Tensor({2, 4, 3}, both), w);
    Tensor ua = dense_interpolate(a, w);
    Tensor ub = dense_interpolate(b, w);
    for (int i = 0; i < 6; ++i) {
        CHECK(stacked.data()[static_cast<std::size_t>(i)] == ua.data()[static_cast<std::size_t>(i)]);
        CHECK(stacked.data()[static_cast<std::size_t>(6 + i)] == ub.data()[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("linearity") {
    Rng rng(7);
    const std::int64_t T = 8, M = 4, d = 3;
    InterpWeights w = build_weights(T, M);
    Tensor s1 = rand_tensor({1, T, d}, rng);
    Tensor s2 = rand_tensor({1, T, d}, rng);
    const double alpha = 1.3, beta = -0.4;
    Tensor mix = add(mul_scalar(s1, alpha), mul_scalar(s2, beta));
    Tensor lhs = dense_interpolate(mix, w);
    Tensor u1 = dense_interpolate(s1, w);
    Tensor u2 = dense_interpolate(s2, w);
    for (std::int64_t i = 0; i < lhs.size(); ++i) {
        const double rhs = alpha * u1.data()[static_cast<std::size_t>(i)] + beta * u2.data()[static_cast<std::size_t>(i)];
        CHECK(std::fabs(lhs.data()[static_cast<std::size_t>(i)] - rhs) <= 1e-10);
    }
}

TEST_CASE("gradient flows through the collapse") {
    Rng rng(11);
    Tensor S = rand_tensor({2, 5, 3}, rng, true);
    InterpWeights w = build_weights(5, 3);
    Rng wrng(12);
    Tensor probe = rand_tensor({2, 9}, wrng);
    auto f = [&] { return sum(mul(dense_interpolate(S, w), probe)); };
    CHECK(grad_check(f, {S}) < 1e-6);
}

TEST_CASE("reversal changes the embedding") {
    Rng rng(13);
    for (std::int64_t T : {3, 5, 9}) {
        for (std::int64_t M : {2, 3}) {
            Tensor S = rand_tensor({1, T, 2}, rng);
            std::vector<double> rev(S.data().size());
            for (std::int64_t t = 0; t < T; ++t) {
                for (int i = 0; i < 2; ++i) {
                    rev[static_cast<std::size_t>(t * 2 + i)] = S.data()[static_cast<std::size_t>((T - 1 - t) * 2 + i)];
                }
            }
            InterpWeights w = build_weights(T, M);
            Tensor u1 = dense_interpolate(S, w);
            Tensor u2 = dense_interpolate(Tensor({1, T, 2}, rev), w);
            double diff = 0;
            for (std::int64_t i = 0; i < u1.size(); ++i) {
                diff = std::max(diff, std::fabs(u1.data()[static_cast<std::size_t>(i)] - u2.data()[static_cast<std::size_t>(i)]));
            }
            CHECK(diff > 1e-6);
        }
    }
}
