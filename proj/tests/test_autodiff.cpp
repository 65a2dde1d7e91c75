#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "ttsf/autodiff.hpp"

using namespace ttsf;
using ttsf::test::all_close;
using ttsf::test::bitwise_equal;
using ttsf::test::random_tensor;

TEST_CASE("matmul basic values") {
    const Tensor eye = identity_matrix(2);
    const Tensor b({2, 2}, {2, 3, 4, 5});
    CHECK(bitwise_equal(matmul(eye, b), b));

    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor c({2, 2}, {5, 6, 7, 8});
    const Tensor expect({2, 2}, {19, 22, 43, 50});
    CHECK(all_close(matmul(a, c), expect, 0.0));

    const Tensor bad({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(matmul(bad, bad), DimensionError);
    CHECK_THROWS_WITH_AS(matmul(bad, bad), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("matmul associativity on random chains") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = random_tensor(rng, {4, 4});
        const Tensor b = random_tensor(rng, {4, 4});
        const Tensor c = random_tensor(rng, {4, 4});
        CHECK(all_close(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), 1e-10));
    }
}

TEST_CASE("depthwise conv, same padding") {
    SUBCASE("identity kernel is bitwise identity") {
        Rng rng(3);
        const Tensor x = random_tensor(rng, {3, 9});
        Tensor k({3, 3});
        for (int c = 0; c < 3; ++c) k.values()[static_cast<std::size_t>(c * 3 + 1)] = 1.0;
        CHECK(bitwise_equal(conv1d_depthwise_same(x, k), x));
    }
    SUBCASE("box kernel with zero padding") {
        const Tensor x({1, 3}, {1, 2, 3});
        const Tensor k({1, 3}, {1, 1, 1});
        const Tensor expect({1, 3}, {3, 6, 5});
        CHECK(all_close(conv1d_depthwise_same(x, k), expect, 0.0));
    }
    SUBCASE("even kernel rejected") {
        const Tensor x({1, 4}, {1, 2, 3, 4});
        const Tensor k({1, 4}, {1, 1, 1, 1});
        CHECK_THROWS_AS(conv1d_depthwise_same(x, k), ConfigError);
    }
}

TEST_CASE("softplus values") {
    const Tensor x({3}, {0.0, 100.0, -50.0});
    const Tensor y = softplus(x);
    CHECK(y[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(std::abs(y[1] - 100.0) <= 1e-12);
    CHECK(y[2] == doctest::Approx(std::exp(-50.0)).epsilon(1e-6));
}

TEST_CASE("backward basics") {
    SUBCASE("d(x^2)/dx at 3 is 6") {
        auto tape = Tape::create();
        const Tensor x = tape->parameter(scalar_tensor(3.0));
        const GradientMap gm = tape->backward(mul(x, x));
        CHECK(gm.at(x).scalar() == doctest::Approx(6.0).epsilon(1e-14));
    }
    SUBCASE("vector root is a rank error") {
        auto tape = Tape::create();
        const Tensor x = tape->parameter(Tensor({2}, {1, 2}));
        CHECK_THROWS_AS((void)tape->backward(add(x, x)), RankError);
    }
    SUBCASE("root off tape is a tape error") {
        auto tape = Tape::create();
        (void)tape->parameter(scalar_tensor(1.0));
        CHECK_THROWS_AS((void)tape->backward(scalar_tensor(1.0)), TapeError);
    }
    SUBCASE("unreached parameters get zero gradients") {
        auto tape = Tape::create();
        const Tensor x = tape->parameter(scalar_tensor(2.0));
        const Tensor unused = tape->parameter(Tensor({2}, {5, 6}));
        const GradientMap gm = tape->backward(mul(x, x));
        CHECK(gm.at(unused)[0] == 0.0);
        CHECK(gm.at(unused)[1] == 0.0);
    }
}

TEST_CASE("backward is rolled back, tape stays topologically ordered") {
    auto tape = Tape::create();
    const Tensor x = tape->parameter(Tensor({3}, {1, 2, 3}));
    const Tensor y = sum_all(mul(x, x));
    const std::size_t before = tape->size();
    (void)tape->backward(y);
    CHECK(tape->size() == before);
    CHECK(tape->topologically_ordered());
    // tape is still usable afterwards
    const GradientMap gm = tape->backward(y);
    CHECK(gm.at(x)[2] == doctest::Approx(6.0));
}

TEST_CASE("grad_check oracle") {
    Rng rng(11);
    SUBCASE("matmul loss against central differences") {
        const Tensor a0 = random_tensor(rng, {3, 4});
        const Tensor b0 = random_tensor(rng, {4, 2});
        auto f = [&](const std::vector<Tensor>& p) { return sum_all(matmul(p[0], p[1])); };
        CHECK(grad_check(f, {a0, b0}) <= 1e-6);
    }
    SUBCASE("softplus chain") {
        const Tensor x0 = random_tensor(rng, {5});
        auto f = [](const std::vector<Tensor>& p) {
            return sum_all(softplus(scale(p[0], 2.0)));
        };
        CHECK(grad_check(f, {x0}) <= 1e-6);
    }
    SUBCASE("softplus slope at zero is one half") {
        auto f = [](const std::vector<Tensor>& p) { return sum_all(softplus(p[0])); };
        auto tape = Tape::create();
        const Tensor x = tape->parameter(scalar_tensor(0.0));
        const GradientMap gm = tape->backward(softplus(x));
        CHECK(gm.at(x).scalar() == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(grad_check(f, {scalar_tensor(0.0)}) <= 1e-6);
    }
    SUBCASE("constant function gives zero error") {
        auto f = [](const std::vector<Tensor>&) { return scalar_tensor(4.0); };
        CHECK(grad_check(f, {scalar_tensor(1.0)}) == 0.0);
    }
    SUBCASE("empty parameter set rejected") {
        auto f = [](const std::vector<Tensor>&) { return scalar_tensor(0.0); };
        CHECK_THROWS_AS((void)grad_check(f, {}), ConfigError);
    }
}

TEST_CASE("grad_check covers every differentiable primitive") {
    Rng rng(23);
    const Tensor m1 = random_tensor(rng, {3, 4});
    const Tensor m2 = random_tensor(rng, {3, 4});
    const Tensor sq = random_tensor(rng, {4, 4});
    const Tensor v3 = random_tensor(rng, {3});
    const Tensor v4 = random_tensor(rng, {4});
    const Tensor pos = random_tensor(rng, {3, 4}, 0.5, 1.5);
    const Tensor kern = random_tensor(rng, {3, 3});

    using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
    const std::vector<std::pair<const char*, Fn>> cases = {
        {"add", [](const auto& p) { return sum_all(add(p[0], p[1])); }},
        {"sub", [](const auto& p) { return sum_all(mul(sub(p[0], p[1]), p[0])); }},
        {"mul", [](const auto& p) { return sum_all(mul(p[0], p[1])); }},
        {"neg", [](const auto& p) { return sum_all(mul(neg(p[0]), p[1])); }},
        {"scale", [](const auto& p) { return sum_all(scale(mul(p[0], p[1]), -1.7)); }},
        {"add_scalar", [](const auto& p) { return sum_all(mul(add_scalar(p[0], 0.3), p[1])); }},
        {"sigmoid", [](const auto& p) { return sum_all(sigmoid(mul(p[0], p[1]))); }},
        {"softplus", [](const auto& p) { return sum_all(softplus(mul(p[0], p[1]))); }},
        {"exp", [](const auto& p) { return sum_all(exp_fn(mul(p[0], p[1]))); }},
        {"erf", [](const auto& p) { return sum_all(erf_fn(mul(p[0], p[1]))); }},
        {"expm1_div", [](const auto& p) { return sum_all(expm1_div(mul(p[0], p[1]))); }},
        {"transpose", [](const auto& p) { return sum_all(matmul(transpose(p[0]), p[1])); }},
        {"colsum_rowsum",
         [](const auto& p) {
             return add(sum_all(mul(colsum(p[0]), colsum(p[1]))),
                        sum_all(mul(rowsum(p[0]), rowsum(p[1]))));
         }},
        {"concat_slice",
         [](const auto& p) {
             const Tensor cat = concat_cols(p[0], p[1]);
             return sum_all(mul(slice_cols(cat, 2, 6), slice_cols(cat, 1, 5)));
         }},
        {"stack_take",
         [](const auto& p) {
             const Tensor s = stack_rows({take_row(p[0], 0), take_row(p[1], 2)});
             return sum_all(mul(s, s));
         }},
    };
    for (const auto& [name, fn] : cases) {
        INFO(name);
        CHECK(grad_check(fn, {m1, m2}) <= 1e-4);
    }

    auto f_div = [](const std::vector<Tensor>& p) { return sum_all(div(p[0], p[1])); };
    CHECK(grad_check(f_div, {m1, pos}) <= 1e-4);
    auto f_sqrt = [](const std::vector<Tensor>& p) { return sum_all(sqrt_fn(p[0])); };
    CHECK(grad_check(f_sqrt, {pos}) <= 1e-4);
    auto f_recip = [](const std::vector<Tensor>& p) { return sum_all(recip(p[0])); };
    CHECK(grad_check(f_recip, {pos}) <= 1e-4);
    auto f_mm = [](const std::vector<Tensor>& p) {
        return sum_all(mul(matmul(p[0], p[1]), matmul(p[0], p[1])));
    };
    CHECK(grad_check(f_mm, {m1, random_tensor(rng, {4, 5})}) <= 1e-4);
    auto f_mv = [](const std::vector<Tensor>& p) {
        return sum_all(mul(matvec(p[0], p[1]), matvec(p[0], p[1])));
    };
    CHECK(grad_check(f_mv, {m1, v4}) <= 1e-4);
    auto f_outer = [](const std::vector<Tensor>& p) {
        return sum_all(mul(outer(p[0], p[1]), outer(p[0], p[1])));
    };
    CHECK(grad_check(f_outer, {v3, v4}) <= 1e-4);
    auto f_rowvec = [](const std::vector<Tensor>& p) {
        const Tensor y = add_rowvec(p[0], p[1]);
        return sum_all(mul(y, y));
    };
    CHECK(grad_check(f_rowvec, {m1, v4}) <= 1e-4);
    auto f_bcast = [](const std::vector<Tensor>& p) {
        const Tensor y = mul(bcast_col(p[0], 5), bcast_col(p[0], 5));
        return mul(sum_all(y), sum_all(bcast_row(p[1], 2)));
    };
    CHECK(grad_check(f_bcast, {v3, v4}) <= 1e-4);
    auto f_conv = [](const std::vector<Tensor>& p) {
        const Tensor y = conv1d_depthwise_same(p[0], p[1]);
        return sum_all(mul(y, y));
    };
    CHECK(grad_check(f_conv, {m1, kern}) <= 1e-4);
    auto f_pad = [](const std::vector<Tensor>& p) {
        const Tensor y = pad_cols(pad_row(p[0], 4, 1), 6, 2);
        return sum_all(mul(y, y));
    };
    CHECK(grad_check(f_pad, {v3}) <= 1e-4);
    auto f_reshape = [](const std::vector<Tensor>& p) {
        const Tensor y = reshape(p[0], {4, 3});
        return sum_all(mul(y, y));
    };
    CHECK(grad_check(f_reshape, {m1}) <= 1e-4);
    auto f_flip = [](const std::vector<Tensor>& p) {
        return sum_all(mul(flip_last(p[0]), p[1]));
    };
    CHECK(grad_check(f_flip, {m1, m2}) <= 1e-4);
    auto f_bcast_all = [](const std::vector<Tensor>& p) {
        return sum_all(mul(bcast_all(sum_all(p[0]), {3, 4}), p[1]));
    };
    CHECK(grad_check(f_bcast_all, {m1, m2}) <= 1e-4);
    (void)sq;
}

TEST_CASE("backward is linear in the root") {
    Rng rng(31);
    const Tensor x0 = random_tensor(rng, {4});
    const double alpha = 1.7, beta = -0.4;

    auto run = [&](double a, double b) {
        auto tape = Tape::create();
        const Tensor x = tape->parameter(x0);
        const Tensor f = sum_all(mul(x, x));
        const Tensor g = sum_all(softplus(x));
        const Tensor mix = add(scale(f, a), scale(g, b));
        return tape->backward(mix).at(x).clone();
    };
    const Tensor g_mix = run(alpha, beta);
    const Tensor g_f = run(1.0, 0.0);
    const Tensor g_g = run(0.0, 1.0);
    for (std::int64_t i = 0; i < 4; ++i) {
        CHECK(std::abs(g_mix[i] - (alpha * g_f[i] + beta * g_g[i])) <= 1e-12);
    }
}

TEST_CASE("gradients_of supports double backward") {
    auto tape = Tape::create();
    const Tensor x = tape->parameter(scalar_tensor(2.0));
    const Tensor y = mul(mul(x, x), x);  // x^3
    const std::vector<Tensor> g = tape->gradients_of(y, {&x, 1});
    CHECK(g[0].scalar() == doctest::Approx(12.0).epsilon(1e-14));  // 3x^2
    const GradientMap gm = tape->backward(g[0]);
    CHECK(gm.at(x).scalar() == doctest::Approx(12.0).epsilon(1e-14));  // 6x
}

TEST_CASE("gradients_of matches backward through a two-step composition") {
    // f(w) = sum((w v - t)^2); one explicit gradient-descent step emitted on
    // the tape must stay differentiable w.r.t. the starting point.
    Rng rng(41);
    const Tensor w0 = random_tensor(rng, {3, 3});
    const Tensor v = random_tensor(rng, {3});
    const Tensor t = random_tensor(rng, {3});
    auto f = [&](const std::vector<Tensor>& p) {
        const Tensor r0 = sub(matvec(p[0], v), t);
        const Tensor l0 = sum_all(mul(r0, r0));
        Tensor w1;
        if (l0.on_tape()) {
            const std::vector<Tensor> g = l0.tape->gradients_of(l0, {&p[0], 1});
            w1 = sub(p[0], scale(g[0], 0.05));
        } else {
            // plain path for the finite-difference probes
            auto scratch = Tape::create();
            const Tensor wb = scratch->parameter(p[0]);
            const Tensor r = sub(matvec(wb, v), t);
            const GradientMap gm = scratch->backward(sum_all(mul(r, r)));
            w1 = sub(p[0], scale(gm.at(wb), 0.05));
        }
        const Tensor r1 = sub(matvec(w1, v), t);
        return sum_all(mul(r1, r1));
    };
    CHECK(grad_check(f, {w0}) <= 1e-4);
}

TEST_CASE("expm1_div guards the zero limit") {
    const Tensor z({3}, {0.0, 1e-15, -2.0});
    const Tensor phi = expm1_div(z);
    CHECK(phi[0] == 1.0);
    CHECK(phi[1] == 1.0);
    CHECK(phi[2] == doctest::Approx(std::expm1(-2.0) / -2.0).epsilon(1e-14));
    CHECK_THROWS_AS((void)[&] {
        auto tape = Tape::create();
        const Tensor x = tape->parameter(Tensor({1}, {0.5}));
        const Tensor y = sum_all(expm1_div_grad(x));
        return tape->backward(y);
    }(), TapeError);
}

TEST_CASE("mixing two tapes is rejected") {
    auto t1 = Tape::create();
    auto t2 = Tape::create();
    const Tensor a = t1->parameter(scalar_tensor(1.0));
    const Tensor b = t2->parameter(scalar_tensor(2.0));
    CHECK_THROWS_AS((void)add(a, b), TapeError);
}
