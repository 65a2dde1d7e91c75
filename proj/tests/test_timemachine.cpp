#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "test_util.hpp"
#include "ttsf/timemachine.hpp"

using namespace ttsf;
using ttsf::test::all_close;
using ttsf::test::bitwise_equal;
using ttsf::test::random_tensor;

namespace {

TimeMachineConfig tiny_config() {
    TimeMachineConfig cfg;
    cfg.channels = 2;
    cfg.lookback = 8;
    cfg.horizon = 4;
    cfg.n1 = 8;
    cfg.n2 = 4;
    cfg.dropout_rate = 0.0;
    return cfg;
}

// Zero the fast weights and convolution kernels so every block core vanishes.
void collapse_blocks(TimeMachineParams& p, const TimeMachineConfig& cfg) {
    for (auto& b : p.ttt_blocks) {
        b.w_in = Tensor(b.w_in.shape);
        b.b_in = Tensor(b.b_in.shape);
        if (b.w_out.data) b.w_out = Tensor(b.w_out.shape);
        if (b.b_out.data) b.b_out = Tensor(b.b_out.shape);
        b.conv = ConvVariantParams::zeros_like(b.conv.tag, b.conv.tag == ConvVariantTag::none
                                                               ? 1
                                                               : b.ln.gamma.shape[0]);
    }
    (void)cfg;
}

std::vector<Tensor> pack_params(TimeMachineParams& p, const TimeMachineConfig& cfg) {
    std::vector<Tensor> out;
    visit_params(p, cfg, true, [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

TimeMachineParams unpack_params(const TimeMachineParams& proto, const TimeMachineConfig& cfg,
                                const std::vector<Tensor>& v) {
    TimeMachineParams p = proto;
    std::size_t i = 0;
    visit_params(p, cfg, true, [&](const std::string&, Tensor& t) { t = v[i++]; });
    return p;
}

}  // namespace

TEST_CASE("embedding shapes and dropout behaviour") {
    Rng rng(1);
    TimeMachineConfig cfg;
    cfg.channels = 7;
    cfg.lookback = 96;
    cfg.horizon = 96;
    cfg.n1 = 256;
    cfg.n2 = 128;
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    const Tensor x = random_tensor(rng, {7, 96});
    auto [x0, st] = revin_normalize(x, p.revin);
    ForwardHooks hooks;
    auto [u1, u2] = embed_two_level(p, cfg, x0, hooks);
    CHECK(u1.shape == Shape{7, 256});
    CHECK(u2.shape == Shape{7, 128});

    SUBCASE("zero weights give zero embeddings") {
        p.e1.weight = Tensor({256, 96});
        p.e1.bias = Tensor({256});
        auto [z1, z2] = embed_two_level(p, cfg, x0, hooks);
        for (std::int64_t i = 0; i < z1.size(); ++i) CHECK(z1[i] == 0.0);
    }
    SUBCASE("evaluation-mode embedding is deterministic under nonzero dropout rate") {
        TimeMachineConfig cfg2 = cfg;
        cfg2.dropout_rate = 0.4;
        ForwardHooks eval_hooks;  // training defaults to false
        auto [a1, a2] = embed_two_level(p, cfg2, x0, eval_hooks);
        auto [b1, b2] = embed_two_level(p, cfg2, x0, eval_hooks);
        CHECK(bitwise_equal(a1, b1));
        CHECK(bitwise_equal(a2, b2));
    }
    SUBCASE("n1 <= n2 rejected at construction") {
        TimeMachineConfig bad = cfg;
        bad.n2 = bad.n1;
        CHECK_THROWS_AS((void)TimeMachineParams::init(rng, bad), ConfigError);
    }
}

TEST_CASE("output shape across the full configuration sweep") {
    Rng rng(2);
    for (const auto mode : {MixMode::mixing, MixMode::independence}) {
        for (const auto kind : {BlockKind::ttt, BlockKind::ssm}) {
            for (const auto tag :
                 {ConvVariantTag::none, ConvVariantTag::conv3, ConvVariantTag::conv5,
                  ConvVariantTag::stack3, ConvVariantTag::stack5, ConvVariantTag::inception,
                  ConvVariantTag::modern_tcn}) {
                TimeMachineConfig cfg = tiny_config();
                cfg.channels = 3;
                cfg.mode = mode;
                cfg.block_kind = kind;
                cfg.conv_variant = tag;
                cfg.ssm_state = 4;
                TimeMachineParams p = TimeMachineParams::init(rng, cfg);
                const Tensor x = random_tensor(rng, {3, 8});
                const Tensor y = forecast(p, cfg, x);
                INFO(mix_mode_name(mode), "/", block_kind_name(kind), "/",
                     conv_variant_name(tag));
                CHECK(y.shape == Shape{3, 4});
            }
        }
    }
}

TEST_CASE("paper-sized shapes at every horizon") {
    Rng rng(3);
    for (const std::int64_t horizon : {96, 192, 336, 720}) {
        TimeMachineConfig cfg;
        cfg.channels = 7;
        cfg.lookback = 96;
        cfg.horizon = horizon;
        cfg.n1 = 64;
        cfg.n2 = 32;
        cfg.dropout_rate = 0.0;
        TimeMachineParams p = TimeMachineParams::init(rng, cfg);
        const Tensor x = random_tensor(rng, {7, 96});
        CHECK(forecast(p, cfg, x).shape == Shape{7, horizon});
    }
}

TEST_CASE("fixed seed forwards are bitwise reproducible") {
    const TimeMachineConfig cfg = tiny_config();
    Rng ra(77), rb(77);
    TimeMachineParams pa = TimeMachineParams::init(ra, cfg);
    TimeMachineParams pb = TimeMachineParams::init(rb, cfg);
    Rng da(5), db(5);
    const Tensor xa = random_tensor(da, {2, 8});
    const Tensor xb = random_tensor(db, {2, 8});
    CHECK(bitwise_equal(forecast(pa, cfg, xa), forecast(pb, cfg, xb)));
}

TEST_CASE("level collapse identities") {
    Rng rng(4);
    TimeMachineConfig cfg = tiny_config();
    cfg.inner_eta = 0.0;
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    collapse_blocks(p, cfg);
    const Tensor u1 = random_tensor(rng, {2, 8});
    const Tensor u2 = random_tensor(rng, {2, 4});
    ForwardHooks hooks;

    SUBCASE("level 1 vanishes: the residual enters only at the concatenation") {
        const Tensor v1 = level1_forward(p, cfg, u1, hooks);
        for (std::int64_t i = 0; i < v1.size(); ++i) CHECK(v1[i] == 0.0);
    }
    SUBCASE("level 2 reduces to P1(u2)") {
        const Tensor lvl2 = level2_forward(p, cfg, u2, hooks);
        CHECK(all_close(lvl2, linear_forward(p.p1, u2), 1e-15));
    }
    SUBCASE("hand-sized level 2 against composed primitives") {
        Rng r2(5);
        TimeMachineConfig small = tiny_config();
        small.channels = 2;
        small.n1 = 8;
        small.n2 = 4;
        TimeMachineParams q = TimeMachineParams::init(r2, small);
        const Tensor u = random_tensor(r2, {2, 4});
        ForwardHooks h2;
        const Tensor got = level2_forward(q, small, u, h2);
        const Tensor b1 = ttt_block_core(q.ttt_blocks[0], small.ttt_config(0), u).z;
        const Tensor b2 = ttt_block_core(q.ttt_blocks[1], small.ttt_config(1), u).z;
        const Tensor want = linear_forward(q.p1, add(add(b1, b2), u));
        CHECK(all_close(got, want, 1e-12));
    }
}

TEST_CASE("channel_independence_wrap") {
    Rng rng(6);
    TimeMachineConfig cfg = tiny_config();
    cfg.mode = MixMode::independence;
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    ForwardHooks hooks;
    const Tensor u = random_tensor(rng, {1, 8});

    SUBCASE("mode guard") {
        TimeMachineConfig mixing = cfg;
        mixing.mode = MixMode::mixing;
        CHECK_THROWS_AS((void)channel_independence_wrap(p, mixing, 3, p.ci1_up, p.ci1_down, u,
                                                        hooks),
                        ModeError);
    }
    SUBCASE("shape preserved") {
        const Tensor y = channel_independence_wrap(p, cfg, 3, p.ci1_up, p.ci1_down, u, hooks);
        CHECK(y.shape == Shape{1, 8});
    }
    SUBCASE("matches the composed primitives step by step") {
        ForwardHooks h2;
        const Tensor got = channel_independence_wrap(p, cfg, 3, p.ci1_up, p.ci1_down, u, hooks);
        const Tensor tokens = linear_forward(p.ci1_up, transpose(u));
        const Tensor core = ttt_block_core(p.ttt_blocks[3], cfg.ttt_config(3), tokens).z;
        const Tensor want = transpose(linear_forward(p.ci1_down, core));
        CHECK(all_close(got, want, 1e-12));
        (void)h2;
    }
    SUBCASE("zero up-projection leaves only the bias path") {
        TimeMachineParams q = p;
        q.ci1_up.weight = Tensor({cfg.ci_inner_width, 1});
        q.ci1_up.bias = Tensor({cfg.ci_inner_width});
        collapse_blocks(q, cfg);
        TimeMachineConfig c2 = cfg;
        c2.inner_eta = 0.0;
        const Tensor y = channel_independence_wrap(q, c2, 3, q.ci1_up, q.ci1_down, u, hooks);
        // block core is zero on the all-zero tokens, so only down's bias remains
        for (std::int64_t i = 0; i < y.size(); ++i) {
            CHECK(y[i] == doctest::Approx(q.ci1_down.bias[0]));
        }
    }
}

TEST_CASE("channel permutation equivariance in independence mode only") {
    Rng rng(7);
    TimeMachineConfig cfg = tiny_config();
    cfg.channels = 3;
    const std::vector<std::int64_t> perm = {2, 0, 1};

    auto permute_rows = [&](const Tensor& x) {
        std::vector<Tensor> rows;
        for (const auto i : perm) rows.push_back(take_row(x, i));
        return stack_rows(rows);
    };

    SUBCASE("independence mode commutes with channel permutation") {
        cfg.mode = MixMode::independence;
        TimeMachineParams p = TimeMachineParams::init(rng, cfg);
        const Tensor x = random_tensor(rng, {3, 8});
        const Tensor direct = forecast(p, cfg, permute_rows(x));
        const Tensor permuted = permute_rows(forecast(p, cfg, x));
        CHECK(all_close(direct, permuted, 1e-12));
    }
    SUBCASE("mixing mode does not") {
        cfg.mode = MixMode::mixing;
        TimeMachineParams p = TimeMachineParams::init(rng, cfg);
        const Tensor x = random_tensor(rng, {3, 8});
        const Tensor direct = forecast(p, cfg, permute_rows(x));
        const Tensor permuted = permute_rows(forecast(p, cfg, x));
        CHECK(max_abs_diff(direct, permuted) > 1e-6);
    }
}

TEST_CASE("RevIN affine equivariance of the whole model") {
    Rng rng(8);
    const TimeMachineConfig cfg = tiny_config();
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    for (int trial = 0; trial < 25; ++trial) {
        const Tensor x = random_tensor(rng, {2, 8}, -2.0, 2.0);
        const Tensor a = random_tensor(rng, {2}, 0.5, 2.0);
        const Tensor b = random_tensor(rng, {2}, -1.0, 1.0);
        Tensor scaled({2, 8});
        for (std::int64_t c = 0; c < 2; ++c) {
            for (std::int64_t t = 0; t < 8; ++t) {
                scaled.values()[static_cast<std::size_t>(c * 8 + t)] = a[c] * x.at(c, t) + b[c];
            }
        }
        const Tensor base = forecast(p, cfg, x);
        Tensor want({2, 4});
        for (std::int64_t c = 0; c < 2; ++c) {
            for (std::int64_t t = 0; t < 4; ++t) {
                want.values()[static_cast<std::size_t>(c * 4 + t)] = a[c] * base.at(c, t) + b[c];
            }
        }
        CHECK(all_close(forecast(p, cfg, scaled), want, 1e-8));
    }
}

TEST_CASE("collapse equivalence with a directly composed linear pipeline") {
    Rng rng(9);
    TimeMachineConfig cfg = tiny_config();
    cfg.inner_eta = 0.0;
    cfg.conv_variant = ConvVariantTag::conv3;
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    collapse_blocks(p, cfg);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = random_tensor(rng, {2, 8}, -3.0, 3.0);
        const Tensor got = forecast(p, cfg, x);
        // direct pipeline: denorm(P2(concat(u1, P1(u2))))
        auto [x0, st] = revin_normalize(x, p.revin);
        const Tensor u1 = linear_forward(p.e1, x0);
        const Tensor u2 = linear_forward(p.e2, u1);
        const Tensor z = concat_cols(u1, linear_forward(p.p1, u2));
        const Tensor want = revin_denormalize(linear_forward(p.p2, z), st, p.revin);
        CHECK(all_close(got, want, 1e-12));
    }
}

TEST_CASE("end-to-end gradients on the tiny model") {
    Rng rng(10);
    for (const auto mode : {MixMode::mixing, MixMode::independence}) {
        TimeMachineConfig cfg = tiny_config();
        cfg.mode = mode;
        TimeMachineParams proto = TimeMachineParams::init(rng, cfg);
        const Tensor x = random_tensor(rng, {2, 8});
        const Tensor target = random_tensor(rng, {2, 4});
        auto f = [&](const std::vector<Tensor>& v) {
            TimeMachineParams p = unpack_params(proto, cfg, v);
            ForwardHooks hooks;
            const Tensor pred = model_forward(p, cfg, x, hooks).prediction;
            const Tensor err = sub(pred, target);
            return mean_all(mul(err, err));
        };
        INFO(mix_mode_name(mode));
        CHECK(grad_check(f, pack_params(proto, cfg)) <= 1e-4);
    }
}

TEST_CASE("checkpoint roundtrip") {
    Rng rng(11);
    TimeMachineConfig cfg = tiny_config();
    cfg.mode = MixMode::independence;
    cfg.conv_variant = ConvVariantTag::stack5;
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    const std::string stem = "/tmp/ttsf_test_ckpt";
    save_checkpoint(stem, cfg, p);
    auto [cfg2, p2] = load_checkpoint(stem);
    CHECK(cfg2.n1 == cfg.n1);
    CHECK(cfg2.mode == cfg.mode);
    CHECK(cfg2.conv_variant == cfg.conv_variant);

    const Tensor x = random_tensor(rng, {2, 8});
    CHECK(bitwise_equal(forecast(p, cfg, x), forecast(p2, cfg2, x)));

    SUBCASE("manifest shape validation") {
        // corrupt the manifest shape of the first tensor
        std::ifstream in(stem + ".manifest");
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        in.close();
        const auto pos = text.find("[8x8]");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 5, "[9x8]");
        std::ofstream out(stem + ".manifest");
        out << text;
        out.close();
        CHECK_THROWS_AS((void)load_checkpoint(stem), DataError);
    }
    std::remove((stem + ".manifest").c_str());
    std::remove((stem + ".bin").c_str());
}

TEST_CASE("checkpoint roundtrip for the SSM block kind") {
    Rng rng(13);
    TimeMachineConfig cfg = tiny_config();
    cfg.block_kind = BlockKind::ssm;
    cfg.ssm_state = 4;
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    const std::string stem = "/tmp/ttsf_test_ckpt_ssm";
    save_checkpoint(stem, cfg, p);
    auto [cfg2, p2] = load_checkpoint(stem);
    const Tensor x = random_tensor(rng, {2, 8});
    CHECK(bitwise_equal(forecast(p, cfg, x), forecast(p2, cfg2, x)));
    std::remove((stem + ".manifest").c_str());
    std::remove((stem + ".bin").c_str());
}

TEST_CASE("self-loss is exposed for TTT models only") {
    Rng rng(12);
    TimeMachineConfig cfg = tiny_config();
    TimeMachineParams p = TimeMachineParams::init(rng, cfg);
    const Tensor x = random_tensor(rng, {2, 8});
    ForwardHooks hooks;
    hooks.want_self_loss = true;
    const ModelOutput out = model_forward(p, cfg, x, hooks);
    CHECK(out.has_self_loss);
    CHECK(out.self_loss.scalar() >= 0.0);

    TimeMachineConfig scfg = tiny_config();
    scfg.block_kind = BlockKind::ssm;
    scfg.ssm_state = 4;
    TimeMachineParams sp = TimeMachineParams::init(rng, scfg);
    ForwardHooks shooks;
    shooks.want_self_loss = true;
    CHECK_FALSE(model_forward(sp, scfg, x, shooks).has_self_loss);
}
