#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "ttsf/complexity.hpp"
#include "ttsf/layers.hpp"
#include "ttsf/ssm.hpp"
#include "ttsf/training.hpp"

using namespace ttsf;
using ttsf::test::random_tensor;

TEST_CASE("module_complexity examples") {
    SUBCASE("TTT hand value") {
        DimSpec d;
        d.t = 10;
        d.d = 4;
        d.n = 100;
        d.u = 2;
        CHECK(module_complexity(ModuleKind::ttt, d).total() == 4320);
    }
    SUBCASE("TTT with zero updates is the pure forward term") {
        DimSpec d;
        d.t = 10;
        d.d = 4;
        d.n = 100;
        d.u = 0;
        CHECK(module_complexity(ModuleKind::ttt, d).total() == 4000);
    }
    SUBCASE("Transformer hand value") {
        DimSpec d;
        d.t = 4;
        d.d = 2;
        CHECK(module_complexity(ModuleKind::transformer, d).total() == 48);
    }
    SUBCASE("Mamba and ModernTCN") {
        DimSpec d;
        d.t = 8;
        d.d = 3;
        d.k = 5;
        CHECK(module_complexity(ModuleKind::mamba, d).total() == 8 * 5 * 3 + 8 * 9);
        d.c_in = 6;
        d.c_out = 7;
        CHECK(module_complexity(ModuleKind::modern_tcn, d).total() == 8 * 5 * 6 + 8 * 6 * 7);
    }
    SUBCASE("missing dimensions are config errors") {
        DimSpec d;
        d.t = 4;  // no d
        CHECK_THROWS_AS((void)module_complexity(ModuleKind::transformer, d), ConfigError);
        CHECK_THROWS_AS((void)module_complexity(ModuleKind::mamba, d), ConfigError);
    }
}

TEST_CASE("model_complexity examples") {
    SUBCASE("PatchTST hand value") {
        DimSpec d;
        d.t = 96;
        d.d = 8;
        d.patch_size = 16;
        CHECK(model_complexity(ModelKind::patch_tst, d).total() == 1440);
    }
    SUBCASE("PatchTST uses ceil division when the patch does not divide T") {
        DimSpec d;
        d.t = 100;
        d.d = 2;
        d.patch_size = 16;  // T_p = 7
        CHECK(model_complexity(ModelKind::patch_tst, d).total() ==
              100ull * 2 + 49ull * 2 + 7ull * 4);
    }
    SUBCASE("TSMixer hand value") {
        DimSpec d;
        d.t = 4;
        d.d = 4;
        CHECK(model_complexity(ModelKind::ts_mixer, d).total() == 128);
    }
    SUBCASE("TTT-LTSF with U=0 reduces to the backbone terms") {
        DimSpec d;
        d.t = 32;
        d.d = 8;
        d.k = 3;
        d.u = 0;
        DimSpec m = d;
        CHECK(model_complexity(ModelKind::ttt_ltsf, d).total() ==
              module_complexity(ModuleKind::mamba, m).total());
    }
    SUBCASE("iTransformer") {
        DimSpec d;
        d.t = 8;
        d.d = 4;
        d.n_variates = 3;
        CHECK(model_complexity(ModelKind::i_transformer, d).total() ==
              8ull * 9 * 4 + 8ull * 3 * 16);
    }
}

TEST_CASE("analytic counts reproduce hand-evaluated expressions on random specs") {
    Rng rng(1);
    auto draw = [&](std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    };
    for (int trial = 0; trial < 20; ++trial) {
        DimSpec d;
        d.t = draw(1, 512);
        d.d = draw(1, 64);
        d.n = draw(1, 4096);
        d.u = draw(0, 8);
        d.k = draw(1, 9);
        d.c_in = draw(1, 32);
        d.c_out = draw(1, 32);
        d.patch_size = draw(1, 32);
        d.n_variates = draw(1, 16);
        const auto T = static_cast<std::uint64_t>(d.t);
        const auto D = static_cast<std::uint64_t>(d.d);
        const auto N = static_cast<std::uint64_t>(d.n);
        const auto U = static_cast<std::uint64_t>(d.u);
        const auto K = static_cast<std::uint64_t>(d.k);
        const auto CI = static_cast<std::uint64_t>(d.c_in);
        const auto CO = static_cast<std::uint64_t>(d.c_out);
        const auto P = static_cast<std::uint64_t>(d.patch_size);
        const auto NV = static_cast<std::uint64_t>(d.n_variates);
        const std::uint64_t TP = (T + P - 1) / P;

        CHECK(module_complexity(ModuleKind::ttt, d).total() == T * D * N + U * T * D * D);
        CHECK(module_complexity(ModuleKind::mamba, d).total() == T * K * D + T * D * D);
        CHECK(module_complexity(ModuleKind::transformer, d).total() == T * T * D + T * D * D);
        CHECK(module_complexity(ModuleKind::modern_tcn, d).total() == T * K * CI + T * CI * CO);
        CHECK(model_complexity(ModelKind::ttt_ltsf, d).total() ==
              T * K * D + T * D * D + U * T * D * D);
        CHECK(model_complexity(ModelKind::timemachine, d).total() == T * D + T * D * D);
        CHECK(model_complexity(ModelKind::patch_tst, d).total() ==
              T * D + TP * TP * D + TP * D * D);
        CHECK(model_complexity(ModelKind::ts_mixer, d).total() == T * D * D + D * T * T);
        CHECK(model_complexity(ModelKind::modern_tcn, d).total() == T * K * CI + T * CI * CO);
        CHECK(model_complexity(ModelKind::i_transformer, d).total() ==
              T * NV * NV * D + T * NV * D * D);
    }
}

TEST_CASE("counts are monotone in every dimension") {
    Rng rng(2);
    auto bump = [](DimSpec d, int which) {
        switch (which) {
            case 0: d.t += 1; break;
            case 1: d.d += 1; break;
            case 2: d.n += 1; break;
            case 3: d.u += 1; break;
            case 4: d.k += 1; break;
            case 5: d.c_in += 1; break;
            case 6: d.c_out += 1; break;
            case 7: d.n_variates += 1; break;
        }
        return d;
    };
    for (int trial = 0; trial < 50; ++trial) {
        DimSpec d;
        d.t = 1 + static_cast<std::int64_t>(rng() % 100);
        d.d = 1 + static_cast<std::int64_t>(rng() % 32);
        d.n = 1 + static_cast<std::int64_t>(rng() % 512);
        d.u = static_cast<std::int64_t>(rng() % 5);
        d.k = 1 + static_cast<std::int64_t>(rng() % 7);
        d.c_in = 1 + static_cast<std::int64_t>(rng() % 16);
        d.c_out = 1 + static_cast<std::int64_t>(rng() % 16);
        d.patch_size = 1 + static_cast<std::int64_t>(rng() % 16);
        d.n_variates = 1 + static_cast<std::int64_t>(rng() % 8);
        for (int which = 0; which < 8; ++which) {
            const DimSpec d2 = bump(d, which);
            CHECK(module_complexity(ModuleKind::ttt, d2).total() >=
                  module_complexity(ModuleKind::ttt, d).total());
            CHECK(module_complexity(ModuleKind::transformer, d2).total() >=
                  module_complexity(ModuleKind::transformer, d).total());
            CHECK(model_complexity(ModelKind::ts_mixer, d2).total() >=
                  model_complexity(ModelKind::ts_mixer, d).total());
            CHECK(model_complexity(ModelKind::i_transformer, d2).total() >=
                  model_complexity(ModelKind::i_transformer, d).total());
        }
    }
}

TEST_CASE("instrumented multiply counts match the analytic leading terms") {
    Rng rng(3);
    SUBCASE("attention") {
        for (const std::int64_t t : {16, 32, 64}) {
            for (const std::int64_t d : {4, 8}) {
                const Tensor q = random_tensor(rng, {t, d});
                const Tensor k = random_tensor(rng, {t, d});
                const Tensor v = random_tensor(rng, {t, d});
                Counters::reset_multiplies();
                (void)attention_single_head(q, k, v);
                const auto measured = Counters::read_multiplies();
                const auto analytic = attention_mac_model(t, d);
                const double rel =
                    std::abs(static_cast<double>(measured) - static_cast<double>(analytic)) /
                    static_cast<double>(analytic);
                INFO("T=", t, " d=", d, " measured=", measured, " analytic=", analytic);
                CHECK(rel <= 0.10);
            }
        }
    }
    SUBCASE("ssm recurrent") {
        for (const std::int64_t s : {16, 64}) {
            for (const std::int64_t n : {2, 8}) {
                const Tensor a = rand_uniform(rng, {n}, -2.0, -0.1);
                const Tensor b = random_tensor(rng, {n});
                const Tensor c = random_tensor(rng, {n});
                const DiscretizedSSM dd = discretize(a, b, 0.5);
                const Tensor x = random_tensor(rng, {s});
                Counters::reset_multiplies();
                (void)ssm_recurrent_forward(dd, c, x);
                const auto measured = Counters::read_multiplies();
                const auto analytic = ssm_recurrent_mac_model(s, n);
                const double rel =
                    std::abs(static_cast<double>(measured) - static_cast<double>(analytic)) /
                    static_cast<double>(analytic);
                CHECK(rel <= 0.10);
            }
        }
    }
}

namespace {
// Calibration workloads with known asymptotics. The volatile sink keeps the
// loops from being optimized away.
volatile double g_sink = 0.0;

void linear_work(std::int64_t t) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < t * 4000; ++i) acc += static_cast<double>(i % 7) * 1e-9;
    g_sink = acc;
}

void quadratic_work(std::int64_t t) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < t; ++i) {
        for (std::int64_t j = 0; j < t; ++j) acc += static_cast<double>((i + j) % 5) * 1e-9;
    }
    g_sink = acc;
}
}  // namespace

TEST_CASE("measure_scaling calibration") {
    const std::vector<std::int64_t> lengths = {256, 512, 1024, 2048};
    SUBCASE("linear workload") {
        const TimingReport rep = measure_scaling(linear_work, lengths, 5);
        INFO("slope=", rep.slope);
        CHECK(rep.slope >= 0.8);
        CHECK(rep.slope <= 1.2);
    }
    SUBCASE("quadratic workload") {
        const TimingReport rep = measure_scaling(quadratic_work, lengths, 5);
        INFO("slope=", rep.slope);
        CHECK(rep.slope >= 1.7);
    }
    SUBCASE("too few lengths") {
        CHECK_THROWS_AS((void)measure_scaling(linear_work, {256}, 3), ConfigError);
        CHECK_THROWS_AS((void)measure_scaling(linear_work, {256, 512}, 3), ConfigError);
    }
    SUBCASE("short lengths rejected") {
        CHECK_THROWS_AS((void)measure_scaling(linear_work, {64, 128, 256}, 3), ConfigError);
    }
}

TEST_CASE("measure_tta_overhead") {
    SUBCASE("baseline required") {
        CHECK_THROWS_AS((void)measure_tta_overhead([](int) {}, {1, 2}, 3), ConfigError);
    }
    SUBCASE("zero baseline delta and monotone deltas for linear work") {
        auto run = [](int u) { linear_work(64 + 256 * static_cast<std::int64_t>(u)); };
        const TimingReport rep = measure_tta_overhead(run, {0, 1, 2, 4}, 5);
        CHECK(rep.latency_deltas[0] == 0.0);
        for (std::size_t i = 1; i < rep.latency_deltas.size(); ++i) {
            CHECK(rep.latency_deltas[i] >= rep.latency_deltas[i - 1] - 1e-4);
        }
    }
    SUBCASE("adaptation memory grows with the look-back at fixed U") {
        auto peak_for = [](std::int64_t lookback) {
            TimeMachineConfig cfg;
            cfg.channels = 2;
            cfg.lookback = lookback;
            cfg.horizon = 4;
            cfg.n1 = 16;
            cfg.n2 = 8;
            cfg.dropout_rate = 0.0;
            Rng rng(5);
            TimeMachineParams params = TimeMachineParams::init(rng, cfg);
            SyntheticSpec spec;
            spec.channels = 2;
            spec.length = 2 * lookback + 16;
            spec.components.assign(2, {SineComponent{1.0, 12.0, 0.2}});
            const RawSeries data = synth_generate(spec, 6);
            const auto windows = make_windows(data, {lookback, 4, lookback});
            const TimingReport rep = measure_tta_overhead(
                [&](int u) { (void)test_time_adapt_evaluate(params, cfg, windows, u, 1e-4); },
                {0, 2}, 2);
            return rep.peak_bytes_per_u.back();
        };
        CHECK(peak_for(48) > peak_for(24));
    }
}

TEST_CASE("report writers emit csv") {
    TimingReport rep;
    rep.lengths = {256, 512, 1024};
    rep.median_seconds = {0.001, 0.002, 0.004};
    rep.peak_bytes = {100, 200, 400};
    rep.slope = 1.0;
    write_scaling_csv(rep, "/tmp/ttsf_scaling.csv");
    std::ifstream in("/tmp/ttsf_scaling.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "length,median_seconds,peak_bytes");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 3);
    std::remove("/tmp/ttsf_scaling.csv");

    std::vector<ComplexityReport> reports;
    DimSpec d;
    d.t = 4;
    d.d = 2;
    reports.push_back(module_complexity(ModuleKind::transformer, d));
    write_complexity_csv(reports, "/tmp/ttsf_cx.csv");
    std::ifstream in2("/tmp/ttsf_cx.csv");
    std::getline(in2, line);
    CHECK(line == "kind,term,count");
    std::remove("/tmp/ttsf_cx.csv");
}
