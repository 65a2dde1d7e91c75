#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ttsf/complexity.hpp"
#include "ttsf/training.hpp"

namespace ttsf::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration assembly
// ---------------------------------------------------------------------------

inline TrainConfig train_config_from_kv(const KVMap& kv) {
    TrainConfig tc;
    tc.epochs = static_cast<int>(kv.get_i64_or("train.epochs", 50));
    tc.batch_size = static_cast<int>(kv.get_i64_or("train.batch_size", 32));
    tc.lr = kv.get_f64_or("train.lr", 1e-3);
    tc.grad_clip = kv.get_f64_or("train.grad_clip", 1.0);
    tc.seeds = static_cast<int>(kv.get_i64_or("train.seeds", 5));
    tc.tta_updates = static_cast<int>(kv.get_i64_or("train.tta_updates", 0));
    tc.tta_eta = kv.get_f64_or("train.tta_eta", 1e-3);
    tc.validate();
    return tc;
}

inline void echo_train_config(const TrainConfig& tc, KVMap& kv) {
    kv.set_i64("train.epochs", tc.epochs);
    kv.set_i64("train.batch_size", tc.batch_size);
    kv.set_f64("train.lr", tc.lr);
    kv.set_f64("train.grad_clip", tc.grad_clip);
    kv.set_i64("train.seeds", tc.seeds);
    kv.set_i64("train.tta_updates", tc.tta_updates);
    kv.set_f64("train.tta_eta", tc.tta_eta);
}

struct RunConfig {
    KVMap kv;
    TimeMachineConfig model;
    TrainConfig train;
    std::int64_t window_stride = 1;
    double split_train = 0.7, split_val = 0.1, split_test = 0.2;
    std::uint64_t seed_base = 1;
    std::string dataset_name = "synthetic";

    static RunConfig assemble(const std::string& config_path,
                              const std::vector<std::string>& overrides,
                              const std::string& data_override) {
        RunConfig rc;
        if (!config_path.empty()) rc.kv = KVMap::parse_file(config_path);
        for (const std::string& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("override '" + o + "' is not key=value");
            }
            rc.kv.set(KVMap::trim(o.substr(0, eq)), KVMap::trim(o.substr(eq + 1)));
        }
        if (!data_override.empty()) rc.kv.set("data.path", data_override);
        rc.train = train_config_from_kv(rc.kv);
        rc.window_stride = rc.kv.get_i64_or("window.stride", 1);
        rc.split_train = rc.kv.get_f64_or("data.split_train", 0.7);
        rc.split_val = rc.kv.get_f64_or("data.split_val", 0.1);
        rc.split_test = rc.kv.get_f64_or("data.split_test", 0.2);
        rc.seed_base = static_cast<std::uint64_t>(rc.kv.get_i64_or("train.seed_base", 1));
        if (rc.kv.has("data.path")) {
            rc.dataset_name = fs::path(rc.kv.get("data.path")).stem().string();
        }
        return rc;
    }

    bool has_synth_section() const {
        const auto it = kv.entries.lower_bound("synth.");
        return it != kv.entries.end() && it->first.starts_with("synth.");
    }

    RawSeries load_series() const {
        if (kv.has("data.path")) return load_csv(kv.get("data.path"));
        if (has_synth_section()) {
            return synth_generate(SyntheticSpec::from_kv(kv),
                                  static_cast<std::uint64_t>(kv.get_i64_or("synth.seed", 1)));
        }
        throw ConfigError("no dataset: set data.path or a synth.* section, or pass --data");
    }

    // Model configuration with the channel count reconciled against the data.
    TimeMachineConfig model_for(const RawSeries& s) const {
        TimeMachineConfig cfg = TimeMachineConfig::from_kv(kv);
        if (kv.has("model.channels") && cfg.channels != s.channels()) {
            throw ConfigError("model.channels is " + std::to_string(cfg.channels) +
                              " but the dataset has " + std::to_string(s.channels()) +
                              " channels");
        }
        cfg.channels = s.channels();
        cfg.validate();
        return cfg;
    }

    KVMap effective_kv(const TimeMachineConfig& cfg) const {
        KVMap out = kv;
        for (const auto& [k, v] : cfg.to_kv().entries) out.set(k, v);
        echo_train_config(train, out);
        out.set_i64("window.stride", window_stride);
        out.set_f64("data.split_train", split_train);
        out.set_f64("data.split_val", split_val);
        out.set_f64("data.split_test", split_test);
        out.set_i64("train.seed_base", static_cast<std::int64_t>(seed_base));
        return out;
    }
};

struct SplitWindows {
    std::vector<WindowPair> train, val, test;
};

inline SplitWindows windows_for(const RunConfig& rc, const RawSeries& series,
                                const TimeMachineConfig& cfg) {
    const SplitSeries split =
        chronological_split(series, rc.split_train, rc.split_val, rc.split_test);
    const WindowSpec w{cfg.lookback, cfg.horizon, rc.window_stride};
    SplitWindows out;
    out.train = make_windows(split.train, w);
    out.val = make_windows(split.val, w);
    out.test = make_windows(split.test, w);
    return out;
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << text;
}

inline void write_manifest(const fs::path& dir, const std::vector<std::string>& files,
                           const std::string& config_hash) {
    std::ostringstream os;
    os << "config_hash = " << config_hash << "\n";
    for (const std::string& f : files) os << "file = " << f << "\n";
    write_text(dir / "manifest.txt", os.str());
}

struct EvalRow {
    std::string variant = "None";
    std::string block_kind = "TTT";
    std::int64_t horizon = 0;
    std::uint64_t seed = 0;
    double mse = 0.0, mae = 0.0;
};

inline void write_eval_csv(const fs::path& path, const std::string& dataset,
                           const std::string& config_hash, const std::vector<EvalRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << "dataset,config_hash,variant,block_kind,horizon,seed,mse,mae\n";
    out.precision(17);
    for (const EvalRow& r : rows) {
        out << dataset << "," << config_hash << "," << r.variant << "," << r.block_kind << ","
            << r.horizon << "," << r.seed << "," << r.mse << "," << r.mae << "\n";
    }
}

inline void print_eval_table(std::ostream& os, const std::vector<EvalRow>& rows) {
    os << "variant     kind  horizon  seed        MSE        MAE\n";
    char buf[128];
    for (const EvalRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-11s %-5s %7lld %5llu %10.6f %10.6f\n",
                      r.variant.c_str(), r.block_kind.c_str(),
                      static_cast<long long>(r.horizon),
                      static_cast<unsigned long long>(r.seed), r.mse, r.mae);
        os << buf;
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline int cmd_synth(const std::string& spec_path, const std::string& out_path,
                     std::int64_t seed) {
    const KVMap kv = KVMap::parse_file(spec_path);
    const SyntheticSpec spec = SyntheticSpec::from_kv(kv);
    const std::uint64_t s =
        seed >= 0 ? static_cast<std::uint64_t>(seed)
                  : static_cast<std::uint64_t>(kv.get_i64_or("synth.seed", 1));
    save_csv(synth_generate(spec, s), out_path);
    std::cout << "wrote " << out_path << " (" << spec.channels << " channels, " << spec.length
              << " points)\n";
    return 0;
}

inline int cmd_train(const RunConfig& rc, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const RawSeries series = rc.load_series();
    const TimeMachineConfig cfg = rc.model_for(series);
    const SplitWindows w = windows_for(rc, series, cfg);

    Rng rng(rc.seed_base);
    TimeMachineParams params = TimeMachineParams::init(rng, cfg);
    const FitResult res = fit(params, cfg, w.train, w.val, rc.train, rc.seed_base);

    const fs::path dir(out_dir);
    save_checkpoint((dir / "model").string(), cfg, params);
    {
        std::ostringstream os;
        os << "epoch,train_loss,val_loss\n";
        os.precision(17);
        for (std::size_t e = 0; e < res.train_loss.size(); ++e) {
            os << e << "," << res.train_loss[e] << "," << res.val_loss[e] << "\n";
        }
        write_text(dir / "trace.csv", os.str());
    }
    const KVMap eff = rc.effective_kv(cfg);
    write_text(dir / "config.cfg", eff.to_text());
    write_manifest(dir, {"model.manifest", "model.bin", "trace.csv", "config.cfg"},
                   eff.hash_hex());
    std::cout << "best epoch " << res.best_epoch << ", val MSE " << res.best_val << "\n";
    return 0;
}

inline int cmd_eval(const RunConfig& rc, const std::string& checkpoint,
                    const std::string& out_path, int tta_updates, double tta_eta) {
    auto [cfg, params] = load_checkpoint(checkpoint);
    const RawSeries series = rc.load_series();
    if (series.channels() != cfg.channels) {
        throw DataError("checkpoint expects " + std::to_string(cfg.channels) +
                        " channels, dataset has " + std::to_string(series.channels()));
    }
    const SplitWindows w = windows_for(rc, series, cfg);
    if (w.test.empty()) throw DataError("eval: empty test split");

    const int updates = tta_updates >= 0 ? tta_updates : rc.train.tta_updates;
    const double eta = tta_eta >= 0.0 ? tta_eta : rc.train.tta_eta;
    const Metrics m = updates > 0 ? test_time_adapt_evaluate(params, cfg, w.test, updates, eta)
                                  : evaluate(params, cfg, w.test);

    std::vector<EvalRow> rows = {{conv_variant_name(cfg.conv_variant),
                                  block_kind_name(cfg.block_kind), cfg.horizon, rc.seed_base,
                                  m.mse, m.mae}};
    print_eval_table(std::cout, rows);
    if (!out_path.empty()) {
        write_eval_csv(out_path, rc.dataset_name, rc.effective_kv(cfg).hash_hex(), rows);
    }
    return 0;
}

inline int cmd_ablate(const RunConfig& rc, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const RawSeries series = rc.load_series();
    const TimeMachineConfig base = rc.model_for(series);

    std::vector<std::int64_t> horizons = {base.horizon};
    if (rc.kv.has("ablate.horizons")) {
        horizons.clear();
        std::istringstream in(rc.kv.get("ablate.horizons"));
        std::string cell;
        while (std::getline(in, cell, ',')) horizons.push_back(std::stoll(KVMap::trim(cell)));
    }
    const int seeds = static_cast<int>(rc.kv.get_i64_or("ablate.seeds", 1));

    const ConvVariantTag variants[] = {
        ConvVariantTag::none,   ConvVariantTag::conv3,     ConvVariantTag::conv5,
        ConvVariantTag::stack3, ConvVariantTag::stack5,    ConvVariantTag::inception,
        ConvVariantTag::modern_tcn,
    };
    std::vector<EvalRow> rows;
    for (const std::int64_t horizon : horizons) {
        for (const BlockKind kind : {BlockKind::ttt, BlockKind::ssm}) {
            for (const ConvVariantTag tag : variants) {
                TimeMachineConfig cfg = base;
                cfg.horizon = horizon;
                cfg.block_kind = kind;
                cfg.conv_variant = tag;
                const SplitWindows w = windows_for(rc, series, cfg);
                for (int s = 0; s < seeds; ++s) {
                    const std::uint64_t seed = rc.seed_base + static_cast<std::uint64_t>(s);
                    Rng rng(seed);
                    TimeMachineParams params = TimeMachineParams::init(rng, cfg);
                    (void)fit(params, cfg, w.train, w.val, rc.train, seed);
                    const Metrics m = evaluate(params, cfg, w.test);
                    rows.push_back({conv_variant_name(tag), block_kind_name(kind), horizon,
                                    seed, m.mse, m.mae});
                }
            }
        }
    }
    const KVMap eff = rc.effective_kv(base);
    write_eval_csv(fs::path(out_dir) / "ablate.csv", rc.dataset_name, eff.hash_hex(), rows);
    write_manifest(fs::path(out_dir), {"ablate.csv"}, eff.hash_hex());
    print_eval_table(std::cout, rows);
    return 0;
}

// Scaling harness: one forward of each block kind on [len x d] tokens.
inline int cmd_bench(const std::string& out_dir, std::vector<std::int64_t> lengths, int trials,
                     std::int64_t d) {
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    // analytic tables (deterministic across runs)
    std::vector<ComplexityReport> analytic;
    for (const std::int64_t t : {96, 512, 2048}) {
        DimSpec spec;
        spec.t = t;
        spec.d = 16;
        spec.n = 1024;
        spec.u = 1;
        spec.k = 3;
        spec.c_in = 16;
        spec.c_out = 16;
        spec.patch_size = 16;
        spec.n_variates = 8;
        analytic.push_back(module_complexity(ModuleKind::ttt, spec));
        analytic.push_back(module_complexity(ModuleKind::mamba, spec));
        analytic.push_back(module_complexity(ModuleKind::transformer, spec));
        analytic.push_back(module_complexity(ModuleKind::modern_tcn, spec));
        analytic.push_back(model_complexity(ModelKind::ttt_ltsf, spec));
        analytic.push_back(model_complexity(ModelKind::timemachine, spec));
        analytic.push_back(model_complexity(ModelKind::patch_tst, spec));
        analytic.push_back(model_complexity(ModelKind::ts_mixer, spec));
        analytic.push_back(model_complexity(ModelKind::modern_tcn, spec));
        analytic.push_back(model_complexity(ModelKind::i_transformer, spec));
    }
    write_complexity_csv(analytic, (dir / "complexity_analytic.csv").string());

    Rng rng(1);
    TTTConfig tttc;
    tttc.token_dim = d;
    tttc.inner_eta = 0.01;  // contraction-stable at this width over long scans
    const TTTBlockParams ttt_params = TTTBlockParams::init(rng, tttc);
    const SSMParams ssm_params = SSMParams::init(rng, 16, d, ConvVariantTag::none);

    auto input_for = [&](std::int64_t len) {
        Rng r(static_cast<std::uint64_t>(len));
        return rand_uniform(r, {len, d}, -1.0, 1.0);
    };
    const TimingReport ttt_rep = measure_scaling(
        [&](std::int64_t len) { (void)ttt_block_forward(ttt_params, tttc, input_for(len)); },
        lengths, trials);
    const TimingReport ssm_rep = measure_scaling(
        [&](std::int64_t len) { (void)ssm_block_forward(ssm_params, input_for(len)); },
        lengths, trials);
    const TimingReport attn_rep = measure_scaling(
        [&](std::int64_t len) {
            const Tensor x = input_for(len);
            (void)attention_single_head(x, x, x);
        },
        lengths, trials);
    write_scaling_csv(ttt_rep, (dir / "scaling_ttt.csv").string());
    write_scaling_csv(ssm_rep, (dir / "scaling_ssm.csv").string());
    write_scaling_csv(attn_rep, (dir / "scaling_attention.csv").string());

    // test-time-update overhead on a small forecaster
    TimeMachineConfig mcfg;
    mcfg.channels = 2;
    mcfg.lookback = 24;
    mcfg.horizon = 4;
    mcfg.n1 = 16;
    mcfg.n2 = 8;
    mcfg.dropout_rate = 0.0;
    Rng mrng(2);
    TimeMachineParams mparams = TimeMachineParams::init(mrng, mcfg);
    SyntheticSpec sspec;
    sspec.channels = 2;
    sspec.length = 64;
    sspec.components.assign(2, {SineComponent{1.0, 12.0, 0.2}});
    sspec.noise_sigma = 0.1;
    const RawSeries sdata = synth_generate(sspec, 3);
    const std::vector<WindowPair> windows = make_windows(sdata, {24, 4, 8});
    const TimingReport tta_rep = measure_tta_overhead(
        [&](int u) {
            (void)test_time_adapt_evaluate(mparams, mcfg, windows, u, 1e-3);
        },
        {0, 1, 2, 4}, trials);
    write_tta_csv(tta_rep, (dir / "tta_overhead.csv").string());

    KVMap summary;
    summary.set("scaling.method",
                "median of " + std::to_string(trials) +
                    " trials per length, one warm-up run discarded, single worker; "
                    "wall-clock noise makes measured files non-reproducible");
    summary.set_i64("scaling.trials", trials);
    summary.set_f64("scaling.slope.ttt", ttt_rep.slope);
    summary.set_f64("scaling.slope.ssm", ssm_rep.slope);
    summary.set_f64("scaling.slope.attention", attn_rep.slope);
    for (std::size_t i = 0; i < tta_rep.u_values.size(); ++i) {
        summary.set_f64("tta.delta.u" + std::to_string(tta_rep.u_values[i]),
                        tta_rep.latency_deltas[i]);
    }
    summary.write_file((dir / "summary.kv").string());
    write_manifest(dir,
                   {"complexity_analytic.csv", "scaling_ttt.csv", "scaling_ssm.csv",
                    "scaling_attention.csv", "tta_overhead.csv", "summary.kv"},
                   "bench");
    std::cout << "slopes: ttt " << ttt_rep.slope << ", ssm " << ssm_rep.slope << ", attention "
              << attn_rep.slope << "\n";
    return 0;
}

inline int cmd_gradcheck() {
    Rng rng(1);
    bool ok = true;
    auto report = [&](const std::string& name, double err) {
        const bool pass = err <= 1e-4;
        ok = ok && pass;
        std::cout << (pass ? "PASS" : "FAIL") << "  " << name << "  max relative error "
                  << err << "\n";
    };

    {
        const Tensor w = rand_uniform(rng, {4, 6}, -1.0, 1.0);
        const Tensor b = rand_uniform(rng, {4}, -1.0, 1.0);
        const Tensor x = rand_uniform(rng, {3, 6}, -1.0, 1.0);
        report("linear", grad_check(
                             [&](const std::vector<Tensor>& p) {
                                 LinearLayer l;
                                 l.weight = p[0];
                                 l.bias = p[1];
                                 const Tensor y = linear_forward(l, p[2]);
                                 return sum_all(mul(y, y));
                             },
                             {w, b, x}));
    }
    {
        const Tensor x = rand_uniform(rng, {3, 5}, -1.0, 1.0);
        const Tensor g = rand_uniform(rng, {5}, 0.5, 1.5);
        const Tensor b = rand_uniform(rng, {5}, -0.5, 0.5);
        report("layer_norm", grad_check(
                                 [](const std::vector<Tensor>& p) {
                                     const Tensor y = layer_norm(p[0], p[1], p[2]);
                                     return sum_all(mul(y, y));
                                 },
                                 {x, g, b}));
    }
    {
        const Tensor q = rand_uniform(rng, {4, 4}, -1.0, 1.0);
        const Tensor k = rand_uniform(rng, {4, 4}, -1.0, 1.0);
        const Tensor v = rand_uniform(rng, {4, 4}, -1.0, 1.0);
        report("attention", grad_check(
                                [](const std::vector<Tensor>& p) {
                                    const Tensor y = attention_single_head(p[0], p[1], p[2]);
                                    return sum_all(mul(y, y));
                                },
                                {q, k, v}));
    }
    for (const TTTKind kind : {TTTKind::linear, TTTKind::mlp}) {
        TTTConfig cfg;
        cfg.f_kind = kind;
        cfg.token_dim = 3;
        cfg.inner_eta = 0.1;
        const TTTBlockParams proto = TTTBlockParams::init(rng, cfg);
        const Tensor x = rand_uniform(rng, {4, 3}, -1.0, 1.0);
        std::vector<Tensor> params = {proto.w_in, proto.b_in};
        if (kind == TTTKind::mlp) {
            params.push_back(proto.w_out);
            params.push_back(proto.b_out);
        }
        report(kind == TTTKind::linear ? "ttt_block(linear)" : "ttt_block(mlp)",
               grad_check(
                   [&](const std::vector<Tensor>& p) {
                       TTTBlockParams q = proto;
                       q.w_in = p[0];
                       q.b_in = p[1];
                       if (kind == TTTKind::mlp) {
                           q.w_out = p[2];
                           q.b_out = p[3];
                       }
                       const Tensor y = ttt_block_forward(q, cfg, x);
                       return sum_all(mul(y, y));
                   },
                   params));
    }
    for (const MixMode mode : {MixMode::mixing, MixMode::independence}) {
        // fresh stream per mode; the loss is centered at the model's own
        // prediction so the scalar stays O(1) and central differences keep
        // their precision
        Rng mr(mode == MixMode::mixing ? 101 : 202);
        TimeMachineConfig cfg;
        cfg.channels = 2;
        cfg.lookback = 8;
        cfg.horizon = 4;
        cfg.n1 = 8;
        cfg.n2 = 4;
        cfg.dropout_rate = 0.0;
        cfg.mode = mode;
        TimeMachineParams proto = TimeMachineParams::init(mr, cfg);
        const Tensor x = rand_uniform(mr, {2, 8}, -1.0, 1.0);
        Tensor t = forecast(proto, cfg, x);
        const Tensor noise = rand_uniform(mr, {2, 4}, -0.5, 0.5);
        for (std::int64_t i = 0; i < t.size(); ++i) t.values()[static_cast<std::size_t>(i)] += noise[i];
        std::vector<Tensor> params;
        visit_params(proto, cfg, true,
                     [&](const std::string&, Tensor& v) { params.push_back(v); });
        report(std::string("model(") + mix_mode_name(mode) + ")",
               grad_check(
                   [&](const std::vector<Tensor>& p) {
                       TimeMachineParams q = proto;
                       std::size_t i = 0;
                       visit_params(q, cfg, true,
                                    [&](const std::string&, Tensor& v) { v = p[i++]; });
                       ForwardHooks hooks;
                       const Tensor pred = model_forward(q, cfg, x, hooks).prediction;
                       const Tensor err = sub(pred, t);
                       return mean_all(mul(err, err));
                   },
                   params));
    }
    return ok ? 0 : 1;
}

inline int cmd_probe(const RunConfig& rc, const std::string& checkpoint, int batch_size,
                     double eta, const std::string& out_path) {
    const RawSeries series = rc.load_series();
    TimeMachineConfig cfg;
    TimeMachineParams params;
    if (!checkpoint.empty()) {
        std::tie(cfg, params) = load_checkpoint(checkpoint);
    } else {
        cfg = rc.model_for(series);
        Rng rng(rc.seed_base);
        params = TimeMachineParams::init(rng, cfg);
    }
    const SplitWindows w = windows_for(rc, series, cfg);
    const auto& source = w.test.empty() ? w.train : w.test;
    if (source.empty()) throw DataError("probe: no windows available");
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                source.size());
    const std::vector<WindowPair> batch(source.begin(), source.begin() + static_cast<long>(n));
    const ProbeResult r = orthogonality_probe(params, cfg, batch, eta);

    KVMap out;
    out.set_f64("probe.l_main", r.l_main);
    out.set_f64("probe.l_self", r.l_self);
    out.set_f64("probe.dot", r.dot);
    out.set_bool("probe.cosine_defined", r.cosine_defined);
    if (r.cosine_defined) out.set_f64("probe.cosine", r.cosine);
    out.set_f64("probe.delta_main", r.delta_main);
    std::cout << out.to_text();
    if (!out_path.empty()) out.write_file(out_path);
    return 0;
}

// ---------------------------------------------------------------------------
// Dispatcher
// ---------------------------------------------------------------------------

inline int run_command(const std::vector<std::string>& args) {
    CLI::App app{"test-time-training time-series forecaster"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, checkpoint, spec_path;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key=value configuration file");
        cmd->add_option("--set", overrides, "override config entries (key=value)");
        cmd->add_option("--data", data_path, "dataset csv path");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset csv");
    synth->add_option("--spec", spec_path, "synthetic spec (key=value file)")->required();
    synth->add_option("--out", out_path, "output csv path")->required();
    synth->add_option("--seed", seed, "generation seed");

    CLI::App* train = app.add_subcommand("train", "train a forecaster");
    add_common(train);
    train->add_option("--out", out_path, "output directory")->required();
    train->add_option("--seed", seed, "training seed");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint stem")->required();
    eval->add_option("--out", out_path, "report csv path");
    int tta_updates = -1;
    double tta_eta = -1.0;
    eval->add_option("--tta-updates", tta_updates, "test-time updates per window");
    eval->add_option("--tta-eta", tta_eta, "test-time learning rate");

    CLI::App* ablate = app.add_subcommand("ablate", "sweep conv variants x block kinds");
    add_common(ablate);
    ablate->add_option("--out", out_path, "output directory")->required();

    CLI::App* bench = app.add_subcommand("bench", "complexity and scaling benchmarks");
    bench->add_option("--out", out_path, "output directory")->required();
    std::vector<std::int64_t> lengths = {256, 512, 1024, 2048};
    int trials = 5;
    std::int64_t bench_d = 16;
    bench->add_option("--lengths", lengths, "sequence lengths");
    bench->add_option("--trials", trials, "timing trials per point");
    bench->add_option("--dim", bench_d, "token width");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "run the gradient oracle suite");

    CLI::App* probe = app.add_subcommand("probe", "gradient orthogonality probe");
    add_common(probe);
    probe->add_option("--checkpoint", checkpoint, "checkpoint stem (optional)");
    probe->add_option("--out", out_path, "output key=value path");
    int probe_batch = 4;
    double probe_eta = 1e-3;
    probe->add_option("--batch", probe_batch, "windows in the probe batch");
    probe->add_option("--eta", probe_eta, "probe step size");

    std::vector<std::string> argv_store = args;
    std::vector<const char*> argv = {"ttsf"};
    for (const std::string& a : argv_store) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        // prints usage or help; --help exits 0, anything malformed exits 1
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(spec_path, out_path, seed);
        if (train->parsed()) {
            RunConfig rc = RunConfig::assemble(config_path, overrides, data_path);
            if (seed >= 0) rc.seed_base = static_cast<std::uint64_t>(seed);
            return cmd_train(rc, out_path);
        }
        if (eval->parsed()) {
            const RunConfig rc = RunConfig::assemble(config_path, overrides, data_path);
            return cmd_eval(rc, checkpoint, out_path, tta_updates, tta_eta);
        }
        if (ablate->parsed()) {
            const RunConfig rc = RunConfig::assemble(config_path, overrides, data_path);
            return cmd_ablate(rc, out_path);
        }
        if (bench->parsed()) return cmd_bench(out_path, lengths, trials, bench_d);
        if (gradcheck->parsed()) return cmd_gradcheck();
        if (probe->parsed()) {
            const RunConfig rc = RunConfig::assemble(config_path, overrides, data_path);
            return cmd_probe(rc, checkpoint, probe_batch, probe_eta, out_path);
        }
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace ttsf::cli
