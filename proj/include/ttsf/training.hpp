#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <future>
#include <numeric>
#include <string>
#include <vector>

#include "ttsf/data.hpp"
#include "ttsf/timemachine.hpp"

namespace ttsf {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<Tensor*>& params) {
        m.clear();
        v.clear();
        for (const Tensor* p : params) {
            m.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
            v.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
        }
        step = 0;
    }
};

// Standard bias-corrected update. Gradients must align with the parameter
// list one-to-one; that is the caller's registration order.
inline void adam_step(AdamState& st, const std::vector<Tensor*>& params,
                      const std::vector<Tensor>& grads) {
    if (grads.size() != params.size()) {
        throw OptimizerError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    }
    if (st.m.size() != params.size()) st.init(params);
    st.step += 1;
    if (st.lr == 0.0) return;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        if (g.shape != p.shape) {
            throw OptimizerError("adam_step: gradient shape " + shape_str(g.shape) +
                                 " does not match parameter " + shape_str(p.shape));
        }
        auto& mk = st.m[k];
        auto& vk = st.v[k];
        auto& pv = p.values();
        for (std::int64_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            mk[static_cast<std::size_t>(i)] =
                st.beta1 * mk[static_cast<std::size_t>(i)] + (1.0 - st.beta1) * gi;
            vk[static_cast<std::size_t>(i)] =
                st.beta2 * vk[static_cast<std::size_t>(i)] + (1.0 - st.beta2) * gi * gi;
            const double mhat = mk[static_cast<std::size_t>(i)] / bc1;
            const double vhat = vk[static_cast<std::size_t>(i)] / bc2;
            const double delta = st.lr * mhat / (std::sqrt(vhat) + st.eps);
            if (delta != 0.0) pv[static_cast<std::size_t>(i)] -= delta;
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics and reports
// ---------------------------------------------------------------------------

struct Metrics {
    double mse = 0.0;
    double mae = 0.0;
};

struct EvalReport {
    struct Row {
        std::int64_t horizon = 0;
        std::uint64_t seed = 0;
        double mse = 0.0;
        double mae = 0.0;
    };
    std::vector<Row> rows;

    Metrics mean() const {
        Metrics out;
        for (const Row& r : rows) {
            out.mse += r.mse;
            out.mae += r.mae;
        }
        const double n = static_cast<double>(rows.size());
        out.mse /= n;
        out.mae /= n;
        return out;
    }

    // Population standard deviation across rows.
    Metrics stddev() const {
        const Metrics mu = mean();
        Metrics out;
        for (const Row& r : rows) {
            out.mse += (r.mse - mu.mse) * (r.mse - mu.mse);
            out.mae += (r.mae - mu.mae) * (r.mae - mu.mae);
        }
        const double n = static_cast<double>(rows.size());
        out.mse = std::sqrt(out.mse / n);
        out.mae = std::sqrt(out.mae / n);
        return out;
    }
};

inline Metrics evaluate(const TimeMachineParams& params, const TimeMachineConfig& cfg,
                        const std::vector<WindowPair>& windows) {
    if (windows.empty()) throw DataError("evaluate: no windows");
    double se = 0.0, ae = 0.0;
    std::int64_t count = 0;
    for (const WindowPair& w : windows) {
        const Tensor pred = forecast(params, cfg, w.x);
        for (std::int64_t i = 0; i < pred.size(); ++i) {
            const double e = pred[i] - w.y[i];
            se += e * e;
            ae += std::abs(e);
        }
        count += pred.size();
    }
    return {se / static_cast<double>(count), ae / static_cast<double>(count)};
}

// Repeat the last observed value across the horizon.
inline Metrics persistence_baseline(const std::vector<WindowPair>& windows) {
    if (windows.empty()) throw DataError("persistence_baseline: no windows");
    double se = 0.0, ae = 0.0;
    std::int64_t count = 0;
    for (const WindowPair& w : windows) {
        const std::int64_t m = w.x.shape[0], l = w.x.shape[1], t = w.y.shape[1];
        for (std::int64_t c = 0; c < m; ++c) {
            const double last = w.x.at(c, l - 1);
            for (std::int64_t h = 0; h < t; ++h) {
                const double e = last - w.y.at(c, h);
                se += e * e;
                ae += std::abs(e);
            }
        }
        count += m * t;
    }
    return {se / static_cast<double>(count), ae / static_cast<double>(count)};
}

// ---------------------------------------------------------------------------
// Parameter binding helpers
// ---------------------------------------------------------------------------

namespace detail {

struct BoundModel {
    TimeMachineParams params;         // handles on the tape
    std::vector<Tensor*> bound_list;  // visit order, pointing into `params`
};

inline std::vector<Tensor*> live_params(TimeMachineParams& p, const TimeMachineConfig& cfg) {
    std::vector<Tensor*> out;
    visit_params(p, cfg, /*live_only=*/true,
                 [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

inline BoundModel bind_model(const std::shared_ptr<Tape>& tape, const TimeMachineParams& p,
                             const TimeMachineConfig& cfg) {
    BoundModel bm;
    bm.params = p;  // shallow copy, buffers shared
    visit_params(bm.params, cfg, /*live_only=*/true, [&](const std::string&, Tensor& t) {
        t = tape->parameter(t);
    });
    visit_params(bm.params, cfg, /*live_only=*/true,
                 [&](const std::string&, Tensor& t) { bm.bound_list.push_back(&t); });
    return bm;
}

inline std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor*>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const Tensor* p : params) out.push_back(p->values());
    return out;
}

inline void restore_values(const std::vector<Tensor*>& params,
                           const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->values() = snap[i];
}

inline double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (std::int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Tensor& g : grads)
            for (auto& v : g.values()) v *= s;
    }
    return norm;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Outer training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr = 1e-3;
    double grad_clip = 1.0;
    int seeds = 5;
    int tta_updates = 0;    // U
    double tta_eta = 1e-3;  // learning rate for test-time updates
    // Weight of the auxiliary reconstruction term during outer training.
    // Zero keeps the objective at plain forecast MSE; a positive weight
    // trains the self-supervised task jointly, which is what makes the
    // test-time updates land on a meaningful loss surface.
    double self_loss_weight = 0.0;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (lr < 0.0) throw ConfigError("train: lr must be non-negative");
        if (seeds < 1) throw ConfigError("train: seeds must be >= 1");
        if (tta_updates < 0) throw ConfigError("train: tta_updates must be non-negative");
        if (self_loss_weight < 0.0) {
            throw ConfigError("train: self_loss_weight must be non-negative");
        }
    }
};

struct FitResult {
    std::vector<double> train_loss;  // one entry per epoch
    std::vector<double> val_loss;
    int best_epoch = -1;
    double best_val = 0.0;
};

// Minimizes mean squared forecast error with Adam, gradient clipping at
// global norm `grad_clip`, and best-validation parameter selection. `params`
// holds the winning snapshot on return.
inline FitResult fit(TimeMachineParams& params, const TimeMachineConfig& cfg,
                     const std::vector<WindowPair>& train, const std::vector<WindowPair>& val,
                     const TrainConfig& tc, std::uint64_t seed) {
    tc.validate();
    if (train.empty()) throw DataError("fit: empty training split");

    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    const std::vector<Tensor*> live = detail::live_params(params, cfg);
    AdamState opt;
    opt.lr = tc.lr;
    opt.init(live);

    FitResult res;
    std::vector<std::vector<double>> best = detail::snapshot_values(live);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(tc.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
            auto tape = Tape::create();
            detail::BoundModel bm = detail::bind_model(tape, params, cfg);
            Tensor batch_loss;
            for (std::size_t k = start; k < stop; ++k) {
                const WindowPair& w = train[order[k]];
                ForwardHooks hooks;
                hooks.training = true;
                hooks.rng = &rng;
                hooks.want_self_loss = tc.self_loss_weight > 0.0;
                const ModelOutput out = model_forward(bm.params, cfg, w.x, hooks);
                const Tensor err = sub(out.prediction, w.y);
                Tensor l = mean_all(mul(err, err));
                if (tc.self_loss_weight > 0.0 && out.has_self_loss) {
                    l = add(l, scale(out.self_loss, tc.self_loss_weight));
                }
                batch_loss = (k == start) ? l : add(batch_loss, l);
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
            epoch_loss += batch_loss.scalar() * static_cast<double>(stop - start);
            seen += stop - start;

            const GradientMap gm = tape->backward(batch_loss);
            std::vector<Tensor> grads;
            grads.reserve(live.size());
            for (const Tensor* b : bm.bound_list) grads.push_back(gm.at(*b));
            detail::clip_gradients(grads, tc.grad_clip);
            adam_step(opt, live, grads);
        }
        res.train_loss.push_back(epoch_loss / static_cast<double>(seen));

        const double v = val.empty() ? res.train_loss.back() : evaluate(params, cfg, val).mse;
        res.val_loss.push_back(v);
        if (res.best_epoch < 0 || v < res.best_val) {
            res.best_epoch = epoch;
            res.best_val = v;
            best = detail::snapshot_values(live);
        }
    }
    detail::restore_values(live, best);
    return res;
}

// ---------------------------------------------------------------------------
// Multi-seed driver
// ---------------------------------------------------------------------------

inline int env_thread_cap() {
    const char* env = std::getenv("TTSF_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v < 1 ? 1 : v;
}

// Runs `run(seed)` for every seed and reports mean/std per metric. Seeds are
// independent; with TTSF_THREADS > 1 they execute on parallel workers.
inline EvalReport multi_seed_run(const std::vector<std::uint64_t>& seeds, std::int64_t horizon,
                                 const std::function<Metrics(std::uint64_t)>& run) {
    if (seeds.empty()) throw ConfigError("multi_seed_run: need at least one seed");
    EvalReport report;
    report.rows.resize(seeds.size());
    const int cap = env_thread_cap();
    if (cap <= 1) {
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            const Metrics m = run(seeds[i]);
            report.rows[i] = {horizon, seeds[i], m.mse, m.mae};
        }
        return report;
    }
    for (std::size_t base = 0; base < seeds.size(); base += static_cast<std::size_t>(cap)) {
        const std::size_t stop = std::min(seeds.size(), base + static_cast<std::size_t>(cap));
        std::vector<std::future<Metrics>> futs;
        for (std::size_t i = base; i < stop; ++i) {
            futs.push_back(std::async(std::launch::async, run, seeds[i]));
        }
        for (std::size_t i = base; i < stop; ++i) {
            const Metrics m = futs[i - base].get();
            report.rows[i] = {horizon, seeds[i], m.mse, m.mae};
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Orthogonality probe
// ---------------------------------------------------------------------------

struct ProbeResult {
    double cosine = 0.0;
    bool cosine_defined = false;
    double dot = 0.0;
    double delta_main = 0.0;  // L_main(theta) - L_main(theta') after one self-loss step
    double l_main = 0.0;
    double l_self = 0.0;
};

struct ProbeLosses {
    Tensor main;
    Tensor self;
    bool has_self = false;
};

// Generic two-loss probe: gradient dot/cosine over the slow parameters and
// the main-loss change after one gradient step on the self loss. The loss
// builder runs twice, once on tape-bound parameters for gradients and once
// plainly at the shifted point. Parameters are restored before returning.
inline ProbeResult gradient_alignment_probe(
    TimeMachineParams& params, const TimeMachineConfig& cfg,
    const std::function<ProbeLosses(const TimeMachineParams&)>& losses,
    double eta_probe = 1e-3) {
    auto tape = Tape::create();
    detail::BoundModel bm = detail::bind_model(tape, params, cfg);
    const ProbeLosses taped = losses(bm.params);

    ProbeResult res;
    res.l_main = taped.main.scalar();
    res.l_self = taped.has_self ? taped.self.scalar() : 0.0;

    // a loss that never touched the tape is a constant: all-zero gradients
    auto backward_or_zeros = [&](const Tensor& root) {
        if (root.on_tape()) return tape->backward(root);
        GradientMap zero;
        for (const Tensor* b : bm.bound_list) zero.grads.emplace(b->node, zeros(b->shape));
        return zero;
    };
    const GradientMap g_main = backward_or_zeros(taped.main);
    GradientMap g_self;
    if (taped.has_self) g_self = backward_or_zeros(taped.self);

    double dot = 0.0, nm = 0.0, ns = 0.0;
    for (const Tensor* b : bm.bound_list) {
        const Tensor& gm = g_main.at(*b);
        for (std::int64_t i = 0; i < gm.size(); ++i) nm += gm[i] * gm[i];
        if (taped.has_self) {
            const Tensor& gs = g_self.at(*b);
            for (std::int64_t i = 0; i < gm.size(); ++i) {
                dot += gm[i] * gs[i];
                ns += gs[i] * gs[i];
            }
        }
    }
    res.dot = dot;
    if (nm > 0.0 && ns > 0.0) {
        res.cosine = dot / (std::sqrt(nm) * std::sqrt(ns));
        res.cosine_defined = true;
    }

    if (taped.has_self && eta_probe != 0.0) {
        const std::vector<Tensor*> live = detail::live_params(params, cfg);
        const auto snap = detail::snapshot_values(live);
        for (std::size_t k = 0; k < live.size(); ++k) {
            const Tensor& g = g_self.at(*bm.bound_list[k]);
            auto& pv = live[k]->values();
            for (std::int64_t i = 0; i < g.size(); ++i) {
                pv[static_cast<std::size_t>(i)] -= eta_probe * g[i];
            }
        }
        res.delta_main = res.l_main - losses(params).main.scalar();
        detail::restore_values(live, snap);
    }
    return res;
}

// Standard instantiation: L_main is the mean forecast MSE over the batch,
// L_self the mean TTT reconstruction loss over the look-back windows.
inline ProbeResult orthogonality_probe(TimeMachineParams& params, const TimeMachineConfig& cfg,
                                       const std::vector<WindowPair>& batch,
                                       double eta_probe = 1e-3) {
    if (batch.empty()) throw DataError("orthogonality_probe: empty batch");
    auto losses = [&cfg, &batch](const TimeMachineParams& p) {
        ProbeLosses out;
        const double inv_n = 1.0 / static_cast<double>(batch.size());
        for (std::size_t k = 0; k < batch.size(); ++k) {
            ForwardHooks hooks;
            hooks.want_self_loss = true;
            const ModelOutput mo = model_forward(p, cfg, batch[k].x, hooks);
            const Tensor err = sub(mo.prediction, batch[k].y);
            const Tensor l = mean_all(mul(err, err));
            out.main = (k == 0) ? l : add(out.main, l);
            if (mo.has_self_loss) {
                out.self = out.has_self ? add(out.self, mo.self_loss) : mo.self_loss;
                out.has_self = true;
            }
        }
        out.main = scale(out.main, inv_n);
        if (out.has_self) out.self = scale(out.self, inv_n);
        return out;
    };
    return gradient_alignment_probe(params, cfg, losses, eta_probe);
}

// ---------------------------------------------------------------------------
// Test-time adaptation
// ---------------------------------------------------------------------------

// Per test window: U plain gradient steps on the label-free reconstruction
// loss of the look-back, forecast with the adapted weights, restore. U = 0
// (or a zero rate) is exactly plain evaluation.
inline Metrics test_time_adapt_evaluate(TimeMachineParams& params, const TimeMachineConfig& cfg,
                                        const std::vector<WindowPair>& windows, int updates,
                                        double eta_tta) {
    if (updates < 0) throw ConfigError("test_time_adapt_evaluate: U must be non-negative");
    if (windows.empty()) throw DataError("test_time_adapt_evaluate: no windows");
    if (updates == 0 || eta_tta == 0.0) return evaluate(params, cfg, windows);

    const std::vector<Tensor*> live = detail::live_params(params, cfg);
    const auto snap = detail::snapshot_values(live);

    double se = 0.0, ae = 0.0;
    std::int64_t count = 0;
    for (const WindowPair& w : windows) {
        for (int u = 0; u < updates; ++u) {
            auto tape = Tape::create();
            detail::BoundModel bm = detail::bind_model(tape, params, cfg);
            ForwardHooks hooks;
            hooks.want_self_loss = true;
            const ModelOutput out = model_forward(bm.params, cfg, w.x, hooks);
            if (!out.has_self_loss) break;  // nothing to adapt on (no TTT blocks)
            const GradientMap gm = tape->backward(out.self_loss);
            for (std::size_t k = 0; k < live.size(); ++k) {
                const Tensor& g = gm.at(*bm.bound_list[k]);
                auto& pv = live[k]->values();
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    pv[static_cast<std::size_t>(i)] -= eta_tta * g[i];
                }
            }
        }
        const Tensor pred = forecast(params, cfg, w.x);
        for (std::int64_t i = 0; i < pred.size(); ++i) {
            const double e = pred[i] - w.y[i];
            se += e * e;
            ae += std::abs(e);
        }
        count += pred.size();
        detail::restore_values(live, snap);
    }
    return {se / static_cast<double>(count), ae / static_cast<double>(count)};
}

}  // namespace ttsf
