#pragma once

#include <cmath>
#include <vector>

#include "ttsf/layers.hpp"

namespace ttsf {

// Test-time-training sequence block. The hidden state is the weight set of a
// small model f (linear or two-layer MLP). Scanning a sequence performs one
// gradient step on the reconstruction loss
//     l(W; x_t) = || f(view(x_t); W) - x_t ||^2
// per token, then emits z_t = f(x_t; W_t) with the already-updated weights.
// The inner gradients are emitted as live tape nodes, so outer training
// differentiates through the whole inner loop.

enum class TTTKind { linear, mlp };
enum class ViewMode { identity, learned_projection };

struct TTTConfig {
    TTTKind f_kind = TTTKind::linear;
    std::int64_t token_dim = 0;  // d; MLP hidden width is 4d
    double inner_eta = 0.1;
    bool eta_learnable = false;
    ViewMode view_mode = ViewMode::identity;
    ConvVariantTag conv_variant = ConvVariantTag::none;
    bool detach_inner = false;
    int u_inner = 1;
    bool fast_bias = true;  // include bias terms in f

    void validate() const {
        if (token_dim < 1) throw ConfigError("ttt: token_dim must be >= 1");
        if (inner_eta < 0.0) throw ConfigError("ttt: inner_eta must be non-negative");
        if (u_inner < 0) throw ConfigError("ttt: u_inner must be non-negative");
    }
};

// Fast weights of f at one point in the scan. Entries are tape tensors while
// a tape is active; shapes are fixed for the whole scan.
struct TTTFastState {
    std::vector<Tensor> w;
};

struct TTTBlockParams {
    Tensor w_in;   // linear: [d x d]; mlp: [4d x d]
    Tensor b_in;   // [d] or [4d]
    Tensor w_out;  // mlp only: [d x 4d]
    Tensor b_out;  // mlp only: [d]
    Tensor theta_k;   // [d x d] view projection
    Tensor eta_raw;   // scalar; eta = softplus(eta_raw) when learnable
    LayerNormParams ln;
    ConvVariantParams conv;

    static TTTBlockParams init(Rng& rng, const TTTConfig& cfg) {
        cfg.validate();
        const std::int64_t d = cfg.token_dim;
        TTTBlockParams p;
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        if (cfg.f_kind == TTTKind::linear) {
            p.w_in = rand_uniform(rng, {d, d}, -bound, bound);
            p.b_in = Tensor({d});
        } else {
            const std::int64_t h = 4 * d;
            p.w_in = rand_uniform(rng, {h, d}, -bound, bound);
            p.b_in = Tensor({h});
            const double bound2 = 1.0 / std::sqrt(static_cast<double>(h));
            p.w_out = rand_uniform(rng, {d, h}, -bound2, bound2);
            p.b_out = Tensor({d});
        }
        p.theta_k = identity_matrix(d);
        // softplus(eta_raw) == inner_eta at initialization
        p.eta_raw = scalar_tensor(std::log(std::expm1(std::max(cfg.inner_eta, 1e-8))));
        p.ln = LayerNormParams(d);
        p.conv = ConvVariantParams::init(rng, cfg.conv_variant, d);
        return p;
    }

    TTTFastState initial_state(const TTTConfig& cfg) const {
        TTTFastState st;
        st.w.push_back(w_in);
        if (cfg.fast_bias) st.w.push_back(b_in);
        if (cfg.f_kind == TTTKind::mlp) {
            st.w.push_back(w_out);
            if (cfg.fast_bias) st.w.push_back(b_out);
        }
        return st;
    }
};

namespace detail {

inline Tensor ttt_f_apply(const TTTConfig& cfg, const TTTFastState& st, const Tensor& v) {
    if (cfg.f_kind == TTTKind::linear) {
        Tensor y = matvec(st.w[0], v);
        if (cfg.fast_bias) y = add(y, st.w[1]);
        return y;
    }
    Tensor h = matvec(st.w[0], v);
    std::size_t out_idx = 1;
    if (cfg.fast_bias) {
        h = add(h, st.w[1]);
        out_idx = 2;
    }
    h = gelu(h);
    Tensor y = matvec(st.w[out_idx], h);
    if (cfg.fast_bias) y = add(y, st.w[out_idx + 1]);
    return y;
}

inline Tensor ttt_view(const TTTConfig& cfg, const TTTBlockParams& p, const Tensor& x_t) {
    if (cfg.view_mode == ViewMode::identity) return x_t;
    return matvec(p.theta_k, x_t);
}

// Plain-valued gradients of the reconstruction loss, for evaluation scans and
// detach_inner. A scratch tape computes the values and is dropped.
inline std::vector<Tensor> ttt_inner_gradients_plain(const TTTConfig& cfg,
                                                     const TTTFastState& st,
                                                     const Tensor& view, const Tensor& target) {
    auto scratch = Tape::create();
    TTTFastState bound;
    bound.w.reserve(st.w.size());
    for (const Tensor& w : st.w) bound.w.push_back(scratch->parameter(w.detached()));
    const Tensor r = sub(ttt_f_apply(cfg, bound, view.detached()), target.detached());
    const GradientMap gm = scratch->backward(sum_all(mul(r, r)));
    std::vector<Tensor> out;
    out.reserve(st.w.size());
    for (const Tensor& w : bound.w) out.push_back(gm.at(w));
    return out;
}

}  // namespace detail

// Squared reconstruction error of f on the view of x_t, target x_t.
inline Tensor inner_loss(const TTTConfig& cfg, const TTTFastState& st, const Tensor& x_t,
                         const TTTBlockParams& p) {
    detail::require_rank(x_t, 1, "inner_loss");
    if (x_t.shape[0] != cfg.token_dim) {
        throw DimensionError("inner_loss: token width " + std::to_string(x_t.shape[0]) +
                             " vs configured dim " + std::to_string(cfg.token_dim));
    }
    const Tensor r = sub(detail::ttt_f_apply(cfg, st, detail::ttt_view(cfg, p, x_t)), x_t);
    return sum_all(mul(r, r));
}

// One exact gradient step on the inner loss. `eta_node` overrides the plain
// rate with a (possibly learnable) scalar tensor. eta == 0 is a bitwise no-op.
inline TTTFastState inner_step(const TTTConfig& cfg, const TTTFastState& st, const Tensor& x_t,
                               double eta, const TTTBlockParams& p,
                               const Tensor* eta_node = nullptr) {
    if (eta < 0.0) throw ConfigError("inner_step: eta must be non-negative");
    if (eta_node == nullptr && eta == 0.0) return st;

    std::shared_ptr<Tape> tape;
    for (const Tensor& w : st.w) {
        if (w.on_tape()) {
            tape = w.tape;
            break;
        }
    }
    TTTFastState cur = st;
    std::vector<Tensor> grads;
    if (cfg.detach_inner || !tape) {
        grads = detail::ttt_inner_gradients_plain(cfg, st, detail::ttt_view(cfg, p, x_t), x_t);
    } else {
        // every fast weight must be a tape node before the loss is built
        for (Tensor& w : cur.w) {
            if (!w.on_tape()) w = tape->watch(w);
        }
        const Tensor ell = inner_loss(cfg, cur, x_t, p);
        grads = tape->gradients_of(ell, cur.w);
    }

    TTTFastState next;
    next.w.reserve(cur.w.size());
    for (std::size_t i = 0; i < cur.w.size(); ++i) {
        if (eta_node != nullptr) {
            next.w.push_back(sub(cur.w[i], mul(bcast_all(*eta_node, cur.w[i].shape), grads[i])));
        } else {
            next.w.push_back(sub(cur.w[i], scale(grads[i], eta)));
        }
    }
    return next;
}

struct TTTScanResult {
    Tensor z;              // [S x d]
    Tensor self_loss_sum;  // scalar, sum of pre-update token losses
    long self_loss_terms = 0;
};

// Left-to-right scan: W_t = W_{t-1} - eta * grad l(W_{t-1}; x_t), then
// z_t = f(x_t; W_t). One inner step per token by default (u_inner).
inline TTTScanResult ttt_scan(const TTTBlockParams& p, const TTTConfig& cfg, const Tensor& x,
                              bool collect_self_loss = false) {
    detail::require_rank(x, 2, "ttt_scan");
    cfg.validate();
    const std::int64_t s = x.shape[0];

    Tensor eta_node;
    const bool learnable = cfg.eta_learnable;
    if (learnable) eta_node = softplus(p.eta_raw);

    TTTFastState st = p.initial_state(cfg);
    TTTScanResult res;
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(s));
    for (std::int64_t t = 0; t < s; ++t) {
        const Tensor x_t = take_row(x, t);
        if (collect_self_loss) {
            const Tensor ell = inner_loss(cfg, st, x_t, p);
            res.self_loss_sum = res.self_loss_terms == 0 ? ell : add(res.self_loss_sum, ell);
            res.self_loss_terms += 1;
        }
        for (int u = 0; u < cfg.u_inner; ++u) {
            st = inner_step(cfg, st, x_t, cfg.inner_eta, p, learnable ? &eta_node : nullptr);
        }
        rows.push_back(detail::ttt_f_apply(cfg, st, x_t));
    }
    res.z = stack_rows(rows);
    return res;
}

inline Tensor ttt_sequence_forward(const TTTBlockParams& p, const TTTConfig& cfg,
                                   const Tensor& x) {
    return ttt_scan(p, cfg, x).z;
}

// Block body without the residual: scan(conv(layer_norm(x))). The hierarchy
// in the forecaster consumes this core and wires its own residual paths.
inline TTTScanResult ttt_block_core(const TTTBlockParams& p, const TTTConfig& cfg,
                                    const Tensor& x, bool collect_self_loss = false) {
    const Tensor normed = layer_norm(x, p.ln);
    const Tensor mixed = hidden_conv_forward(p.conv, normed);
    return ttt_scan(p, cfg, mixed, collect_self_loss);
}

// Pre-norm residual block: y = x + scan(conv(layer_norm(x))).
inline Tensor ttt_block_forward(const TTTBlockParams& p, const TTTConfig& cfg, const Tensor& x) {
    return add(x, ttt_block_core(p, cfg, x).z);
}

}  // namespace ttsf
