#pragma once

#include <cmath>
#include <vector>

#include "ttsf/layers.hpp"

namespace ttsf {

// Structured state-space block with a diagonal state matrix. The LTI path
// (discretize + recurrent/convolutional forward) exists for the
// recurrence/convolution equivalence oracle; the selective path is the
// Mamba-style block the forecaster can swap in for TTT.

struct DiscretizedSSM {
    Tensor abar;  // [N], exp(delta * A)
    Tensor bbar;  // [N], ((exp(delta*A) - 1)/A) * B with the A->0 limit delta*B
};

namespace detail {
// Zero-order hold for one step size given as a scalar tensor. Shared by the
// LTI path and the per-token selective scan, differentiable throughout.
inline DiscretizedSSM zoh(const Tensor& a_diag, const Tensor& b_in, const Tensor& delta) {
    const std::int64_t n = a_diag.shape[0];
    const Tensor z = mul(bcast_all(delta, {n}), a_diag);
    DiscretizedSSM d;
    d.abar = exp_fn(z);
    d.bbar = mul(mul(bcast_all(delta, {n}), expm1_div(z)), b_in);
    return d;
}
}  // namespace detail

inline DiscretizedSSM discretize(const Tensor& a_diag, const Tensor& b_in, double delta) {
    detail::require_rank(a_diag, 1, "discretize");
    detail::require_rank(b_in, 1, "discretize");
    if (a_diag.shape[0] != b_in.shape[0]) {
        throw DimensionError("discretize: state sizes differ, " + shape_str(a_diag.shape) +
                             " vs " + shape_str(b_in.shape));
    }
    if (delta <= 0.0) throw ConfigError("discretize: delta must be positive");
    return detail::zoh(a_diag, b_in, scalar_tensor(delta));
}

// Linear recurrence h_t = abar h_{t-1} + bbar x_t, y_t = C h_t with h_0 = 0.
// Scalar input/output per step; plain arithmetic (this is the oracle side).
inline Tensor ssm_recurrent_forward(const DiscretizedSSM& d, const Tensor& c_out,
                                    const Tensor& x) {
    detail::require_rank(c_out, 1, "ssm_recurrent_forward");
    detail::require_rank(x, 1, "ssm_recurrent_forward");
    const std::int64_t n = c_out.shape[0], s = x.shape[0];
    if (d.abar.shape[0] != n) {
        throw DimensionError("ssm_recurrent_forward: state size mismatch");
    }
    Tensor y({s});
    std::vector<double> h(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t t = 0; t < s; ++t) {
        double out = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            h[static_cast<std::size_t>(i)] =
                d.abar[i] * h[static_cast<std::size_t>(i)] + d.bbar[i] * x[t];
            out += c_out[i] * h[static_cast<std::size_t>(i)];
        }
        y.values()[static_cast<std::size_t>(t)] = out;
    }
    Counters::add_multiplies(static_cast<std::uint64_t>(3 * s * n));
    return y;
}

// First L taps of the convolution kernel (C bbar, C abar bbar, C abar^2 bbar, ...).
inline Tensor ssm_conv_kernel(const DiscretizedSSM& d, const Tensor& c_out, std::int64_t l) {
    detail::require_rank(c_out, 1, "ssm_conv_kernel");
    if (l < 1) throw ConfigError("ssm_conv_kernel: need at least one tap");
    const std::int64_t n = c_out.shape[0];
    Tensor taps({l});
    std::vector<double> state(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) state[static_cast<std::size_t>(i)] = d.bbar[i];
    for (std::int64_t k = 0; k < l; ++k) {
        double tap = 0.0;
        for (std::int64_t i = 0; i < n; ++i) tap += c_out[i] * state[static_cast<std::size_t>(i)];
        taps.values()[static_cast<std::size_t>(k)] = tap;
        for (std::int64_t i = 0; i < n; ++i) state[static_cast<std::size_t>(i)] *= d.abar[i];
    }
    return taps;
}

// Causal convolution y_t = sum_{k<=t} K_k x_{t-k}; with the kernel above this
// reproduces the recurrent output exactly on LTI instances.
inline Tensor ssm_conv_forward(const Tensor& kernel, const Tensor& x) {
    detail::require_rank(kernel, 1, "ssm_conv_forward");
    detail::require_rank(x, 1, "ssm_conv_forward");
    const std::int64_t s = x.shape[0], l = kernel.shape[0];
    Tensor y({s});
    for (std::int64_t t = 0; t < s; ++t) {
        double out = 0.0;
        const std::int64_t kmax = std::min(t + 1, l);
        for (std::int64_t k = 0; k < kmax; ++k) out += kernel[k] * x[t - k];
        y.values()[static_cast<std::size_t>(t)] = out;
    }
    return y;
}

// ---------------------------------------------------------------------------
// Selective (input-dependent) parameterization
// ---------------------------------------------------------------------------

struct SSMParams {
    Tensor a_raw;      // [N]; A = -softplus(a_raw) keeps every entry negative
    Tensor b_in;       // [N] input column
    Tensor c_out;      // [N] output row
    Tensor delta_raw;  // scalar "Parameter" inside softplus
    LinearLayer s_b;       // d -> N
    LinearLayer s_c;       // d -> N
    LinearLayer s_delta;   // d -> 1
    LayerNormParams ln;    // block wrapper
    ConvVariantParams conv;

    static SSMParams init(Rng& rng, std::int64_t state_size, std::int64_t token_dim,
                          ConvVariantTag conv_tag) {
        SSMParams p;
        // softplus(a_raw) spread over [0.5, 1.5] keeps the spectrum stable
        p.a_raw = rand_uniform(rng, {state_size}, -0.4, 1.3);
        const double bound = 1.0 / std::sqrt(static_cast<double>(state_size));
        p.b_in = rand_uniform(rng, {state_size}, -bound, bound);
        p.c_out = rand_uniform(rng, {state_size}, -bound, bound);
        p.delta_raw = scalar_tensor(0.0);
        p.s_b = LinearLayer::init(rng, state_size, token_dim);
        p.s_c = LinearLayer::init(rng, state_size, token_dim);
        p.s_delta = LinearLayer::init(rng, 1, token_dim);
        p.ln = LayerNormParams(token_dim);
        p.conv = ConvVariantParams::init(rng, conv_tag, token_dim);
        return p;
    }

    Tensor a_diag() const { return neg(softplus(a_raw)); }
};

struct SelectiveStep {
    Tensor b_t;      // [N]
    Tensor c_t;      // [N]
    Tensor delta_t;  // scalar, > 0
};

// B_t = s_B(x_t), C_t = s_C(x_t), Delta_t = softplus(Parameter + s_Delta(x_t)).
inline SelectiveStep selective_params(const SSMParams& p, const Tensor& x_t) {
    SelectiveStep s;
    s.b_t = linear_forward(p.s_b, x_t);
    s.c_t = linear_forward(p.s_c, x_t);
    s.delta_t = softplus(add(p.delta_raw, reshape(linear_forward(p.s_delta, x_t), {})));
    return s;
}

// Selective scan over [S x d] tokens. One state vector of size N per feature;
// the state block is kept as a [d x N] matrix so each token costs a handful
// of dense ops. Time-varying parameters force the recurrent mode.
inline Tensor ssm_selective_forward(const SSMParams& p, const Tensor& x) {
    detail::require_rank(x, 2, "ssm_selective_forward");
    const std::int64_t s = x.shape[0], d = x.shape[1], n = p.a_raw.shape[0];
    const Tensor a_diag = p.a_diag();
    Tensor h = zeros({d, n});
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(s));
    for (std::int64_t t = 0; t < s; ++t) {
        const Tensor x_t = take_row(x, t);
        const SelectiveStep sel = selective_params(p, x_t);
        const DiscretizedSSM dz = detail::zoh(a_diag, sel.b_t, sel.delta_t);
        h = add(mul(h, bcast_row(dz.abar, d)), outer(x_t, dz.bbar));
        rows.push_back(matvec(h, sel.c_t));
    }
    return stack_rows(rows);
}

// Core and residual wrapper mirroring the TTT block so the forecaster can
// swap block kinds.
inline Tensor ssm_block_core(const SSMParams& p, const Tensor& x) {
    return ssm_selective_forward(p, hidden_conv_forward(p.conv, layer_norm(x, p.ln)));
}

inline Tensor ssm_block_forward(const SSMParams& p, const Tensor& x) {
    return add(x, ssm_block_core(p, x));
}

}  // namespace ttsf
