#pragma once

#include <cmath>
#include <string>

#include "ttsf/autodiff.hpp"

namespace ttsf {

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { softplus, gelu, sigmoid, relu };

// Exact (erf-based) GELU, composed from primitives so it stays differentiable
// to any order the tape supports.
inline Tensor gelu(const Tensor& x) {
    const Tensor phi = scale(add_scalar(erf_fn(scale(x, 1.0 / std::sqrt(2.0))), 1.0), 0.5);
    return mul(x, phi);
}

inline Tensor activation(Activation kind, const Tensor& x) {
    switch (kind) {
        case Activation::softplus: return softplus(x);
        case Activation::gelu: return gelu(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::relu: return relu(x);
    }
    throw ConfigError("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

struct LinearLayer {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out]

    LinearLayer() = default;
    LinearLayer(std::int64_t out, std::int64_t in) : weight({out, in}), bias({out}) {}

    static LinearLayer init(Rng& rng, std::int64_t out, std::int64_t in) {
        LinearLayer l;
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        l.weight = rand_uniform(rng, {out, in}, -bound, bound);
        l.bias = rand_uniform(rng, {out}, -bound, bound);
        return l;
    }

    std::int64_t in_features() const { return weight.shape[1]; }
    std::int64_t out_features() const { return weight.shape[0]; }
};

// y = x W^T + b over the last axis; accepts a vector or a matrix of rows.
inline Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
    const std::int64_t in = layer.in_features();
    if (x.rank() == 1) {
        if (x.shape[0] != in) {
            throw DimensionError("linear_forward: input length " + std::to_string(x.shape[0]) +
                                 " vs layer width " + std::to_string(in));
        }
        return add(matvec(layer.weight, x), layer.bias);
    }
    if (x.rank() == 2) {
        if (x.shape[1] != in) {
            throw DimensionError("linear_forward: row width " + std::to_string(x.shape[1]) +
                                 " vs layer width " + std::to_string(in));
        }
        return add_rowvec(matmul(x, transpose(layer.weight)), layer.bias);
    }
    throw DimensionError("linear_forward: expected rank 1 or 2 input, got " +
                         shape_str(x.shape));
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Standardize each row over the last axis with 1/sqrt(var + eps), then apply
// the per-feature affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    detail::require_rank(x, 2, "layer_norm");
    const std::int64_t c = x.shape[1];
    const Tensor mean = scale(rowsum(x), 1.0 / static_cast<double>(c));
    const Tensor centered = sub(x, bcast_col(mean, c));
    const Tensor var = scale(rowsum(mul(centered, centered)), 1.0 / static_cast<double>(c));
    const Tensor inv_std = recip(sqrt_fn(add_scalar(var, eps)));
    const Tensor normed = mul(centered, bcast_col(inv_std, c));
    return add_rowvec(mul(normed, bcast_row(gamma, x.shape[0])), beta);
}

struct LayerNormParams {
    Tensor gamma;  // [d]
    Tensor beta;   // [d]

    LayerNormParams() = default;
    explicit LayerNormParams(std::int64_t d) : gamma(full({d}, 1.0)), beta({d}) {}
};

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p, double eps = 1e-5) {
    return layer_norm(x, p.gamma, p.beta, eps);
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout: surviving activations are scaled by 1/(1-rate) during
// training; evaluation is the identity.
inline Tensor dropout_forward(double rate, bool training, const Tensor& x, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    Tensor mask(x.shape);
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale_up = 1.0 / (1.0 - rate);
    for (auto& v : mask.values()) v = keep(rng) ? scale_up : 0.0;
    return mul(x, mask);
}

// ---------------------------------------------------------------------------
// Reversible instance normalization
// ---------------------------------------------------------------------------

// Statistics captured by revin_normalize. The std uses the population
// convention and is floored at eps rather than smoothed inside the square
// root, which keeps the whole transform exactly scale-equivariant.
struct RevINState {
    Tensor mean;  // [M]
    Tensor std;   // [M], >= eps
};

struct RevINParams {
    Tensor gamma;  // [M]
    Tensor beta;   // [M]

    RevINParams() = default;
    explicit RevINParams(std::int64_t channels)
        : gamma(full({channels}, 1.0)), beta({channels}) {}
};

inline constexpr double kRevinEps = 1e-5;

namespace detail {
inline void channel_stats(const Tensor& x, Tensor& mean, Tensor& stddev) {
    const std::int64_t m = x.shape[0], l = x.shape[1];
    mean = Tensor({m});
    stddev = Tensor({m});
    for (std::int64_t c = 0; c < m; ++c) {
        double s = 0.0;
        for (std::int64_t t = 0; t < l; ++t) s += x.at(c, t);
        const double mu = s / static_cast<double>(l);
        double v = 0.0;
        for (std::int64_t t = 0; t < l; ++t) {
            const double d = x.at(c, t) - mu;
            v += d * d;
        }
        mean.values()[static_cast<std::size_t>(c)] = mu;
        stddev.values()[static_cast<std::size_t>(c)] =
            std::max(std::sqrt(v / static_cast<double>(l)), kRevinEps);
    }
}
}  // namespace detail

inline std::pair<Tensor, RevINState> revin_normalize(const Tensor& x, const RevINParams& p) {
    detail::require_rank(x, 2, "revin_normalize");
    if (x.shape[1] < 2) {
        throw DimensionError("revin_normalize: window length must be at least 2");
    }
    RevINState st;
    detail::channel_stats(x.detached(), st.mean, st.std);
    const std::int64_t l = x.shape[1];
    const Tensor centered = sub(x, bcast_col(st.mean, l));
    const Tensor normed = mul(centered, bcast_col(recip(st.std), l));
    const Tensor affine =
        add(mul(normed, bcast_col(p.gamma, l)), bcast_col(p.beta, l));
    return {affine, st};
}

inline Tensor revin_denormalize(const Tensor& y, const RevINState& st, const RevINParams& p) {
    detail::require_rank(y, 2, "revin_denormalize");
    if (y.shape[0] != st.mean.shape[0]) {
        throw DimensionError("revin_denormalize: channel count " + std::to_string(y.shape[0]) +
                             " does not match state with " + std::to_string(st.mean.shape[0]) +
                             " channels");
    }
    const std::int64_t t = y.shape[1];
    // invert the affine map, then restore scale and location
    const Tensor unshifted = sub(y, bcast_col(p.beta, t));
    const Tensor unscaled = mul(unshifted, bcast_col(recip(p.gamma), t));
    return add(mul(unscaled, bcast_col(st.std, t)), bcast_col(st.mean, t));
}

// Per-channel z-score over the window, with the same population convention
// and eps floor as RevIN but no reversal state.
inline Tensor zscore_normalize(const Tensor& x) {
    detail::require_rank(x, 2, "zscore_normalize");
    if (x.shape[1] < 2) {
        throw DimensionError("zscore_normalize: window length must be at least 2");
    }
    Tensor mean, stddev;
    detail::channel_stats(x.detached(), mean, stddev);
    const std::int64_t l = x.shape[1];
    return mul(sub(x, bcast_col(mean, l)), bcast_col(recip(stddev), l));
}

// ---------------------------------------------------------------------------
// Single-head scaled dot-product attention
// ---------------------------------------------------------------------------

namespace detail {
inline Tensor rowmax_const(const Tensor& x) {
    Tensor out({x.shape[0]});
    const std::int64_t r = x.shape[0], c = x.shape[1];
    for (std::int64_t i = 0; i < r; ++i) {
        double m = x.at(i, 0);
        for (std::int64_t j = 1; j < c; ++j) m = std::max(m, x.at(i, j));
        out.values()[static_cast<std::size_t>(i)] = m;
    }
    return out;
}
}  // namespace detail

// Row-wise softmax. The row-max shift is a constant; softmax is invariant to
// it, so gradients are unaffected.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank(x, 2, "softmax_rows");
    const std::int64_t c = x.shape[1];
    const Tensor shifted = sub(x, bcast_col(detail::rowmax_const(x.detached()), c));
    const Tensor e = exp_fn(shifted);
    return mul(e, bcast_col(recip(rowsum(e)), c));
}

inline Tensor attention_single_head(const Tensor& q, const Tensor& k, const Tensor& v) {
    detail::require_rank(q, 2, "attention_single_head");
    detail::require_rank(k, 2, "attention_single_head");
    detail::require_rank(v, 2, "attention_single_head");
    if (q.shape[1] != k.shape[1]) {
        throw DimensionError("attention_single_head: query/key widths differ, " +
                             shape_str(q.shape) + " vs " + shape_str(k.shape));
    }
    if (k.shape[0] != v.shape[0]) {
        throw DimensionError("attention_single_head: key/value row counts differ");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.shape[1]));
    const Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    return matmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// Convolutional hidden-layer variants
// ---------------------------------------------------------------------------

enum class ConvVariantTag { none, conv3, conv5, stack3, stack5, inception, modern_tcn };

inline const char* conv_variant_name(ConvVariantTag tag) {
    switch (tag) {
        case ConvVariantTag::none: return "None";
        case ConvVariantTag::conv3: return "Conv3";
        case ConvVariantTag::conv5: return "Conv5";
        case ConvVariantTag::stack3: return "Stack3";
        case ConvVariantTag::stack5: return "Stack5";
        case ConvVariantTag::inception: return "Inception";
        case ConvVariantTag::modern_tcn: return "ModernTCN";
    }
    throw ConfigError("conv variant: unknown tag");
}

inline ConvVariantTag conv_variant_from_name(const std::string& name) {
    if (name == "None") return ConvVariantTag::none;
    if (name == "Conv3") return ConvVariantTag::conv3;
    if (name == "Conv5") return ConvVariantTag::conv5;
    if (name == "Stack3") return ConvVariantTag::stack3;
    if (name == "Stack5") return ConvVariantTag::stack5;
    if (name == "Inception") return ConvVariantTag::inception;
    if (name == "ModernTCN") return ConvVariantTag::modern_tcn;
    throw ConfigError("conv variant: unknown name '" + name + "'");
}

inline constexpr std::int64_t kModernTcnWidth = 16;

// Parameters for one hidden-layer variant on tokens of width d. Kernels are
// depthwise along the token axis; pointwise mixing is a linear layer.
struct ConvVariantParams {
    ConvVariantTag tag = ConvVariantTag::none;
    Tensor k1;           // [d x K] first depthwise kernel
    Tensor k2;           // [d x K] cascade / second inception branch
    LinearLayer reduce;  // inception: 2d -> d
    LinearLayer pw_in;   // modern_tcn: d -> 16
    LinearLayer pw_out;  // modern_tcn: 16 -> d

    static ConvVariantParams init(Rng& rng, ConvVariantTag tag, std::int64_t d) {
        ConvVariantParams p;
        p.tag = tag;
        auto kern = [&](std::int64_t k) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(k));
            return rand_uniform(rng, {d, k}, -bound, bound);
        };
        switch (tag) {
            case ConvVariantTag::none:
                break;
            case ConvVariantTag::conv3:
                p.k1 = kern(3);
                break;
            case ConvVariantTag::conv5:
                p.k1 = kern(5);
                break;
            case ConvVariantTag::stack3:
                p.k1 = kern(3);
                p.k2 = kern(3);
                break;
            case ConvVariantTag::stack5:
                p.k1 = kern(5);
                p.k2 = kern(3);
                break;
            case ConvVariantTag::inception:
                p.k1 = kern(5);
                p.k2 = kern(3);
                p.reduce = LinearLayer::init(rng, d, 2 * d);
                break;
            case ConvVariantTag::modern_tcn:
                p.k1 = kern(3);
                p.pw_in = LinearLayer::init(rng, kModernTcnWidth, d);
                p.pw_out = LinearLayer::init(rng, d, kModernTcnWidth);
                break;
        }
        return p;
    }

    static ConvVariantParams zeros_like(ConvVariantTag tag, std::int64_t d) {
        ConvVariantParams p;
        p.tag = tag;
        switch (tag) {
            case ConvVariantTag::none:
                break;
            case ConvVariantTag::conv3:
                p.k1 = Tensor({d, 3});
                break;
            case ConvVariantTag::conv5:
                p.k1 = Tensor({d, 5});
                break;
            case ConvVariantTag::stack3:
                p.k1 = Tensor({d, 3});
                p.k2 = Tensor({d, 3});
                break;
            case ConvVariantTag::stack5:
                p.k1 = Tensor({d, 5});
                p.k2 = Tensor({d, 3});
                break;
            case ConvVariantTag::inception:
                p.k1 = Tensor({d, 5});
                p.k2 = Tensor({d, 3});
                p.reduce = LinearLayer(d, 2 * d);
                break;
            case ConvVariantTag::modern_tcn:
                p.k1 = Tensor({d, 3});
                p.pw_in = LinearLayer(kModernTcnWidth, d);
                p.pw_out = LinearLayer(d, kModernTcnWidth);
                break;
        }
        return p;
    }
};

namespace detail {
// Depthwise convolution of [S x d] tokens along the token axis.
inline Tensor conv_tokens(const Tensor& x, const Tensor& kernel) {
    return transpose(conv1d_depthwise_same(transpose(x), kernel));
}
}  // namespace detail

// y = x + Variant(x); every variant preserves the [S x d] shape.
inline Tensor hidden_conv_forward(const ConvVariantParams& p, const Tensor& x) {
    detail::require_rank(x, 2, "hidden_conv_forward");
    switch (p.tag) {
        case ConvVariantTag::none:
            return x;
        case ConvVariantTag::conv3:
        case ConvVariantTag::conv5:
            return add(x, detail::conv_tokens(x, p.k1));
        case ConvVariantTag::stack3:
        case ConvVariantTag::stack5:
            return add(x, detail::conv_tokens(detail::conv_tokens(x, p.k1), p.k2));
        case ConvVariantTag::inception: {
            const Tensor branches =
                concat_cols(detail::conv_tokens(x, p.k1), detail::conv_tokens(x, p.k2));
            return add(x, linear_forward(p.reduce, branches));
        }
        case ConvVariantTag::modern_tcn: {
            const Tensor dw = detail::conv_tokens(x, p.k1);
            return add(x, linear_forward(p.pw_out, gelu(linear_forward(p.pw_in, dw))));
        }
    }
    throw ConfigError("hidden_conv_forward: unknown variant tag");
}

}  // namespace ttsf
