#pragma once

#include <bit>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ttsf/kv.hpp"
#include "ttsf/ssm.hpp"
#include "ttsf/ttt.hpp"

namespace ttsf {

// Two-level hierarchical forecaster. A look-back window [M x L] is RevIN
// normalized, embedded twice (L -> n1 -> n2), processed by four sequence
// blocks (two per resolution), concatenated and projected to the horizon:
//
//   x0        = revin_normalize(x)
//   u1        = Dropout(E1(x0)),  u2 = Dropout(E2(u1))
//   level 2   : v2 = core1(u2) + core2(u2) + u2, then P1(v2)      [M x n1]
//   level 1   : v1 = core3(u1) + core4(u1)        (no residual)   [M x n1]
//   y         = revin_denormalize(P2(concat(v1 + u1, P1(v2))))    [M x T]
//
// Blocks enter the hierarchy as cores (layer_norm -> conv variant -> scan)
// without their own residual; the residual paths above are the only ones.
// Channel mixing scans the M channels as tokens; channel independence runs
// every channel separately, transposing around one block of each level and
// giving it a 1 -> 16 -> 1 projected view of the sequence.

enum class MixMode { mixing, independence };
enum class BlockKind { ttt, ssm };

inline const char* mix_mode_name(MixMode m) {
    return m == MixMode::mixing ? "mixing" : "independence";
}
inline const char* block_kind_name(BlockKind k) { return k == BlockKind::ttt ? "TTT" : "SSM"; }

struct TimeMachineConfig {
    std::int64_t channels = 1;   // M
    std::int64_t lookback = 96;  // L
    std::int64_t horizon = 96;   // T
    std::int64_t n1 = 64;
    std::int64_t n2 = 32;
    MixMode mode = MixMode::mixing;
    BlockKind block_kind = BlockKind::ttt;
    TTTKind ttt_kind = TTTKind::linear;
    ConvVariantTag conv_variant = ConvVariantTag::none;
    double dropout_rate = 0.1;
    double inner_eta = 0.1;
    bool eta_learnable = false;
    ViewMode view_mode = ViewMode::identity;
    bool detach_inner = false;
    int u_inner = 1;
    bool fast_bias = true;
    std::int64_t ssm_state = 16;       // N
    std::int64_t ci_inner_width = 16;  // hidden size of the transposed block

    void validate() const {
        if (channels < 1) throw ConfigError("model: channels must be >= 1");
        if (lookback < 2) throw ConfigError("model: lookback must be >= 2");
        if (horizon < 1) throw ConfigError("model: horizon must be >= 1");
        if (n1 <= n2) {
            throw ConfigError("model: n1 must exceed n2, got n1=" + std::to_string(n1) +
                              " n2=" + std::to_string(n2));
        }
        if (n2 < 1) throw ConfigError("model: n2 must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("model: dropout_rate must lie in [0, 1)");
        if (ssm_state < 1) throw ConfigError("model: ssm_state must be >= 1");
        if (ci_inner_width < 1) throw ConfigError("model: ci_inner_width must be >= 1");
        if (inner_eta < 0.0) throw ConfigError("model: inner_eta must be non-negative");
        if (u_inner < 0) throw ConfigError("model: u_inner must be non-negative");
    }

    // Token width seen by block i (0..3) under the current mode.
    std::int64_t block_dim(int i) const {
        const bool level2 = i < 2;
        if (mode == MixMode::independence && (i == 1 || i == 3)) return ci_inner_width;
        return level2 ? n2 : n1;
    }

    TTTConfig ttt_config(int i) const {
        TTTConfig c;
        c.f_kind = ttt_kind;
        c.token_dim = block_dim(i);
        c.inner_eta = inner_eta;
        c.eta_learnable = eta_learnable;
        c.view_mode = view_mode;
        c.conv_variant = conv_variant;
        c.detach_inner = detach_inner;
        c.u_inner = u_inner;
        c.fast_bias = fast_bias;
        return c;
    }

    KVMap to_kv() const {
        KVMap kv;
        kv.set_i64("model.channels", channels);
        kv.set_i64("model.lookback", lookback);
        kv.set_i64("model.horizon", horizon);
        kv.set_i64("model.n1", n1);
        kv.set_i64("model.n2", n2);
        kv.set("model.mode", mix_mode_name(mode));
        kv.set("model.block_kind", block_kind_name(block_kind));
        kv.set("model.ttt_kind", ttt_kind == TTTKind::linear ? "Linear" : "MLP");
        kv.set("model.conv_variant", conv_variant_name(conv_variant));
        kv.set_f64("model.dropout_rate", dropout_rate);
        kv.set_f64("model.inner_eta", inner_eta);
        kv.set_bool("model.eta_learnable", eta_learnable);
        kv.set("model.view_mode",
               view_mode == ViewMode::identity ? "identity" : "learned_projection");
        kv.set_bool("model.detach_inner", detach_inner);
        kv.set_i64("model.u_inner", u_inner);
        kv.set_bool("model.fast_bias", fast_bias);
        kv.set_i64("model.ssm_state", ssm_state);
        kv.set_i64("model.ci_inner_width", ci_inner_width);
        return kv;
    }

    static TimeMachineConfig from_kv(const KVMap& kv) {
        TimeMachineConfig c;
        c.channels = kv.get_i64_or("model.channels", c.channels);
        c.lookback = kv.get_i64_or("model.lookback", c.lookback);
        c.horizon = kv.get_i64_or("model.horizon", c.horizon);
        c.n1 = kv.get_i64_or("model.n1", c.n1);
        c.n2 = kv.get_i64_or("model.n2", c.n2);
        const std::string mode = kv.get_or("model.mode", "mixing");
        if (mode == "mixing") {
            c.mode = MixMode::mixing;
        } else if (mode == "independence") {
            c.mode = MixMode::independence;
        } else {
            throw ConfigError("model.mode must be 'mixing' or 'independence', got '" + mode +
                              "'");
        }
        const std::string kind = kv.get_or("model.block_kind", "TTT");
        if (kind == "TTT") {
            c.block_kind = BlockKind::ttt;
        } else if (kind == "SSM") {
            c.block_kind = BlockKind::ssm;
        } else {
            throw ConfigError("model.block_kind must be 'TTT' or 'SSM', got '" + kind + "'");
        }
        const std::string fkind = kv.get_or("model.ttt_kind", "Linear");
        if (fkind == "Linear") {
            c.ttt_kind = TTTKind::linear;
        } else if (fkind == "MLP") {
            c.ttt_kind = TTTKind::mlp;
        } else {
            throw ConfigError("model.ttt_kind must be 'Linear' or 'MLP', got '" + fkind + "'");
        }
        c.conv_variant = conv_variant_from_name(kv.get_or("model.conv_variant", "None"));
        c.dropout_rate = kv.get_f64_or("model.dropout_rate", c.dropout_rate);
        c.inner_eta = kv.get_f64_or("model.inner_eta", c.inner_eta);
        c.eta_learnable = kv.get_bool_or("model.eta_learnable", c.eta_learnable);
        const std::string vm = kv.get_or("model.view_mode", "identity");
        if (vm == "identity") {
            c.view_mode = ViewMode::identity;
        } else if (vm == "learned_projection") {
            c.view_mode = ViewMode::learned_projection;
        } else {
            throw ConfigError("model.view_mode must be 'identity' or 'learned_projection'");
        }
        c.detach_inner = kv.get_bool_or("model.detach_inner", c.detach_inner);
        c.u_inner = static_cast<int>(kv.get_i64_or("model.u_inner", c.u_inner));
        c.fast_bias = kv.get_bool_or("model.fast_bias", c.fast_bias);
        c.ssm_state = kv.get_i64_or("model.ssm_state", c.ssm_state);
        c.ci_inner_width = kv.get_i64_or("model.ci_inner_width", c.ci_inner_width);
        c.validate();
        return c;
    }
};

struct TimeMachineParams {
    LinearLayer e1;  // L -> n1
    LinearLayer e2;  // n1 -> n2
    LinearLayer p1;  // n2 -> n1
    LinearLayer p2;  // 2*n1 -> T
    RevINParams revin;
    std::vector<TTTBlockParams> ttt_blocks;  // four when block_kind == TTT
    std::vector<SSMParams> ssm_blocks;       // four when block_kind == SSM
    LinearLayer ci1_up, ci1_down;  // level-1 transposed block, 1 -> 16 -> 1
    LinearLayer ci2_up, ci2_down;  // level-2 counterpart

    static TimeMachineParams init(Rng& rng, const TimeMachineConfig& cfg) {
        cfg.validate();
        TimeMachineParams p;
        p.e1 = LinearLayer::init(rng, cfg.n1, cfg.lookback);
        p.e2 = LinearLayer::init(rng, cfg.n2, cfg.n1);
        p.p1 = LinearLayer::init(rng, cfg.n1, cfg.n2);
        p.p2 = LinearLayer::init(rng, cfg.horizon, 2 * cfg.n1);
        p.revin = RevINParams(cfg.channels);
        for (int i = 0; i < 4; ++i) {
            if (cfg.block_kind == BlockKind::ttt) {
                p.ttt_blocks.push_back(TTTBlockParams::init(rng, cfg.ttt_config(i)));
            } else {
                p.ssm_blocks.push_back(
                    SSMParams::init(rng, cfg.ssm_state, cfg.block_dim(i), cfg.conv_variant));
            }
        }
        p.ci1_up = LinearLayer::init(rng, cfg.ci_inner_width, 1);
        p.ci1_down = LinearLayer::init(rng, 1, cfg.ci_inner_width);
        p.ci2_up = LinearLayer::init(rng, cfg.ci_inner_width, 1);
        p.ci2_down = LinearLayer::init(rng, 1, cfg.ci_inner_width);
        return p;
    }
};

// ---------------------------------------------------------------------------
// Parameter traversal
// ---------------------------------------------------------------------------

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

namespace detail {

inline void visit_linear(LinearLayer& l, const std::string& name, const ParamVisitor& f) {
    f(name + ".weight", l.weight);
    f(name + ".bias", l.bias);
}

inline void visit_ln(LayerNormParams& ln, const std::string& name, const ParamVisitor& f) {
    f(name + ".gamma", ln.gamma);
    f(name + ".beta", ln.beta);
}

inline void visit_conv(ConvVariantParams& c, const std::string& name, const ParamVisitor& f) {
    switch (c.tag) {
        case ConvVariantTag::none:
            break;
        case ConvVariantTag::conv3:
        case ConvVariantTag::conv5:
            f(name + ".k1", c.k1);
            break;
        case ConvVariantTag::stack3:
        case ConvVariantTag::stack5:
            f(name + ".k1", c.k1);
            f(name + ".k2", c.k2);
            break;
        case ConvVariantTag::inception:
            f(name + ".k1", c.k1);
            f(name + ".k2", c.k2);
            visit_linear(c.reduce, name + ".reduce", f);
            break;
        case ConvVariantTag::modern_tcn:
            f(name + ".k1", c.k1);
            visit_linear(c.pw_in, name + ".pw_in", f);
            visit_linear(c.pw_out, name + ".pw_out", f);
            break;
    }
}

inline void visit_ttt_block(TTTBlockParams& b, const TTTConfig& cfg, const std::string& name,
                            bool live_only, const ParamVisitor& f) {
    f(name + ".w_in", b.w_in);
    f(name + ".b_in", b.b_in);
    if (cfg.f_kind == TTTKind::mlp) {
        f(name + ".w_out", b.w_out);
        f(name + ".b_out", b.b_out);
    }
    if (!live_only || cfg.view_mode == ViewMode::learned_projection) {
        f(name + ".theta_k", b.theta_k);
    }
    if (!live_only || cfg.eta_learnable) f(name + ".eta_raw", b.eta_raw);
    visit_ln(b.ln, name + ".ln", f);
    visit_conv(b.conv, name + ".conv", f);
}

inline void visit_ssm_block(SSMParams& b, const std::string& name, const ParamVisitor& f) {
    f(name + ".a_raw", b.a_raw);
    f(name + ".b_in", b.b_in);
    f(name + ".c_out", b.c_out);
    f(name + ".delta_raw", b.delta_raw);
    visit_linear(b.s_b, name + ".s_b", f);
    visit_linear(b.s_c, name + ".s_c", f);
    visit_linear(b.s_delta, name + ".s_delta", f);
    visit_ln(b.ln, name + ".ln", f);
    visit_conv(b.conv, name + ".conv", f);
}

}  // namespace detail

// Enumerates learnable tensors in a stable order. With live_only the walk is
// restricted to tensors the current configuration actually trains.
inline void visit_params(TimeMachineParams& p, const TimeMachineConfig& cfg, bool live_only,
                         const ParamVisitor& f) {
    detail::visit_linear(p.e1, "e1", f);
    detail::visit_linear(p.e2, "e2", f);
    detail::visit_linear(p.p1, "p1", f);
    detail::visit_linear(p.p2, "p2", f);
    f("revin.gamma", p.revin.gamma);
    f("revin.beta", p.revin.beta);
    for (int i = 0; i < 4; ++i) {
        const std::string name = "block" + std::to_string(i + 1);
        if (cfg.block_kind == BlockKind::ttt) {
            detail::visit_ttt_block(p.ttt_blocks[static_cast<std::size_t>(i)],
                                    cfg.ttt_config(i), name, live_only, f);
        } else {
            detail::visit_ssm_block(p.ssm_blocks[static_cast<std::size_t>(i)], name, f);
        }
    }
    if (!live_only || cfg.mode == MixMode::independence) {
        detail::visit_linear(p.ci1_up, "ci1.up", f);
        detail::visit_linear(p.ci1_down, "ci1.down", f);
        detail::visit_linear(p.ci2_up, "ci2.up", f);
        detail::visit_linear(p.ci2_down, "ci2.down", f);
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardHooks {
    bool training = false;
    Rng* rng = nullptr;
    bool want_self_loss = false;
    Tensor self_sum;
    long self_terms = 0;

    void add_self_loss(const Tensor& sum, long terms) {
        if (terms == 0) return;
        self_sum = self_terms == 0 ? sum : add(self_sum, sum);
        self_terms += terms;
    }
};

struct ModelOutput {
    Tensor prediction;  // [M x T]
    Tensor self_loss;   // mean inner reconstruction loss over blocks/tokens
    bool has_self_loss = false;
};

namespace detail {

inline Tensor apply_block_core(const TimeMachineParams& p, const TimeMachineConfig& cfg,
                               int idx, const Tensor& tokens, ForwardHooks& hooks) {
    if (cfg.block_kind == BlockKind::ttt) {
        TTTScanResult res = ttt_block_core(p.ttt_blocks[static_cast<std::size_t>(idx)],
                                           cfg.ttt_config(idx), tokens, hooks.want_self_loss);
        if (hooks.want_self_loss) hooks.add_self_loss(res.self_loss_sum, res.self_loss_terms);
        return res.z;
    }
    return ssm_block_core(p.ssm_blocks[static_cast<std::size_t>(idx)], tokens);
}

}  // namespace detail

// Transposition wrap for the channel-independence mode: the [1 x n] channel
// becomes n width-1 tokens, is up-projected to width 16, scanned, and
// projected back.
inline Tensor channel_independence_wrap(const TimeMachineParams& p,
                                        const TimeMachineConfig& cfg, int idx,
                                        const LinearLayer& up, const LinearLayer& down,
                                        const Tensor& u, ForwardHooks& hooks) {
    if (cfg.mode != MixMode::independence) {
        throw ModeError("channel_independence_wrap: model is in channel-mixing mode");
    }
    detail::require_rank(u, 2, "channel_independence_wrap");
    const Tensor tokens = linear_forward(up, transpose(u));      // [n x 16]
    const Tensor core = detail::apply_block_core(p, cfg, idx, tokens, hooks);
    return transpose(linear_forward(down, core));                // [1 x n]
}

// Level 1, high-resolution cues: v1 = core3(u1) + core4(u1), no residual term.
inline Tensor level1_forward(const TimeMachineParams& p, const TimeMachineConfig& cfg,
                             const Tensor& u1, ForwardHooks& hooks) {
    if (cfg.mode == MixMode::mixing) {
        return add(detail::apply_block_core(p, cfg, 2, u1, hooks),
                   detail::apply_block_core(p, cfg, 3, u1, hooks));
    }
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(u1.shape[0]));
    for (std::int64_t c = 0; c < u1.shape[0]; ++c) {
        const Tensor r = reshape(take_row(u1, c), {1, cfg.n1});
        const Tensor global_cue = detail::apply_block_core(p, cfg, 2, r, hooks);
        const Tensor local_cue =
            channel_independence_wrap(p, cfg, 3, p.ci1_up, p.ci1_down, r, hooks);
        rows.push_back(reshape(add(global_cue, local_cue), {cfg.n1}));
    }
    return stack_rows(rows);
}

// Level 2, low-resolution cues: v2 = core1(u2) + core2(u2) + u2, then P-1.
inline Tensor level2_forward(const TimeMachineParams& p, const TimeMachineConfig& cfg,
                             const Tensor& u2, ForwardHooks& hooks) {
    Tensor v2;
    if (cfg.mode == MixMode::mixing) {
        v2 = add(add(detail::apply_block_core(p, cfg, 0, u2, hooks),
                     detail::apply_block_core(p, cfg, 1, u2, hooks)),
                 u2);
    } else {
        std::vector<Tensor> rows;
        rows.reserve(static_cast<std::size_t>(u2.shape[0]));
        for (std::int64_t c = 0; c < u2.shape[0]; ++c) {
            const Tensor r = reshape(take_row(u2, c), {1, cfg.n2});
            const Tensor global_cue = detail::apply_block_core(p, cfg, 0, r, hooks);
            const Tensor local_cue =
                channel_independence_wrap(p, cfg, 1, p.ci2_up, p.ci2_down, r, hooks);
            rows.push_back(reshape(add(add(global_cue, local_cue), r), {cfg.n2}));
        }
        v2 = stack_rows(rows);
    }
    return linear_forward(p.p1, v2);
}

// u1 = Dropout(E1(x0)), u2 = Dropout(E2(u1)).
inline std::pair<Tensor, Tensor> embed_two_level(const TimeMachineParams& p,
                                                 const TimeMachineConfig& cfg, const Tensor& x0,
                                                 ForwardHooks& hooks) {
    static Rng fallback_rng(0);
    Rng& rng = hooks.rng ? *hooks.rng : fallback_rng;
    const Tensor u1 =
        dropout_forward(cfg.dropout_rate, hooks.training, linear_forward(p.e1, x0), rng);
    const Tensor u2 =
        dropout_forward(cfg.dropout_rate, hooks.training, linear_forward(p.e2, u1), rng);
    return {u1, u2};
}

inline ModelOutput model_forward(const TimeMachineParams& p, const TimeMachineConfig& cfg,
                                 const Tensor& x, ForwardHooks& hooks) {
    detail::require_rank(x, 2, "model_forward");
    if (x.shape[0] != cfg.channels || x.shape[1] != cfg.lookback) {
        throw DimensionError("model_forward: input " + shape_str(x.shape) +
                             " does not match configured [" + std::to_string(cfg.channels) +
                             "x" + std::to_string(cfg.lookback) + "]");
    }
    auto [x0, st] = revin_normalize(x, p.revin);
    auto [u1, u2] = embed_two_level(p, cfg, x0, hooks);
    const Tensor v1 = level1_forward(p, cfg, u1, hooks);
    const Tensor lvl2 = level2_forward(p, cfg, u2, hooks);
    const Tensor z = concat_cols(add(v1, u1), lvl2);
    ModelOutput out;
    out.prediction = revin_denormalize(linear_forward(p.p2, z), st, p.revin);
    if (hooks.want_self_loss && hooks.self_terms > 0) {
        out.self_loss = scale(hooks.self_sum, 1.0 / static_cast<double>(hooks.self_terms));
        out.has_self_loss = true;
    } else {
        out.self_loss = scalar_tensor(0.0);
        out.has_self_loss = false;
    }
    return out;
}

// Evaluation-mode forecast with no tape, no dropout, no hooks.
inline Tensor forecast(const TimeMachineParams& p, const TimeMachineConfig& cfg,
                       const Tensor& x) {
    ForwardHooks hooks;
    return model_forward(p, cfg, x, hooks).prediction;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

// Text manifest (config + names + shapes + offsets) next to a raw buffer of
// little-endian 64-bit floats, one array per tensor in manifest order.
inline void save_checkpoint(const std::string& stem, const TimeMachineConfig& cfg,
                            TimeMachineParams& params) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint writer assumes a little-endian host");
    std::ofstream manifest(stem + ".manifest");
    if (!manifest) throw DataError("cannot write checkpoint manifest '" + stem + ".manifest'");
    std::ofstream bin(stem + ".bin", std::ios::binary);
    if (!bin) throw DataError("cannot write checkpoint data '" + stem + ".bin'");

    manifest << "format = ttsf-checkpoint-1\n";
    manifest << cfg.to_kv().to_text();
    std::int64_t offset = 0;
    visit_params(params, cfg, /*live_only=*/false, [&](const std::string& name, Tensor& t) {
        manifest << "tensor " << name << " " << shape_str(t.shape) << " offset=" << offset
                 << "\n";
        bin.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
        offset += t.size();
    });
    if (!manifest || !bin) throw DataError("checkpoint write failed for '" + stem + "'");
}

inline std::pair<TimeMachineConfig, TimeMachineParams> load_checkpoint(const std::string& stem) {
    std::ifstream manifest(stem + ".manifest");
    if (!manifest) throw DataError("cannot open checkpoint manifest '" + stem + ".manifest'");
    std::string config_text;
    std::vector<std::pair<std::string, std::string>> tensor_lines;  // name -> shape text
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.rfind("tensor ", 0) == 0) {
            std::istringstream ls(line);
            std::string tag, name, shape_text;
            ls >> tag >> name >> shape_text;
            tensor_lines.emplace_back(name, shape_text);
        } else {
            config_text += line + "\n";
        }
    }
    const KVMap kv = KVMap::parse_text(config_text, stem + ".manifest");
    const TimeMachineConfig cfg = TimeMachineConfig::from_kv(kv);
    Rng rng(0);
    TimeMachineParams params = TimeMachineParams::init(rng, cfg);

    std::ifstream bin(stem + ".bin", std::ios::binary);
    if (!bin) throw DataError("cannot open checkpoint data '" + stem + ".bin'");
    std::size_t idx = 0;
    visit_params(params, cfg, /*live_only=*/false, [&](const std::string& name, Tensor& t) {
        if (idx >= tensor_lines.size()) {
            throw DataError("checkpoint manifest is missing tensor '" + name + "'");
        }
        const auto& [mname, mshape] = tensor_lines[idx++];
        if (mname != name) {
            throw DataError("checkpoint manifest order mismatch: expected '" + name +
                            "', found '" + mname + "'");
        }
        if (mshape != shape_str(t.shape)) {
            throw DataError("checkpoint shape mismatch for '" + name + "': manifest " + mshape +
                            " vs model " + shape_str(t.shape));
        }
        bin.read(reinterpret_cast<char*>(t.values().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!bin) throw DataError("checkpoint data truncated at tensor '" + name + "'");
    });
    if (idx != tensor_lines.size()) {
        throw DataError("checkpoint manifest lists more tensors than the model expects");
    }
    return {cfg, params};
}

}  // namespace ttsf
