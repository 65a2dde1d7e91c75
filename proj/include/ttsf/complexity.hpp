#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ttsf/kv.hpp"
#include "ttsf/tensor.hpp"

namespace ttsf {

// Analytic operation-count models plus the empirical wall-time / memory
// harness. The analytic expressions drop constants exactly as stated; the
// instrumented cross-check below uses exact multiply counts instead.

struct DimSpec {
    std::int64_t t = 0;           // sequence length
    std::int64_t d = 0;           // hidden width
    std::int64_t n = 0;           // total parameter count (TTT module term)
    std::int64_t u = 0;           // test-time updates (0 allowed)
    std::int64_t k = 0;           // convolution kernel size
    std::int64_t c_in = 0;        // channel widths
    std::int64_t c_out = 0;
    std::int64_t patch_size = 0;  // PatchTST
    std::int64_t n_variates = 0;  // iTransformer
};

struct ComplexityReport {
    std::string kind;
    std::vector<std::pair<std::string, std::uint64_t>> terms;

    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (const auto& [name, v] : terms) s += v;
        return s;
    }
};

enum class ModuleKind { ttt, mamba, transformer, modern_tcn };
enum class ModelKind { ttt_ltsf, timemachine, patch_tst, ts_mixer, modern_tcn, i_transformer };

namespace detail {
inline std::uint64_t upos(std::int64_t v, const char* what, const char* kind) {
    if (v <= 0) {
        throw ConfigError(std::string("complexity: ") + kind + " needs positive dimension " +
                          what);
    }
    return static_cast<std::uint64_t>(v);
}
inline std::uint64_t unneg(std::int64_t v, const char* what, const char* kind) {
    if (v < 0) {
        throw ConfigError(std::string("complexity: ") + kind + " needs non-negative " + what);
    }
    return static_cast<std::uint64_t>(v);
}
}  // namespace detail

// Per-module leading-term counts.
//   TTT:         T*d*N + U*T*d^2
//   Mamba:       T*k*d + T*d^2
//   Transformer: T^2*d + T*d^2
//   ModernTCN:   T*k*C_in + T*C_in*C_out
inline ComplexityReport module_complexity(ModuleKind kind, const DimSpec& dims) {
    ComplexityReport r;
    switch (kind) {
        case ModuleKind::ttt: {
            r.kind = "TTT";
            const auto t = detail::upos(dims.t, "T", "TTT");
            const auto d = detail::upos(dims.d, "d", "TTT");
            const auto n = detail::upos(dims.n, "N", "TTT");
            const auto u = detail::unneg(dims.u, "U", "TTT");
            r.terms.emplace_back("forward T*d*N", t * d * n);
            r.terms.emplace_back("updates U*T*d^2", u * t * d * d);
            break;
        }
        case ModuleKind::mamba: {
            r.kind = "Mamba";
            const auto t = detail::upos(dims.t, "T", "Mamba");
            const auto d = detail::upos(dims.d, "d", "Mamba");
            const auto k = detail::upos(dims.k, "k", "Mamba");
            r.terms.emplace_back("conv T*k*d", t * k * d);
            r.terms.emplace_back("linear T*d^2", t * d * d);
            break;
        }
        case ModuleKind::transformer: {
            r.kind = "Transformer";
            const auto t = detail::upos(dims.t, "T", "Transformer");
            const auto d = detail::upos(dims.d, "d", "Transformer");
            r.terms.emplace_back("attention T^2*d", t * t * d);
            r.terms.emplace_back("feedforward T*d^2", t * d * d);
            break;
        }
        case ModuleKind::modern_tcn: {
            r.kind = "ModernTCN";
            const auto t = detail::upos(dims.t, "T", "ModernTCN");
            const auto k = detail::upos(dims.k, "k", "ModernTCN");
            const auto ci = detail::upos(dims.c_in, "C_in", "ModernTCN");
            const auto co = detail::upos(dims.c_out, "C_out", "ModernTCN");
            r.terms.emplace_back("depthwise T*k*C_in", t * k * ci);
            r.terms.emplace_back("pointwise T*C_in*C_out", t * ci * co);
            break;
        }
    }
    return r;
}

// Whole-model expressions.
//   TTT-LTSF:     T*k*d + T*d^2 + U*T*d^2
//   TimeMachine:  T*d + T*d^2
//   PatchTST:     T*d + T_p^2*d + T_p*d^2   with T_p = ceil(T / patch_size)
//   TSMixer:      T*d^2 + d*T^2
//   ModernTCN:    T*k*C_in + T*C_in*C_out
//   iTransformer: T*N^2*d + T*N*d^2         with N the variate count
inline ComplexityReport model_complexity(ModelKind kind, const DimSpec& dims) {
    ComplexityReport r;
    switch (kind) {
        case ModelKind::ttt_ltsf: {
            r.kind = "TTT-LTSF";
            const auto t = detail::upos(dims.t, "T", "TTT-LTSF");
            const auto d = detail::upos(dims.d, "d", "TTT-LTSF");
            const auto k = detail::upos(dims.k, "k", "TTT-LTSF");
            const auto u = detail::unneg(dims.u, "U", "TTT-LTSF");
            r.terms.emplace_back("backbone conv T*k*d", t * k * d);
            r.terms.emplace_back("backbone linear T*d^2", t * d * d);
            r.terms.emplace_back("updates U*T*d^2", u * t * d * d);
            break;
        }
        case ModelKind::timemachine: {
            r.kind = "TimeMachine";
            const auto t = detail::upos(dims.t, "T", "TimeMachine");
            const auto d = detail::upos(dims.d, "d", "TimeMachine");
            r.terms.emplace_back("linear T*d", t * d);
            r.terms.emplace_back("decomposition T*d^2", t * d * d);
            break;
        }
        case ModelKind::patch_tst: {
            r.kind = "PatchTST";
            const auto t = detail::upos(dims.t, "T", "PatchTST");
            const auto d = detail::upos(dims.d, "d", "PatchTST");
            const auto patch = detail::upos(dims.patch_size, "patch_size", "PatchTST");
            const std::uint64_t tp = (t + patch - 1) / patch;  // ceil when not divisible
            r.terms.emplace_back("embedding T*d", t * d);
            r.terms.emplace_back("attention T_p^2*d", tp * tp * d);
            r.terms.emplace_back("feedforward T_p*d^2", tp * d * d);
            break;
        }
        case ModelKind::ts_mixer: {
            r.kind = "TSMixer";
            const auto t = detail::upos(dims.t, "T", "TSMixer");
            const auto d = detail::upos(dims.d, "d", "TSMixer");
            r.terms.emplace_back("time mixing T*d^2", t * d * d);
            r.terms.emplace_back("feature mixing d*T^2", d * t * t);
            break;
        }
        case ModelKind::modern_tcn: {
            r.kind = "ModernTCN";
            const auto t = detail::upos(dims.t, "T", "ModernTCN");
            const auto k = detail::upos(dims.k, "k", "ModernTCN");
            const auto ci = detail::upos(dims.c_in, "C_in", "ModernTCN");
            const auto co = detail::upos(dims.c_out, "C_out", "ModernTCN");
            r.terms.emplace_back("depthwise T*k*C_in", t * k * ci);
            r.terms.emplace_back("pointwise T*C_in*C_out", t * ci * co);
            break;
        }
        case ModelKind::i_transformer: {
            r.kind = "iTransformer";
            const auto t = detail::upos(dims.t, "T", "iTransformer");
            const auto d = detail::upos(dims.d, "d", "iTransformer");
            const auto nv = detail::upos(dims.n_variates, "n_variates", "iTransformer");
            r.terms.emplace_back("variate attention T*N^2*d", t * nv * nv * d);
            r.terms.emplace_back("feedforward T*N*d^2", t * nv * d * d);
            break;
        }
    }
    return r;
}

// Exact multiply counts of the blocks this repo implements; the instrumented
// counter is compared against these (criterion: within +/-10%).
//   attention_single_head on [T x d]:  QK^T and PV matmuls plus the score
//   scaling, probability normalization and row reciprocals.
inline std::uint64_t attention_mac_model(std::int64_t t, std::int64_t d) {
    const auto tu = static_cast<std::uint64_t>(t);
    const auto du = static_cast<std::uint64_t>(d);
    return 2 * tu * tu * du + 2 * tu * tu + tu;
}

//   ssm_recurrent_forward over S steps with state size N: three multiplies
//   per state entry per step (decay, input, readout).
inline std::uint64_t ssm_recurrent_mac_model(std::int64_t s, std::int64_t n) {
    return 3 * static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(n);
}

// ---------------------------------------------------------------------------
// Wall-time scaling
// ---------------------------------------------------------------------------

struct TimingReport {
    std::vector<std::int64_t> lengths;
    std::vector<double> median_seconds;
    std::vector<std::int64_t> peak_bytes;
    double slope = 0.0;  // least-squares log(time) vs log(length)

    std::vector<int> u_values;
    std::vector<double> latency_seconds;
    std::vector<double> latency_deltas;
    std::vector<std::int64_t> peak_bytes_per_u;
};

namespace detail {
inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename F>
inline double time_once(F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}
}  // namespace detail

// Median-of-trials wall time per length with one discarded warm-up run, and
// the fitted log-log slope.
inline TimingReport measure_scaling(const std::function<void(std::int64_t)>& block_forward,
                                    const std::vector<std::int64_t>& lengths, int trials = 5) {
    if (lengths.size() < 3) {
        throw ConfigError("measure_scaling: need at least 3 lengths for a slope fit");
    }
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 256) {
            throw ConfigError("measure_scaling: lengths below 256 give unstable slopes");
        }
        if (i > 0 && lengths[i] <= lengths[i - 1]) {
            throw ConfigError("measure_scaling: lengths must be strictly increasing");
        }
    }
    if (trials < 1) throw ConfigError("measure_scaling: trials must be >= 1");

    TimingReport rep;
    for (const std::int64_t len : lengths) {
        block_forward(len);  // warm-up, not timed
        Counters::reset_peak();
        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(trials));
        for (int i = 0; i < trials; ++i) {
            times.push_back(detail::time_once([&] { block_forward(len); }));
        }
        rep.lengths.push_back(len);
        rep.median_seconds.push_back(detail::median_of(times));
        rep.peak_bytes.push_back(Counters::read_peak());
    }

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(rep.lengths.size());
    for (std::size_t i = 0; i < rep.lengths.size(); ++i) {
        const double x = std::log(static_cast<double>(rep.lengths[i]));
        const double y = std::log(std::max(rep.median_seconds[i], 1e-12));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    rep.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return rep;
}

// Latency and peak-memory deltas of test-time updates relative to the U = 0
// baseline. `run_once(U)` evaluates one adapted forecast.
inline TimingReport measure_tta_overhead(const std::function<void(int)>& run_once,
                                         const std::vector<int>& u_values, int trials = 5) {
    bool has_zero = false;
    for (const int u : u_values) has_zero = has_zero || u == 0;
    if (!has_zero) {
        throw ConfigError("measure_tta_overhead: U values must include the 0 baseline");
    }
    if (trials < 1) throw ConfigError("measure_tta_overhead: trials must be >= 1");

    TimingReport rep;
    for (const int u : u_values) {
        run_once(u);  // warm-up
        Counters::reset_peak();
        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(trials));
        for (int i = 0; i < trials; ++i) {
            times.push_back(detail::time_once([&] { run_once(u); }));
        }
        rep.u_values.push_back(u);
        rep.latency_seconds.push_back(detail::median_of(times));
        rep.peak_bytes_per_u.push_back(Counters::read_peak());
    }
    double base = 0.0;
    for (std::size_t i = 0; i < rep.u_values.size(); ++i) {
        if (rep.u_values[i] == 0) base = rep.latency_seconds[i];
    }
    for (const double t : rep.latency_seconds) rep.latency_deltas.push_back(t - base);
    return rep;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline void write_scaling_csv(const TimingReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write timing csv '" + path + "'");
    out << "length,median_seconds,peak_bytes\n";
    out.precision(12);
    for (std::size_t i = 0; i < rep.lengths.size(); ++i) {
        out << rep.lengths[i] << "," << rep.median_seconds[i] << "," << rep.peak_bytes[i]
            << "\n";
    }
}

inline void write_tta_csv(const TimingReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write timing csv '" + path + "'");
    out << "u,median_seconds,latency_delta,peak_bytes\n";
    out.precision(12);
    for (std::size_t i = 0; i < rep.u_values.size(); ++i) {
        out << rep.u_values[i] << "," << rep.latency_seconds[i] << "," << rep.latency_deltas[i]
            << "," << rep.peak_bytes_per_u[i] << "\n";
    }
}

inline void write_complexity_csv(const std::vector<ComplexityReport>& reports,
                                 const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write complexity csv '" + path + "'");
    out << "kind,term,count\n";
    for (const ComplexityReport& r : reports) {
        for (const auto& [name, v] : r.terms) out << r.kind << "," << name << "," << v << "\n";
        out << r.kind << ",total," << r.total() << "\n";
    }
}

}  // namespace ttsf
