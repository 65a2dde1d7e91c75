#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ttsf/kv.hpp"
#include "ttsf/tensor.hpp"

namespace ttsf {

// Multivariate series as loaded from disk: M channels over N time points.
// Values are stored channels-major ([M x N]) to match the model's windows.
struct RawSeries {
    std::vector<std::string> channel_names;
    std::vector<std::string> timestamps;
    Tensor values;  // [M x N]

    std::int64_t channels() const { return values.shape.empty() ? 0 : values.shape[0]; }
    std::int64_t length() const { return values.shape.size() < 2 ? 0 : values.shape[1]; }
};

struct WindowSpec {
    std::int64_t lookback = 96;  // L
    std::int64_t horizon = 96;   // T
    std::int64_t stride = 1;

    void validate() const {
        if (lookback < 2) throw ConfigError("window: lookback must be >= 2");
        if (horizon < 1) throw ConfigError("window: horizon must be >= 1");
        if (stride < 1) throw ConfigError("window: stride must be >= 1");
    }
};

struct WindowPair {
    Tensor x;  // [M x L]
    Tensor y;  // [M x T]
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

// ETT-style layout: header row, first column a timestamp, remaining columns
// numeric channels. Missing or unparseable cells are hard errors.
inline RawSeries load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("dataset file '" + path + "' is empty");

    RawSeries s;
    {
        std::istringstream header(line);
        std::string cell;
        bool first = true;
        while (std::getline(header, cell, ',')) {
            if (first) {
                first = false;
                continue;  // timestamp column
            }
            s.channel_names.push_back(KVMap::trim(cell));
        }
    }
    const std::size_t m = s.channel_names.size();
    if (m == 0) throw DataError("dataset file '" + path + "' has no data columns");

    std::vector<std::vector<double>> cols(m);
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (KVMap::trim(line).empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        if (!std::getline(ls, cell, ',')) {
            throw DataError(path + ": row " + std::to_string(row) + " has no timestamp");
        }
        s.timestamps.push_back(KVMap::trim(cell));
        for (std::size_t c = 0; c < m; ++c) {
            if (!std::getline(ls, cell, ',')) {
                throw DataError(path + ": row " + std::to_string(row) + " column " +
                                std::to_string(c + 2) + " is missing");
            }
            try {
                std::size_t pos = 0;
                const std::string trimmed = KVMap::trim(cell);
                const double v = std::stod(trimmed, &pos);
                if (pos != trimmed.size() || trimmed.empty()) {
                    throw std::invalid_argument("trailing");
                }
                cols[c].push_back(v);
            } catch (const std::exception&) {
                throw DataError(path + ": row " + std::to_string(row) + " column " +
                                std::to_string(c + 2) + " is not numeric: '" + cell + "'");
            }
        }
    }
    const std::int64_t n = static_cast<std::int64_t>(s.timestamps.size());
    if (n == 0) throw DataError("dataset file '" + path + "' has a header but no rows");
    s.values = Tensor({static_cast<std::int64_t>(m), n});
    for (std::size_t c = 0; c < m; ++c) {
        for (std::int64_t t = 0; t < n; ++t) {
            s.values.values()[c * static_cast<std::size_t>(n) + static_cast<std::size_t>(t)] =
                cols[c][static_cast<std::size_t>(t)];
        }
    }
    return s;
}

inline void save_csv(const RawSeries& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write dataset file '" + path + "'");
    out << "date";
    for (const auto& name : s.channel_names) out << "," << name;
    out << "\n";
    out.precision(17);
    for (std::int64_t t = 0; t < s.length(); ++t) {
        out << s.timestamps[static_cast<std::size_t>(t)];
        for (std::int64_t c = 0; c < s.channels(); ++c) out << "," << s.values.at(c, t);
        out << "\n";
    }
    if (!out) throw DataError("write failed for dataset file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Windowing and splits
// ---------------------------------------------------------------------------

// Chronological (look-back, horizon) pairs. With stride 1 the count is
// N - L - T + 1; the target always starts right after the look-back ends.
inline std::vector<WindowPair> make_windows(const RawSeries& s, const WindowSpec& w) {
    w.validate();
    const std::int64_t m = s.channels(), n = s.length();
    if (n < w.lookback + w.horizon) {
        throw DataError("insufficient data: " + std::to_string(n) + " points for L+T = " +
                        std::to_string(w.lookback + w.horizon));
    }
    std::vector<WindowPair> out;
    for (std::int64_t start = 0; start + w.lookback + w.horizon <= n; start += w.stride) {
        WindowPair pair;
        pair.x = Tensor({m, w.lookback});
        pair.y = Tensor({m, w.horizon});
        for (std::int64_t c = 0; c < m; ++c) {
            for (std::int64_t t = 0; t < w.lookback; ++t) {
                pair.x.values()[static_cast<std::size_t>(c * w.lookback + t)] =
                    s.values.at(c, start + t);
            }
            for (std::int64_t t = 0; t < w.horizon; ++t) {
                pair.y.values()[static_cast<std::size_t>(c * w.horizon + t)] =
                    s.values.at(c, start + w.lookback + t);
            }
        }
        out.push_back(std::move(pair));
    }
    return out;
}

struct SplitSeries {
    RawSeries train, val, test;
};

namespace detail {
inline RawSeries slice_series(const RawSeries& s, std::int64_t begin, std::int64_t end) {
    RawSeries out;
    out.channel_names = s.channel_names;
    out.timestamps.assign(s.timestamps.begin() + begin, s.timestamps.begin() + end);
    const std::int64_t m = s.channels(), n = end - begin;
    out.values = Tensor({m, n});
    for (std::int64_t c = 0; c < m; ++c)
        for (std::int64_t t = 0; t < n; ++t)
            out.values.values()[static_cast<std::size_t>(c * n + t)] = s.values.at(c, begin + t);
    return out;
}
}  // namespace detail

// Contiguous chronological segments; windows built per segment can never
// cross a boundary.
inline SplitSeries chronological_split(const RawSeries& s, double train_ratio, double val_ratio,
                                       double test_ratio) {
    if (train_ratio <= 0.0 || val_ratio <= 0.0 || test_ratio <= 0.0) {
        throw ConfigError("split ratios must all be positive");
    }
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1, got " +
                          std::to_string(train_ratio + val_ratio + test_ratio));
    }
    const std::int64_t n = s.length();
    const std::int64_t n_train = static_cast<std::int64_t>(std::llround(train_ratio * static_cast<double>(n)));
    const std::int64_t n_val = static_cast<std::int64_t>(std::llround(val_ratio * static_cast<double>(n)));
    SplitSeries out;
    out.train = detail::slice_series(s, 0, n_train);
    out.val = detail::slice_series(s, n_train, n_train + n_val);
    out.test = detail::slice_series(s, n_train + n_val, n);
    return out;
}

// Per-channel mean/std of one segment, for the optional global z-score
// preprocessing path (distinct from the model-internal RevIN).
inline std::pair<Tensor, Tensor> split_channel_stats(const RawSeries& s) {
    const std::int64_t m = s.channels(), n = s.length();
    Tensor mean({m}), stddev({m});
    for (std::int64_t c = 0; c < m; ++c) {
        double acc = 0.0;
        for (std::int64_t t = 0; t < n; ++t) acc += s.values.at(c, t);
        const double mu = acc / static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t t = 0; t < n; ++t) {
            const double d = s.values.at(c, t) - mu;
            var += d * d;
        }
        mean.values()[static_cast<std::size_t>(c)] = mu;
        stddev.values()[static_cast<std::size_t>(c)] =
            std::max(std::sqrt(var / static_cast<double>(n)), 1e-5);
    }
    return {mean, stddev};
}

// ---------------------------------------------------------------------------
// Synthetic series
// ---------------------------------------------------------------------------

struct SineComponent {
    double amplitude = 1.0;
    double period = 24.0;
    double phase = 0.0;
};

// Sum of sinusoids + linear trend + Gaussian noise, optionally with a
// per-channel mean offset switched on from time t0 (a regime shift).
struct SyntheticSpec {
    std::int64_t channels = 4;
    std::int64_t length = 600;
    std::vector<std::vector<SineComponent>> components;  // per channel
    double trend_slope = 0.0;
    double noise_sigma = 0.0;
    bool has_shift = false;
    std::int64_t shift_t0 = 0;
    std::vector<double> shift_delta;  // per channel

    void validate() const {
        if (channels < 1) throw ConfigError("synth: channels must be >= 1");
        if (length < 2) throw ConfigError("synth: length must be >= 2");
        if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be non-negative");
        if (has_shift) {
            if (shift_t0 < 0 || shift_t0 >= length) {
                throw ConfigError("synth: shift_t0 must lie inside the series");
            }
            if (static_cast<std::int64_t>(shift_delta.size()) != channels) {
                throw ConfigError("synth: shift_delta needs one entry per channel");
            }
        }
    }

    // Keys: channels, length, trend_slope, noise_sigma, shift_t0,
    // shift_delta (comma list), and per channel c (1-based):
    // ch<c>.amplitudes / ch<c>.periods / ch<c>.phases as comma lists.
    static SyntheticSpec from_kv(const KVMap& kv) {
        SyntheticSpec s;
        s.channels = kv.get_i64_or("synth.channels", 4);
        s.length = kv.get_i64_or("synth.length", 600);
        s.trend_slope = kv.get_f64_or("synth.trend_slope", 0.0);
        s.noise_sigma = kv.get_f64_or("synth.noise_sigma", 0.0);
        auto split_list = [](const std::string& text) {
            std::vector<double> out;
            std::istringstream in(text);
            std::string cell;
            while (std::getline(in, cell, ',')) {
                out.push_back(std::stod(KVMap::trim(cell)));
            }
            return out;
        };
        for (std::int64_t c = 0; c < s.channels; ++c) {
            const std::string prefix = "synth.ch" + std::to_string(c + 1) + ".";
            std::vector<SineComponent> comps;
            if (kv.has(prefix + "periods")) {
                const auto periods = split_list(kv.get(prefix + "periods"));
                const auto amps = kv.has(prefix + "amplitudes")
                                      ? split_list(kv.get(prefix + "amplitudes"))
                                      : std::vector<double>(periods.size(), 1.0);
                const auto phases = kv.has(prefix + "phases")
                                        ? split_list(kv.get(prefix + "phases"))
                                        : std::vector<double>(periods.size(), 0.0);
                if (amps.size() != periods.size() || phases.size() != periods.size()) {
                    throw ConfigError("synth: component lists for channel " +
                                      std::to_string(c + 1) + " have unequal lengths");
                }
                for (std::size_t i = 0; i < periods.size(); ++i) {
                    comps.push_back({amps[i], periods[i], phases[i]});
                }
            } else {
                // default: one sine per channel with distinct period and phase
                comps.push_back({1.0, 24.0 + 12.0 * static_cast<double>(c),
                                 0.7 * static_cast<double>(c)});
            }
            s.components.push_back(std::move(comps));
        }
        if (kv.has("synth.shift_t0")) {
            s.has_shift = true;
            s.shift_t0 = kv.get_i64("synth.shift_t0");
            if (kv.has("synth.shift_delta")) {
                s.shift_delta = split_list(kv.get("synth.shift_delta"));
                if (static_cast<std::int64_t>(s.shift_delta.size()) == 1 && s.channels > 1) {
                    s.shift_delta.assign(static_cast<std::size_t>(s.channels),
                                         s.shift_delta[0]);
                }
            } else {
                s.shift_delta.assign(static_cast<std::size_t>(s.channels), 1.0);
            }
        }
        s.validate();
        return s;
    }
};

// Deterministic per (spec, seed): same seed reproduces the series bitwise.
inline RawSeries synth_generate(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    RawSeries s;
    const std::int64_t m = spec.channels, n = spec.length;
    s.values = Tensor({m, n});
    for (std::int64_t c = 0; c < m; ++c) {
        s.channel_names.push_back("ch" + std::to_string(c + 1));
    }
    for (std::int64_t t = 0; t < n; ++t) s.timestamps.push_back(std::to_string(t));
    for (std::int64_t c = 0; c < m; ++c) {
        const auto& comps = spec.components[static_cast<std::size_t>(c)];
        for (std::int64_t t = 0; t < n; ++t) {
            double v = spec.trend_slope * static_cast<double>(t);
            for (const SineComponent& sc : comps) {
                v += sc.amplitude *
                     std::sin(2.0 * M_PI * static_cast<double>(t) / sc.period + sc.phase);
            }
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
            if (spec.has_shift && t >= spec.shift_t0) {
                v += spec.shift_delta[static_cast<std::size_t>(c)];
            }
            s.values.values()[static_cast<std::size_t>(c * n + t)] = v;
        }
    }
    return s;
}

}  // namespace ttsf
