#pragma once

#include <atomic>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ttsf {

// Error taxonomy. Every failure mode in the library maps onto one of these
// so callers (and the CLI exit-code logic) can dispatch on type.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

// Root of a backward pass is not a scalar.
struct RankError : DimensionError {
    using DimensionError::DimensionError;
};

struct TapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ModeError : ConfigError {
    using ConfigError::ConfigError;
};

struct DataError : Error {
    using Error::Error;
};

struct OptimizerError : Error {
    using Error::Error;
};

using Rng = std::mt19937_64;

// Global instrumentation: floating multiplies in core compute kernels
// (matmul family, elementwise products, convolutions) and live tensor bytes.
// Relaxed atomics; benchmark code resets and reads these single-threaded.
struct Counters {
    static std::atomic<std::uint64_t>& multiplies() {
        static std::atomic<std::uint64_t> c{0};
        return c;
    }
    static std::atomic<std::int64_t>& live_bytes() {
        static std::atomic<std::int64_t> c{0};
        return c;
    }
    static std::atomic<std::int64_t>& peak_bytes() {
        static std::atomic<std::int64_t> c{0};
        return c;
    }

    static void add_multiplies(std::uint64_t n) {
        multiplies().fetch_add(n, std::memory_order_relaxed);
    }
    static void reset_multiplies() { multiplies().store(0, std::memory_order_relaxed); }
    static std::uint64_t read_multiplies() {
        return multiplies().load(std::memory_order_relaxed);
    }

    static void on_alloc(std::int64_t bytes) {
        const std::int64_t now =
            live_bytes().fetch_add(bytes, std::memory_order_relaxed) + bytes;
        std::int64_t prev = peak_bytes().load(std::memory_order_relaxed);
        while (now > prev &&
               !peak_bytes().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
        }
    }
    static void on_free(std::int64_t bytes) {
        live_bytes().fetch_sub(bytes, std::memory_order_relaxed);
    }
    static void reset_peak() {
        peak_bytes().store(live_bytes().load(std::memory_order_relaxed),
                           std::memory_order_relaxed);
    }
    static std::int64_t read_peak() { return peak_bytes().load(std::memory_order_relaxed); }
};

}  // namespace ttsf
