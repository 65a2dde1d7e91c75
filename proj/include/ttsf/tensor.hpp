#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "ttsf/common.hpp"

namespace ttsf {

class Tape;

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

// All tensor buffers go through here so peak-memory accounting stays exact.
inline std::shared_ptr<std::vector<double>> make_buffer(std::int64_t n, double fill = 0.0) {
    const auto bytes = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(sizeof(double));
    Counters::on_alloc(bytes);
    return std::shared_ptr<std::vector<double>>(
        new std::vector<double>(static_cast<std::size_t>(n), fill),
        [bytes](std::vector<double>* p) {
            Counters::on_free(bytes);
            delete p;
        });
}

}  // namespace detail

// Dense row-major tensor of 64-bit floats. Rank 0 means scalar (one element).
// Value semantics with a shared immutable buffer; an attached tape/node pair
// marks the tensor as a node of the active gradient tape.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<Tape> tape;
    int node = -1;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)) {
        validate_shape();
        data = detail::make_buffer(numel(shape));
    }

    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)) {
        validate_shape();
        if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
            throw DimensionError("tensor: data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        data = detail::make_buffer(numel(shape));
        *data = std::move(values);
    }

    std::int64_t size() const { return numel(shape); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    bool is_scalar() const { return shape.empty(); }
    bool on_tape() const { return tape != nullptr; }

    double scalar() const {
        if (!is_scalar()) {
            throw RankError("tensor: scalar() on tensor of shape " + shape_str(shape));
        }
        return (*data)[0];
    }

    double operator[](std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }

    double at(std::int64_t i, std::int64_t j) const {
        return (*data)[static_cast<std::size_t>(i * shape[1] + j)];
    }

    // In-place access for parameter updates and construction. Callers must not
    // mutate a tensor that a live tape still references.
    std::vector<double>& values() { return *data; }
    const std::vector<double>& values() const { return *data; }

    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }

    // Deep copy with a fresh buffer, never on a tape.
    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.data = detail::make_buffer(size());
        *t.data = *data;
        return t;
    }

private:
    void validate_shape() const {
        for (auto e : shape) {
            if (e < 1) {
                throw DimensionError("tensor: non-positive extent in shape " + shape_str(shape));
            }
        }
    }
};

inline Tensor scalar_tensor(double v) { return Tensor({}, {v}); }

inline Tensor zeros(Shape s) { return Tensor(std::move(s)); }

inline Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
}

inline Tensor identity_matrix(std::int64_t n) {
    Tensor t({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.values()[static_cast<std::size_t>(i * n + i)] = 1.0;
    return t;
}

inline Tensor rand_uniform(Rng& rng, Shape s, double lo, double hi) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

inline Tensor rand_normal(Rng& rng, Shape s, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!same_shape(a, b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
    }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace ttsf
