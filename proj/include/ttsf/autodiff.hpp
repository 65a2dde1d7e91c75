#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "ttsf/common.hpp"
#include "ttsf/tensor.hpp"

namespace ttsf {

// Reverse-mode tape. Node order is creation order, parents always precede
// children, and a pass is replayed by walking ids backwards. Backpropagation
// is implemented symbolically: the vector-Jacobian product of every node is
// emitted as fresh tape nodes built from the same primitive set. backward()
// rolls those nodes back after copying the numeric result out, while
// gradients_of() keeps them, which is what lets the TTT outer loop
// differentiate through inner-loop gradient steps.

enum class Op {
    leaf,
    add,
    sub,
    mul,
    div,
    neg,
    scale,       // f0 = factor
    add_scalar,  // f0 = addend
    relu,
    sigmoid,
    softplus,
    exp_fn,
    erf_fn,
    sqrt_fn,
    recip,
    expm1_div,       // (e^x - 1)/x with the x->0 limit
    expm1_div_grad,  // derivative of the above; first-order only
    matmul,
    matvec,
    outer,
    transpose,
    add_rowvec,
    colsum,
    rowsum,
    bcast_col,  // i0 = column count
    bcast_row,  // i0 = row count
    take_row,   // i0 = row index
    pad_row,    // i0 = total rows, i1 = row index
    stack_rows,
    concat_cols,
    slice_cols,  // i0 = first column, i1 = one past last
    pad_cols,    // i0 = total columns, i1 = first column
    sum_all,
    bcast_all,
    reshape,
    flip_last,
    conv1d_dw,        // i0 = kernel size
    conv1d_dw_kgrad,  // i0 = kernel size; first-order only
};

struct GradientMap {
    std::unordered_map<int, Tensor> grads;  // parameter node id -> gradient

    bool contains(const Tensor& param) const {
        return param.node >= 0 && grads.count(param.node) > 0;
    }

    const Tensor& at(const Tensor& param) const {
        if (param.node < 0) {
            throw OptimizerError("gradient lookup for a parameter not bound to a tape");
        }
        auto it = grads.find(param.node);
        if (it == grads.end()) {
            throw OptimizerError("missing gradient for parameter node " +
                                 std::to_string(param.node));
        }
        return it->second;
    }
};

class Tape : public std::enable_shared_from_this<Tape> {
public:
    struct Node {
        Op op = Op::leaf;
        std::vector<int> parents;
        Shape shape;
        std::shared_ptr<std::vector<double>> data;
        double f0 = 0.0;
        std::int64_t i0 = 0;
        std::int64_t i1 = 0;
        bool is_param = false;
    };

    static std::shared_ptr<Tape> create() { return std::shared_ptr<Tape>(new Tape()); }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // Attach a plain tensor as a leaf. Parameters are the gradient targets of
    // backward(); watched leaves participate without being reported.
    Tensor parameter(const Tensor& t) { return attach_leaf(t, true); }
    Tensor watch(const Tensor& t) { return attach_leaf(t, false); }

    int record(Op op, std::vector<int> parents, const Tensor& out, double f0 = 0.0,
               std::int64_t i0 = 0, std::int64_t i1 = 0) {
        Node n;
        n.op = op;
        n.parents = std::move(parents);
        n.shape = out.shape;
        n.data = out.data;
        n.f0 = f0;
        n.i0 = i0;
        n.i1 = i1;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Tensor node_tensor(int id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        Tensor t;
        t.shape = n.shape;
        t.data = n.data;
        t.tape = shared_from_this();
        t.node = id;
        return t;
    }

    void rollback(std::size_t mark) { nodes_.resize(mark); }

    // Numeric reverse pass: gradients for every parameter leaf, unreachable
    // parameters included with zero gradients.
    GradientMap backward(const Tensor& root);

    // Symbolic reverse pass: adjoints of `wrt` as live tape tensors.
    std::vector<Tensor> gradients_of(const Tensor& root, std::span<const Tensor> wrt);

    // Structural check used by tests: parent ids precede child ids.
    bool topologically_ordered() const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            for (int p : nodes_[i].parents) {
                if (p < 0 || static_cast<std::size_t>(p) >= i) return false;
            }
        }
        return true;
    }

private:
    Tape() = default;

    Tensor attach_leaf(const Tensor& t, bool param) {
        Tensor out;
        out.shape = t.shape;
        out.data = t.data;
        out.tape = shared_from_this();
        out.node = record(Op::leaf, {}, out);
        nodes_.back().is_param = param;
        return out;
    }

    // Emits adjoint nodes for everything between `root` and the target set;
    // returns adjoint ids indexed like `targets` (-1 when unreachable).
    std::vector<int> emit_adjoints(const Tensor& root, std::span<const int> targets);

    void emit_vjp(int id, const Tensor& g, std::vector<int>& adj,
                  const std::vector<char>& needed);

    void accumulate(int parent, const Tensor& contribution, std::vector<int>& adj,
                    const std::vector<char>& needed);

    std::vector<Node> nodes_;
};

namespace detail {

inline std::shared_ptr<Tape> joint_tape(std::initializer_list<const Tensor*> operands) {
    std::shared_ptr<Tape> tape;
    for (const Tensor* t : operands) {
        if (!t->tape) continue;
        if (!tape) {
            tape = t->tape;
        } else if (tape != t->tape) {
            throw TapeError("operands belong to different gradient tapes");
        }
    }
    return tape;
}

inline int operand_id(const std::shared_ptr<Tape>& tape, const Tensor& t) {
    if (t.tape) return t.node;
    return tape->watch(t).node;  // plain operands enter as constant leaves
}

// Finish an op: record it when a tape is active and hand back the result.
inline Tensor finish(Op op, std::initializer_list<const Tensor*> operands, Tensor out,
                     double f0 = 0.0, std::int64_t i0 = 0, std::int64_t i1 = 0) {
    auto tape = joint_tape(operands);
    if (!tape) return out;
    std::vector<int> parents;
    parents.reserve(operands.size());
    for (const Tensor* t : operands) parents.push_back(operand_id(tape, *t));
    out.tape = tape;
    out.node = tape->record(op, std::move(parents), out, f0, i0, i1);
    return out;
}

inline void require_rank(const Tensor& t, std::int64_t r, const char* op) {
    if (t.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) +
                             " tensor, got shape " + shape_str(t.shape));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] + b[i];
    return detail::finish(Op::add, {&a, &b}, std::move(out));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] - b[i];
    return detail::finish(Op::sub, {&a, &b}, std::move(out));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] * b[i];
    Counters::add_multiplies(static_cast<std::uint64_t>(a.size()));
    return detail::finish(Op::mul, {&a, &b}, std::move(out));
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] / b[i];
    Counters::add_multiplies(static_cast<std::uint64_t>(a.size()));
    return detail::finish(Op::div, {&a, &b}, std::move(out));
}

inline Tensor neg(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = -a[i];
    return detail::finish(Op::neg, {&a}, std::move(out));
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] * c;
    Counters::add_multiplies(static_cast<std::uint64_t>(a.size()));
    return detail::finish(Op::scale, {&a}, std::move(out), c);
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] + c;
    return detail::finish(Op::add_scalar, {&a}, std::move(out), c);
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a[i] > 0.0 ? a[i] : 0.0;
    return detail::finish(Op::relu, {&a}, std::move(out));
}

namespace detail {
inline double sigmoid_val(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
inline double softplus_val(double x) {
    // log(1 + e^x); linear for large x so the exponential never overflows
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}
inline double expm1_div_val(double z) {
    if (std::abs(z) < 1e-14) return 1.0;  // exact limit
    if (std::abs(z) < 1e-5) return 1.0 + z / 2.0 + z * z / 6.0;
    return std::expm1(z) / z;
}
inline double expm1_div_grad_val(double z) {
    if (std::abs(z) < 1e-3) return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
    return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = detail::sigmoid_val(a[i]);
    return detail::finish(Op::sigmoid, {&a}, std::move(out));
}

inline Tensor softplus(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = detail::softplus_val(a[i]);
    return detail::finish(Op::softplus, {&a}, std::move(out));
}

inline Tensor exp_fn(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = std::exp(a[i]);
    return detail::finish(Op::exp_fn, {&a}, std::move(out));
}

inline Tensor erf_fn(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = std::erf(a[i]);
    return detail::finish(Op::erf_fn, {&a}, std::move(out));
}

inline Tensor sqrt_fn(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = std::sqrt(a[i]);
    return detail::finish(Op::sqrt_fn, {&a}, std::move(out));
}

inline Tensor recip(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = 1.0 / a[i];
    Counters::add_multiplies(static_cast<std::uint64_t>(a.size()));
    return detail::finish(Op::recip, {&a}, std::move(out));
}

inline Tensor expm1_div(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = detail::expm1_div_val(a[i]);
    return detail::finish(Op::expm1_div, {&a}, std::move(out));
}

inline Tensor expm1_div_grad(const Tensor& a) {
    Tensor out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i)
        out.values()[i] = detail::expm1_div_grad_val(a[i]);
    return detail::finish(Op::expm1_div_grad, {&a}, std::move(out));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    if (a.shape[1] != b.shape[0]) {
        throw DimensionError("matmul: inner extents do not match, " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
    }
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            const double* prow = pb + l * n;
            double* orow = po + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * prow[j];
        }
    }
    Counters::add_multiplies(static_cast<std::uint64_t>(m * n * k));
    return detail::finish(Op::matmul, {&a, &b}, std::move(out));
}

inline Tensor matvec(const Tensor& a, const Tensor& x) {
    detail::require_rank(a, 2, "matvec");
    detail::require_rank(x, 1, "matvec");
    if (a.shape[1] != x.shape[0]) {
        throw DimensionError("matvec: inner extents do not match, " + shape_str(a.shape) +
                             " vs " + shape_str(x.shape));
    }
    const std::int64_t m = a.shape[0], k = a.shape[1];
    Tensor out({m});
    for (std::int64_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::int64_t l = 0; l < k; ++l) s += a[i * k + l] * x[l];
        out.values()[static_cast<std::size_t>(i)] = s;
    }
    Counters::add_multiplies(static_cast<std::uint64_t>(m * k));
    return detail::finish(Op::matvec, {&a, &x}, std::move(out));
}

inline Tensor outer(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 1, "outer");
    detail::require_rank(b, 1, "outer");
    const std::int64_t m = a.shape[0], n = b.shape[0];
    Tensor out({m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out.values()[static_cast<std::size_t>(i * n + j)] = a[i] * b[j];
    Counters::add_multiplies(static_cast<std::uint64_t>(m * n));
    return detail::finish(Op::outer, {&a, &b}, std::move(out));
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::int64_t r = a.shape[0], c = a.shape[1];
    Tensor out({c, r});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
            out.values()[static_cast<std::size_t>(j * r + i)] = a[i * c + j];
    return detail::finish(Op::transpose, {&a}, std::move(out));
}

// ---------------------------------------------------------------------------
// Broadcast / reduce over a 2-D layout
// ---------------------------------------------------------------------------

inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    detail::require_rank(x, 2, "add_rowvec");
    detail::require_rank(b, 1, "add_rowvec");
    if (x.shape[1] != b.shape[0]) {
        throw DimensionError("add_rowvec: row width " + std::to_string(x.shape[1]) +
                             " vs vector length " + std::to_string(b.shape[0]));
    }
    const std::int64_t r = x.shape[0], c = x.shape[1];
    Tensor out({r, c});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
            out.values()[static_cast<std::size_t>(i * c + j)] = x[i * c + j] + b[j];
    return detail::finish(Op::add_rowvec, {&x, &b}, std::move(out));
}

inline Tensor colsum(const Tensor& x) {
    detail::require_rank(x, 2, "colsum");
    const std::int64_t r = x.shape[0], c = x.shape[1];
    Tensor out({c});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.values()[static_cast<std::size_t>(j)] += x[i * c + j];
    return detail::finish(Op::colsum, {&x}, std::move(out));
}

inline Tensor rowsum(const Tensor& x) {
    detail::require_rank(x, 2, "rowsum");
    const std::int64_t r = x.shape[0], c = x.shape[1];
    Tensor out({r});
    for (std::int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < c; ++j) s += x[i * c + j];
        out.values()[static_cast<std::size_t>(i)] = s;
    }
    return detail::finish(Op::rowsum, {&x}, std::move(out));
}

inline Tensor bcast_col(const Tensor& v, std::int64_t cols) {
    detail::require_rank(v, 1, "bcast_col");
    const std::int64_t r = v.shape[0];
    Tensor out({r, cols});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < cols; ++j) out.values()[static_cast<std::size_t>(i * cols + j)] = v[i];
    return detail::finish(Op::bcast_col, {&v}, std::move(out), 0.0, cols);
}

inline Tensor bcast_row(const Tensor& v, std::int64_t rows) {
    detail::require_rank(v, 1, "bcast_row");
    const std::int64_t c = v.shape[0];
    Tensor out({rows, c});
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.values()[static_cast<std::size_t>(i * c + j)] = v[j];
    return detail::finish(Op::bcast_row, {&v}, std::move(out), 0.0, rows);
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor take_row(const Tensor& x, std::int64_t t) {
    detail::require_rank(x, 2, "take_row");
    if (t < 0 || t >= x.shape[0]) {
        throw DimensionError("take_row: index " + std::to_string(t) + " out of " +
                             std::to_string(x.shape[0]) + " rows");
    }
    const std::int64_t c = x.shape[1];
    Tensor out({c});
    for (std::int64_t j = 0; j < c; ++j) out.values()[static_cast<std::size_t>(j)] = x[t * c + j];
    return detail::finish(Op::take_row, {&x}, std::move(out), 0.0, t);
}

inline Tensor pad_row(const Tensor& v, std::int64_t rows, std::int64_t t) {
    detail::require_rank(v, 1, "pad_row");
    const std::int64_t c = v.shape[0];
    Tensor out({rows, c});
    for (std::int64_t j = 0; j < c; ++j) out.values()[static_cast<std::size_t>(t * c + j)] = v[j];
    return detail::finish(Op::pad_row, {&v}, std::move(out), 0.0, rows, t);
}

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: empty row list");
    const std::int64_t c = rows[0].shape.empty() ? 1 : rows[0].shape[0];
    for (const Tensor& r : rows) {
        detail::require_rank(r, 1, "stack_rows");
        if (r.shape[0] != c) throw DimensionError("stack_rows: inconsistent row widths");
    }
    const std::int64_t s = static_cast<std::int64_t>(rows.size());
    Tensor out({s, c});
    for (std::int64_t i = 0; i < s; ++i)
        for (std::int64_t j = 0; j < c; ++j)
            out.values()[static_cast<std::size_t>(i * c + j)] = rows[static_cast<std::size_t>(i)][j];

    std::shared_ptr<Tape> tape;
    for (const Tensor& r : rows) {
        if (r.tape) {
            if (tape && tape != r.tape) throw TapeError("stack_rows: mixed tapes");
            tape = r.tape;
        }
    }
    if (!tape) return out;
    std::vector<int> parents;
    parents.reserve(rows.size());
    for (const Tensor& r : rows) parents.push_back(detail::operand_id(tape, r));
    out.tape = tape;
    out.node = tape->record(Op::stack_rows, std::move(parents), out);
    return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "concat_cols");
    detail::require_rank(b, 2, "concat_cols");
    if (a.shape[0] != b.shape[0]) {
        throw DimensionError("concat_cols: row counts differ, " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
    }
    const std::int64_t r = a.shape[0], ca = a.shape[1], cb = b.shape[1];
    Tensor out({r, ca + cb});
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < ca; ++j)
            out.values()[static_cast<std::size_t>(i * (ca + cb) + j)] = a[i * ca + j];
        for (std::int64_t j = 0; j < cb; ++j)
            out.values()[static_cast<std::size_t>(i * (ca + cb) + ca + j)] = b[i * cb + j];
    }
    return detail::finish(Op::concat_cols, {&a, &b}, std::move(out));
}

inline Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1) {
    detail::require_rank(x, 2, "slice_cols");
    if (c0 < 0 || c1 <= c0 || c1 > x.shape[1]) {
        throw DimensionError("slice_cols: bad column range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") for " + shape_str(x.shape));
    }
    const std::int64_t r = x.shape[0], c = x.shape[1], w = c1 - c0;
    Tensor out({r, w});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            out.values()[static_cast<std::size_t>(i * w + j)] = x[i * c + c0 + j];
    return detail::finish(Op::slice_cols, {&x}, std::move(out), 0.0, c0, c1);
}

inline Tensor pad_cols(const Tensor& x, std::int64_t total_cols, std::int64_t c0) {
    detail::require_rank(x, 2, "pad_cols");
    const std::int64_t r = x.shape[0], w = x.shape[1];
    Tensor out({r, total_cols});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            out.values()[static_cast<std::size_t>(i * total_cols + c0 + j)] = x[i * w + j];
    return detail::finish(Op::pad_cols, {&x}, std::move(out), 0.0, total_cols, c0);
}

inline Tensor sum_all(const Tensor& x) {
    Tensor out{};
    out.shape = {};
    out.data = detail::make_buffer(1);
    double s = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) s += x[i];
    out.values()[0] = s;
    return detail::finish(Op::sum_all, {&x}, std::move(out));
}

inline Tensor bcast_all(const Tensor& s, const Shape& shape) {
    if (!s.is_scalar()) throw RankError("bcast_all: source must be a scalar");
    Tensor out(shape);
    std::fill(out.values().begin(), out.values().end(), s.values()[0]);
    return detail::finish(Op::bcast_all, {&s}, std::move(out));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: element count mismatch " + shape_str(x.shape) + " -> " +
                             shape_str(shape));
    }
    Tensor out;
    out.shape = std::move(shape);
    out.data = detail::make_buffer(x.size());
    *out.data = x.values();
    return detail::finish(Op::reshape, {&x}, std::move(out));
}

inline Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum_all(mul(a, b)); }

inline Tensor flip_last(const Tensor& k) {
    detail::require_rank(k, 2, "flip_last");
    const std::int64_t c = k.shape[0], w = k.shape[1];
    Tensor out({c, w});
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            out.values()[static_cast<std::size_t>(i * w + j)] = k[i * w + (w - 1 - j)];
    return detail::finish(Op::flip_last, {&k}, std::move(out));
}

// ---------------------------------------------------------------------------
// Depthwise 1-D convolution, same padding
// ---------------------------------------------------------------------------

inline Tensor conv1d_depthwise_same(const Tensor& x, const Tensor& kernel) {
    detail::require_rank(x, 2, "conv1d_depthwise_same");
    detail::require_rank(kernel, 2, "conv1d_depthwise_same");
    if (x.shape[0] != kernel.shape[0]) {
        throw DimensionError("conv1d_depthwise_same: channel counts differ, " +
                             shape_str(x.shape) + " vs " + shape_str(kernel.shape));
    }
    const std::int64_t kw = kernel.shape[1];
    if (kw % 2 == 0) {
        throw ConfigError("conv1d_depthwise_same: unsupported kernel size " +
                          std::to_string(kw) + " (must be odd)");
    }
    const std::int64_t ch = x.shape[0], len = x.shape[1], pad = (kw - 1) / 2;
    Tensor out({ch, len});
    for (std::int64_t c = 0; c < ch; ++c) {
        for (std::int64_t t = 0; t < len; ++t) {
            double s = 0.0;
            for (std::int64_t j = 0; j < kw; ++j) {
                const std::int64_t src = t + j - pad;
                if (src >= 0 && src < len) s += x[c * len + src] * kernel[c * kw + j];
            }
            out.values()[static_cast<std::size_t>(c * len + t)] = s;
        }
    }
    Counters::add_multiplies(static_cast<std::uint64_t>(ch * len * kw));
    return detail::finish(Op::conv1d_dw, {&x, &kernel}, std::move(out), 0.0, kw);
}

// Kernel gradient of the convolution above: k_g[c,j] = sum_t g[c,t] x[c,t+j-pad].
inline Tensor conv1d_dw_kernel_grad(const Tensor& x, const Tensor& g, std::int64_t kw) {
    const std::int64_t ch = x.shape[0], len = x.shape[1], pad = (kw - 1) / 2;
    Tensor out({ch, kw});
    for (std::int64_t c = 0; c < ch; ++c) {
        for (std::int64_t j = 0; j < kw; ++j) {
            double s = 0.0;
            for (std::int64_t t = 0; t < len; ++t) {
                const std::int64_t src = t + j - pad;
                if (src >= 0 && src < len) s += g[c * len + t] * x[c * len + src];
            }
            out.values()[static_cast<std::size_t>(c * kw + j)] = s;
        }
    }
    Counters::add_multiplies(static_cast<std::uint64_t>(ch * len * kw));
    return detail::finish(Op::conv1d_dw_kgrad, {&x, &g}, std::move(out), 0.0, kw);
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

inline void Tape::accumulate(int parent, const Tensor& contribution, std::vector<int>& adj,
                             const std::vector<char>& needed) {
    if (!needed[static_cast<std::size_t>(parent)]) return;
    int& slot = adj[static_cast<std::size_t>(parent)];
    if (slot < 0) {
        slot = contribution.node;
    } else {
        slot = add(node_tensor(slot), contribution).node;
    }
}

inline void Tape::emit_vjp(int id, const Tensor& g, std::vector<int>& adj,
                           const std::vector<char>& needed) {
    // Copy: emitting VJP ops grows nodes_, invalidating references into it.
    const Node n = nodes_[static_cast<std::size_t>(id)];
    auto parent = [&](int slot) { return node_tensor(n.parents[static_cast<std::size_t>(slot)]); };
    auto self = [&]() { return node_tensor(id); };
    auto acc = [&](int slot, const Tensor& contrib) {
        accumulate(n.parents[static_cast<std::size_t>(slot)], contrib, adj, needed);
    };
    auto need = [&](int slot) -> bool {
        return needed[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(slot)])];
    };

    switch (n.op) {
        case Op::leaf:
            break;
        case Op::add:
            acc(0, g);
            acc(1, g);
            break;
        case Op::sub:
            acc(0, g);
            if (need(1)) acc(1, neg(g));
            break;
        case Op::mul:
            if (need(0)) acc(0, mul(g, parent(1)));
            if (need(1)) acc(1, mul(g, parent(0)));
            break;
        case Op::div:
            if (need(0)) acc(0, div(g, parent(1)));
            if (need(1)) acc(1, neg(div(mul(g, self()), parent(1))));
            break;
        case Op::neg:
            acc(0, neg(g));
            break;
        case Op::scale:
            acc(0, scale(g, n.f0));
            break;
        case Op::add_scalar:
            acc(0, g);
            break;
        case Op::relu: {
            if (need(0)) {
                // subgradient mask, constant with value 1 where input > 0
                Tensor mask(parent(0).shape);
                const Tensor p = parent(0);
                for (std::int64_t i = 0; i < p.size(); ++i)
                    mask.values()[static_cast<std::size_t>(i)] = p[i] > 0.0 ? 1.0 : 0.0;
                acc(0, mul(g, mask));
            }
            break;
        }
        case Op::sigmoid:
            if (need(0)) acc(0, mul(g, mul(self(), add_scalar(neg(self()), 1.0))));
            break;
        case Op::softplus:
            if (need(0)) acc(0, mul(g, sigmoid(parent(0))));
            break;
        case Op::exp_fn:
            if (need(0)) acc(0, mul(g, self()));
            break;
        case Op::erf_fn:
            if (need(0)) {
                const Tensor x = parent(0);
                acc(0, mul(g, scale(exp_fn(neg(mul(x, x))), 2.0 / std::sqrt(M_PI))));
            }
            break;
        case Op::sqrt_fn:
            if (need(0)) acc(0, mul(g, scale(recip(self()), 0.5)));
            break;
        case Op::recip:
            if (need(0)) acc(0, neg(mul(g, mul(self(), self()))));
            break;
        case Op::expm1_div:
            if (need(0)) acc(0, mul(g, expm1_div_grad(parent(0))));
            break;
        case Op::expm1_div_grad:
            throw TapeError("expm1_div_grad: second-order derivative not supported");
        case Op::matmul:
            if (need(0)) acc(0, matmul(g, transpose(parent(1))));
            if (need(1)) acc(1, matmul(transpose(parent(0)), g));
            break;
        case Op::matvec:
            if (need(0)) acc(0, outer(g, parent(1)));
            if (need(1)) acc(1, matvec(transpose(parent(0)), g));
            break;
        case Op::outer:
            if (need(0)) acc(0, matvec(g, parent(1)));
            if (need(1)) acc(1, matvec(transpose(g), parent(0)));
            break;
        case Op::transpose:
            if (need(0)) acc(0, transpose(g));
            break;
        case Op::add_rowvec:
            acc(0, g);
            if (need(1)) acc(1, colsum(g));
            break;
        case Op::colsum:
            if (need(0)) acc(0, bcast_row(g, nodes_[n.parents[0]].shape[0]));
            break;
        case Op::rowsum:
            if (need(0)) acc(0, bcast_col(g, nodes_[n.parents[0]].shape[1]));
            break;
        case Op::bcast_col:
            if (need(0)) acc(0, rowsum(g));
            break;
        case Op::bcast_row:
            if (need(0)) acc(0, colsum(g));
            break;
        case Op::take_row:
            if (need(0)) acc(0, pad_row(g, nodes_[n.parents[0]].shape[0], n.i0));
            break;
        case Op::pad_row:
            if (need(0)) acc(0, take_row(g, n.i1));
            break;
        case Op::stack_rows:
            for (std::size_t s = 0; s < n.parents.size(); ++s) {
                if (needed[static_cast<std::size_t>(n.parents[s])]) {
                    accumulate(n.parents[s], take_row(g, static_cast<std::int64_t>(s)), adj,
                               needed);
                }
            }
            break;
        case Op::concat_cols: {
            const std::int64_t ca = nodes_[n.parents[0]].shape[1];
            const std::int64_t cb = nodes_[n.parents[1]].shape[1];
            if (need(0)) acc(0, slice_cols(g, 0, ca));
            if (need(1)) acc(1, slice_cols(g, ca, ca + cb));
            break;
        }
        case Op::slice_cols:
            if (need(0)) acc(0, pad_cols(g, nodes_[n.parents[0]].shape[1], n.i0));
            break;
        case Op::pad_cols:
            if (need(0)) acc(0, slice_cols(g, n.i1, n.i1 + nodes_[n.parents[0]].shape[1]));
            break;
        case Op::sum_all:
            if (need(0)) acc(0, bcast_all(g, nodes_[n.parents[0]].shape));
            break;
        case Op::bcast_all:
            if (need(0)) acc(0, sum_all(g));
            break;
        case Op::reshape:
            if (need(0)) acc(0, reshape(g, nodes_[n.parents[0]].shape));
            break;
        case Op::flip_last:
            if (need(0)) acc(0, flip_last(g));
            break;
        case Op::conv1d_dw:
            if (need(0)) acc(0, conv1d_depthwise_same(g, flip_last(parent(1))));
            if (need(1)) acc(1, conv1d_dw_kernel_grad(parent(0), g, n.i0));
            break;
        case Op::conv1d_dw_kgrad:
            throw TapeError("conv1d_dw_kernel_grad: second-order derivative not supported");
    }
}

inline std::vector<int> Tape::emit_adjoints(const Tensor& root, std::span<const int> targets) {
    if (!root.tape || root.tape.get() != this) {
        throw TapeError("backward: root tensor is not on this tape");
    }
    if (!root.is_scalar()) {
        throw RankError("backward: root must be a scalar, got shape " + shape_str(root.shape));
    }
    const std::size_t count = nodes_.size();
    const int root_id = root.node;

    // Dependency closure of the root (everything the root value depends on).
    std::vector<char> reaches_root(count, 0);
    reaches_root[static_cast<std::size_t>(root_id)] = 1;
    for (int id = root_id; id >= 0; --id) {
        if (!reaches_root[static_cast<std::size_t>(id)]) continue;
        for (int p : nodes_[static_cast<std::size_t>(id)].parents)
            reaches_root[static_cast<std::size_t>(p)] = 1;
    }
    // Nodes whose value depends on some target.
    std::vector<char> from_target(count, 0);
    for (int t : targets)
        if (t >= 0) from_target[static_cast<std::size_t>(t)] = 1;
    for (std::size_t id = 0; id < count; ++id) {
        if (from_target[id]) continue;
        for (int p : nodes_[id].parents) {
            if (from_target[static_cast<std::size_t>(p)]) {
                from_target[id] = 1;
                break;
            }
        }
    }
    std::vector<char> needed(count, 0);
    for (std::size_t id = 0; id < count; ++id) needed[id] = reaches_root[id] && from_target[id];

    std::vector<int> adj(count, -1);
    if (needed[static_cast<std::size_t>(root_id)]) {
        Tensor seed = watch(scalar_tensor(1.0));
        adj[static_cast<std::size_t>(root_id)] = seed.node;
        for (int id = root_id; id >= 0; --id) {
            if (adj[static_cast<std::size_t>(id)] < 0) continue;
            emit_vjp(id, node_tensor(adj[static_cast<std::size_t>(id)]), adj, needed);
        }
    }

    std::vector<int> out;
    out.reserve(targets.size());
    for (int t : targets) out.push_back(t >= 0 ? adj[static_cast<std::size_t>(t)] : -1);
    return out;
}

inline GradientMap Tape::backward(const Tensor& root) {
    const std::size_t mark = nodes_.size();
    std::vector<int> params;
    for (std::size_t id = 0; id < mark; ++id) {
        if (nodes_[id].is_param) params.push_back(static_cast<int>(id));
    }
    const std::vector<int> adj = emit_adjoints(root, params);
    GradientMap gm;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Node& pn = nodes_[static_cast<std::size_t>(params[i])];
        Tensor g;
        if (adj[i] >= 0) {
            const Node& an = nodes_[static_cast<std::size_t>(adj[i])];
            g.shape = an.shape;
            g.data = detail::make_buffer(numel(an.shape));
            *g.data = *an.data;
        } else {
            g = zeros(pn.shape);
        }
        gm.grads.emplace(params[i], std::move(g));
    }
    rollback(mark);
    return gm;
}

inline std::vector<Tensor> Tape::gradients_of(const Tensor& root,
                                              std::span<const Tensor> wrt) {
    std::vector<int> targets;
    targets.reserve(wrt.size());
    for (const Tensor& t : wrt) {
        if (!t.tape || t.tape.get() != this) {
            throw TapeError("gradients_of: target tensor is not on this tape");
        }
        targets.push_back(t.node);
    }
    const std::vector<int> adj = emit_adjoints(root, targets);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        if (adj[i] >= 0) {
            out.push_back(node_tensor(adj[i]));
        } else {
            out.push_back(watch(zeros(wrt[i].shape)));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

// Max over all coordinates of |g_ad - g_fd| / (|g_fd| + 1e-8), with g_fd from
// central differences. The scalar function is evaluated off-tape for the
// difference quotients, so the check is independent of the reverse pass.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params, double eps = 1e-5) {
    if (params.empty()) throw ConfigError("grad_check: empty parameter set");
    if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");

    auto tape = Tape::create();
    std::vector<Tensor> bound;
    bound.reserve(params.size());
    for (const Tensor& p : params) bound.push_back(tape->parameter(p));
    const Tensor y = f(bound);
    if (!y.is_scalar()) throw RankError("grad_check: function must return a scalar");
    GradientMap gm;
    if (y.on_tape()) {
        gm = tape->backward(y);
    } else {
        // constant function: every gradient is zero
        for (const Tensor& b : bound) gm.grads.emplace(b.node, zeros(b.shape));
    }

    std::vector<Tensor> work;
    work.reserve(params.size());
    for (const Tensor& p : params) work.push_back(p.clone());

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Tensor& g_ad = gm.at(bound[k]);
        for (std::int64_t i = 0; i < params[k].size(); ++i) {
            const double saved = work[k].values()[static_cast<std::size_t>(i)];
            work[k].values()[static_cast<std::size_t>(i)] = saved + eps;
            const double fp = f(work).scalar();
            work[k].values()[static_cast<std::size_t>(i)] = saved - eps;
            const double fm = f(work).scalar();
            work[k].values()[static_cast<std::size_t>(i)] = saved;
            const double g_fd = (fp - fm) / (2.0 * eps);
            const double rel = std::abs(g_ad[i] - g_fd) / (std::abs(g_fd) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace ttsf
