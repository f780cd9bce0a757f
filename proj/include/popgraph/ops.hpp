#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "popgraph/errors.hpp"
#include "popgraph/tensor.hpp"

// Differentiable primitives. Every op takes the recording tape first; a null
// tape runs forward-only (inference). An entry is recorded iff the tape is
// live and some input requires a gradient. Shapes are strict: the only
// broadcast rule in the library is the per-row bias inside linear().
namespace popgraph::ops {

namespace kernel {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C += or = A(m,k) * B(k,n), row-major buffers.
inline void gemm(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n,
                 bool transpose_a, bool transpose_b, bool accumulate) {
    ConstMap A(a, transpose_a ? k : m, transpose_a ? m : k);
    ConstMap B(b, transpose_b ? n : k, transpose_b ? k : n);
    MutMap C(c, m, n);
    if (transpose_a && transpose_b) {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    } else if (transpose_a) {
        if (accumulate) C.noalias() += A.transpose() * B;
        else C.noalias() = A.transpose() * B;
    } else if (transpose_b) {
        if (accumulate) C.noalias() += A * B.transpose();
        else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A * B;
        else C.noalias() = A * B;
    }
}

} // namespace kernel

namespace detail {

inline bool grad_flows(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural primitives
// ---------------------------------------------------------------------------

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool rg = detail::grad_flows(tape, {&a, &b});
    Tensor y = Tensor::make(a.shape(), std::move(out), rg);
    if (rg) {
        auto pa = a.payload(), pb = b.payload(), py = y.payload();
        tape->record([pa, pb, py] {
            const auto& g = py->grad;
            if (pa->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] += g[i];
        }, {pa, pb, py});
    }
    return y;
}

inline Tensor multiply(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("multiply", a, b);
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool rg = detail::grad_flows(tape, {&a, &b});
    Tensor y = Tensor::make(a.shape(), std::move(out), rg);
    if (rg) {
        auto pa = a.payload(), pb = b.payload(), py = y.payload();
        tape->record([pa, pb, py] {
            const auto& g = py->grad;
            if (pa->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i] * pb->values[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] += g[i] * pa->values[i];
        }, {pa, pb, py});
    }
    return y;
}

// y = c * x for a plain constant c.
inline Tensor scale(Tape* tape, const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(x.shape(), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py, c] {
            const auto& g = py->grad;
            for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += c * g[i];
        }, {px, py});
    }
    return y;
}

inline Tensor reshape(Tape* tape, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    }
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(std::move(new_shape), x.values(), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py] {
            const auto& g = py->grad;
            for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i];
        }, {px, py});
    }
    return y;
}

inline Tensor concat_last_axis(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() == 0 || a.rank() != b.rank()) {
        throw ShapeError("concat_last_axis: ranks " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ShapeError("concat_last_axis: leading dims differ " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
        }
    }
    const std::size_t la = a.dim(a.rank() - 1);
    const std::size_t lb = b.dim(b.rank() - 1);
    const std::size_t rows = a.size() / la;
    Shape os = a.shape();
    os.back() = la + lb;
    std::vector<double> out(rows * (la + lb));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data() + r * la, la, out.data() + r * (la + lb));
        std::copy_n(bv.data() + r * lb, lb, out.data() + r * (la + lb) + la);
    }
    const bool rg = detail::grad_flows(tape, {&a, &b});
    Tensor y = Tensor::make(std::move(os), std::move(out), rg);
    if (rg) {
        auto pa = a.payload(), pb = b.payload(), py = y.payload();
        tape->record([pa, pb, py, rows, la, lb] {
            const auto& g = py->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                if (pa->requires_grad)
                    for (std::size_t i = 0; i < la; ++i) pa->grad[r * la + i] += g[r * (la + lb) + i];
                if (pb->requires_grad)
                    for (std::size_t i = 0; i < lb; ++i) pb->grad[r * lb + i] += g[r * (la + lb) + la + i];
            }
        }, {pa, pb, py});
    }
    return y;
}

inline Tensor slice_last_axis(Tape* tape, const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() == 0) throw ShapeError("slice_last_axis: scalar input");
    const std::size_t last = x.dim(x.rank() - 1);
    if (start + len > last) {
        throw ShapeError("slice_last_axis: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + std::to_string(last));
    }
    const std::size_t rows = x.size() / last;
    Shape os = x.shape();
    os.back() = len;
    std::vector<double> out(rows * len);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xv.data() + r * last + start, len, out.data() + r * len);
    }
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(std::move(os), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py, rows, last, start, len] {
            const auto& g = py->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t i = 0; i < len; ++i) px->grad[r * last + start + i] += g[r * len + i];
            }
        }, {px, py});
    }
    return y;
}

inline Tensor mean_over_axis(Tape* tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("mean_over_axis: axis " + std::to_string(axis) + " for " + shape_str(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t ad = x.dim(axis);
    Shape os;
    for (std::size_t i = 0; i < x.rank(); ++i) {
        if (i != axis) os.push_back(x.dim(i));
    }
    std::vector<double> out(outer * inner, 0.0);
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t a = 0; a < ad; ++a) {
            const double* src = xv.data() + (o * ad + a) * inner;
            double* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(ad);
    for (double& v : out) v *= inv;
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(std::move(os), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py, outer, inner, ad, inv] {
            const auto& g = py->grad;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t a = 0; a < ad; ++a) {
                    double* dst = px->grad.data() + (o * ad + a) * inner;
                    const double* src = g.data() + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += inv * src[i];
                }
            }
        }, {px, py});
    }
    return y;
}

inline Tensor transpose_last_two(Tape* tape, const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("transpose_last_two: rank < 2, " + shape_str(x.shape()));
    const std::size_t m = x.dim(x.rank() - 2);
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t batch = x.size() / (m * n);
    Shape os = x.shape();
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* src = xv.data() + b * m * n;
        double* dst = out.data() + b * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(std::move(os), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py, batch, m, n] {
            const auto& g = py->grad;
            for (std::size_t b = 0; b < batch; ++b) {
                double* dst = px->grad.data() + b * m * n;
                const double* src = g.data() + b * m * n;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += src[j * m + i];
            }
        }, {px, py});
    }
    return y;
}

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

// Rank-2 x rank-2, or batched rank-3 x rank-3 with equal batch dimension.
inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    Shape os;
    if (a.rank() == 2 && b.rank() == 2) {
        m = a.dim(0); k = a.dim(1); n = b.dim(1);
        if (b.dim(0) != k) {
            throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        os = {m, n};
    } else if (a.rank() == 3 && b.rank() == 3) {
        batch = a.dim(0); m = a.dim(1); k = a.dim(2); n = b.dim(2);
        if (b.dim(0) != batch || b.dim(1) != k) {
            throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        os = {batch, m, n};
    } else {
        throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(batch * m * n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t s = 0; s < batch; ++s) {
        kernel::gemm(av.data() + s * m * k, bv.data() + s * k * n, out.data() + s * m * n,
                     m, k, n, false, false, false);
    }
    const bool rg = detail::grad_flows(tape, {&a, &b});
    Tensor y = Tensor::make(std::move(os), std::move(out), rg);
    if (rg) {
        auto pa = a.payload(), pb = b.payload(), py = y.payload();
        tape->record([pa, pb, py, batch, m, k, n] {
            const auto& g = py->grad;
            for (std::size_t s = 0; s < batch; ++s) {
                const double* gs = g.data() + s * m * n;
                if (pa->requires_grad) {
                    // dA = dC * B^T
                    kernel::gemm(gs, pb->values.data() + s * k * n, pa->grad.data() + s * m * k,
                                 m, n, k, false, true, true);
                }
                if (pb->requires_grad) {
                    // dB = A^T * dC
                    kernel::gemm(pa->values.data() + s * m * k, gs, pb->grad.data() + s * k * n,
                                 k, m, n, true, false, true);
                }
            }
        }, {pa, pb, py});
    }
    return y;
}

// Affine map over the last axis: y[r,:] = x[r,:] W + b. Leading axes are
// treated as rows; the bias broadcast over rows is the documented rule.
inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1) {
        throw ShapeError("linear: x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) +
                         " b" + shape_str(b.shape()));
    }
    const std::size_t in = x.dim(x.rank() - 1);
    const std::size_t out_dim = w.dim(1);
    if (w.dim(0) != in || b.dim(0) != out_dim) {
        throw ShapeError("linear: x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) +
                         " b" + shape_str(b.shape()));
    }
    const std::size_t rows = x.size() / in;
    Shape os = x.shape();
    os.back() = out_dim;
    std::vector<double> out(rows * out_dim);
    kernel::gemm(x.values().data(), w.values().data(), out.data(), rows, in, out_dim, false, false, false);
    const auto& bval = b.values();
    for (std::size_t r = 0; r < rows; ++r) {
        double* dst = out.data() + r * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) dst[j] += bval[j];
    }
    const bool rg = detail::grad_flows(tape, {&x, &w, &b});
    Tensor y = Tensor::make(std::move(os), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), pw = w.payload(), pb = b.payload(), py = y.payload();
        tape->record([px, pw, pb, py, rows, in, out_dim] {
            const auto& g = py->grad;
            if (px->requires_grad) {
                kernel::gemm(g.data(), pw->values.data(), px->grad.data(), rows, out_dim, in, false, true, true);
            }
            if (pw->requires_grad) {
                kernel::gemm(px->values.data(), g.data(), pw->grad.data(), in, rows, out_dim, true, false, true);
            }
            if (pb->requires_grad) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* src = g.data() + r * out_dim;
                    for (std::size_t j = 0; j < out_dim; ++j) pb->grad[j] += src[j];
                }
            }
        }, {px, pw, pb, py});
    }
    return y;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

inline Tensor sigmoid(Tape* tape, const Tensor& x) {
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(xv[i]);
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(x.shape(), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py] {
            const auto& g = py->grad;
            const auto& yv = py->values;
            for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i] * yv[i] * (1.0 - yv[i]);
        }, {px, py});
    }
    return y;
}

// Exact GELU: x * Phi(x).
inline Tensor gelu(Tape* tape, const Tensor& x) {
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * detail::kInvSqrt2));
    }
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(x.shape(), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py] {
            const auto& g = py->grad;
            const auto& xv2 = px->values;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double phi_cdf = 0.5 * (1.0 + std::erf(xv2[i] * detail::kInvSqrt2));
                const double phi_pdf = detail::kInvSqrt2Pi * std::exp(-0.5 * xv2[i] * xv2[i]);
                px->grad[i] += g[i] * (phi_cdf + xv2[i] * phi_pdf);
            }
        }, {px, py});
    }
    return y;
}

// Per-last-axis mean/variance normalization with learned scale and shift.
inline Tensor layer_norm_last_axis(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                   double eps = 1e-5) {
    if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1) {
        throw ShapeError("layer_norm_last_axis: x" + shape_str(x.shape()));
    }
    const std::size_t last = x.dim(x.rank() - 1);
    if (gamma.dim(0) != last || beta.dim(0) != last) {
        throw ShapeError("layer_norm_last_axis: scale/shift dims " + shape_str(gamma.shape()) +
                         "/" + shape_str(beta.shape()) + " vs last axis " + std::to_string(last));
    }
    const std::size_t rows = x.size() / last;
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = xv.data() + r * last;
        double mean = 0.0;
        for (std::size_t i = 0; i < last; ++i) mean += src[i];
        mean /= static_cast<double>(last);
        double var = 0.0;
        for (std::size_t i = 0; i < last; ++i) {
            const double d = src[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(last);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t i = 0; i < last; ++i) {
            const double h = (src[i] - mean) * is;
            xhat[r * last + i] = h;
            out[r * last + i] = h * gv[i] + bv[i];
        }
    }
    const bool rg = detail::grad_flows(tape, {&x, &gamma, &beta});
    Tensor y = Tensor::make(x.shape(), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), pg = gamma.payload(), pb = beta.payload(), py = y.payload();
        auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
        auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
        tape->record([px, pg, pb, py, xh, istd, rows, last] {
            const auto& g = py->grad;
            const auto& gv2 = pg->values;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * last;
                const double* hrow = xh->data() + r * last;
                if (pg->requires_grad || pb->requires_grad) {
                    for (std::size_t i = 0; i < last; ++i) {
                        if (pg->requires_grad) pg->grad[i] += grow[i] * hrow[i];
                        if (pb->requires_grad) pb->grad[i] += grow[i];
                    }
                }
                if (px->requires_grad) {
                    double mean_gh = 0.0, mean_ghh = 0.0;
                    for (std::size_t i = 0; i < last; ++i) {
                        const double gh = grow[i] * gv2[i];
                        mean_gh += gh;
                        mean_ghh += gh * hrow[i];
                    }
                    mean_gh /= static_cast<double>(last);
                    mean_ghh /= static_cast<double>(last);
                    const double is = (*istd)[r];
                    double* dst = px->grad.data() + r * last;
                    for (std::size_t i = 0; i < last; ++i) {
                        const double gh = grow[i] * gv2[i];
                        dst[i] += is * (gh - mean_gh - hrow[i] * mean_ghh);
                    }
                }
            }
        }, {px, pg, pb, py});
    }
    return y;
}

// ---------------------------------------------------------------------------
// Lookups
// ---------------------------------------------------------------------------

// Gathers rows of a (vocab, dim) parameter matrix. The gradient scatters back
// additively, so repeated indices accumulate.
inline Tensor embedding_lookup(Tape* tape, const Tensor& table, const std::vector<int>& indices) {
    if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
    const std::size_t vocab = table.dim(0);
    const std::size_t dim = table.dim(1);
    std::vector<double> out(indices.size() * dim);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= vocab) {
            throw IndexError("embedding_lookup: index " + std::to_string(idx) + " out of [0," +
                             std::to_string(vocab) + ")");
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(idx) * dim, dim, out.data() + i * dim);
    }
    const bool rg = detail::grad_flows(tape, {&table});
    Tensor y = Tensor::make({indices.size(), dim}, std::move(out), rg);
    if (rg) {
        auto pt = table.payload(), py = y.payload();
        auto idxs = std::make_shared<std::vector<int>>(indices);
        tape->record([pt, py, idxs, dim] {
            const auto& g = py->grad;
            for (std::size_t i = 0; i < idxs->size(); ++i) {
                double* dst = pt->grad.data() + static_cast<std::size_t>((*idxs)[i]) * dim;
                const double* src = g.data() + i * dim;
                for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
            }
        }, {pt, py});
    }
    return y;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Row-stabilized softmax over the last axis.
inline Tensor softmax_last_axis(Tape* tape, const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_last_axis: scalar input");
    const std::size_t last = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / last;
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = xv.data() + r * last;
        double* dst = out.data() + r * last;
        double mx = src[0];
        for (std::size_t i = 1; i < last; ++i) mx = std::max(mx, src[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < last; ++i) {
            dst[i] = std::exp(src[i] - mx);
            sum += dst[i];
        }
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < last; ++i) dst[i] *= inv;
    }
    const bool rg = detail::grad_flows(tape, {&x});
    Tensor y = Tensor::make(x.shape(), std::move(out), rg);
    if (rg) {
        auto px = x.payload(), py = y.payload();
        tape->record([px, py, rows, last] {
            const auto& g = py->grad;
            const auto& yv = py->values;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * last;
                const double* yrow = yv.data() + r * last;
                double dot = 0.0;
                for (std::size_t i = 0; i < last; ++i) dot += grow[i] * yrow[i];
                double* dst = px->grad.data() + r * last;
                for (std::size_t i = 0; i < last; ++i) dst[i] += yrow[i] * (grow[i] - dot);
            }
        }, {px, py});
    }
    return y;
}

// Attention softmax: rows of (logits + bias), the bias carrying the learned
// structural encodings.
inline Tensor softmax_rows_with_bias(Tape* tape, const Tensor& logits, const Tensor& bias) {
    detail::require_same_shape("softmax_rows_with_bias", logits, bias);
    return softmax_last_axis(tape, add(tape, logits, bias));
}

// ---------------------------------------------------------------------------
// Losses. weight_mask entries are 0/1 over the same support as the
// prediction (or per row for cross_entropy); the result is the sum of
// per-position losses at mask==1, optionally divided by the mask count.
// ---------------------------------------------------------------------------

enum class LossReduction { MeanOverMask, Sum };

namespace detail {

inline double mask_count(const char* op, const std::vector<double>& mask) {
    double c = 0.0;
    for (double m : mask) c += m;
    if (c <= 0.0) throw EmptyLossSupport(std::string(op) + ": weight mask has no support");
    return c;
}

} // namespace detail

inline Tensor mse_loss(Tape* tape, const Tensor& pred, const Tensor& target, const Tensor& weight_mask,
                       LossReduction reduction = LossReduction::MeanOverMask) {
    detail::require_same_shape("mse_loss", pred, target);
    detail::require_same_shape("mse_loss", pred, weight_mask);
    const double count = detail::mask_count("mse_loss", weight_mask.values());
    const double denom = (reduction == LossReduction::MeanOverMask) ? count : 1.0;
    const auto& pv = pred.values();
    const auto& tv = target.values();
    const auto& mv = weight_mask.values();
    double total = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = pv[i] - tv[i];
        total += mv[i] * d * d;
    }
    total /= denom;
    const bool rg = detail::grad_flows(tape, {&pred, &target});
    Tensor y = Tensor::make({}, {total}, rg);
    if (rg) {
        auto pp = pred.payload(), pt = target.payload(), pm = weight_mask.payload(), py = y.payload();
        tape->record([pp, pt, pm, py, denom] {
            const double g = py->grad[0];
            for (std::size_t i = 0; i < pp->values.size(); ++i) {
                const double d = 2.0 * pm->values[i] * (pp->values[i] - pt->values[i]) / denom;
                if (pp->requires_grad) pp->grad[i] += g * d;
                if (pt->requires_grad) pt->grad[i] -= g * d;
            }
        }, {pp, pt, pm, py});
    }
    return y;
}

// Multi-class cross entropy from logits. `targets` holds a class index per
// row; rows with mask 0 are ignored and may carry any index.
inline Tensor cross_entropy_loss(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                                 const Tensor& weight_mask,
                                 LossReduction reduction = LossReduction::MeanOverMask) {
    if (logits.rank() < 1) throw ShapeError("cross_entropy_loss: scalar logits");
    const std::size_t vocab = logits.dim(logits.rank() - 1);
    const std::size_t rows = logits.size() / vocab;
    if (targets.size() != rows || weight_mask.size() != rows) {
        throw ShapeError("cross_entropy_loss: expected " + std::to_string(rows) + " targets/mask rows");
    }
    const double count = detail::mask_count("cross_entropy_loss", weight_mask.values());
    const double denom = (reduction == LossReduction::MeanOverMask) ? count : 1.0;
    const auto& lv = logits.values();
    const auto& mv = weight_mask.values();
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (mv[r] == 0.0) continue;
        const int t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw IndexError("cross_entropy_loss: class " + std::to_string(t) + " out of [0," +
                             std::to_string(vocab) + ")");
        }
        const double* row = lv.data() + r * vocab;
        double mx = row[0];
        for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < vocab; ++i) sum += std::exp(row[i] - mx);
        total += mv[r] * (std::log(sum) + mx - row[static_cast<std::size_t>(t)]);
    }
    total /= denom;
    const bool rg = detail::grad_flows(tape, {&logits});
    Tensor y = Tensor::make({}, {total}, rg);
    if (rg) {
        auto pl = logits.payload(), pm = weight_mask.payload(), py = y.payload();
        auto tgt = std::make_shared<std::vector<int>>(targets);
        tape->record([pl, pm, py, tgt, rows, vocab, denom] {
            const double g = py->grad[0];
            for (std::size_t r = 0; r < rows; ++r) {
                if (pm->values[r] == 0.0) continue;
                const double* row = pl->values.data() + r * vocab;
                double* drow = pl->grad.data() + r * vocab;
                double mx = row[0];
                for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
                double sum = 0.0;
                for (std::size_t i = 0; i < vocab; ++i) sum += std::exp(row[i] - mx);
                const double w = g * pm->values[r] / denom;
                for (std::size_t i = 0; i < vocab; ++i) {
                    double p = std::exp(row[i] - mx) / sum;
                    if (i == static_cast<std::size_t>((*tgt)[r])) p -= 1.0;
                    drow[i] += w * p;
                }
            }
        }, {pl, pm, py});
    }
    return y;
}

// Binary cross entropy from a logit against targets in {0,1}, in the
// softplus(x) - x*y form that never overflows.
inline Tensor binary_cross_entropy_loss(Tape* tape, const Tensor& logits, const Tensor& targets,
                                        const Tensor& weight_mask,
                                        LossReduction reduction = LossReduction::MeanOverMask) {
    detail::require_same_shape("binary_cross_entropy_loss", logits, targets);
    detail::require_same_shape("binary_cross_entropy_loss", logits, weight_mask);
    const double count = detail::mask_count("binary_cross_entropy_loss", weight_mask.values());
    const double denom = (reduction == LossReduction::MeanOverMask) ? count : 1.0;
    const auto& xv = logits.values();
    const auto& tv = targets.values();
    const auto& mv = weight_mask.values();
    double total = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (mv[i] == 0.0) continue;
        const double x = xv[i];
        total += mv[i] * (std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x))));
    }
    total /= denom;
    const bool rg = detail::grad_flows(tape, {&logits});
    Tensor y = Tensor::make({}, {total}, rg);
    if (rg) {
        auto pl = logits.payload(), pt = targets.payload(), pm = weight_mask.payload(), py = y.payload();
        tape->record([pl, pt, pm, py, denom] {
            const double g = py->grad[0];
            for (std::size_t i = 0; i < pl->values.size(); ++i) {
                if (pm->values[i] == 0.0) continue;
                pl->grad[i] += g * pm->values[i] * (detail::stable_sigmoid(pl->values[i]) - pt->values[i]) / denom;
            }
        }, {pl, pt, pm, py});
    }
    return y;
}

} // namespace popgraph::ops
