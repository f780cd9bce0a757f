#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "popgraph/errors.hpp"

namespace popgraph {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> values; // row-major
    bool requires_grad = false;
    std::vector<double> grad;   // empty until a backward pass touches it
};

} // namespace detail

// Dense row-major tensor of 64-bit floats. Value-semantics handle over a
// shared immutable payload; the only mutable part is the gradient buffer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, true);
    }

    static Tensor constant(Shape shape, std::vector<double> values) {
        return from_data(std::move(shape), std::move(values), false, false);
    }

    static Tensor full(Shape shape, double value) {
        std::vector<double> v(shape_numel(shape), value);
        return from_data(std::move(shape), std::move(v), false, false);
    }

    static Tensor scalar(double v) { return constant({}, {v}); }

    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> values) {
        return from_data(std::move(shape), std::move(values), true, false);
    }

    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
        return from_data(std::move(shape), std::move(values), requires_grad, false);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->values.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape[i]; }

    const std::vector<double>& values() const { return d_->values; }
    double value_at(std::size_t flat) const { return d_->values[flat]; }
    double item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad() const { return d_->grad; }

    // Identity of the underlying payload; used by Tape bookkeeping.
    const detail::TensorData* id() const { return d_.get(); }

    // Mutation is reserved for the optimizer (parameters) and construction
    // sites that have not shared the payload yet.
    std::vector<double>& mutable_values() { return d_->values; }
    std::vector<double>& mutable_grad() { return d_->grad; }
    void zero_grad() { d_->grad.assign(d_->values.size(), 0.0); }
    void drop_grad() { d_->grad.clear(); }

    std::shared_ptr<detail::TensorData> payload() const { return d_; }

private:
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad, bool fill_zero) {
        auto d = std::make_shared<detail::TensorData>();
        const std::size_t n = shape_numel(shape);
        if (fill_zero) {
            values.assign(n, 0.0);
        } else if (values.size() != n) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        d->shape = std::move(shape);
        d->values = std::move(values);
        d->requires_grad = requires_grad;
        Tensor t;
        t.d_ = std::move(d);
        return t;
    }

    std::shared_ptr<detail::TensorData> d_;
};

// Records the forward applications so gradients can be replayed in reverse.
// Entries are appended in execution order, so the list is topologically
// sorted by construction; a reverse walk is a valid reverse-mode sweep.
class Tape {
public:
    struct Entry {
        std::function<void()> backward;
        std::vector<std::shared_ptr<detail::TensorData>> touched; // inputs + output
    };

    void record(std::function<void()> backward_fn,
                std::vector<std::shared_ptr<detail::TensorData>> touched) {
        entries_.push_back(Entry{std::move(backward_fn), std::move(touched)});
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void reset() { entries_.clear(); }

    // Reverse-mode sweep from a scalar loss. Gradient buffers of every tensor
    // touched by this tape are (re)initialized to zero first, then
    // contributions accumulate additively over all paths. The tape is
    // consumed.
    void backward(const Tensor& loss) {
        if (loss.size() != 1) {
            throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        for (auto& e : entries_) {
            for (auto& t : e.touched) {
                if (t->requires_grad) t->grad.assign(t->values.size(), 0.0);
            }
        }
        auto payload = loss.payload();
        if (payload->requires_grad) {
            payload->grad.assign(1, 1.0);
        }
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->backward();
        }
        entries_.clear();
    }

private:
    std::vector<Entry> entries_;
};

} // namespace popgraph
