#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "popgraph/tensor.hpp"

// Finite-difference oracle for backward rules. The analytic gradient is
// compared against central differences with a relative error floored at
// an absolute scale, so tiny gradients don't blow up the ratio.
namespace popgraph::gradcheck {

struct CheckReport {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;

    bool ok(double tol) const { return max_rel_error < tol; }
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// `loss_fn` must rebuild the full forward pass from the current tensor
// values each call (the tensors are perturbed in place between calls).
inline CheckReport finite_difference_check(const std::function<Tensor(Tape*)>& loss_fn,
                                           const std::vector<NamedTensor>& params,
                                           double eps = 1e-5) {
    // backward() only clears the grads of tensors its tape touched, so a
    // param carried over from an earlier pass could smuggle in stale grads
    for (const auto& [name, param] : params) {
        Tensor t = param;
        t.drop_grad();
    }
    Tape tape;
    Tensor loss = loss_fn(&tape);
    tape.backward(loss);

    CheckReport report;
    for (const auto& [name, param] : params) {
        if (!param.requires_grad()) continue;
        Tensor t = param; // handle copy; shares the payload being perturbed
        // params with no path to the loss have no grad buffer; that is a
        // claim of zero gradient, which the numeric side still verifies
        std::vector<double> analytic =
            t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0);
        auto& vals = t.mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + eps;
            const double up = loss_fn(nullptr).item();
            vals[i] = saved - eps;
            const double down = loss_fn(nullptr).item();
            vals[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_tensor = name;
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    return report;
}

} // namespace popgraph::gradcheck
