#pragma once

// Central finite-difference gradient harness. The loss closure must be a
// deterministic function of the current input values (re-seed any RNG it
// consumes), so it can be re-evaluated under perturbation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "csplat/tensor.hpp"

namespace fdcheck {

struct Report {
    double max_rel_err = 0.0;
    int probes = 0;

    bool ok(double tol = 1e-4) const { return probes > 0 && max_rel_err < tol; }
};

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max(std::fabs(a) + std::fabs(b), 1e-6);
}

// Probes up to max_probes randomly chosen elements per input (all elements
// when the tensor is small). Inputs must already have requires_grad set.
inline Report fd_check(const std::function<csplat::Tensor()>& loss_fn,
                       std::vector<csplat::Tensor> inputs, csplat::Rng& rng, double eps = 1e-4,
                       int max_probes = 48) {
    using csplat::Tensor;
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = loss_fn();
    csplat::backward(loss);

    Report rep;
    for (auto& t : inputs) {
        const std::vector<double> analytic = t.grad();
        auto& vals = t.mutable_values();
        std::vector<int64_t> idx(vals.size());
        for (size_t i = 0; i < vals.size(); ++i) idx[i] = static_cast<int64_t>(i);
        if (static_cast<int>(vals.size()) > max_probes) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(static_cast<size_t>(max_probes));
        }
        for (int64_t i : idx) {
            const double keep = vals[static_cast<size_t>(i)];
            vals[static_cast<size_t>(i)] = keep + eps;
            const double up = loss_fn().item();
            vals[static_cast<size_t>(i)] = keep - eps;
            const double dn = loss_fn().item();
            vals[static_cast<size_t>(i)] = keep;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = analytic.empty() ? 0.0 : analytic[static_cast<size_t>(i)];
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(fd, an));
            ++rep.probes;
        }
    }
    return rep;
}

}  // namespace fdcheck
