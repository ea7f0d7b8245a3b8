#pragma once

// Central-finite-difference verification of the tape gradients. Runs in
// 64-bit mode only: 32-bit FD quotients drown in rounding noise long before
// the 1e-4 agreement this harness certifies.

#include "repose/params.hpp"
#include "repose/tensor.hpp"

#include <functional>

namespace repose {

struct GradCheckFlag {
    std::string param;
    int64_t index = -1;
    double analytic = 0;
    double numeric = 0;
    double rel = 0;
};

struct GradCheckReport {
    int64_t components_checked = 0;
    double max_rel = 0;
    std::string worst_param;
    int64_t worst_index = -1;
    std::vector<GradCheckFlag> flagged;
    bool pass() const { return flagged.empty() && components_checked > 0; }
};

// rel(a,n) = |a-n| / max(|a|,|n|,floor). The floor keeps near-zero gradients
// from amplifying FD rounding noise into spurious flags; genuine rule bugs
// (wrong sign, missing factor, dropped term) are orders of magnitude larger.
inline double gradcheck_rel(double a, double n, double floor_) {
    double den = std::fabs(a);
    den = std::max(den, std::fabs(n));
    den = std::max(den, floor_);
    return std::fabs(a - n) / den;
}

// f must rebuild the scalar loss graph from the current parameter values on
// every call. Components per tensor can be capped (evenly-spaced subsample)
// to bound runtime on larger compositions; cap 0 checks every component.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  ParameterSet<double>& params, double epsilon = 1e-5,
                                  double tol = 1e-4, int64_t cap_per_tensor = 0,
                                  double denom_floor = 1e-3) {
    require_t<ConfigError>(epsilon > 0, "grad_check: epsilon must be positive");
    GradCheckReport rep;

    // Analytic pass.
    params.zero_grad();
    std::vector<std::vector<double>> analytic(params.size());
    {
        TapeScope<double> tape;
        Tensor<double> loss = f();
        require_t<NumericError>(!not_finite(loss.item()), "grad_check: non-finite loss");
        tape.backward(loss);
    }
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const auto& t = params[pi];
        analytic[pi] = t.has_grad() ? t.grad() : std::vector<double>(size_t(t.numel()), 0.0);
    }

    // FD pass (no tape, no recording).
    NoGradGuard<double> guard;
    auto eval = [&]() -> double {
        Tensor<double> loss = f();
        const double v = loss.item();
        require_t<NumericError>(!not_finite(v), "grad_check: non-finite loss during FD probe");
        return v;
    };
    for (size_t pi = 0; pi < params.size(); ++pi) {
        if (!params[pi].requires_grad()) continue;
        auto& vals = params[pi].value_mut();
        const int64_t n = int64_t(vals.size());
        const int64_t m = (cap_per_tensor > 0 && cap_per_tensor < n) ? cap_per_tensor : n;
        for (int64_t j = 0; j < m; ++j) {
            const int64_t idx = (m == n) ? j : (j * n) / m;
            const double orig = vals[idx];
            vals[idx] = orig + epsilon;
            const double lp = eval();
            vals[idx] = orig - epsilon;
            const double lm = eval();
            vals[idx] = orig;
            const double num = (lp - lm) / (2.0 * epsilon);
            const double ana = analytic[pi][idx];
            const double rel = gradcheck_rel(ana, num, denom_floor);
            ++rep.components_checked;
            if (rel > rep.max_rel) {
                rep.max_rel = rel;
                rep.worst_param = params.names()[pi];
                rep.worst_index = idx;
            }
            if (rel >= tol)
                rep.flagged.push_back({params.names()[pi], idx, ana, num, rel});
        }
    }
    return rep;
}

}  // namespace repose
