#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "anofpdm/errors.hpp"

namespace fpdm {

// Per-step coefficients of the forward noising chain. All sequences are
// indexed 1..T with a conventional slot at index 0 (alpha_bar[0] = 1), so
// posterior_var[1] = 0 falls out of the definition.
//
// For step t:
//   alpha[t]         = 1 - beta[t]
//   alpha_bar[t]     = prod_{i<=t} alpha[i]            (strictly decreasing)
//   eps_coeff[t]     = sqrt(1 - alpha_bar) / sqrt(alpha_bar)
//                      weight of predicted noise in the one-step input error
//   score_coeff[t]   = (1 - alpha_bar) / sqrt(alpha_bar)
//                      weight of a score term in the one-step prediction
//                      (strictly increasing)
//   posterior_var[t] = (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]
struct DiffusionSchedule {
    int steps = 0;  // T
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> eps_coeff;
    std::vector<double> score_coeff;
    std::vector<double> posterior_var;
    double beta_start = 0.0;
    double beta_end = 0.0;

    void require_step(int t, const char* where) const {
        if (t < 1 || t > steps)
            throw ContractViolation(std::string(where) + ": step " + std::to_string(t) +
                                    " outside 1.." + std::to_string(steps));
    }

    // Identifies the schedule for calibration/artifact compatibility checks.
    std::string fingerprint() const {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "linear:T=%d:b0=%.9g:b1=%.9g", steps, beta_start, beta_end);
        return buf;
    }
};

inline DiffusionSchedule make_linear_schedule(int steps, double beta_start = 1e-4,
                                              double beta_end = 0.02) {
    if (steps < 1) throw ConfigError("schedule: step count must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");

    DiffusionSchedule s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.assign(steps + 1, 0.0);
    s.alpha.assign(steps + 1, 1.0);
    s.alpha_bar.assign(steps + 1, 1.0);
    s.eps_coeff.assign(steps + 1, 0.0);
    s.score_coeff.assign(steps + 1, 0.0);
    s.posterior_var.assign(steps + 1, 0.0);

    double prod = 1.0;
    for (int t = 1; t <= steps; ++t) {
        double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[t] = b;
        s.alpha[t] = 1.0 - b;
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
        double rem = 1.0 - prod;
        double root = std::sqrt(prod);
        s.eps_coeff[t] = std::sqrt(rem) / root;
        s.score_coeff[t] = rem / root;
        s.posterior_var[t] = (1.0 - s.alpha_bar[t - 1]) / rem * b;
    }
    return s;
}

}  // namespace fpdm
