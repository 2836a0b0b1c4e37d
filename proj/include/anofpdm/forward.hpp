#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"
#include "anofpdm/numerics.hpp"
#include "anofpdm/rng.hpp"
#include "anofpdm/schedule.hpp"
#include "anofpdm/score.hpp"

namespace fpdm {

enum class EncodingKind : std::uint8_t { Stochastic, Deterministic };

inline const char* to_string(EncodingKind e) {
    return e == EncodingKind::Stochastic ? "ddpm" : "ddim";
}

enum class TraceStorage : std::uint8_t { StoreAll, TwoPass };

struct SweepOptions {
    double w = 0.0;
    EncodingKind encoding = EncodingKind::Deterministic;
    int stride = 1;
    TraceStorage storage = TraceStorage::StoreAll;
    // Ablation: use the guided prediction inside the deterministic drift
    // instead of the unguided one.
    bool guided_drift = false;
    // Cross-check the algebraic identities between the direct and the
    // score-form computation paths at every evaluated step.
    bool check_identities = false;
};

// Record of one forward sweep over a sample. Sequences are aligned with
// `steps` (the evaluated step list). Per-step prediction-error fields are
// kept only under store-all; two-pass traces carry the scalar sequences and
// rely on seed replay for aggregation.
struct ForwardTrace {
    std::vector<int> steps;
    std::vector<double> divergence;     // mean squared HGP-UGP gap
    std::vector<double> mse_healthy;    // ||guided prediction - x0||^2 / d
    std::vector<double> mse_unguided;   // ||unguided prediction - x0||^2 / d
    std::vector<ImageGrid> err_healthy;
    std::vector<ImageGrid> err_unguided;
    EncodingKind encoding = EncodingKind::Deterministic;
    std::uint64_t seed = 0;
    double w = 0.0;
    int stride = 1;
    int height = 0;
    int width = 0;

    bool has_fields() const { return !err_healthy.empty(); }
    std::size_t evaluated_count() const { return steps.size(); }

    // Mean squared score-mismatch diagnostic; exact only with an oracle
    // backend, where the unguided error is the score-coefficient times the
    // score mismatch.
    double delta_s_mse(std::size_t i, const DiffusionSchedule& schedule) const {
        double b = schedule.score_coeff[steps[i]];
        return mse_unguided[i] / (b * b);
    }
};

// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps; returns the drawn
// eps alongside for error bookkeeping.
inline std::pair<ImageGrid, ImageGrid> ddpm_noise_to(const ImageGrid& x0, int t,
                                                     const DiffusionSchedule& schedule, Rng& rng) {
    schedule.require_step(t, "ddpm_noise_to");
    double root_ab = std::sqrt(schedule.alpha_bar[t]);
    double root_rem = std::sqrt(1.0 - schedule.alpha_bar[t]);
    ImageGrid eps(x0.height, x0.width, GridRole::Gradient);
    ImageGrid x(x0.height, x0.width, GridRole::AnomalyMap);
    for (std::size_t i = 0; i < x.size(); ++i) {
        eps.values[i] = rng.normal();
        x.values[i] = root_ab * x0.values[i] + root_rem * eps.values[i];
    }
    return {std::move(x), std::move(eps)};
}

// One-step estimate of the clean input from (x_t, eps): subtract the scaled
// noise and rescale.
inline ImageGrid prediction_from_eps(const ImageGrid& x_t, int t, const ImageGrid& eps,
                                     const DiffusionSchedule& schedule) {
    double root_ab = std::sqrt(schedule.alpha_bar[t]);
    double root_rem = std::sqrt(1.0 - schedule.alpha_bar[t]);
    ImageGrid out(x_t.height, x_t.width, GridRole::AnomalyMap);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values[i] = (x_t.values[i] - root_rem * eps.values[i]) / root_ab;
    return out;
}

struct OneStepMode {
    bool guided = false;
    double w = 0.0;

    static OneStepMode unguided() { return {false, 0.0}; }
    static OneStepMode healthy_guided(double w) { return {true, w}; }
};

inline ImageGrid one_step_prediction(const ImageGrid& x_t, int t, const NoisePredictor& pred,
                                     const DiffusionSchedule& schedule, OneStepMode mode) {
    schedule.require_step(t, "one_step_prediction");
    ImageGrid eps = mode.guided ? guided_noise(pred, x_t, t, Condition::Healthy, mode.w)
                                : pred.predict(x_t, t, Condition::Null);
    return prediction_from_eps(x_t, t, eps, schedule);
}

// ||hgp - ugp||^2 / d
inline double divergence(const ImageGrid& hgp, const ImageGrid& ugp) { return mse(hgp, ugp); }

struct EncodingState {
    ImageGrid x;
    int t = 0;
};

namespace detail {
inline ImageGrid ddim_advance(const ImageGrid& x, int t, const ImageGrid& eps,
                              const DiffusionSchedule& schedule) {
    // x_{t+1} = sqrt(ab_{t+1}) x0_hat + sqrt(1 - ab_{t+1}) (x - sqrt(ab_t) x0_hat) / sqrt(1 - ab_t)
    double ab_t = schedule.alpha_bar[t];
    double ab_n = schedule.alpha_bar[t + 1];
    double root_ab_t = std::sqrt(ab_t);
    double root_ab_n = std::sqrt(ab_n);
    double ratio = std::sqrt(1.0 - ab_n) / std::sqrt(1.0 - ab_t);
    double root_rem_t = std::sqrt(1.0 - ab_t);
    ImageGrid out(x.height, x.width, GridRole::AnomalyMap);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x0_hat = (x.values[i] - root_rem_t * eps.values[i]) / root_ab_t;
        out.values[i] = root_ab_n * x0_hat + ratio * (x.values[i] - root_ab_t * x0_hat);
    }
    return out;
}

inline double rel_gap(double a, double b) {
    double scale = std::max({std::fabs(a), std::fabs(b), 1e-300});
    return std::fabs(a - b) / scale;
}

inline double rel_gap(const ImageGrid& a, const ImageGrid& b) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double diff = a.values[i] - b.values[i];
        num += diff * diff;
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
    return std::sqrt(num) / scale;
}
}  // namespace detail

// Deterministic perturbation step: moves the state from t to t+1 using the
// unguided one-step prediction as the drift anchor.
inline EncodingState ddim_encode_step(const EncodingState& state, const NoisePredictor& pred,
                                      const DiffusionSchedule& schedule) {
    if (state.t < 1 || state.t >= schedule.steps)
        throw ContractViolation("ddim_encode_step: step must be in 1..T-1");
    ImageGrid eps = pred.predict(state.x, state.t, Condition::Null);
    return {detail::ddim_advance(state.x, state.t, eps, schedule), state.t + 1};
}

// x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//           + sqrt(posterior_var_t) * z,   z = 0 at t = 1.
// eps_hat is unguided for condition null, otherwise the guided combination.
inline ImageGrid ddpm_sample_step(const ImageGrid& x_t, int t, const NoisePredictor& pred,
                                  const DiffusionSchedule& schedule, Condition condition, double w,
                                  Rng& rng) {
    schedule.require_step(t, "ddpm_sample_step");
    ImageGrid eps = condition == Condition::Null ? pred.predict(x_t, t, Condition::Null)
                                                 : guided_noise(pred, x_t, t, condition, w);
    double coef = schedule.beta[t] / std::sqrt(1.0 - schedule.alpha_bar[t]);
    double inv_root_alpha = 1.0 / std::sqrt(schedule.alpha[t]);
    double noise_scale = t > 1 ? std::sqrt(schedule.posterior_var[t]) : 0.0;
    ImageGrid out(x_t.height, x_t.width, GridRole::AnomalyMap);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double mean = inv_root_alpha * (x_t.values[i] - coef * eps.values[i]);
        out.values[i] = noise_scale > 0.0 ? mean + noise_scale * rng.normal() : mean;
    }
    return out;
}

namespace detail {

// Guided/unguided one-step prediction errors plus their scalar summaries
// for a single step. Both the trace-building sweep and the two-pass
// aggregation replay go through this one function so the two storage
// policies agree bit-for-bit.
struct StepEval {
    ImageGrid e_h, e_n;
    double m = 0.0, mse_h = 0.0, mse_n = 0.0;
};

inline StepEval compute_step_errors(const ImageGrid& x0, const ImageGrid& x_t,
                                    const ImageGrid& eps_h, const ImageGrid& eps_n, int t,
                                    double w, const DiffusionSchedule& schedule) {
    double root_ab = std::sqrt(schedule.alpha_bar[t]);
    double root_rem = std::sqrt(1.0 - schedule.alpha_bar[t]);
    StepEval out;
    out.e_h = ImageGrid(x0.height, x0.width, GridRole::AnomalyMap);
    out.e_n = ImageGrid(x0.height, x0.width, GridRole::AnomalyMap);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        double guided = (1.0 + w) * eps_h.values[i] - w * eps_n.values[i];
        double hgp = (x_t.values[i] - root_rem * guided) / root_ab;
        double ugp = (x_t.values[i] - root_rem * eps_n.values[i]) / root_ab;
        double gap = hgp - ugp;
        out.e_h.values[i] = hgp - x0.values[i];
        out.e_n.values[i] = ugp - x0.values[i];
        out.m += gap * gap;
        out.mse_h += out.e_h.values[i] * out.e_h.values[i];
        out.mse_n += out.e_n.values[i] * out.e_n.values[i];
    }
    double d = static_cast<double>(x0.size());
    out.m /= d;
    out.mse_h /= d;
    out.mse_n /= d;
    return out;
}

// Shared walk over the forward process. Calls
//   visit(t, x_t, eps_healthy, eps_null)
// at every evaluated step (t = 1, 1+stride, ... <= last_step). Evaluated
// steps and the per-step noise seeds depend only on t, so replaying with a
// smaller last_step reproduces the prefix bit-for-bit.
template <class Visitor>
void sweep_walk(const ImageGrid& x0, const NoisePredictor& pred,
                const DiffusionSchedule& schedule, const SweepOptions& opt, std::uint64_t seed,
                int last_step, Visitor&& visit) {
    if (opt.stride < 1) throw ContractViolation("sweep: stride must be >= 1");
    if (x0.role != GridRole::Image)
        throw ContractViolation("sweep: input must be an image-role grid");
    if (schedule.steps < 1) throw ContractViolation("sweep: empty schedule");
    if (last_step <= 0 || last_step > schedule.steps) last_step = schedule.steps;

    auto evaluated = [&](int t) { return (t - 1) % opt.stride == 0; };

    if (opt.encoding == EncodingKind::Stochastic) {
        for (int t = 1; t <= last_step; t += opt.stride) {
            Rng rng(derive_seed(seed, kStreamNoise, static_cast<std::uint64_t>(t)));
            auto [x_t, eps] = ddpm_noise_to(x0, t, schedule, rng);
            ImageGrid eps_h = pred.predict(x_t, t, Condition::Healthy);
            ImageGrid eps_n = pred.predict(x_t, t, Condition::Null);
            visit(t, x_t, eps_h, eps_n);
        }
        return;
    }

    Rng rng(derive_seed(seed, kStreamNoise, 1));
    ImageGrid x = ddpm_noise_to(x0, 1, schedule, rng).first;
    for (int t = 1; t <= last_step; ++t) {
        bool eval = evaluated(t);
        bool need_guided = eval || opt.guided_drift;
        ImageGrid eps_n = pred.predict(x, t, Condition::Null);
        ImageGrid eps_h;
        if (need_guided) eps_h = pred.predict(x, t, Condition::Healthy);
        if (eval) visit(t, x, eps_h, eps_n);
        if (t == last_step || t == schedule.steps) break;
        if (opt.guided_drift && opt.w != 0.0) {
            ImageGrid drift = eps_h;
            for (std::size_t i = 0; i < drift.size(); ++i)
                drift.values[i] = (1.0 + opt.w) * eps_h.values[i] - opt.w * eps_n.values[i];
            x = ddim_advance(x, t, drift, schedule);
        } else {
            x = ddim_advance(x, t, opt.guided_drift ? eps_h : eps_n, schedule);
        }
    }
}

}  // namespace detail

// Full forward sweep: per evaluated step, the healthy-guided and unguided
// one-step predictions, their divergence, and both pixel-level errors.
inline ForwardTrace sweep(const ImageGrid& x0, const NoisePredictor& pred,
                          const DiffusionSchedule& schedule, const SweepOptions& opt,
                          std::uint64_t seed) {
    ForwardTrace trace;
    trace.encoding = opt.encoding;
    trace.seed = seed;
    trace.w = opt.w;
    trace.stride = opt.stride;
    trace.height = x0.height;
    trace.width = x0.width;
    double d = static_cast<double>(x0.size());

    detail::sweep_walk(
        x0, pred, schedule, opt, seed, 0,
        [&](int t, const ImageGrid& x_t, const ImageGrid& eps_h, const ImageGrid& eps_n) {
            auto eval = detail::compute_step_errors(x0, x_t, eps_h, eps_n, t, opt.w, schedule);
            if (!std::isfinite(eval.m) || !std::isfinite(eval.mse_h) ||
                !std::isfinite(eval.mse_n))
                throw NumericError("sweep: non-finite value at step " + std::to_string(t));

            if (opt.check_identities) {
                // divergence via the noise-gap path
                double gap2 = 0.0;
                for (std::size_t i = 0; i < x0.size(); ++i) {
                    double diff = eps_h.values[i] - eps_n.values[i];
                    gap2 += diff * diff;
                }
                double a = schedule.eps_coeff[t];
                double m_alt = a * a * (1.0 + opt.w) * (1.0 + opt.w) * gap2 / d;
                if (detail::rel_gap(eval.m, m_alt) > 1e-9)
                    throw NumericError("sweep: divergence identity failed at step " +
                                       std::to_string(t));
            }

            trace.steps.push_back(t);
            trace.divergence.push_back(eval.m);
            trace.mse_healthy.push_back(eval.mse_h);
            trace.mse_unguided.push_back(eval.mse_n);
            if (opt.storage == TraceStorage::StoreAll) {
                trace.err_healthy.push_back(std::move(eval.e_h));
                trace.err_unguided.push_back(std::move(eval.e_n));
            }
        });
    return trace;
}

}  // namespace fpdm
