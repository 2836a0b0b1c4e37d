#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/forward.hpp"
#include "anofpdm/grid.hpp"
#include "anofpdm/numerics.hpp"
#include "anofpdm/selection.hpp"

namespace fpdm {

// What a per-step sub-map contributes to the aggregated anomaly map:
//   Full             squared guided-prediction error
//   EndStep          the full-mode sub-map at the end step only
//   Gradient         squared implicit-classifier gradient
//   WeightedGradient gradient scaled by score_coeff*(1+w), squared
enum class SamMode : std::uint8_t { Full, EndStep, Gradient, WeightedGradient };

inline const char* to_string(SamMode m) {
    switch (m) {
        case SamMode::Full: return "full";
        case SamMode::EndStep: return "endstep";
        case SamMode::Gradient: return "grad";
        default: return "wgrad";
    }
}

inline SamMode sam_mode_from_string(const std::string& s) {
    if (s == "full") return SamMode::Full;
    if (s == "endstep") return SamMode::EndStep;
    if (s == "grad") return SamMode::Gradient;
    if (s == "wgrad") return SamMode::WeightedGradient;
    throw ConfigError("unknown sam mode: " + s);
}

namespace detail {
// Per-pixel sub-map value for one evaluated step, derived from the stored
// prediction errors. The gradient is recoverable as
// (e_h - e_n) / (score_coeff * (1+w)).
inline void accumulate_sam(ImageGrid& acc, const ImageGrid& e_h, const ImageGrid& e_n,
                           SamMode mode, double score_coeff, double w) {
    switch (mode) {
        case SamMode::Full:
        case SamMode::EndStep:
            for (std::size_t i = 0; i < acc.size(); ++i) {
                double e = e_h.values[i];
                acc.values[i] += e * e;
            }
            break;
        case SamMode::Gradient: {
            double inv = 1.0 / (score_coeff * (1.0 + w));
            for (std::size_t i = 0; i < acc.size(); ++i) {
                double g = (e_h.values[i] - e_n.values[i]) * inv;
                acc.values[i] += g * g;
            }
            break;
        }
        case SamMode::WeightedGradient:
            for (std::size_t i = 0; i < acc.size(); ++i) {
                double g = e_h.values[i] - e_n.values[i];
                acc.values[i] += g * g;
            }
            break;
    }
}
}  // namespace detail

// Mean of the per-step sub-maps over evaluated steps up to t_e (end-step
// mode uses the t_e sub-map alone). Requires a store-all trace.
inline ImageGrid aggregate(const ForwardTrace& trace, int t_e, SamMode mode,
                           const DiffusionSchedule& schedule, double w) {
    if (!trace.has_fields())
        throw ContractViolation("aggregate: trace has no stored per-step fields");
    auto it = std::find(trace.steps.begin(), trace.steps.end(), t_e);
    if (it == trace.steps.end())
        throw ContractViolation("aggregate: end step was not evaluated");
    std::size_t end_idx = static_cast<std::size_t>(it - trace.steps.begin());

    ImageGrid acc = ImageGrid::zeros(trace.height, trace.width, GridRole::AnomalyMap);
    if (mode == SamMode::EndStep) {
        detail::accumulate_sam(acc, trace.err_healthy[end_idx], trace.err_unguided[end_idx], mode,
                               schedule.score_coeff[t_e], w);
        return acc;
    }
    for (std::size_t i = 0; i <= end_idx; ++i)
        detail::accumulate_sam(acc, trace.err_healthy[i], trace.err_unguided[i], mode,
                               schedule.score_coeff[trace.steps[i]], w);
    double inv = 1.0 / static_cast<double>(end_idx + 1);
    for (double& v : acc.values) v *= inv;
    return acc;
}

// Replays the sweep up to t_e and aggregates without storing per-step
// fields; reproduces the store-all aggregate bit-for-bit because evaluated
// steps and noise seeds depend only on t.
inline ImageGrid aggregate_two_pass(const ImageGrid& x0, const NoisePredictor& pred,
                                    const DiffusionSchedule& schedule, const SweepOptions& opt,
                                    std::uint64_t seed, int t_e, SamMode mode) {
    ImageGrid acc = ImageGrid::zeros(x0.height, x0.width, GridRole::AnomalyMap);
    std::size_t count = 0;
    bool seen_end = false;
    detail::sweep_walk(
        x0, pred, schedule, opt, seed, t_e,
        [&](int t, const ImageGrid& x_t, const ImageGrid& eps_h, const ImageGrid& eps_n) {
            auto eval = detail::compute_step_errors(x0, x_t, eps_h, eps_n, t, opt.w, schedule);
            if (mode == SamMode::EndStep) {
                if (t == t_e) {
                    detail::accumulate_sam(acc, eval.e_h, eval.e_n, mode,
                                           schedule.score_coeff[t], opt.w);
                    seen_end = true;
                }
                return;
            }
            detail::accumulate_sam(acc, eval.e_h, eval.e_n, mode, schedule.score_coeff[t], opt.w);
            ++count;
            seen_end = seen_end || t == t_e;
        });
    if (!seen_end) throw ContractViolation("aggregate_two_pass: end step was not evaluated");
    if (mode != SamMode::EndStep) {
        double inv = 1.0 / static_cast<double>(count);
        for (double& v : acc.values) v *= inv;
    }
    return acc;
}

// Median filter, threshold (inclusive), then drop small components.
inline BinaryMask postprocess(const ImageGrid& aam, double q_star, int median_kernel = 5,
                              int min_component = 4) {
    ImageGrid filtered = median_filter(aam, median_kernel);
    BinaryMask mask(aam.height, aam.width);
    for (std::size_t i = 0; i < filtered.size(); ++i)
        mask.values[i] = filtered.values[i] >= q_star;
    return connected_component_filter(mask, min_component);
}

struct SegmentOptions {
    SweepOptions sweep;
    SamMode mode = SamMode::Full;
    int median_kernel = 5;
    int min_component = 4;
    // Also run segmentation on predicted-healthy inputs (their official
    // masks stay all-zero; the ungated masks are exposed separately).
    bool force_segmentation = false;
    // Ablation: aggregate to a multiple of the selected end step.
    double te_multiplier = 1.0;
};

struct SegmentationResult {
    ImageGrid aam;
    double q_star = 0.0;
    double quantile_level = 0.0;
    BinaryMask raw_mask;        // all-zero for predicted-healthy inputs
    BinaryMask post_mask;       // all-zero for predicted-healthy inputs
    ImageVerdict verdict = ImageVerdict::Healthy;
    double cosine = 0.0;
    int t_e = 0;
    double m_te = 0.0;
    bool segmented = false;     // aggregation actually ran
    BinaryMask raw_mask_ungated;
    BinaryMask post_mask_ungated;
    ForwardTrace trace;         // scalar sequences only; per-step fields dropped
};

// Full per-input pipeline: sweep, classify by cosine score, and for
// (predicted) unhealthy inputs aggregate, threshold and postprocess.
inline SegmentationResult segment(const ImageGrid& x0, const NoisePredictor& pred,
                                  const DiffusionSchedule& schedule,
                                  const SelectionCalibration& calib, SegmentOptions options,
                                  std::uint64_t seed) {
    options.sweep.w = calib.w_star;
    SegmentationResult res;
    ForwardTrace trace = sweep(x0, pred, schedule, options.sweep, seed);
    res.cosine = cosine_score(trace);
    res.verdict = classify(res.cosine, calib);
    auto [t_e, m_te] = select_end_step(trace);
    res.t_e = t_e;
    res.m_te = m_te;
    res.aam = ImageGrid::zeros(x0.height, x0.width, GridRole::AnomalyMap);
    res.raw_mask = BinaryMask(x0.height, x0.width);
    res.post_mask = BinaryMask(x0.height, x0.width);
    res.raw_mask_ungated = res.raw_mask;
    res.post_mask_ungated = res.post_mask;

    if (res.verdict == ImageVerdict::Unhealthy || options.force_segmentation) {
        int t_agg = t_e;
        if (options.te_multiplier != 1.0) {
            int target = std::clamp(
                static_cast<int>(std::lround(options.te_multiplier * t_e)), 1, schedule.steps);
            // snap to the largest evaluated step <= target (or the first one)
            t_agg = trace.steps.front();
            for (int s : trace.steps)
                if (s <= target) t_agg = s;
        }
        res.aam = trace.has_fields()
                      ? aggregate(trace, t_agg, options.mode, schedule, options.sweep.w)
                      : aggregate_two_pass(x0, pred, schedule, options.sweep, seed, t_agg,
                                           options.mode);
        res.q_star = select_quantile(m_te, calib, res.aam);
        res.quantile_level = quantile_level_for(m_te, calib);
        for (std::size_t i = 0; i < res.aam.size(); ++i)
            res.raw_mask_ungated.values[i] = res.aam.values[i] >= res.q_star;
        res.post_mask_ungated =
            postprocess(res.aam, res.q_star, options.median_kernel, options.min_component);
        res.segmented = true;
        if (res.verdict == ImageVerdict::Unhealthy) {
            res.raw_mask = res.raw_mask_ungated;
            res.post_mask = res.post_mask_ungated;
        }
    }
    trace.err_healthy.clear();
    trace.err_unguided.clear();
    res.trace = std::move(trace);
    return res;
}

// Gaussian-noise reconstruction baseline: perturb to the noise scale, run
// the learned sampler back to t=0 unconditionally, report |x0 - x0_hat|.
inline ImageGrid reconstruction_baseline(const ImageGrid& x0, const NoisePredictor& pred,
                                         const DiffusionSchedule& schedule, int noise_scale,
                                         Rng& rng) {
    schedule.require_step(noise_scale, "reconstruction_baseline");
    ImageGrid x = ddpm_noise_to(x0, noise_scale, schedule, rng).first;
    for (int t = noise_scale; t >= 1; --t)
        x = ddpm_sample_step(x, t, pred, schedule, Condition::Null, 0.0, rng);
    ImageGrid map(x0.height, x0.width, GridRole::AnomalyMap);
    for (std::size_t i = 0; i < map.size(); ++i)
        map.values[i] = std::fabs(x0.values[i] - x.values[i]);
    return map;
}

}  // namespace fpdm
