#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/forward.hpp"
#include "anofpdm/numerics.hpp"

namespace fpdm {

enum class ImageVerdict : std::uint8_t { Healthy, Unhealthy };

inline const char* to_string(ImageVerdict v) {
    return v == ImageVerdict::Healthy ? "healthy" : "unhealthy";
}

// Fitted inference-time hyperparameters.
struct SelectionCalibration {
    double w_star = 0.0;
    double cos_threshold = 0.0;
    double m_max = 0.0;          // largest end-step divergence on validation
    double quantile_lo = 0.90;   // a
    double quantile_hi = 0.98;   // b
    double accuracy_ratio = 0.98;  // rho
    std::string schedule_fingerprint;

    void validate() const {
        if (!(quantile_lo >= 0.0 && quantile_lo < quantile_hi && quantile_hi <= 1.0))
            throw ConfigError("calibration: need 0 <= a < b <= 1");
        if (!(m_max > 0.0)) throw ConfigError("calibration: m_max must be > 0");
        if (!(accuracy_ratio > 0.0 && accuracy_ratio <= 1.0))
            throw ConfigError("calibration: accuracy ratio must be in (0,1]");
    }
};

// Cosine similarity between the guided and unguided per-step MSE sequences.
// High for samples the guidance barely moves (healthy), lower otherwise.
inline double cosine_score(const ForwardTrace& trace) {
    if (trace.evaluated_count() < 2)
        throw ContractViolation("cosine_score: trace needs at least 2 evaluated steps");
    return cosine_similarity(trace.mse_healthy, trace.mse_unguided);
}

inline ImageVerdict classify(double score, const SelectionCalibration& calib) {
    return score < calib.cos_threshold ? ImageVerdict::Unhealthy : ImageVerdict::Healthy;
}

struct LabeledScore {
    double score = 0.0;
    bool unhealthy = false;
};

namespace detail {
inline double accuracy_at(const std::vector<LabeledScore>& scores, double threshold) {
    std::size_t correct = 0;
    for (const auto& s : scores) {
        bool predicted_unhealthy = s.score < threshold;
        correct += predicted_unhealthy == s.unhealthy;
    }
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}
}  // namespace detail

// Best classification threshold over the midpoints of consecutive sorted
// scores; equal-accuracy ties resolve to the higher threshold.
inline std::pair<double, double> best_threshold(const std::vector<LabeledScore>& scores) {
    if (scores.size() < 2)
        throw CalibrationError("best_threshold: need at least two scored samples");
    std::vector<double> sorted;
    sorted.reserve(scores.size());
    for (const auto& s : scores) sorted.push_back(s.score);
    std::sort(sorted.begin(), sorted.end());
    double best_t = sorted[0];
    double best_acc = -1.0;
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
        double t = 0.5 * (sorted[i] + sorted[i + 1]);
        double acc = detail::accuracy_at(scores, t);
        if (acc > best_acc || (acc == best_acc && t > best_t)) {
            best_acc = acc;
            best_t = t;
        }
    }
    return {best_t, best_acc};
}

struct GuidanceSelection {
    double w_star = 0.0;
    double cos_threshold = 0.0;
    double accuracy = 0.0;        // accuracy at the returned candidate
    std::vector<double> candidate_accuracy;
    std::vector<double> candidate_threshold;
};

// Pick the guidance strength: the largest candidate above the accuracy
// maximizer whose accuracy stays within `rho` of the maximum; otherwise the
// maximizer itself.
inline GuidanceSelection select_guidance(const std::vector<double>& candidates,
                                         const std::vector<std::vector<LabeledScore>>& validation,
                                         double rho) {
    if (candidates.empty() || candidates.size() != validation.size())
        throw ContractViolation("select_guidance: need one validation score set per candidate");
    if (!std::is_sorted(candidates.begin(), candidates.end()))
        throw ContractViolation("select_guidance: candidates must be ascending");
    GuidanceSelection sel;
    for (const auto& scores : validation) {
        bool has_h = false, has_u = false;
        for (const auto& s : scores) (s.unhealthy ? has_u : has_h) = true;
        if (!has_h || !has_u)
            throw CalibrationError("select_guidance: validation must contain both classes");
        auto [t, acc] = best_threshold(scores);
        sel.candidate_threshold.push_back(t);
        sel.candidate_accuracy.push_back(acc);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i)
        if (sel.candidate_accuracy[i] > sel.candidate_accuracy[best]) best = i;

    std::size_t chosen = best;
    for (std::size_t i = candidates.size(); i-- > best + 1;) {
        if (sel.candidate_accuracy[i] / sel.candidate_accuracy[best] >= rho) {
            chosen = i;
            break;
        }
    }
    sel.w_star = candidates[chosen];
    sel.cos_threshold = sel.candidate_threshold[chosen];
    sel.accuracy = sel.candidate_accuracy[chosen];
    return sel;
}

// End step = evaluated step with the largest divergence; earliest on ties.
inline std::pair<int, double> select_end_step(const ForwardTrace& trace) {
    if (trace.steps.empty()) throw ContractViolation("select_end_step: empty trace");
    std::size_t best = 0;
    for (std::size_t i = 1; i < trace.divergence.size(); ++i)
        if (trace.divergence[i] > trace.divergence[best]) best = i;
    return {trace.steps[best], trace.divergence[best]};
}

// Divergence-indexed quantile threshold: map the scaled end-step divergence
// onto a reversed 101-point level table between a and b, then read that
// quantile off the aggregated map.
inline double select_quantile(double m_te, const SelectionCalibration& calib,
                              const ImageGrid& aam) {
    if (!(calib.m_max > 0.0)) throw ContractViolation("select_quantile: m_max must be > 0");
    double scaled = std::clamp(m_te / calib.m_max, 0.0, 1.0);
    // round half away from zero at 2 digits, then scale to an index
    int index = static_cast<int>(std::lround(std::round(scaled * 100.0)));
    if (index < 0 || index > 100)
        throw ContractViolation("select_quantile: index out of table range");
    double level = calib.quantile_hi -
                   static_cast<double>(index) * (calib.quantile_hi - calib.quantile_lo) / 100.0;
    return quantile(aam, level);
}

// Same table lookup without the map read; used for reporting the level.
inline double quantile_level_for(double m_te, const SelectionCalibration& calib) {
    double scaled = std::clamp(m_te / calib.m_max, 0.0, 1.0);
    int index = static_cast<int>(std::lround(std::round(scaled * 100.0)));
    return calib.quantile_hi -
           static_cast<double>(index) * (calib.quantile_hi - calib.quantile_lo) / 100.0;
}

inline double calibrate_m_max(const std::vector<double>& end_step_divergences) {
    if (end_step_divergences.empty())
        throw CalibrationError("calibrate_m_max: empty validation set");
    return *std::max_element(end_step_divergences.begin(), end_step_divergences.end());
}

inline double calibrate_m_max(const std::vector<ForwardTrace>& traces) {
    std::vector<double> values;
    values.reserve(traces.size());
    for (const auto& t : traces) values.push_back(select_end_step(t).second);
    return calibrate_m_max(values);
}

}  // namespace fpdm
