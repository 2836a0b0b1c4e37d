#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"
#include "anofpdm/rng.hpp"
#include "anofpdm/schedule.hpp"

namespace fpdm {

enum class Condition : std::uint8_t { Healthy = 0, Unhealthy = 1, Null = 2 };

inline const char* to_string(Condition c) {
    switch (c) {
        case Condition::Healthy: return "healthy";
        case Condition::Unhealthy: return "unhealthy";
        default: return "null";
    }
}

// Noise-predictor contract: deterministic for fixed (x_t, t, c), output has
// the shape of x_t and is in predicted-noise units. Implementations must be
// safe for concurrent predict() calls on a frozen instance.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual ImageGrid predict(const ImageGrid& x_t, int t, Condition c) const = 0;
};

// (1+w) * eps(x_t, t, label) - w * eps(x_t, t, null)
inline ImageGrid guided_noise(const NoisePredictor& pred, const ImageGrid& x_t, int t,
                              Condition label, double w) {
    if (label == Condition::Null)
        throw ContractViolation("guided_noise: label must be a concrete class, not null");
    ImageGrid cond = pred.predict(x_t, t, label);
    if (w == 0.0) return cond;
    ImageGrid un = pred.predict(x_t, t, Condition::Null);
    for (std::size_t i = 0; i < cond.size(); ++i)
        cond.values[i] = (1.0 + w) * cond.values[i] - w * un.values[i];
    return cond;
}

// Gradient of the log-likelihood of the guidance-induced classifier for the
// healthy label: (eps_null - eps_healthy) / sqrt(1 - alpha_bar_t).
inline ImageGrid implicit_classifier_gradient(const NoisePredictor& pred, const ImageGrid& x_t,
                                              int t, const DiffusionSchedule& schedule) {
    schedule.require_step(t, "implicit_classifier_gradient");
    ImageGrid eps_h = pred.predict(x_t, t, Condition::Healthy);
    ImageGrid eps_n = pred.predict(x_t, t, Condition::Null);
    double inv = 1.0 / std::sqrt(1.0 - schedule.alpha_bar[t]);
    ImageGrid out(x_t.height, x_t.width, GridRole::Gradient);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values[i] = (eps_n.values[i] - eps_h.values[i]) * inv;
    return out;
}

// Two-class per-pixel Gaussian description of clean inputs.
struct MixtureParams {
    ImageGrid mean_healthy;
    ImageGrid var_healthy;
    ImageGrid mean_unhealthy;
    ImageGrid var_unhealthy;
    double prior_healthy = 0.5;

    void validate() const {
        if (!(prior_healthy > 0.0 && prior_healthy < 1.0))
            throw ConfigError("mixture: class priors must be positive and sum to 1");
        require_same_shape(mean_healthy, var_healthy, "mixture");
        require_same_shape(mean_healthy, mean_unhealthy, "mixture");
        require_same_shape(mean_healthy, var_unhealthy, "mixture");
        for (double v : var_healthy.values)
            if (!(v > 0.0)) throw ConfigError("mixture: variances must be > 0");
        for (double v : var_unhealthy.values)
            if (!(v > 0.0)) throw ConfigError("mixture: variances must be > 0");
    }
};

// Exact noise predictor for a two-class diagonal Gaussian mixture over clean
// inputs. Under the forward chain, x_t | y is Gaussian per pixel with mean
// sqrt(alpha_bar)*mu_y and variance alpha_bar*var_y + (1-alpha_bar), so both
// class-conditional and marginal scores are available in closed form; the
// prediction is -sqrt(1-alpha_bar) times the score.
class GaussianMixtureOracle : public NoisePredictor {
public:
    GaussianMixtureOracle(MixtureParams params, DiffusionSchedule schedule)
        : params_(std::move(params)), schedule_(std::move(schedule)) {
        params_.validate();
    }

    const MixtureParams& params() const { return params_; }
    const DiffusionSchedule& schedule() const { return schedule_; }

    ImageGrid predict(const ImageGrid& x_t, int t, Condition c) const override {
        ImageGrid s = score(x_t, t, c);
        double scale = -std::sqrt(1.0 - schedule_.alpha_bar[t]);
        for (double& v : s.values) v *= scale;
        s.role = GridRole::Gradient;
        return s;
    }

    // Score of the noised class-conditional (or, for null, the mixture
    // marginal with joint-density responsibilities) at step t.
    ImageGrid score(const ImageGrid& x_t, int t, Condition c) const {
        schedule_.require_step(t, "oracle score");
        require_same_shape(x_t, params_.mean_healthy, "oracle score");
        if (c != Condition::Null) return class_score(x_t, t, c);

        double lh = std::log(params_.prior_healthy) + class_log_density(x_t, t, Condition::Healthy);
        double lu = std::log(1.0 - params_.prior_healthy) +
                    class_log_density(x_t, t, Condition::Unhealthy);
        double m = std::max(lh, lu);
        double wh = std::exp(lh - m), wu = std::exp(lu - m);
        double rh = wh / (wh + wu);

        ImageGrid sh = class_score(x_t, t, Condition::Healthy);
        ImageGrid su = class_score(x_t, t, Condition::Unhealthy);
        for (std::size_t i = 0; i < sh.values.size(); ++i)
            sh.values[i] = rh * sh.values[i] + (1.0 - rh) * su.values[i];
        return sh;
    }

    // log p(x_t | class) or, for null, log of the mixture marginal.
    double log_density(const ImageGrid& x_t, int t, Condition c) const {
        schedule_.require_step(t, "oracle log_density");
        if (c != Condition::Null) return class_log_density(x_t, t, c);
        double lh = std::log(params_.prior_healthy) + class_log_density(x_t, t, Condition::Healthy);
        double lu = std::log(1.0 - params_.prior_healthy) +
                    class_log_density(x_t, t, Condition::Unhealthy);
        double m = std::max(lh, lu);
        return m + std::log(std::exp(lh - m) + std::exp(lu - m));
    }

    // Draw a clean input from one class of the mixture.
    ImageGrid sample_class(Condition c, Rng& rng) const {
        if (c == Condition::Null)
            throw ContractViolation("oracle sample_class: class must be concrete");
        const ImageGrid& mu = mean_of(c);
        const ImageGrid& var = var_of(c);
        ImageGrid x(mu.height, mu.width, GridRole::Image);
        for (std::size_t i = 0; i < x.size(); ++i)
            x.values[i] = mu.values[i] + std::sqrt(var.values[i]) * rng.normal();
        return x;
    }

private:
    const ImageGrid& mean_of(Condition c) const {
        return c == Condition::Healthy ? params_.mean_healthy : params_.mean_unhealthy;
    }
    const ImageGrid& var_of(Condition c) const {
        return c == Condition::Healthy ? params_.var_healthy : params_.var_unhealthy;
    }

    ImageGrid class_score(const ImageGrid& x_t, int t, Condition c) const {
        double ab = schedule_.alpha_bar[t];
        double root_ab = std::sqrt(ab);
        const ImageGrid& mu = mean_of(c);
        const ImageGrid& var = var_of(c);
        ImageGrid out(x_t.height, x_t.width, GridRole::Gradient);
        for (std::size_t i = 0; i < out.size(); ++i) {
            double v = ab * var.values[i] + (1.0 - ab);
            out.values[i] = -(x_t.values[i] - root_ab * mu.values[i]) / v;
        }
        return out;
    }

    double class_log_density(const ImageGrid& x_t, int t, Condition c) const {
        double ab = schedule_.alpha_bar[t];
        double root_ab = std::sqrt(ab);
        const ImageGrid& mu = mean_of(c);
        const ImageGrid& var = var_of(c);
        constexpr double kLog2Pi = 1.8378770664093453;
        double acc = 0.0;
        for (std::size_t i = 0; i < x_t.size(); ++i) {
            double v = ab * var.values[i] + (1.0 - ab);
            double diff = x_t.values[i] - root_ab * mu.values[i];
            acc += -0.5 * (kLog2Pi + std::log(v)) - 0.5 * diff * diff / v;
        }
        return acc;
    }

    MixtureParams params_;
    DiffusionSchedule schedule_;
};

// Per-pixel moment fit of the two-class mixture from labeled clean samples.
// The variance floor keeps near-deterministic pixels (backgrounds) from
// producing degenerate scores.
//
// With pool_means, both classes share the overall per-pixel mean and the
// class variances are taken around it, so any class-mean offset is absorbed
// into the variance. For populations whose classes differ by localized
// outliers rather than global shifts this removes the mean-estimation noise
// that would otherwise keep the class posterior informative at arbitrarily
// high noise levels.
inline MixtureParams fit_gaussian_mixture(const std::vector<const ImageGrid*>& samples,
                                          const std::vector<bool>& unhealthy,
                                          double var_floor = 1e-6, bool pool_means = false) {
    if (samples.empty() || samples.size() != unhealthy.size())
        throw ContractViolation("fit_gaussian_mixture: need aligned, nonempty inputs");
    std::size_t n_h = 0, n_u = 0;
    for (bool u : unhealthy) (u ? n_u : n_h)++;
    if (n_h == 0 || n_u == 0)
        throw CalibrationError("fit_gaussian_mixture: both classes required");

    int h = samples[0]->height, w = samples[0]->width;
    MixtureParams p;
    p.mean_healthy = ImageGrid::zeros(h, w);
    p.var_healthy = ImageGrid::zeros(h, w);
    p.mean_unhealthy = ImageGrid::zeros(h, w);
    p.var_unhealthy = ImageGrid::zeros(h, w);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        require_same_shape(*samples[s], p.mean_healthy, "fit_gaussian_mixture");
        ImageGrid& mean = unhealthy[s] ? p.mean_unhealthy : p.mean_healthy;
        for (std::size_t i = 0; i < mean.size(); ++i) mean.values[i] += samples[s]->values[i];
    }
    for (std::size_t i = 0; i < p.mean_healthy.size(); ++i) {
        if (pool_means) {
            double pooled = (p.mean_healthy.values[i] + p.mean_unhealthy.values[i]) /
                            static_cast<double>(samples.size());
            p.mean_healthy.values[i] = pooled;
            p.mean_unhealthy.values[i] = pooled;
        } else {
            p.mean_healthy.values[i] /= static_cast<double>(n_h);
            p.mean_unhealthy.values[i] /= static_cast<double>(n_u);
        }
    }
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const ImageGrid& mean = unhealthy[s] ? p.mean_unhealthy : p.mean_healthy;
        ImageGrid& var = unhealthy[s] ? p.var_unhealthy : p.var_healthy;
        for (std::size_t i = 0; i < var.size(); ++i) {
            double diff = samples[s]->values[i] - mean.values[i];
            var.values[i] += diff * diff;
        }
    }
    for (std::size_t i = 0; i < p.var_healthy.size(); ++i) {
        p.var_healthy.values[i] = std::max(p.var_healthy.values[i] / static_cast<double>(n_h), var_floor);
        p.var_unhealthy.values[i] = std::max(p.var_unhealthy.values[i] / static_cast<double>(n_u), var_floor);
    }
    p.prior_healthy = static_cast<double>(n_h) / static_cast<double>(samples.size());
    return p;
}

}  // namespace fpdm
