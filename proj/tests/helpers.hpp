#pragma once

#include <cmath>
#include <functional>

#include "anofpdm/forward.hpp"
#include "anofpdm/grid.hpp"
#include "anofpdm/rng.hpp"
#include "anofpdm/score.hpp"

namespace fpdm::test {

inline double rel_err(double got, double want) {
    double scale = std::max({std::fabs(got), std::fabs(want), 1e-300});
    return std::fabs(got - want) / scale;
}

inline double max_abs_diff(const ImageGrid& a, const ImageGrid& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a.values[i] - b.values[i]));
    return m;
}

inline double rel_field_gap(const ImageGrid& a, const ImageGrid& b) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a.values[i] - b.values[i];
        num += d * d;
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

inline ImageGrid random_grid(int h, int w, Rng& rng, double scale = 1.0,
                             GridRole role = GridRole::AnomalyMap) {
    ImageGrid g(h, w, role);
    for (auto& v : g.values) v = scale * rng.normal();
    return g;
}

// Deterministic smooth pseudo-predictor: eps depends on pixel value, pixel
// index, step, and condition. Useful for pure algebraic identity tests.
class FieldPredictor : public NoisePredictor {
public:
    explicit FieldPredictor(double seed_phase = 0.0) : phase_(seed_phase) {}

    ImageGrid predict(const ImageGrid& x_t, int t, Condition c) const override {
        ImageGrid out(x_t.height, x_t.width, GridRole::Gradient);
        double tag = static_cast<double>(static_cast<int>(c)) * 1.7 + phase_;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values[i] = std::sin(1.3 * x_t.values[i] + 0.11 * static_cast<double>(i) +
                                     0.031 * t + tag);
        return out;
    }

private:
    double phase_;
};

// Predictor whose conditional and unconditional outputs are identical.
class CollapsedPredictor : public NoisePredictor {
public:
    ImageGrid predict(const ImageGrid& x_t, int t, Condition) const override {
        ImageGrid out(x_t.height, x_t.width, GridRole::Gradient);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values[i] = std::cos(0.7 * x_t.values[i] + 0.01 * t + 0.053 * static_cast<double>(i));
        return out;
    }
};

class ConstPredictor : public NoisePredictor {
public:
    explicit ConstPredictor(double value) : value_(value) {}
    ImageGrid predict(const ImageGrid& x_t, int, Condition) const override {
        return ImageGrid::constant(x_t.height, x_t.width, value_, GridRole::Gradient);
    }

private:
    double value_;
};

// Wraps a lambda as a predictor.
class LambdaPredictor : public NoisePredictor {
public:
    using Fn = std::function<ImageGrid(const ImageGrid&, int, Condition)>;
    explicit LambdaPredictor(Fn fn) : fn_(std::move(fn)) {}
    ImageGrid predict(const ImageGrid& x_t, int t, Condition c) const override {
        return fn_(x_t, t, c);
    }

private:
    Fn fn_;
};

}  // namespace fpdm::test
