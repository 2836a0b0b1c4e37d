#include <catch2/catch_amalgamated.hpp>

#include "anofpdm/selection.hpp"
#include "helpers.hpp"

using namespace fpdm;

namespace {
ForwardTrace trace_with(std::vector<double> mse_h, std::vector<double> mse_n,
                        std::vector<double> m = {}) {
    ForwardTrace t;
    std::size_t n = mse_h.size();
    for (std::size_t i = 0; i < n; ++i) t.steps.push_back(static_cast<int>(i) + 1);
    t.mse_healthy = std::move(mse_h);
    t.mse_unguided = std::move(mse_n);
    t.divergence = m.empty() ? std::vector<double>(n, 0.0) : std::move(m);
    return t;
}

SelectionCalibration calib_with(double m_max, double threshold = 0.9) {
    SelectionCalibration c;
    c.w_star = 1.0;
    c.cos_threshold = threshold;
    c.m_max = m_max;
    c.schedule_fingerprint = "test";
    return c;
}
}  // namespace

TEST_CASE("cosine_score") {
    CHECK(test::rel_err(cosine_score(trace_with({1, 2, 3}, {3, 2, 1})), 10.0 / 14.0) < 1e-12);
    CHECK(test::rel_err(cosine_score(trace_with({1, 2, 3}, {1, 2, 3})), 1.0) < 1e-12);
    CHECK_THROWS_AS(cosine_score(trace_with({1}, {1})), ContractViolation);
    CHECK_THROWS_AS(cosine_score(trace_with({0, 0}, {1, 1})), UndefinedMetricError);
}

TEST_CASE("classify pins the boundary to healthy") {
    auto c = calib_with(1.0, 0.95);
    CHECK(classify(0.95, c) == ImageVerdict::Healthy);
    CHECK(classify(0.99, c) == ImageVerdict::Healthy);
    CHECK(classify(0.50, c) == ImageVerdict::Unhealthy);
}

TEST_CASE("best_threshold sweeps midpoints and prefers higher thresholds on ties") {
    // healthy scores: 0.9, 0.8; unhealthy: 0.2, 0.1 -> perfect split at 0.5
    std::vector<LabeledScore> scores{{0.9, false}, {0.8, false}, {0.2, true}, {0.1, true}};
    auto [t, acc] = best_threshold(scores);
    CHECK(acc == 1.0);
    CHECK(t == 0.5);

    // all-identical accuracy: the higher midpoint wins
    std::vector<LabeledScore> flat{{0.3, true}, {0.6, false}};
    auto [t2, acc2] = best_threshold(flat);
    CHECK(acc2 == 1.0);
    CHECK(test::rel_err(t2, 0.45) < 1e-12);
}

TEST_CASE("select_guidance") {
    SECTION("single candidate is returned with its best threshold") {
        std::vector<LabeledScore> scores{{0.9, false}, {0.1, true}};
        auto sel = select_guidance({2.0}, {scores}, 0.98);
        CHECK(sel.w_star == 2.0);
        CHECK(sel.accuracy == 1.0);
        CHECK(sel.cos_threshold == 0.5);
    }

    SECTION("saturated accuracy returns the largest candidate") {
        std::vector<LabeledScore> sep{{0.95, false}, {0.9, false}, {0.2, true}, {0.15, true}};
        auto sel = select_guidance({0.5, 1.0, 2.0}, {sep, sep, sep}, 0.98);
        CHECK(sel.w_star == 2.0);
        CHECK(sel.accuracy == 1.0);
    }

    SECTION("ratio test rejects a weaker large candidate") {
        // candidate 1: perfect; candidate 2: 95% accuracy, below the 0.98 ratio
        std::vector<LabeledScore> perfect, ninety;
        for (int i = 0; i < 10; ++i) {
            perfect.push_back({0.8 + 0.01 * i, false});
            perfect.push_back({0.2 - 0.01 * i, true});
            ninety.push_back({0.8 + 0.01 * i, false});
            // one unhealthy sample leaks above every healthy score
            ninety.push_back({i == 0 ? 0.99 : 0.2 - 0.01 * i, true});
        }
        auto sel = select_guidance({1.0, 2.0}, {perfect, ninety}, 0.98);
        CHECK(sel.w_star == 1.0);
        CHECK(sel.accuracy == 1.0);
    }

    SECTION("never returns a candidate below the accuracy maximizer") {
        Rng rng(6);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<std::vector<LabeledScore>> val(3);
            for (auto& v : val)
                for (int i = 0; i < 12; ++i)
                    v.push_back({rng.uniform(), rng.uniform() < 0.5});
            // ensure both classes present
            for (auto& v : val) {
                v[0].unhealthy = true;
                v[1].unhealthy = false;
            }
            auto sel = select_guidance({0.5, 1.0, 2.0}, val, 0.98);
            std::size_t best = 0;
            for (std::size_t i = 1; i < 3; ++i)
                if (sel.candidate_accuracy[i] > sel.candidate_accuracy[best]) best = i;
            CHECK(sel.w_star >= std::vector<double>{0.5, 1.0, 2.0}[best]);
        }
    }

    SECTION("single-class validation fails") {
        std::vector<LabeledScore> one_class{{0.9, false}, {0.8, false}};
        CHECK_THROWS_AS(select_guidance({1.0}, {one_class}, 0.98), CalibrationError);
    }
}

TEST_CASE("select_end_step") {
    auto t = trace_with({0, 0, 0}, {0, 0, 0}, {0.1, 0.5, 0.3});
    auto [step, m] = select_end_step(t);
    CHECK(step == 2);
    CHECK(m == 0.5);

    auto flat = trace_with({0, 0, 0}, {0, 0, 0}, {0.2, 0.2, 0.2});
    CHECK(select_end_step(flat).first == 1);
}

TEST_CASE("select_quantile reproduces the anchored table lookups") {
    auto calib = calib_with(1.0);
    // map with values 0..1000 so that quantile(level) = 1000*level exactly
    ImageGrid h(1, 1001, GridRole::AnomalyMap);
    for (int i = 0; i <= 1000; ++i) h.values[i] = i;

    // scaled divergence 0 -> level b = 0.98
    CHECK(test::rel_err(select_quantile(0.0, calib, h), 980.0) < 1e-12);
    // scaled divergence 1 -> level a = 0.90
    CHECK(test::rel_err(select_quantile(1.0, calib, h), 900.0) < 1e-12);
    // 0.555 rounds to 0.56 -> index 56 -> level 0.98 - 56*0.0008 = 0.9352
    CHECK(test::rel_err(select_quantile(0.555, calib, h), 935.2) < 1e-12);
    // clamp above m_max
    CHECK(test::rel_err(select_quantile(7.3, calib, h), 900.0) < 1e-12);

    CHECK(test::rel_err(quantile_level_for(0.555, calib), 0.9352) < 1e-12);
}

TEST_CASE("select_quantile level is monotone nonincreasing in the divergence") {
    auto calib = calib_with(2.0);
    Rng rng(9);
    auto h = test::random_grid(8, 8, rng);
    double prev = select_quantile(0.0, calib, h);
    for (int i = 1; i <= 40; ++i) {
        double m = 2.0 * i / 40.0;
        double cur = select_quantile(m, calib, h);
        CHECK(cur <= prev);
        double level = quantile_level_for(m, calib);
        CHECK(level >= calib.quantile_lo);
        CHECK(level <= calib.quantile_hi);
        prev = cur;
    }
}

TEST_CASE("calibrate_m_max") {
    CHECK(calibrate_m_max(std::vector<double>{0.1, 0.7, 0.3}) == 0.7);
    CHECK(calibrate_m_max(std::vector<double>{0.42}) == 0.42);
    CHECK_THROWS_AS(calibrate_m_max(std::vector<double>{}), CalibrationError);
}
