#include <catch2/catch_amalgamated.hpp>

#include "anofpdm/score.hpp"
#include "helpers.hpp"

using namespace fpdm;

namespace {
MixtureParams one_pixel_params(double mu_h, double var_h, double mu_u, double var_u,
                               double prior_h = 0.5) {
    MixtureParams p;
    p.mean_healthy = ImageGrid::constant(1, 1, mu_h, GridRole::Image);
    p.var_healthy = ImageGrid::constant(1, 1, var_h);
    p.mean_unhealthy = ImageGrid::constant(1, 1, mu_u, GridRole::Image);
    p.var_unhealthy = ImageGrid::constant(1, 1, var_u);
    p.prior_healthy = prior_h;
    return p;
}

MixtureParams random_params(int h, int w, Rng& rng) {
    MixtureParams p;
    p.mean_healthy = test::random_grid(h, w, rng, 0.4, GridRole::Image);
    p.mean_unhealthy = test::random_grid(h, w, rng, 0.4, GridRole::Image);
    p.var_healthy = ImageGrid::zeros(h, w);
    p.var_unhealthy = ImageGrid::zeros(h, w);
    for (auto& v : p.var_healthy.values) v = 0.01 + 0.2 * rng.uniform();
    for (auto& v : p.var_unhealthy.values) v = 0.01 + 0.2 * rng.uniform();
    p.prior_healthy = 0.3 + 0.4 * rng.uniform();
    return p;
}
}  // namespace

TEST_CASE("guided noise combination") {
    test::FieldPredictor pred;
    Rng rng(21);
    auto x = test::random_grid(4, 4, rng);

    SECTION("w=0 returns the conditional prediction") {
        auto g = guided_noise(pred, x, 3, Condition::Healthy, 0.0);
        auto c = pred.predict(x, 3, Condition::Healthy);
        CHECK(test::max_abs_diff(g, c) == 0.0);
    }

    SECTION("collapsed predictor is guidance-invariant") {
        test::CollapsedPredictor collapsed;
        auto base = collapsed.predict(x, 5, Condition::Healthy);
        for (double w : {0.0, 0.7, 13.0}) {
            auto g = guided_noise(collapsed, x, 5, Condition::Healthy, w);
            CHECK(test::max_abs_diff(g, base) < 1e-14);
        }
    }

    SECTION("scalar arithmetic") {
        test::LambdaPredictor pred2([](const ImageGrid& xt, int, Condition c) {
            return ImageGrid::constant(xt.height, xt.width,
                                       c == Condition::Null ? 0.1 : 0.2);
        });
        auto g = guided_noise(pred2, ImageGrid::zeros(1, 1), 1, Condition::Healthy, 2.0);
        CHECK(test::rel_err(g.values[0], 0.4) < 1e-14);
    }

    SECTION("null label is rejected") {
        CHECK_THROWS_AS(guided_noise(pred, x, 1, Condition::Null, 1.0), ContractViolation);
    }

    SECTION("affine in w") {
        Rng r2(77);
        for (int trial = 0; trial < 20; ++trial) {
            double w1 = r2.uniform(0.0, 30.0), w2 = r2.uniform(0.0, 30.0);
            auto a = guided_noise(pred, x, 4, Condition::Healthy, w1);
            auto b = guided_noise(pred, x, 4, Condition::Healthy, w2);
            auto mid = guided_noise(pred, x, 4, Condition::Healthy, 0.5 * (w1 + w2));
            double worst = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i)
                worst = std::max(worst,
                                 std::fabs(a.values[i] + b.values[i] - 2.0 * mid.values[i]));
            CHECK(worst < 1e-12);
        }
    }
}

TEST_CASE("oracle conditional prediction matches hand-computed scalar case") {
    // mu_h = -0.5, var_h = 0.01, alpha_bar = 0.25, x_t = 0:
    // variance term = 0.25*0.01 + 0.75 = 0.7525, mean = -0.25,
    // eps = sqrt(0.75) * 0.25 / 0.7525
    auto sched = make_linear_schedule(1, 0.75, 0.75);
    GaussianMixtureOracle oracle(one_pixel_params(-0.5, 0.01, 0.5, 0.01), sched);
    auto eps = oracle.predict(ImageGrid::zeros(1, 1), 1, Condition::Healthy);
    CHECK(test::rel_err(eps.values[0], 0.287716080992) < 1e-9);
    CHECK(test::rel_err(eps.values[0], std::sqrt(0.75) * 0.25 / 0.7525) < 1e-14);
}

TEST_CASE("oracle prediction vanishes at the scaled class mode") {
    auto sched = make_linear_schedule(10, 1e-3, 0.3);
    Rng rng(5);
    auto p = random_params(3, 3, rng);
    GaussianMixtureOracle oracle(p, sched);
    for (int t : {1, 5, 10}) {
        ImageGrid x(3, 3, GridRole::AnomalyMap);
        double r = std::sqrt(sched.alpha_bar[t]);
        for (std::size_t i = 0; i < x.size(); ++i)
            x.values[i] = r * p.mean_healthy.values[i];
        auto eps = oracle.predict(x, t, Condition::Healthy);
        for (double v : eps.values) CHECK(std::fabs(v) < 1e-14);
    }
}

TEST_CASE("degenerate mixture: null equals healthy prediction") {
    auto sched = make_linear_schedule(8, 1e-3, 0.2);
    auto p = one_pixel_params(-0.3, 0.04, -0.3, 0.04, 0.5);
    GaussianMixtureOracle oracle(p, sched);
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        ImageGrid x(1, 1, GridRole::AnomalyMap);
        x.values[0] = rng.normal();
        int t = rng.uniform_int(1, 8);
        auto n = oracle.predict(x, t, Condition::Null);
        auto h = oracle.predict(x, t, Condition::Healthy);
        CHECK(test::max_abs_diff(n, h) < 1e-13);
    }
}

TEST_CASE("oracle score matches finite differences of the log density") {
    auto sched = make_linear_schedule(50, 1e-3, 0.15);
    Rng rng(31);
    auto p = random_params(2, 3, rng);
    GaussianMixtureOracle oracle(p, sched);

    int checked = 0;
    const double h = 1e-5;
    while (checked < 100) {
        int t = rng.uniform_int(1, 50);
        auto x = test::random_grid(2, 3, rng, 0.8);
        Condition c = checked % 3 == 0   ? Condition::Healthy
                      : checked % 3 == 1 ? Condition::Unhealthy
                                         : Condition::Null;
        auto score = oracle.score(x, t, c);
        std::size_t pix = static_cast<std::size_t>(rng.uniform_int(0, 5));
        ImageGrid xp = x, xm = x;
        xp.values[pix] += h;
        xm.values[pix] -= h;
        double fd = (oracle.log_density(xp, t, c) - oracle.log_density(xm, t, c)) / (2.0 * h);
        CHECK(test::rel_err(score.values[pix], fd) < 1e-6);
        ++checked;
    }
}

TEST_CASE("implicit classifier gradient") {
    auto sched = make_linear_schedule(4, 0.25, 0.25);

    SECTION("collapsed predictor gives a zero field") {
        test::CollapsedPredictor pred;
        auto g = implicit_classifier_gradient(pred, ImageGrid::zeros(3, 3), 2, sched);
        for (double v : g.values) CHECK(v == 0.0);
    }

    SECTION("scalar arithmetic") {
        // alpha_bar = 0.75 at t=1 for beta=0.25
        test::LambdaPredictor pred([](const ImageGrid& xt, int, Condition c) {
            return ImageGrid::constant(xt.height, xt.width,
                                       c == Condition::Null ? 0.3 : 0.1);
        });
        auto g = implicit_classifier_gradient(pred, ImageGrid::zeros(1, 1), 1, sched);
        CHECK(test::rel_err(g.values[0], 0.2 / 0.5) < 1e-12);
    }

    SECTION("symmetric mixture at the origin points toward the healthy mean") {
        auto sched2 = make_linear_schedule(6, 1e-3, 0.4);
        ImageGrid mu_h(1, 4, GridRole::Image);
        mu_h.values = {-0.5, 0.25, -0.125, 0.75};
        MixtureParams p;
        p.mean_healthy = mu_h;
        p.mean_unhealthy = mu_h;
        for (auto& v : p.mean_unhealthy.values) v = -v;
        p.var_healthy = ImageGrid::constant(1, 4, 0.02);
        p.var_unhealthy = ImageGrid::constant(1, 4, 0.02);
        p.prior_healthy = 0.5;
        GaussianMixtureOracle oracle(p, sched2);
        for (int t : {1, 3, 6}) {
            auto g = implicit_classifier_gradient(oracle, ImageGrid::zeros(1, 4), t, sched2);
            for (std::size_t i = 0; i < g.size(); ++i)
                CHECK(g.values[i] * mu_h.values[i] > 0.0);
        }
    }
}

TEST_CASE("mixture fit recovers class moments") {
    auto sched = make_linear_schedule(5, 1e-3, 0.2);
    auto p = one_pixel_params(-0.4, 0.04, 0.3, 0.09, 0.5);
    GaussianMixtureOracle oracle(p, sched);
    Rng rng(12);
    std::vector<ImageGrid> storage;
    std::vector<bool> labels;
    for (int i = 0; i < 4000; ++i) {
        bool unhealthy = i % 2 == 1;
        storage.push_back(
            oracle.sample_class(unhealthy ? Condition::Unhealthy : Condition::Healthy, rng));
        labels.push_back(unhealthy);
    }
    std::vector<const ImageGrid*> views;
    for (const auto& s : storage) views.push_back(&s);
    auto fitted = fit_gaussian_mixture(views, labels);
    CHECK(std::fabs(fitted.mean_healthy.values[0] + 0.4) < 0.02);
    CHECK(std::fabs(fitted.mean_unhealthy.values[0] - 0.3) < 0.03);
    CHECK(std::fabs(fitted.var_healthy.values[0] - 0.04) < 0.01);
    CHECK(std::fabs(fitted.var_unhealthy.values[0] - 0.09) < 0.02);
    CHECK(fitted.prior_healthy == 0.5);

    CHECK_THROWS_AS(fit_gaussian_mixture(views, std::vector<bool>(views.size(), false)),
                    CalibrationError);
}
