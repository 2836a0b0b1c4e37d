#include <catch2/catch_amalgamated.hpp>

#include "anofpdm/forward.hpp"
#include "anofpdm/selection.hpp"
#include "helpers.hpp"

using namespace fpdm;

namespace {
MixtureParams shifted_mixture(int h, int w, double shift_pixels_fraction, double shift,
                              double var = 0.01) {
    MixtureParams p;
    p.mean_healthy = ImageGrid::constant(h, w, -0.2, GridRole::Image);
    p.mean_unhealthy = p.mean_healthy;
    auto n = static_cast<std::size_t>(shift_pixels_fraction * h * w);
    for (std::size_t i = 0; i < n; ++i) p.mean_unhealthy.values[i] += shift;
    p.var_healthy = ImageGrid::constant(h, w, var);
    p.var_unhealthy = ImageGrid::constant(h, w, var);
    p.prior_healthy = 0.5;
    return p;
}
}  // namespace

TEST_CASE("ddpm_noise_to basics") {
    auto sched = make_linear_schedule(200, 1e-4, 0.1);
    Rng rng(42);
    auto x0 = test::random_grid(4, 4, rng, 0.3, GridRole::Image);

    SECTION("near-identity at t=1") {
        Rng r(1);
        auto [x1, eps] = ddpm_noise_to(x0, 1, sched, r);
        double bound = 3.0 * std::sqrt(sched.beta[1]);
        // beta_1 = 1e-4, so 1-alpha_bar_1 = 1e-4 and per-pixel noise is tiny
        for (std::size_t i = 0; i < x0.size(); ++i)
            CHECK(std::fabs(x1.values[i] - x0.values[i]) < bound);
        (void)eps;
    }

    SECTION("seeded draws replay bitwise") {
        Rng a(99), b(99);
        auto ra = ddpm_noise_to(x0, 57, sched, a);
        auto rb = ddpm_noise_to(x0, 57, sched, b);
        CHECK(ra.first.values == rb.first.values);
        CHECK(ra.second.values == rb.second.values);
    }

    SECTION("Monte Carlo moments match the marginal") {
        const int t = 120;
        const int n = 10000;
        Rng r(7);
        ImageGrid mean = ImageGrid::zeros(4, 4), m2 = ImageGrid::zeros(4, 4);
        for (int k = 0; k < n; ++k) {
            auto [xt, eps] = ddpm_noise_to(x0, t, sched, r);
            for (std::size_t i = 0; i < xt.size(); ++i) {
                mean.values[i] += xt.values[i];
                m2.values[i] += xt.values[i] * xt.values[i];
            }
            (void)eps;
        }
        double root_ab = std::sqrt(sched.alpha_bar[t]);
        double var_expect = 1.0 - sched.alpha_bar[t];
        double se_mean = std::sqrt(var_expect / n);
        double se_var = var_expect * std::sqrt(2.0 / n);
        for (std::size_t i = 0; i < mean.size(); ++i) {
            double m = mean.values[i] / n;
            double v = m2.values[i] / n - m * m;
            CHECK(std::fabs(m - root_ab * x0.values[i]) < 4.0 * se_mean);
            CHECK(std::fabs(v - var_expect) < 4.0 * se_var);
        }
    }
}

TEST_CASE("ddim_encode_step") {
    auto sched = make_linear_schedule(50, 1e-3, 0.1);
    Rng rng(5);
    auto x0 = test::random_grid(3, 3, rng, 0.4, GridRole::Image);

    SECTION("exact prediction reduces to the closed-form marginal move") {
        const int t = 20;
        Rng r(11);
        auto [xt, eps] = ddpm_noise_to(x0, t, sched, r);
        // predictor that returns exactly the noise that built x_t
        test::LambdaPredictor pred([&](const ImageGrid&, int, Condition) { return eps; });
        auto next = ddim_encode_step({xt, t}, pred, sched);
        CHECK(next.t == t + 1);
        double root_ab = std::sqrt(sched.alpha_bar[t + 1]);
        double root_rem = std::sqrt(1.0 - sched.alpha_bar[t + 1]);
        for (std::size_t i = 0; i < x0.size(); ++i) {
            double expect = root_ab * x0.values[i] + root_rem * eps.values[i];
            CHECK(std::fabs(next.x.values[i] - expect) < 1e-12);
        }
    }

    SECTION("deterministic given the same state") {
        test::FieldPredictor pred;
        EncodingState s{x0, 4};
        auto a = ddim_encode_step(s, pred, sched);
        auto b = ddim_encode_step(s, pred, sched);
        CHECK(a.x.values == b.x.values);
    }

    SECTION("stepping past T-1 is rejected") {
        test::FieldPredictor pred;
        CHECK_THROWS_AS(ddim_encode_step({x0, 50}, pred, sched), ContractViolation);
    }
}

TEST_CASE("one_step_prediction") {
    auto sched = make_linear_schedule(64, 1e-3, 0.2);
    Rng rng(3);
    auto x = test::random_grid(4, 4, rng, 0.5);
    test::FieldPredictor pred;

    SECTION("w=0 equals the plain conditional path") {
        auto a = one_step_prediction(x, 9, pred, sched, OneStepMode::healthy_guided(0.0));
        auto eps_h = pred.predict(x, 9, Condition::Healthy);
        auto b = prediction_from_eps(x, 9, eps_h, sched);
        CHECK(test::max_abs_diff(a, b) == 0.0);
    }

    SECTION("zero predictor divides out the signal scale") {
        test::ConstPredictor zero(0.0);
        auto p = one_step_prediction(x, 30, pred, sched, OneStepMode::unguided());
        (void)p;
        auto q = one_step_prediction(x, 30, zero, sched, OneStepMode::unguided());
        double inv = 1.0 / std::sqrt(sched.alpha_bar[30]);
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK(test::rel_err(q.values[i], x.values[i] * inv) < 1e-14);
    }

    SECTION("direct and score-form paths agree") {
        Rng r(1234);
        for (int trial = 0; trial < 1000; ++trial) {
            int t = r.uniform_int(1, 64);
            double w = r.uniform(0.0, 30.0);
            auto xt = test::random_grid(3, 3, r, 1.0);
            auto direct =
                one_step_prediction(xt, t, pred, sched, OneStepMode::healthy_guided(w));
            auto eps_h = pred.predict(xt, t, Condition::Healthy);
            auto eps_n = pred.predict(xt, t, Condition::Null);
            double inv_root_ab = 1.0 / std::sqrt(sched.alpha_bar[t]);
            double inv_root_rem = 1.0 / std::sqrt(1.0 - sched.alpha_bar[t]);
            ImageGrid alt(3, 3, GridRole::AnomalyMap);
            for (std::size_t i = 0; i < alt.size(); ++i) {
                double s_h = -eps_h.values[i] * inv_root_rem;
                double s_n = -eps_n.values[i] * inv_root_rem;
                alt.values[i] = xt.values[i] * inv_root_ab +
                                sched.score_coeff[t] * ((1.0 + w) * s_h - w * s_n);
            }
            CHECK(test::rel_field_gap(direct, alt) < 1e-9);
        }
    }
}

TEST_CASE("divergence") {
    ImageGrid a = ImageGrid::constant(2, 2, 0.5), b = a;
    CHECK(divergence(a, b) == 0.0);

    ImageGrid u(1, 1, GridRole::AnomalyMap), v(1, 1, GridRole::AnomalyMap);
    u.values = {0.3};
    v.values = {0.0};
    CHECK(test::rel_err(divergence(u, v), 0.09) < 1e-14);

    SECTION("noise-gap path agrees on random fields") {
        auto sched = make_linear_schedule(32, 1e-3, 0.2);
        test::FieldPredictor pred;
        Rng r(8);
        for (int trial = 0; trial < 200; ++trial) {
            int t = r.uniform_int(1, 32);
            double w = r.uniform(0.0, 30.0);
            auto xt = test::random_grid(3, 4, r, 1.0);
            auto hgp = one_step_prediction(xt, t, pred, sched, OneStepMode::healthy_guided(w));
            auto ugp = one_step_prediction(xt, t, pred, sched, OneStepMode::unguided());
            double m = divergence(hgp, ugp);
            auto eps_h = pred.predict(xt, t, Condition::Healthy);
            auto eps_n = pred.predict(xt, t, Condition::Null);
            double gap2 = 0.0;
            for (std::size_t i = 0; i < xt.size(); ++i) {
                double diff = eps_h.values[i] - eps_n.values[i];
                gap2 += diff * diff;
            }
            double a2 = sched.eps_coeff[t] * sched.eps_coeff[t];
            double alt = a2 * (1.0 + w) * (1.0 + w) * gap2 / static_cast<double>(xt.size());
            CHECK(test::rel_err(m, alt) < 1e-9);
        }
    }
}

TEST_CASE("sweep") {
    auto sched = make_linear_schedule(40, 1e-3, 0.15);
    Rng rng(17);
    auto x0 = test::random_grid(4, 4, rng, 0.3, GridRole::Image);

    SECTION("guidance collapse zeroes the divergence") {
        test::CollapsedPredictor pred;
        SweepOptions opt;
        opt.w = 3.0;
        opt.encoding = EncodingKind::Deterministic;
        auto trace = sweep(x0, pred, sched, opt, 1);
        for (std::size_t i = 0; i < trace.divergence.size(); ++i) {
            CHECK(trace.divergence[i] < 1e-24);
            CHECK(test::max_abs_diff(trace.err_healthy[i], trace.err_unguided[i]) < 1e-12);
        }
    }

    SECTION("gradient decomposition of the error gap") {
        // e_h - e_n = score_coeff * (1+w) * grad log p(healthy | x_t)
        test::FieldPredictor pred;
        Rng r(77);
        for (int trial = 0; trial < 300; ++trial) {
            int t = r.uniform_int(1, sched.steps);
            double w = r.uniform(0.0, 30.0);
            auto xt = test::random_grid(4, 4, r, 1.0);
            auto hgp = one_step_prediction(xt, t, pred, sched, OneStepMode::healthy_guided(w));
            auto ugp = one_step_prediction(xt, t, pred, sched, OneStepMode::unguided());
            auto grad = implicit_classifier_gradient(pred, xt, t, sched);
            double c = sched.score_coeff[t] * (1.0 + w);
            ImageGrid lhs(4, 4, GridRole::AnomalyMap), rhs(4, 4, GridRole::AnomalyMap);
            for (std::size_t k = 0; k < lhs.size(); ++k) {
                lhs.values[k] = hgp.values[k] - ugp.values[k];
                rhs.values[k] = c * grad.values[k];
            }
            CHECK(test::rel_field_gap(lhs, rhs) < 1e-9);
        }
    }

    SECTION("identity checks run clean on a real predictor") {
        test::FieldPredictor pred;
        SweepOptions opt;
        opt.w = 4.0;
        opt.check_identities = true;
        CHECK_NOTHROW(sweep(x0, pred, sched, opt, 3));
    }

    SECTION("stride gives a subsequence of the stride-1 trace") {
        test::FieldPredictor pred;
        for (auto enc : {EncodingKind::Deterministic, EncodingKind::Stochastic}) {
            SweepOptions opt;
            opt.w = 1.5;
            opt.encoding = enc;
            opt.storage = TraceStorage::TwoPass;
            auto dense = sweep(x0, pred, sched, opt, 913);
            opt.stride = 2;
            auto strided = sweep(x0, pred, sched, opt, 913);
            REQUIRE(strided.steps.size() == (dense.steps.size() + 1) / 2);
            for (std::size_t i = 0; i < strided.steps.size(); ++i) {
                CHECK(strided.steps[i] == dense.steps[2 * i]);
                CHECK(strided.divergence[i] == dense.divergence[2 * i]);
                CHECK(strided.mse_healthy[i] == dense.mse_healthy[2 * i]);
                CHECK(strided.mse_unguided[i] == dense.mse_unguided[2 * i]);
            }
        }
    }

    SECTION("deterministic encoding replays bitwise for a fixed seed") {
        test::FieldPredictor pred;
        SweepOptions opt;
        opt.w = 2.0;
        auto a = sweep(x0, pred, sched, opt, 5150);
        auto b = sweep(x0, pred, sched, opt, 5150);
        CHECK(a.divergence == b.divergence);
        CHECK(a.mse_healthy == b.mse_healthy);
        for (std::size_t i = 0; i < a.err_healthy.size(); ++i)
            CHECK(a.err_healthy[i].values == b.err_healthy[i].values);
    }

    SECTION("unhealthy oracle samples diverge more than healthy ones") {
        auto sched2 = make_linear_schedule(40, 1e-3, 0.15);
        auto params = shifted_mixture(4, 4, 0.25, 0.8);
        GaussianMixtureOracle oracle(params, sched2);
        SweepOptions opt;
        opt.w = 1.0;
        opt.storage = TraceStorage::TwoPass;
        std::vector<double> max_h, max_u;
        for (int k = 0; k < 40; ++k) {
            Rng r(derive_seed(400, kStreamSample, k));
            auto xh = oracle.sample_class(Condition::Healthy, r);
            auto xu = oracle.sample_class(Condition::Unhealthy, r);
            auto th = sweep(xh, oracle, sched2, opt, 1000 + k);
            auto tu = sweep(xu, oracle, sched2, opt, 1000 + k);
            max_h.push_back(select_end_step(th).second);
            max_u.push_back(select_end_step(tu).second);
        }
        std::sort(max_h.begin(), max_h.end());
        std::sort(max_u.begin(), max_u.end());
        CHECK(max_u[max_u.size() / 2] > max_h[max_h.size() / 2]);
    }
}

TEST_CASE("unguided error has zero mean under joint draws from the oracle mixture") {
    auto sched = make_linear_schedule(40, 1e-3, 0.15);
    auto params = shifted_mixture(2, 2, 0.5, 0.6, 0.04);
    GaussianMixtureOracle oracle(params, sched);
    const int t = 18;
    const int n = 10000;
    Rng rng(2024);
    ImageGrid sum = ImageGrid::zeros(2, 2), sum2 = ImageGrid::zeros(2, 2);
    double root_ab = std::sqrt(sched.alpha_bar[t]);
    double root_rem = std::sqrt(1.0 - sched.alpha_bar[t]);
    for (int k = 0; k < n; ++k) {
        bool unhealthy = rng.uniform() < 0.5;
        auto x0 = oracle.sample_class(unhealthy ? Condition::Unhealthy : Condition::Healthy, rng);
        ImageGrid xt(2, 2, GridRole::AnomalyMap);
        for (std::size_t i = 0; i < xt.size(); ++i)
            xt.values[i] = root_ab * x0.values[i] + root_rem * rng.normal();
        auto ugp = one_step_prediction(xt, t, oracle, sched, OneStepMode::unguided());
        for (std::size_t i = 0; i < xt.size(); ++i) {
            double e = ugp.values[i] - x0.values[i];
            sum.values[i] += e;
            sum2.values[i] += e * e;
        }
    }
    for (std::size_t i = 0; i < sum.size(); ++i) {
        double m = sum.values[i] / n;
        double var = sum2.values[i] / n - m * m;
        double se = std::sqrt(var / n);
        CHECK(std::fabs(m) <= 3.0 * se);
    }
}

TEST_CASE("ddpm_sample_step") {
    auto sched = make_linear_schedule(200, 1e-4, 0.1);

    SECTION("no noise is injected at t=1") {
        test::FieldPredictor pred;
        Rng rng(4);
        auto x = test::random_grid(3, 3, rng, 0.4);
        Rng r1(10), r2(77);
        auto a = ddpm_sample_step(x, 1, pred, sched, Condition::Null, 0.0, r1);
        auto b = ddpm_sample_step(x, 1, pred, sched, Condition::Null, 0.0, r2);
        CHECK(a.values == b.values);
    }

    SECTION("zero predictor gives the closed-form affine map") {
        test::ConstPredictor zero(0.0);
        Rng rng(4);
        auto x = test::random_grid(2, 2, rng, 0.4);
        Rng r(3);
        auto out = ddpm_sample_step(x, 1, zero, sched, Condition::Null, 0.0, r);
        double inv = 1.0 / std::sqrt(sched.alpha[1]);
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK(test::rel_err(out.values[i], inv * x.values[i]) < 1e-14);
    }

    SECTION("noise-then-denoise roundtrip stays close at small noise scale") {
        MixtureParams p;
        p.mean_healthy = ImageGrid::constant(4, 4, -0.1, GridRole::Image);
        p.mean_unhealthy = ImageGrid::constant(4, 4, 0.3, GridRole::Image);
        p.var_healthy = ImageGrid::constant(4, 4, 0.01);
        p.var_unhealthy = ImageGrid::constant(4, 4, 0.01);
        GaussianMixtureOracle oracle(p, sched);
        const int lambda = 3;
        double d = 16.0;
        for (int k = 0; k < 5; ++k) {
            Rng r(derive_seed(55, kStreamSample, k));
            auto x0 = oracle.sample_class(Condition::Healthy, r);
            auto x = ddpm_noise_to(x0, lambda, sched, r).first;
            for (int t = lambda; t >= 1; --t)
                x = ddpm_sample_step(x, t, oracle, sched, Condition::Null, 0.0, r);
            double l2 = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                double e = x.values[i] - x0.values[i];
                l2 += e * e;
            }
            CHECK(std::sqrt(l2) <= 0.1 * std::sqrt(d));
        }
    }
}
