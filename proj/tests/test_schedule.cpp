#include <catch2/catch_amalgamated.hpp>

#include "anofpdm/schedule.hpp"
#include "helpers.hpp"

using namespace fpdm;

namespace {
// Independent extended-precision accumulation of the alpha_bar product.
long double alpha_bar_reference(int steps, double b0, double b1, int t) {
    long double prod = 1.0L;
    for (int i = 1; i <= t; ++i) {
        long double frac = steps == 1 ? 0.0L : static_cast<long double>(i - 1) / (steps - 1);
        prod *= 1.0L - (static_cast<long double>(b0) + (static_cast<long double>(b1) - b0) * frac);
    }
    return prod;
}
}  // namespace

TEST_CASE("linear schedule matches extended-precision product at T=1000") {
    auto s = make_linear_schedule(1000, 1e-4, 0.02);
    long double ref = alpha_bar_reference(1000, 1e-4, 0.02, 1000);
    CHECK(test::rel_err(s.alpha_bar[1000], static_cast<double>(ref)) < 1e-10);
    CHECK(test::rel_err(s.alpha_bar[1000], 4.035829765375683e-5) < 1e-9);
    for (int t : {1, 10, 500, 999}) {
        long double r = alpha_bar_reference(1000, 1e-4, 0.02, t);
        CHECK(test::rel_err(s.alpha_bar[t], static_cast<double>(r)) < 1e-12);
    }
}

TEST_CASE("single-step schedule closed form") {
    auto s = make_linear_schedule(1, 0.5, 0.5);
    CHECK(s.alpha_bar[1] == 0.5);
    CHECK(test::rel_err(s.eps_coeff[1], 1.0) < 1e-15);
    CHECK(test::rel_err(s.score_coeff[1], 0.5 / std::sqrt(0.5)) < 1e-15);
}

TEST_CASE("index-0 conventions") {
    for (int steps : {1, 7, 200}) {
        auto s = make_linear_schedule(steps);
        CHECK(s.alpha_bar[0] == 1.0);
        CHECK(s.score_coeff[0] == 0.0);
        CHECK(s.posterior_var[1] == 0.0);
    }
}

TEST_CASE("derived sequences satisfy the coefficient identities") {
    for (int steps : {200, 1000}) {
        auto s = make_linear_schedule(steps, 1e-4, steps == 200 ? 0.1 : 0.02);
        for (int t = 1; t <= steps; ++t) {
            double a2 = s.eps_coeff[t] * s.eps_coeff[t];
            CHECK(test::rel_err(a2, (1.0 - s.alpha_bar[t]) / s.alpha_bar[t]) < 1e-12);
            CHECK(test::rel_err(s.score_coeff[t],
                                s.eps_coeff[t] * std::sqrt(1.0 - s.alpha_bar[t])) < 1e-12);
            CHECK(s.beta[t] > 0.0);
            CHECK(s.beta[t] < 1.0);
            if (t > 1) {
                CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                CHECK(s.score_coeff[t] > s.score_coeff[t - 1]);
            }
        }
    }
}

TEST_CASE("schedule rejects invalid bounds") {
    CHECK_THROWS_AS(make_linear_schedule(0), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.5), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.5, 0.1), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ConfigError);
}

TEST_CASE("fingerprint identifies parameters") {
    auto a = make_linear_schedule(200, 1e-4, 0.1);
    auto b = make_linear_schedule(200, 1e-4, 0.02);
    CHECK(a.fingerprint() != b.fingerprint());
    CHECK(a.fingerprint() == make_linear_schedule(200, 1e-4, 0.1).fingerprint());
}
