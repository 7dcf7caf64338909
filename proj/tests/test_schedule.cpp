#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "semantix/schedule.hpp"

#include "oracles.hpp"

#include <cmath>

using namespace semantix;

TEST_CASE("make_schedule explicit betas") {
  Schedule s = make_schedule(2, BetaSpec::explicit_values({0.1, 0.2}), 1.0);
  CHECK(s.alpha[1] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha[2] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar[2] == doctest::Approx(0.72).epsilon(1e-15));

  Schedule one = make_schedule(1, BetaSpec::explicit_values({0.5}), 0.0);
  CHECK(one.alpha_bar[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("make_schedule rejects beta outside (0,1) naming the index") {
  CHECK_THROWS_WITH_AS(make_schedule(3, BetaSpec::explicit_values({0.1, 1.5, 0.1}), 1.0),
                       doctest::Contains("beta[2]"), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(1, BetaSpec::explicit_values({0.0}), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(2, BetaSpec::linear(0.1, 0.2), 1.5), std::invalid_argument);
}

TEST_CASE("default linear schedule matches a direct-product oracle") {
  Schedule s = make_schedule(1000, BetaSpec::linear(0.00085, 0.012), 1.0);
  // independent route: long-double running product over explicitly
  // interpolated betas
  long double prod = 1.0L;
  for (int t = 1; t <= 1000; ++t) {
    long double beta = 0.00085L + (0.012L - 0.00085L) * (t - 1) / 999.0L;
    prod *= 1.0L - beta;
  }
  CHECK(std::abs(s.alpha_bar[1000] - double(prod)) / double(prod) < 1e-12);

  // invariant: cumulative product reconstruction at every index
  long double run = 1.0L;
  for (int t = 1; t <= 1000; ++t) {
    run *= 1.0L - s.beta[t];
    CHECK(std::abs(s.alpha_bar[t] - double(run)) / double(run) < 1e-12);
  }
}

TEST_CASE("sigma variants") {
  Schedule s = make_schedule(2, BetaSpec::explicit_values({0.1, 0.2}), 1.0);
  SUBCASE("posterior-sqrt at t=2") {
    CHECK(sigma(s, 2, SigmaVariant::PosteriorSqrt) ==
          doctest::Approx(std::sqrt(0.2 * 0.1 / 0.28)).epsilon(1e-12));
    CHECK(sigma(s, 2, SigmaVariant::PosteriorSqrt) == doctest::Approx(0.267261).epsilon(1e-5));
  }
  SUBCASE("paper-literal at t=2") {
    CHECK(sigma(s, 2, SigmaVariant::PaperLiteral) == doctest::Approx(0.0714286).epsilon(1e-5));
  }
  SUBCASE("eta=0 zeroes both variants at any t") {
    Schedule z = make_schedule(2, BetaSpec::explicit_values({0.1, 0.2}), 0.0);
    for (int t = 1; t <= 2; ++t) {
      CHECK(sigma(z, t, SigmaVariant::PosteriorSqrt) == 0.0);
      CHECK(sigma(z, t, SigmaVariant::PaperLiteral) == 0.0);
    }
  }
  SUBCASE("t out of range rejected") {
    CHECK_THROWS_AS(sigma(s, 0), std::out_of_range);
    CHECK_THROWS_AS(sigma(s, 3), std::out_of_range);
  }
}

TEST_CASE("sigma^2 <= beta_t for eta <= 1 (posterior-sqrt)") {
  Schedule s = make_schedule(200, BetaSpec::linear(0.001, 0.02), 1.0);
  for (int t = 1; t <= 200; ++t) {
    Real sg = sigma(s, t, SigmaVariant::PosteriorSqrt);
    CHECK(sg * sg <= s.beta[t] + 1e-15);
  }
}

TEST_CASE("sigma_between coincides with sigma on dense transitions") {
  Schedule s = make_schedule(50, BetaSpec::linear(0.002, 0.03), 1.0);
  for (int t = 2; t <= 50; ++t)
    CHECK(sigma_between(s, t, t - 1) == doctest::Approx(sigma(s, t)).epsilon(1e-14));
}

TEST_CASE("transition to clean carries noise for every t") {
  Schedule s = make_schedule(100, BetaSpec::linear(0.001, 0.02), 1.0);
  for (int t = 1; t <= 100; ++t) {
    Real sg = sigma_between(s, t, 0);
    CHECK(sg > 0.0);
    // mu_hat radicand stays valid
    Real ab_p = transition_alpha_bar_prev(s, t, 0);
    CHECK(sg * sg <= 1.0 - ab_p + 1e-15);
  }
}

TEST_CASE("make_plan spacing") {
  Schedule s = make_schedule(1000, BetaSpec::linear(0.00085, 0.012), 1.0);

  SUBCASE("paper default: 60 steps to 601") {
    TimestepPlan p = make_plan(s, 601, 60);
    REQUIRE(p.n_steps() == 60);
    CHECK(p.steps.back() == 601);
    CHECK(p.steps.front() >= 1);
    for (size_t i = 1; i < p.steps.size(); ++i) CHECK(p.steps[i] > p.steps[i - 1]);
  }
  SUBCASE("dense plan") {
    TimestepPlan p = make_plan(s, 4, 4);
    CHECK(p.steps == std::vector<int>{1, 2, 3, 4});
  }
  SUBCASE("two-step plan matches the integer-arithmetic oracle") {
    TimestepPlan p = make_plan(s, 10, 2);
    REQUIRE(p.n_steps() == 2);
    CHECK(p.steps.back() == 10);
    for (int i = 0; i < 2; ++i) CHECK(p.steps[size_t(i)] == oracles::plan_position_oracle(i, 10, 2));
  }
  SUBCASE("every plan matches the oracle and is deterministic") {
    for (int ts : {5, 37, 601, 1000})
      for (int n : {1, 2, 3, 5, ts}) {
        if (n > ts) continue;
        TimestepPlan a = make_plan(s, ts, n);
        TimestepPlan b = make_plan(s, ts, n);
        CHECK(a.steps == b.steps);  // bit-equal plans
        for (int i = 0; i < n; ++i)
          CHECK(a.steps[size_t(i)] == oracles::plan_position_oracle(i, ts, n));
      }
  }
  SUBCASE("n_steps > t_start rejected") { CHECK_THROWS_AS(make_plan(s, 5, 6), std::invalid_argument); }
}

TEST_CASE("beta spec parsing") {
  BetaSpec spec = BetaSpec::parse("linear(0.00085,0.012)");
  CHECK(spec.kind == BetaSpec::Kind::Linear);
  CHECK(spec.lo == doctest::Approx(0.00085));
  CHECK(spec.hi == doctest::Approx(0.012));
  CHECK_THROWS_AS(BetaSpec::parse("cosine"), std::invalid_argument);
}
