#include <doctest.h>

#include <cmath>
#include <random>

#include "censor/schedule.hpp"
#include "../support.hpp"

using namespace censor;

TEST_CASE("alpha_bar matches numerical integration of beta") {
  const NoiseSchedule s;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const double t = u(rng);
    const double integral = oracle::simpson([&](double r) { return s.beta(r); }, 0.0, t, 1e-13);
    CHECK(std::abs(alpha_bar(s, t) - std::exp(-integral)) <= 1e-10);
  }
  CHECK(alpha_bar(s, 0.0) == 1.0);
  // exp(-(0.1 + 0.5 * 19.9)) at T = 1
  CHECK(alpha_bar(s, 1.0) == doctest::Approx(std::exp(-10.05)).epsilon(1e-14));
}

TEST_CASE("alpha_bar is decreasing and rejects times outside the horizon") {
  const NoiseSchedule s;
  double prev = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double a = alpha_bar(s, k / 100.0);
    CHECK(a < prev);
    prev = a;
  }
  CHECK_THROWS_AS(alpha_bar(s, -1e-9), std::domain_error);
  CHECK_THROWS_AS(alpha_bar(s, 1.0 + 1e-9), std::domain_error);
}

TEST_CASE("schedule validation") {
  CHECK_NOTHROW(NoiseSchedule{}.validate());
  CHECK_THROWS_AS((NoiseSchedule{-0.1, 20.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((NoiseSchedule{0.1, 20.0, 0.0}.validate()), ConfigError);
  // decreasing but positive on [0, T] is fine
  CHECK_NOTHROW((NoiseSchedule{5.0, 1.0, 1.0}.validate()));
}

TEST_CASE("grid alphas are the running product of (1 - beta_k)") {
  const DiffusionGrid g(NoiseSchedule{}, 1000);
  CHECK(g.num_steps() == 1000);
  CHECK(g.alpha(0) == 1.0);
  CHECK(g.time(1000) == 1.0);
  double prod = 1.0;
  for (std::size_t k = 1; k <= g.num_steps(); ++k) {
    prod *= 1.0 - g.beta(k);
    CHECK(g.alpha(k) == prod);  // bitwise
    CHECK(g.beta(k) > 0.0);
    CHECK(g.beta(k) < 1.0);
    CHECK(std::abs(g.alpha(k) - alpha_bar(g.schedule(), g.time(k))) <= 1e-12);
  }
  CHECK_THROWS_AS(DiffusionGrid(NoiseSchedule{}, 0), std::domain_error);
}

TEST_CASE("forward_noise with a given eps") {
  const NoiseSchedule s;
  Vec x0(2), eps(2);
  x0 << 1.0, -2.0;
  eps << 0.5, 0.25;
  const double a = alpha_bar(s, 0.3);
  const Vec xt = forward_noise(x0, 0.3, eps, s);
  CHECK(xt[0] == doctest::Approx(std::sqrt(a) * 1.0 + std::sqrt(1 - a) * 0.5));
  CHECK(xt[1] == doctest::Approx(std::sqrt(a) * -2.0 + std::sqrt(1 - a) * 0.25));
  CHECK_THROWS_AS(forward_noise(x0, 0.3, Vec::Zero(3), s), ShapeError);
}

TEST_CASE("forward_noise marginal moments") {
  const NoiseSchedule s;
  Vec x0(2);
  x0 << 3.0, -1.0;
  std::mt19937_64 rng(11);
  const int n = 20000;
  for (double t : {0.05, 0.5}) {
    const double a = alpha_bar(s, t);
    Vec mean = Vec::Zero(2);
    Mat second = Mat::Zero(2, 2);
    for (int i = 0; i < n; ++i) {
      const Vec x = forward_noise(x0, t, s, rng);
      mean += x;
      second += x * x.transpose();
    }
    mean /= n;
    const Mat cov = second / n - mean * mean.transpose();
    const double se = std::sqrt((1 - a) / n);
    CHECK(std::abs(mean[0] - std::sqrt(a) * 3.0) < 4 * se);
    CHECK(std::abs(mean[1] + std::sqrt(a)) < 4 * se);
    CHECK(std::abs(cov(0, 0) - (1 - a)) < 0.05 * (1 - a));
    CHECK(std::abs(cov(0, 1)) < 0.05 * (1 - a));
  }
}

TEST_CASE("closed-form values at t = 0.5 and t = 0") {
  const NoiseSchedule s;
  // 0.1 * 0.5 + 19.9 * 0.125
  CHECK(alpha_bar(s, 0.5) == doctest::Approx(std::exp(-2.5375)).epsilon(1e-14));
  CHECK(alpha_bar(s, 0.5) == doctest::Approx(0.0790).epsilon(1e-3));
  CHECK(alpha_bar(s, 1.0) == doctest::Approx(4.31e-5).epsilon(1e-2));
  Vec x0(2), eps(2);
  x0 << 0.3, -4.0;
  eps << 9.0, 9.0;
  CHECK(forward_noise(x0, 0.0, eps, s) == x0);
}

TEST_CASE("forward_noise with zero eps scales by sqrt(alpha)") {
  const NoiseSchedule s;
  // integral of beta reaches ln 4 where 9.95 t^2 + 0.1 t = ln 4
  const double t = (-0.1 + std::sqrt(0.01 + 4 * 9.95 * std::log(4.0))) / (2 * 9.95);
  REQUIRE(alpha_bar(s, t) == doctest::Approx(0.25).epsilon(1e-12));
  Vec x0(2);
  x0 << 1.0, 0.0;
  const Vec xt = forward_noise(x0, t, Vec::Zero(2), s);
  CHECK(xt[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(xt[1] == 0.0);
}

TEST_CASE("one-step and default grids") {
  const NoiseSchedule s;
  const DiffusionGrid one(s, 1);
  CHECK(1.0 - one.beta(1) == doctest::Approx(alpha_bar(s, 1.0)).epsilon(1e-12));
  const DiffusionGrid def(s, 1000);
  CHECK(std::abs(def.alpha(1000) - alpha_bar(s, 1.0)) / alpha_bar(s, 1.0) <= 1e-3);
}
