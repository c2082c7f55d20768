#include <doctest.h>

#include <cmath>
#include <string>

#include "censor/metrics.hpp"
#include "censor/sampler.hpp"

using namespace censor;

namespace {

// roots of (phat - p)^2 = z^2 p (1 - p) / n by bisection on each side of phat
Interval wilson_by_bisection(double k, double n, double z) {
  const double phat = k / n;
  const auto f = [&](double p) { return (phat - p) * (phat - p) - z * z * p * (1 - p) / n; };
  const auto root = [&](double lo, double hi) {
    // f > 0 outside the interval, f <= 0 at phat
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      if ((f(mid) > 0) == (f(lo) > 0)) lo = mid; else hi = mid;
    }
    return 0.5 * (lo + hi);
  };
  return {k == 0 ? 0.0 : root(0.0, phat), k == n ? 1.0 : root(phat, 1.0)};
}

Points at_means(const LabeledMixture& w, const std::vector<std::size_t>& comps) {
  Points x(2, static_cast<Eigen::Index>(comps.size()));
  for (std::size_t j = 0; j < comps.size(); ++j) x.col(static_cast<Eigen::Index>(j)) = w.component(comps[j]).mean;
  return x;
}

}  // namespace

TEST_CASE("wilson interval against bisection on the defining quadratic") {
  const double z = 1.959963984540054;
  for (auto [k, n] : std::vector<std::pair<int, int>>{{0, 10}, {3, 10}, {10, 10}, {1, 500}, {250, 500}, {17, 40}}) {
    const Interval w = wilson_interval(static_cast<std::size_t>(k), static_cast<std::size_t>(n));
    const Interval b = wilson_by_bisection(k, n, z);
    CHECK(w.low == doctest::Approx(b.low).epsilon(1e-10));
    CHECK(w.high == doctest::Approx(b.high).epsilon(1e-10));
    CHECK(w.low <= static_cast<double>(k) / n);
    CHECK(w.high >= static_cast<double>(k) / n);
  }
  CHECK(wilson_interval(0, 10).high == doctest::Approx(0.2775327).epsilon(1e-6));
  CHECK(wilson_interval(0, 10).low == 0.0);
  CHECK(wilson_interval(10, 10).high == 1.0);
  CHECK_THROWS(wilson_interval(11, 10));
}

TEST_CASE("format_number round trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.123, -2.5, 0.0, 0.05})
    CHECK(std::stod(format_number(v)) == v);
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(3.0) == "3");
}

TEST_CASE("mode occupancy by hand") {
  const auto w = preset_world("benign_dominant");  // component 0 is the malign mode
  const Occupancy occ = mode_occupancy(at_means(w, {1, 1, 1, 0}), w);
  CHECK_FALSE(occ.soft);
  REQUIRE(occ.benign_components.size() == 7);
  CHECK(occ.malign_occupancy == 0.25);
  double tv = 0.25;
  for (std::size_t i = 0; i < 7; ++i) {
    const std::size_t c = occ.benign_components[i];
    const double ref = w.component(c).weight / w.benign_mass();
    CHECK(occ.reference[static_cast<Eigen::Index>(i)] == doctest::Approx(ref).epsilon(1e-14));
    tv += std::abs((c == 1 ? 0.75 : 0.0) - ref);
  }
  CHECK(occ.tv == doctest::Approx(0.5 * tv).epsilon(1e-14));

  // exactly the reference proportions would need fractional samples; all
  // benign modes equal weight here, so one sample per mode gives TV 0
  std::vector<std::size_t> each;
  for (std::size_t c = 1; c < 8; ++c) each.push_back(c);
  CHECK(mode_occupancy(at_means(w, each), w).tv == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("split_trials keeps column order") {
  Points x(2, 10);
  for (Eigen::Index j = 0; j < 10; ++j) x.col(j).setConstant(static_cast<double>(j));
  const auto t = split_trials(x, 2);
  REQUIRE(t.size() == 2);
  CHECK(t[0].cols() == 5);
  CHECK(t[1](0, 0) == 5.0);
}

TEST_CASE("arm comparison: monotonicity, empty arms and the two-arm floor") {
  const auto w = preset_world("benign_dominant");
  OracleAnnotator oracle(w);
  const auto arm = [&](const std::string& name, std::vector<std::size_t> comps) {
    return evaluate_arm(name, {at_means(w, comps), at_means(w, comps)}, w, oracle);
  };
  const ArmReport base = arm("baseline", {0, 0, 1, 2});
  CHECK(base.mean == 0.5);
  CHECK(base.std == 0.0);
  CHECK(base.total() == 8);
  const ArmReport cen = arm("single", {0, 1, 2, 3});
  CHECK(cen.mean == 0.25);

  const auto ok = compare_arms({base, cen});
  CHECK(ok.monotone);
  CHECK(ok.csv.rfind(kArmCsvHeader, 0) == 0);
  CHECK(ok.csv.find("single,mean,") != std::string::npos);

  CHECK_FALSE(compare_arms({cen, base}).monotone);

  ArmReport empty;
  empty.arm = "union";
  const auto skip = compare_arms({base, empty, cen});
  CHECK(skip.included == std::vector<std::string>{"baseline", "single"});
  CHECK_FALSE(skip.warnings.empty());
  CHECK_THROWS_AS(compare_arms({base}), ConfigError);
}

TEST_CASE("malign fraction at the extremes and on the raw benign-dominant stream") {
  const auto w = preset_world("benign_dominant");
  OracleAnnotator oracle(w);
  const Points bad = at_means(w, std::vector<std::size_t>(50, 0));
  CHECK(evaluate_arm("bad", {bad}, w, oracle).mean == 1.0);

  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 250));
  const auto raw = sample_unguided(eps, 10000, 31);
  CHECK(std::abs(evaluate_arm("baseline", {raw.samples}, w, oracle).mean - 0.119) <= 0.02);

  // unguided occupancy tracks the raw component weights
  const Occupancy occ = mode_occupancy(raw.samples, w);
  for (Eigen::Index k = 0; k < occ.occupancy.size(); ++k)
    CHECK(std::abs(occ.occupancy[k] - w.component(occ.benign_components[static_cast<std::size_t>(k)]).weight) <= 0.02);
}

TEST_CASE("occupancy of a perfect and a collapsed censored sampler") {
  const auto w = preset_world("benign_dominant");
  const Draws perfect = sample(censored_reference(w), 10000, 5);
  CHECK(mode_occupancy(perfect.points, w).tv <= 0.03);

  Vec a(2), b(2), c(2);
  a << -6, 0;
  b << 6, 0;
  c << 0, 6;
  const auto two = LabeledMixture::isotropic({0.4, 0.4, 0.2}, {a, b, c}, {0.5, 0.5, 0.5},
                                             {Label::benign, Label::benign, Label::malign});
  const Occupancy col = mode_occupancy(at_means(two, std::vector<std::size_t>(100, 0)), two);
  CHECK(col.tv == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("identical arms give identical rows") {
  const auto w = preset_world("benign_dominant");
  OracleAnnotator oracle(w);
  const auto draws = sample(w, 600, 2);
  const auto trials = split_trials(draws.points, 3);
  const ArmReport x = evaluate_arm("same", trials, w, oracle);
  const ArmReport y = evaluate_arm("same", trials, w, oracle);
  CHECK(arm_rows(x) == arm_rows(y));
}
