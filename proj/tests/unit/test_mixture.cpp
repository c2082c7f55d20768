#include <doctest.h>

#include <cmath>
#include <random>

#include "censor/mixture.hpp"
#include "../support.hpp"

using namespace censor;

namespace {

LabeledMixture skewed_world() {
  Mat c0(2, 2), c1(2, 2), c2(2, 2);
  c0 << 1.0, 0.3, 0.3, 0.5;
  c1 << 0.4, -0.1, -0.1, 0.8;
  c2 << 0.25, 0.0, 0.0, 0.25;
  Vec m0(2), m1(2), m2(2);
  m0 << 0.0, 1.0;
  m1 << 2.0, -1.0;
  m2 << -1.5, -0.5;
  return LabeledMixture({{0.5, m0, c0, Label::benign}, {0.3, m1, c1, Label::malign}, {0.2, m2, c2, Label::benign}});
}

// log p_t straight from the diffused component parameters
double direct_log_density(const LabeledMixture& w, const Vec& x, double a, int which = -1) {
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto& c = w.component(i);
    if (which >= 0 && static_cast<int>(c.label) != which) continue;
    const Mat cov = a * c.cov + (1 - a) * Mat::Identity(2, 2);
    total += c.weight * std::exp(oracle::log_gauss(x, std::sqrt(a) * c.mean, cov));
  }
  return std::log(total);
}

}  // namespace

TEST_CASE("marginal density against a direct Gaussian sum") {
  const auto w = skewed_world();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 2.0);
  for (double a : {1.0, 0.7, 0.2, 1e-3}) {
    const Marginal m = w.marginal(a);
    for (int i = 0; i < 20; ++i) {
      Vec x(2);
      x << nd(rng), nd(rng);
      CHECK(m.log_density(x) == doctest::Approx(direct_log_density(w, x, a)).epsilon(1e-12));
    }
  }
}

TEST_CASE("density integrates to one on the covering grid") {
  const auto w = skewed_world();
  const GridOracle box = GridOracle::covering(w, 400);
  const Marginal m = w.marginal(1.0);
  const double mass =
      grid_expectation(box, [&](const Points& x) { return Vec(m.log_densities(x).array().exp()); });
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(box.mass_lower_bound(w) > 1.0 - 1e-5);
}

TEST_CASE("score and Hessian match finite differences") {
  const auto w = skewed_world();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (double a : {1.0, 0.5, 0.05}) {
    const Marginal m = w.marginal(a);
    for (int i = 0; i < 20; ++i) {
      Vec x(2);
      x << nd(rng), nd(rng);
      const Vec fd = oracle::fd_gradient([&](const Vec& p) { return m.log_density(p); }, x);
      CHECK(oracle::rel_err(m.score(x), fd) < 1e-7);
      const Mat H = m.hessian(x);
      const Mat Hfd = oracle::fd_jacobian([&](const Vec& p) { return m.score(p); }, x);
      CHECK((H - Hfd).norm() / std::max(1.0, H.norm()) < 1e-6);
      CHECK((H - H.transpose()).norm() == 0.0);
      const Vec v = Vec::Random(2);
      CHECK(oracle::rel_err(Vec(m.hessian_vector(x, v).col(0)), Vec(H * v)) < 1e-12);
    }
  }
}

TEST_CASE("score stays finite far in the tails") {
  const auto w = skewed_world();
  const Marginal m = w.marginal(1.0);
  Vec x(2);
  x << 80.0, -60.0;
  CHECK(std::isfinite(m.log_density(x)));
  CHECK(m.score(x).allFinite());
  CHECK(m.grad_log_reward(x).allFinite());
  CHECK(m.log_reward(x) <= 0.0);
}

TEST_CASE("reward is the benign posterior and its gradient matches finite differences") {
  const auto w = skewed_world();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (double a : {1.0, 0.3}) {
    const Marginal m = w.marginal(a);
    for (int i = 0; i < 20; ++i) {
      Vec x(2);
      x << nd(rng), nd(rng);
      const double direct = direct_log_density(w, x, a, 1) - direct_log_density(w, x, a);
      CHECK(m.log_reward(x) == doctest::Approx(direct).epsilon(1e-10));
      const Vec fd = oracle::fd_gradient([&](const Vec& p) { return m.log_reward(p); }, x);
      // far from malign mass log r ~ 0 and the difference quotient is all roundoff,
      // so the floor turns this into an absolute 1e-8 check there
      CHECK(oracle::rel_err(m.grad_log_reward(x), fd, 1e-2) < 1e-6);
    }
  }
}

TEST_CASE("responsibilities sum to one") {
  const auto w = skewed_world();
  const Points x = Points::Random(2, 30) * 3.0;
  const Mat r = w.marginal(0.6).responsibilities(x);
  CHECK(r.rows() == 3);
  for (Eigen::Index j = 0; j < x.cols(); ++j) CHECK(r.col(j).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("oracle labels follow the larger class mass; ties go to benign") {
  Vec a(1), b(1);
  a << -1.0;
  b << 1.0;
  const auto w = LabeledMixture::isotropic({0.5, 0.5}, {a, b}, {0.5, 0.5}, {Label::benign, Label::malign});
  Points x(1, 3);
  x << -0.3, 0.0, 0.3;
  const auto labels = oracle_annotate(w, x);
  CHECK(labels == std::vector<int>{1, 1, 0});
}

TEST_CASE("mixture validation") {
  Vec m(2);
  m << 0, 0;
  CHECK_THROWS_AS(LabeledMixture::isotropic({0.5, 0.4}, {m, m}, {1, 1}, {Label::benign, Label::malign}), ConfigError);
  CHECK_THROWS_AS(LabeledMixture::isotropic({1.0}, {m}, {1}, {Label::malign}), ConfigError);
  CHECK_THROWS_AS(LabeledMixture::isotropic({1.0}, {m}, {-1}, {Label::benign}), ConfigError);
  CHECK_THROWS_AS(LabeledMixture::isotropic({0.5, 0.5}, {m}, {1, 1}, {Label::benign, Label::malign}), ShapeError);
  Mat bad(2, 2);
  bad << 1, 2, 2, 1;
  CHECK_THROWS_AS(LabeledMixture({{1.0, m, bad, Label::benign}}), ConfigError);
}

TEST_CASE("preset masses") {
  CHECK(preset_world("benign_dominant").malign_mass() == doctest::Approx(0.119).epsilon(1e-12));
  CHECK(preset_world("malign_dominant").malign_mass() == doctest::Approx(0.686).epsilon(1e-12));
  CHECK(preset_world("symmetric_pair").malign_mass() == doctest::Approx(0.5));
  CHECK(preset_world("standard_normal").malign_mass() == doctest::Approx(0.0));
  CHECK_THROWS_AS(preset_world("church"), ConfigError);
}

TEST_CASE("oracle labels integrate to the malign mass for well separated presets") {
  for (const char* name : {"benign_dominant", "malign_dominant"}) {
    const auto w = preset_world(name);
    const GridOracle box = GridOracle::covering(w, 512);
    const Marginal m = w.marginal(1.0);
    const double benign = grid_expectation(box, [&](const Points& x) {
      const auto lab = m.benign_majority(x);
      const Vec dens = m.log_densities(x).array().exp();
      Vec out(x.cols());
      for (Eigen::Index j = 0; j < x.cols(); ++j) out[j] = lab[static_cast<std::size_t>(j)] ? dens[j] : 0.0;
      return out;
    });
    CHECK(benign == doctest::Approx(w.benign_mass()).epsilon(1e-6));
  }
}

TEST_CASE("sampling reproduces weights and is deterministic") {
  const auto w = skewed_world();
  const Draws d = sample(w, 20000, 17);
  std::vector<double> freq(3, 0.0);
  for (int c : d.component) freq[static_cast<std::size_t>(c)] += 1.0 / 20000;
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = w.component(i).weight;
    CHECK(std::abs(freq[i] - p) < 4 * std::sqrt(p * (1 - p) / 20000));
  }
  const Draws again = sample(w, 20000, 17);
  CHECK(again.points == d.points);
}

TEST_CASE("censored reference keeps only benign components") {
  const auto ref = censored_reference(skewed_world());
  CHECK(ref.size() == 2);
  CHECK(ref.benign_mass() == doctest::Approx(1.0));
  CHECK(ref.component(0).weight == doctest::Approx(0.5 / 0.7));
}

TEST_CASE("logsumexp with a mask") {
  Mat t(3, 2);
  t << 1000.0, -5.0, 1000.0, -6.0, 0.0, -7.0;
  const Vec all = logsumexp_cols(t);
  CHECK(all[0] == doctest::Approx(1000.0 + std::log(2.0)));
  const Vec masked = logsumexp_cols(t, {false, true, true});
  CHECK(masked[1] == doctest::Approx(std::log(std::exp(-6.0) + std::exp(-7.0))));
}

TEST_CASE("standard normal and symmetric worlds: scores by symmetry") {
  const auto sn = preset_world("standard_normal");
  const NoiseSchedule s;
  Vec x(2);
  x << 0.7, -1.3;
  for (double t : {0.0, 0.4, 1.0}) {
    CHECK(oracle::rel_err(score_t(sn, x, t, s), Vec(-x)) < 1e-14);
    CHECK((score_jacobian_t(sn, x, t, s) + Mat::Identity(2, 2)).norm() < 1e-14);
  }
  const auto pair = preset_world("symmetric_pair");
  Vec y(2);
  y << 0.0, 1.7;
  for (double t : {0.0, 0.3, 0.9}) {
    CHECK(std::abs(score_t(pair, y, t, s)[0]) < 1e-14);
    CHECK(reward_exact_t(pair, Vec::Zero(2), t, s) == doctest::Approx(0.5).epsilon(1e-14));
  }
  Vec benign_mean(2);
  benign_mean << 3.0, 0.0;
  // distance^2 36 over 2 sigma^2 = 0.5 gives a log-ratio of 72
  CHECK(reward_exact_t(pair, benign_mean, 0.0, s) == doctest::Approx(1.0 / (1.0 + std::exp(-72.0))));
}

TEST_CASE("reward tends to the benign mass at the horizon") {
  const auto w = preset_world("malign_dominant");
  const NoiseSchedule s;
  Vec x(2);
  for (double a : {-1.0, 0.0, 1.0}) {
    x << a, 0.5;
    CHECK(std::abs(reward_exact_t(w, x, 1.0, s) - w.benign_mass()) < 1e-2);
  }
}

TEST_CASE("oracle annotation agrees with the generating component") {
  Vec a(2), b(2), c(2);
  a << 0, 0;
  b << 6, 0;
  c << 0, 6;
  const auto w = LabeledMixture::isotropic({0.3, 0.5, 0.2}, {a, b, c}, {0.5, 0.5, 0.5},
                                           {Label::malign, Label::benign, Label::malign});  // 12 sigma apart
  const Draws d = sample(w, 20000, 4);
  const auto labels = oracle_annotate(w, d.points);
  std::size_t agree = 0;
  for (std::size_t j = 0; j < labels.size(); ++j)
    agree += labels[j] == static_cast<int>(w.component(static_cast<std::size_t>(d.component[j])).label);
  CHECK(static_cast<double>(agree) / labels.size() >= 0.999);
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(oracle_annotate(w, w.component(i).mean)[0] == static_cast<int>(w.component(i).label));
}

TEST_CASE("draw statistics") {
  const auto one = preset_world("standard_normal");
  for (int c : sample(one, 100, 1).component) CHECK(c == 0);
  const auto pair = preset_world("symmetric_pair");
  const Draws d = sample(pair, 10000, 2);
  double f0 = 0.0;
  Vec m0 = Vec::Zero(2);
  for (std::size_t j = 0; j < d.component.size(); ++j)
    if (d.component[j] == 0) {
      f0 += 1.0;
      m0 += d.points.col(static_cast<Eigen::Index>(j));
    }
  m0 /= f0;
  CHECK(std::abs(f0 / 10000 - 0.5) <= 3 * std::sqrt(0.25 / 10000));
  const double se = 0.5 / std::sqrt(f0);
  CHECK(std::abs(m0[0] - 3.0) < 3 * se);
  CHECK(std::abs(m0[1]) < 3 * se);
}

TEST_CASE("censored reference renormalization") {
  Vec a(2), b(2), c(2);
  a << -6, 0;
  b << 6, 0;
  c << 0, 6;
  const auto w1 = LabeledMixture::isotropic({0.88, 0.12}, {a, c}, {0.5, 0.5}, {Label::benign, Label::malign});
  const auto r1 = censored_reference(w1);
  REQUIRE(r1.size() == 1);
  CHECK(r1.component(0).weight == 1.0);
  const auto w2 =
      LabeledMixture::isotropic({0.4, 0.48, 0.12}, {a, b, c}, {0.5, 0.5, 0.5}, {Label::benign, Label::benign, Label::malign});
  const auto r2 = censored_reference(w2);
  CHECK(r2.component(0).weight == doctest::Approx(0.4 / 0.88).epsilon(1e-15));
  CHECK(r2.component(1).weight == doctest::Approx(0.48 / 0.88).epsilon(1e-15));
  const auto pure = preset_world("standard_normal");
  const auto same = censored_reference(pure);
  CHECK(same.size() == 1);
  CHECK(same.component(0).weight == 1.0);
  CHECK(same.component(0).mean == pure.component(0).mean);
}

TEST_CASE("grid integration of the censored density") {
  Vec a(2), c(2);
  a << -3, 0;
  c << 3, 0;
  const auto w = LabeledMixture::isotropic({0.88, 0.12}, {a, c}, {0.5, 0.5}, {Label::benign, Label::malign});
  const GridOracle box = GridOracle::covering(w, 512);
  const Marginal m = w.marginal(1.0);
  CHECK(grid_expectation(box, [&](const Points& x) { return Vec(m.log_densities(x).array().exp()); }) ==
        doctest::Approx(1.0).epsilon(1e-4));
  const double kept = grid_expectation(box, [&](const Points& x) {
    const Vec p = m.log_densities(x).array().exp();
    const Vec r = m.log_rewards(x).array().exp();
    return Vec((r.array() >= 0.5).select(p.array(), 0.0));
  });
  CHECK(std::abs(kept - 0.88) <= 0.005);
  CHECK(grid_expectation(box, [](const Points& x) { return Vec(Vec::Zero(x.cols())); }) == 0.0);
}
