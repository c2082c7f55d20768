#include <doctest.h>

#include <random>

#include "censor/reward_model.hpp"
#include "censor/sampler.hpp"
#include "../support.hpp"

using namespace censor;

namespace {

LabeledMixture pair_world() { return preset_world("symmetric_pair"); }

NetReward random_reward(bool time_dependent, std::uint64_t seed) {
  return NetReward(Mlp({time_dependent ? 3 : 2, 8, 8, 1}, Head::sigmoid, seed), time_dependent);
}

// grad log r is a fixed vector everywhere
class ConstantGradReward final : public RewardModel {
 public:
  explicit ConstantGradReward(Vec g) : g_(std::move(g)) {}
  bool time_dependent() const override { return true; }
  int dim() const override { return static_cast<int>(g_.size()); }
  Vec log_reward(const Points& x, double) const override { return -(g_.transpose() * x).transpose().array().abs(); }
  Points grad_log_reward(const Points& x, double) const override { return g_.replicate(1, x.cols()); }

 private:
  Vec g_;
};

// eps(x) = x on every step
class IdentityEps final : public EpsModel {
 public:
  explicit IdentityEps(DiffusionGrid grid) : grid_(std::move(grid)) {}
  int dim() const override { return 2; }
  const DiffusionGrid& grid() const override { return grid_; }
  Points eps(const Points& x, std::size_t) const override { return x; }
  Points vjp(const Points&, std::size_t, const Points& v) const override { return v; }

 private:
  DiffusionGrid grid_;
};

double cov_error(const Points& s) {
  const Vec mean = s.rowwise().mean();
  const Points c = s.colwise() - mean;
  const Mat cov = c * c.transpose() / static_cast<double>(s.cols() - 1);
  return (cov - Mat::Identity(2, 2)).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("analytic eps is -sqrt(1 - a) times the score") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 100));
  const Points x = Points::Random(2, 5) * 2.0;
  for (std::size_t k : {1u, 30u, 100u}) {
    const double a = eps.grid().alpha(k);
    const Points ref = -std::sqrt(1 - a) * w.marginal(a).scores(x);
    CHECK((eps.eps(x, k) - ref).norm() <= 1e-14 * std::max(1.0, ref.norm()));
  }
}

TEST_CASE("analytic eps VJP matches finite differences") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 50));
  const Vec x = Vec::Random(2);
  const Vec v = Vec::Random(2);
  const Mat J = oracle::fd_jacobian([&](const Vec& p) { return Vec(eps.eps(p, 10)); }, x);
  CHECK(oracle::rel_err(Vec(eps.vjp(x, 10, v)), Vec(J.transpose() * v)) < 1e-7);
}

TEST_CASE("chain noise depends only on the chain index") {
  ChainNoise small(7, 3, 2), big(7, 10, 2);
  for (int step = 0; step < 4; ++step) {
    const Points a = small.draw(), b = big.draw();
    CHECK(a == b.leftCols(3));
  }
}

TEST_CASE("unguided sampling is deterministic and prefix stable") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 60));
  const auto a = sample_unguided(eps, 40, 3);
  const auto b = sample_unguided(eps, 40, 3);
  const auto c = sample_unguided(eps, 10, 3);
  CHECK(a.samples == b.samples);
  CHECK(a.samples.leftCols(10) == c.samples);
  CHECK(a.seeds.size() == 40);
  CHECK(a.samples.allFinite());
}

TEST_CASE("time-dependent guidance formula") {
  const auto w = pair_world();
  const ExactReward r(w, NoiseSchedule{}, true);
  const Points x = Points::Random(2, 4);
  const Points e = Points::Random(2, 4);
  const double a = 0.4, t = 0.2;
  const Points g = guided_eps_timedep(e, x, a, t, r, 3.0);
  CHECK(oracle::rel_err(Vec(g.reshaped()), Vec((e - 3.0 * std::sqrt(1 - a) * r.grad_log_reward(x, t)).reshaped())) < 1e-14);
}

TEST_CASE("exact guidance turns the full drift into the benign sub-mixture drift") {
  const auto w = preset_world("benign_dominant");
  const NoiseSchedule s;
  const DiffusionGrid grid(s, 200);
  const AnalyticEps full(w, grid), benign(censored_reference(w), grid);
  const ExactReward r(w, s, true);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 4.0);
  for (std::size_t k : {1u, 50u, 150u, 200u}) {
    Points x(2, 25);
    for (Eigen::Index j = 0; j < x.size(); ++j) x.data()[j] = nd(rng);
    const double a = grid.alpha(k);
    const Points g = guided_eps_timedep(full.eps(x, k), x, a, grid.time(k), r, 1.0);
    const Points d1 = reverse_drift(g, x, a, s.beta(grid.time(k)));
    const Points d2 = reverse_drift(benign.eps(x, k), x, a, s.beta(grid.time(k)));
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      CHECK(oracle::rel_err(Vec(d1.col(j)), Vec(d2.col(j))) < 1e-8);
  }
}

TEST_CASE("xhat0 inverts forward noise") {
  const Vec x0 = Vec::Random(3), e = Vec::Random(3);
  const double a = 0.3;
  const Vec xt = std::sqrt(a) * x0 + std::sqrt(1 - a) * e;
  CHECK(oracle::rel_err(Vec(xhat0(xt, e, a)), x0) < 1e-14);
  CHECK_THROWS_AS(xhat0(xt, e, 1e-9), NumericError);
}

TEST_CASE("time-independent guidance gradient through xhat0") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 100));
  const auto r = random_reward(false, 3);
  const std::size_t k = 20;
  const double a = eps.grid().alpha(k);
  const Vec x = Vec::Random(2);
  const auto objective = [&](const Vec& p) {
    const Points xh = xhat0(p, eps.eps(p, k), a);
    return r.log_reward(xh, 0.0)[0];
  };
  const Vec fd = oracle::fd_gradient(objective, x, 1e-6);
  const Vec exact = timeindep_guidance_gradient(eps, x, k, r, JacobianMode::exact_vjp);
  CHECK(oracle::rel_err(exact, fd) < 1e-6);
  // frozen eps drops the Jacobian of eps: gradient is grad log r / sqrt(a)
  const Vec frozen = timeindep_guidance_gradient(eps, x, k, r, JacobianMode::frozen_eps);
  const Vec xh = xhat0(x, eps.eps(x, k), a);
  CHECK(oracle::rel_err(frozen, Vec(r.grad_log_reward(xh, 0.0) / std::sqrt(a))) < 1e-12);
}

TEST_CASE("backward refinement raises log r and reconstructs x_t") {
  const auto w = pair_world();
  const ExactReward r(w, NoiseSchedule{}, false);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 2.0);
  Points x(2, 50), xh(2, 50);
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    x.data()[j] = nd(rng);
    xh.data()[j] = nd(rng);
  }
  const double a = 0.5;
  const BackwardResult br = backward_refine(x, xh, a, r, 5, 0.05);
  const Vec before = r.log_reward(xh, 0.0), after = r.log_reward(br.xhat0, 0.0);
  for (Eigen::Index j = 0; j < before.size(); ++j) CHECK(after[j] >= before[j]);
  CHECK((xhat0(x, br.eps, a) - br.xhat0).norm() < 1e-10);
}

TEST_CASE("recurrence with R = 1 is a plain reverse step") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 30));
  const Points x = Points::Random(2, 6);
  ChainNoise n1(5, 6, 2), n2(5, 6, 2);
  const auto rev = [&](const Points& p) {
    const Points z = n1.draw();
    return reverse_step(p, eps.eps(p, 10), eps.grid(), 10, &z);
  };
  const Points a = recurrent_step(x, rev, 1, eps.grid(), 10, n2);
  ChainNoise n3(5, 6, 2);
  const Points z = n3.draw();
  CHECK(a == reverse_step(x, eps.eps(x, 10), eps.grid(), 10, &z));
}

TEST_CASE("guidance config validation") {
  GuidanceConfig g;
  g.omega = -1.0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g.omega = 1.0;
  g.recurrence = 0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 10));
  GuidanceConfig td;
  td.mode = GuidanceMode::time_dependent;
  CHECK_THROWS_AS(sample_censored(eps, nullptr, td, 4, 1), ConfigError);
  const NetReward r3(Mlp({4, 1}, Head::sigmoid, 1), true);  // 3-D reward on a 2-D model
  CHECK_THROWS_AS(sample_censored(eps, &r3, td, 4, 1), ShapeError);
  CHECK_THROWS(sample_unguided(eps, 0, 1));
}

TEST_CASE("rejection sampling keeps only accepted draws") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 80));
  const ExactReward r(w, NoiseSchedule{}, false);
  const BatchSampler base = [&](std::size_t k, std::uint64_t s) { return sample_unguided(eps, k, s); };
  RejectionConfig rc;
  rc.n_target = 200;
  const auto out = rejection_sample(base, r, rc, 5);
  CHECK(out.size() == 200);
  CHECK(out.accepted == 200);
  CHECK(out.presented >= 200);
  const Vec score = r.acceptance_score(out.samples);
  CHECK((score.array() >= 0.5).all());
  const auto again = rejection_sample(base, r, rc, 5);
  CHECK(again.samples == out.samples);

  Mlp dead = Mlp::zeros({2, 1}, Head::sigmoid);
  Vec p(3);
  p << 0.0, 0.0, -50.0;  // r = sigmoid(-50) everywhere
  dead.set_params(p);
  const NetReward never(dead, false);
  rc.max_presented = 2000;
  const auto none = rejection_sample(base, never, rc, 5);
  CHECK(none.size() == 0);
  CHECK(none.presented == 2000);
  CHECK_FALSE(none.warnings.empty());
  rc.threshold = 1.0;
  CHECK_THROWS_AS(rejection_sample(base, r, rc, 5), ConfigError);
}

TEST_CASE("guided eps special cases") {
  Vec g(2);
  g << 2.0, 0.0;
  const ConstantGradReward r(g);
  Points x(2, 1), e(2, 1);
  x << 0.3, 0.3;
  e << 1.0, 0.0;
  CHECK(guided_eps_timedep(e, x, 0.75, 0.1, r, 1.0).norm() == 0.0);
  CHECK(guided_eps_timedep(e, x, 0.75, 0.1, r, 0.0) == e);
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 40));
  const auto ti = random_reward(false, 1);
  const Points y = Points::Random(2, 7);
  for (auto mode : {JacobianMode::exact_vjp, JacobianMode::frozen_eps})
    CHECK(guided_eps_timeindep(eps, y, 12, ti, 0.0, mode) == eps.eps(y, 12));
}

TEST_CASE("xhat0 at alpha 1 and for a single Gaussian") {
  const Points x = Points::Random(2, 5);
  CHECK(xhat0(x, Points::Random(2, 5), 1.0) == x);
  const double s = 1.5;
  const auto w = LabeledMixture::isotropic({1.0}, {Vec::Zero(2)}, {s}, {Label::benign});
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 100));
  for (std::size_t k : {5u, 40u, 90u}) {
    const double a = eps.grid().alpha(k);
    const Points post = std::sqrt(a) * s * s / (a * s * s + 1 - a) * x;
    CHECK((xhat0(x, eps.eps(x, k), a) - post).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("time-independent gradient on stub and Gaussian models") {
  const IdentityEps lin(DiffusionGrid(NoiseSchedule{}, 50));
  const auto r = random_reward(false, 6);
  const std::size_t k = 25;
  const double a = lin.grid().alpha(k);
  const Vec x = Vec::Random(2);
  const Vec fd = oracle::fd_gradient(
      [&](const Vec& p) { return r.log_reward(xhat0(p, lin.eps(p, k), a), 0.0)[0]; }, x);
  CHECK(oracle::rel_err(Vec(timeindep_guidance_gradient(lin, x, k, r, JacobianMode::exact_vjp)), fd) <= 1e-4);

  const double s = 0.8;
  const auto w = LabeledMixture::isotropic({1.0}, {Vec::Zero(2)}, {s}, {Label::benign});
  const AnalyticEps g(w, DiffusionGrid(NoiseSchedule{}, 50));
  const double ag = g.grid().alpha(k);
  const Vec exact = timeindep_guidance_gradient(g, x, k, r, JacobianMode::exact_vjp);
  const Vec frozen = timeindep_guidance_gradient(g, x, k, r, JacobianMode::frozen_eps);
  CHECK(oracle::rel_err(exact, Vec(frozen * (ag * s * s / (ag * s * s + 1 - ag)))) < 1e-12);
}

TEST_CASE("backward refinement: zero step and small-step ascent") {
  const auto r = random_reward(false, 2);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 2.0);
  Points x(2, 100), xh(2, 100);
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    x.data()[j] = nd(rng);
    xh.data()[j] = nd(rng);
  }
  CHECK(backward_refine(x, xh, 0.6, r, 5, 0.0).xhat0 == xh);
  const BackwardResult br = backward_refine(x, xh, 0.6, r, 5, 1e-4);
  const Vec before = r.log_reward(xh, 0.0), after = r.log_reward(br.xhat0, 0.0);
  for (Eigen::Index j = 0; j < before.size(); ++j) CHECK(after[j] >= before[j]);
}

TEST_CASE("unguided two-mode occupancy and single-chain reproducibility") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 250));
  const auto out = sample_unguided(eps, 4000, 12);
  const double right = (out.samples.row(0).array() > 0.0).cast<double>().mean();
  CHECK(std::abs(right - 0.5) <= 3 * std::sqrt(0.25 / 4000));
  CHECK(sample_unguided(eps, 1, 77).samples == sample_unguided(eps, 1, 77).samples);
}

TEST_CASE("recurrence leaves an unguided standard normal in place") {
  const auto w = preset_world("standard_normal");
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 100));
  GuidanceConfig c;
  c.recurrence = 4;
  const auto out = sample_censored(eps, nullptr, c, 10000, 3);
  CHECK(cov_error(out.samples) <= 0.05);
  CHECK(out.samples.rowwise().mean().norm() <= 0.05);
}

TEST_CASE("guided recurrence is deterministic") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 30));
  const ExactReward r(w, NoiseSchedule{}, false);
  GuidanceConfig c;
  c.mode = GuidanceMode::time_independent;
  c.recurrence = 3;
  c.backward_steps = 2;
  const auto a = sample_censored(eps, &r, c, 16, 5);
  const auto b = sample_censored(eps, &r, c, 16, 5);
  CHECK(a.samples == b.samples);
}

TEST_CASE("zero guidance weight reproduces the unguided sampler") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 40));
  const ExactReward td(w, NoiseSchedule{}, true), ti(w, NoiseSchedule{}, false);
  const auto plain = sample_unguided(eps, 32, 8);
  GuidanceConfig c;
  c.omega = 0.0;
  c.mode = GuidanceMode::time_dependent;
  CHECK(sample_censored(eps, &td, c, 32, 8).samples == plain.samples);
  c.mode = GuidanceMode::time_independent;
  CHECK(sample_censored(eps, &ti, c, 32, 8).samples == plain.samples);
}

TEST_CASE("rejection thresholds near 0 and 0.8") {
  const auto w = pair_world();
  const AnalyticEps eps(w, DiffusionGrid(NoiseSchedule{}, 40));
  const ExactReward r(w, NoiseSchedule{}, false);
  const BatchSampler base = [&](std::size_t k, std::uint64_t s) { return sample_unguided(eps, k, s); };
  RejectionConfig rc;
  rc.n_target = 300;
  rc.threshold = 1e-300;
  const auto all = rejection_sample(base, r, rc, 2);
  CHECK(all.accepted == all.presented);
  CHECK(all.size() == 300);
  rc.threshold = 0.8;
  const auto hi = rejection_sample(base, r, rc, 2);
  CHECK(hi.size() == 300);
  CHECK((r.acceptance_score(hi.samples).array() >= 0.8).all());
  CHECK(hi.accepted <= hi.presented);
}
