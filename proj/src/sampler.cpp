#include "censor/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace censor {

AnalyticEps::AnalyticEps(const LabeledMixture& world, DiffusionGrid grid)
    : dim_(world.dim()), grid_(std::move(grid)) {
  marginals_.reserve(grid_.num_steps() + 1);
  for (std::size_t k = 0; k <= grid_.num_steps(); ++k) marginals_.push_back(world.marginal(grid_.alpha(k)));
}

Points AnalyticEps::eps(const Points& x, std::size_t step) const {
  return -std::sqrt(1.0 - grid_.alpha(step)) * marginals_.at(step).scores(x);
}

Points AnalyticEps::vjp(const Points& x, std::size_t step, const Points& v) const {
  // Jacobian of eps is -sqrt(1 - a) H with H symmetric.
  return -std::sqrt(1.0 - grid_.alpha(step)) * marginals_.at(step).hessian_vector(x, v);
}

NetEps::NetEps(Mlp net, DiffusionGrid grid) : net_(std::move(net)), grid_(std::move(grid)) {
  if (net_.head() != Head::linear || net_.input_width() != net_.output_width() + 1)
    throw ConfigError("eps net must map d+1 inputs to d linear outputs");
}

Points NetEps::eps(const Points& x, std::size_t step) const {
  return net_.logits(with_time(x, grid_.time(step) / grid_.schedule().horizon));
}

Points NetEps::vjp(const Points& x, std::size_t step, const Points& v) const {
  return net_.vjp_input(with_time(x, grid_.time(step) / grid_.schedule().horizon), v).topRows(x.rows());
}

std::string to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::time_dependent: return "time_dependent";
    case GuidanceMode::time_independent: return "time_independent";
  }
  return "none";
}

std::string to_string(JacobianMode m) { return m == JacobianMode::exact_vjp ? "exact_vjp" : "frozen_eps"; }

GuidanceMode guidance_mode_from_string(const std::string& s) {
  if (s == "none") return GuidanceMode::none;
  if (s == "time_dependent") return GuidanceMode::time_dependent;
  if (s == "time_independent") return GuidanceMode::time_independent;
  throw ConfigError("unknown guidance mode '" + s + "'");
}

JacobianMode jacobian_mode_from_string(const std::string& s) {
  if (s == "exact_vjp") return JacobianMode::exact_vjp;
  if (s == "frozen_eps") return JacobianMode::frozen_eps;
  throw ConfigError("unknown jacobian mode '" + s + "'");
}

void GuidanceConfig::validate() const {
  if (!(omega >= 0.0) || !std::isfinite(omega)) throw ConfigError("guidance omega must be >= 0");
  if (recurrence < 1) throw ConfigError("guidance recurrence must be >= 1");
  if (!(backward_step_size >= 0.0)) throw ConfigError("backward step size must be >= 0");
}

nlohmann::json to_json(const GuidanceConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"omega", c.omega},
          {"backward_steps", c.backward_steps},
          {"backward_step_size", c.backward_step_size},
          {"recurrence", c.recurrence},
          {"jacobian", to_string(c.jacobian)},
          {"refine_every_repeat", c.refine_every_repeat}};
}

GuidanceConfig guidance_config_from_json(const nlohmann::json& j) {
  GuidanceConfig c;
  c.mode = guidance_mode_from_string(j.value("mode", std::string("none")));
  c.omega = j.value("omega", c.omega);
  c.backward_steps = j.value("backward_steps", c.backward_steps);
  c.backward_step_size = j.value("backward_step_size", c.backward_step_size);
  c.recurrence = j.value("recurrence", c.recurrence);
  c.jacobian = jacobian_mode_from_string(j.value("jacobian", std::string("exact_vjp")));
  c.refine_every_repeat = j.value("refine_every_repeat", c.refine_every_repeat);
  return c;
}

ChainNoise::ChainNoise(std::uint64_t seed, std::size_t chains, int dim) : dim_(dim) {
  seeds_.reserve(chains);
  engines_.reserve(chains);
  normals_.resize(chains);
  for (std::size_t c = 0; c < chains; ++c) {
    seeds_.push_back(mix_seed(seed, c));
    engines_.emplace_back(seeds_.back());
  }
}

Points ChainNoise::draw() {
  Points z(dim_, static_cast<Eigen::Index>(engines_.size()));
  for (std::size_t c = 0; c < engines_.size(); ++c)
    for (int r = 0; r < dim_; ++r) z(r, static_cast<Eigen::Index>(c)) = normals_[c](engines_[c]);
  return z;
}

Points reverse_drift(const Points& eps_hat, const Points& x, double alpha, double beta) {
  return beta * (eps_hat / std::sqrt(1.0 - alpha) - 0.5 * x);
}

Points guided_eps_timedep(const Points& eps, const Points& x, double alpha, double t,
                          const RewardModel& reward, double omega) {
  if (!reward.time_dependent()) throw ConfigError("time-dependent guidance needs a time-dependent reward");
  // omega * grad first: a K-member ensemble at omega then matches one member at K * omega bit-for-bit
  const Points scaled = omega * reward.grad_log_reward(x, t);
  return eps - std::sqrt(1.0 - alpha) * scaled;
}

Points xhat0(const Points& x, const Points& eps, double alpha) {
  if (alpha < 1e-8) throw NumericError("xhat0: alpha below 1e-8");
  return (x - std::sqrt(1.0 - alpha) * eps) / std::sqrt(alpha);
}

namespace {

Points timeindep_gradient(const EpsModel& model, const Points& x, const Points& eps, std::size_t step,
                          const RewardModel& reward, JacobianMode mode) {
  if (reward.time_dependent()) throw ConfigError("time-independent guidance needs a time-independent reward");
  const double a = model.grid().alpha(step);
  const Points g = reward.grad_log_reward(xhat0(x, eps, a), 0.0);
  if (mode == JacobianMode::frozen_eps) return g / std::sqrt(a);
  return (g - std::sqrt(1.0 - a) * model.vjp(x, step, g)) / std::sqrt(a);
}

Points timeindep_eps(const EpsModel& model, const Points& x, const Points& eps, std::size_t step,
                     const RewardModel& reward, double omega, JacobianMode mode) {
  const Points scaled = omega * timeindep_gradient(model, x, eps, step, reward, mode);
  return eps - std::sqrt(1.0 - model.grid().alpha(step)) * scaled;
}

void check_finite(const Points& x, std::size_t step) {
  if (!x.allFinite()) {
    std::ostringstream os;
    os << "sampler: non-finite state at grid step " << step;
    throw NumericError(os.str());
  }
}

}  // namespace

Points timeindep_guidance_gradient(const EpsModel& model, const Points& x, std::size_t step,
                                   const RewardModel& reward, JacobianMode mode) {
  return timeindep_gradient(model, x, model.eps(x, step), step, reward, mode);
}

Points guided_eps_timeindep(const EpsModel& model, const Points& x, std::size_t step,
                            const RewardModel& reward, double omega, JacobianMode mode) {
  return timeindep_eps(model, x, model.eps(x, step), step, reward, omega, mode);
}

BackwardResult backward_refine(const Points& x, const Points& xhat0_fwd, double alpha,
                               const RewardModel& reward, std::size_t steps, double step_size) {
  if (alpha >= 1.0) throw NumericError("backward_refine: alpha must be < 1");
  Points xh = xhat0_fwd;
  for (std::size_t b = 0; b < steps; ++b) {
    xh += step_size * reward.grad_log_reward(xh, 0.0);
    if (!xh.allFinite()) throw NumericError("backward_refine: non-finite ascent state");
  }
  Points eps = (x - std::sqrt(alpha) * xh) / std::sqrt(1.0 - alpha);
  return {std::move(xh), std::move(eps)};
}

Points reverse_step(const Points& x, const Points& eps_hat, const DiffusionGrid& grid,
                    std::size_t step, const Points* noise) {
  const double b = grid.beta(step);
  const double a = grid.alpha(step);
  Points out = (x - (b / std::sqrt(1.0 - a)) * eps_hat) / std::sqrt(1.0 - b);
  if (noise) out += std::sqrt(b) * *noise;
  return out;
}

Points recurrent_step(const Points& x, const std::function<Points(const Points&)>& reverse,
                      std::size_t repeats, const DiffusionGrid& grid, std::size_t step,
                      ChainNoise& noise) {
  if (repeats < 1) throw ConfigError("recurrence must be >= 1");
  const double b = grid.beta(step);
  Points current = x;
  Points previous;
  for (std::size_t r = 1; r <= repeats; ++r) {
    previous = reverse(current);
    if (r < repeats) current = std::sqrt(1.0 - b) * previous + std::sqrt(b) * noise.draw();
  }
  return previous;
}

SamplerOutput sample_unguided(const EpsModel& model, std::size_t n, std::uint64_t seed) {
  return sample_censored(model, nullptr, GuidanceConfig{}, n, seed);
}

SamplerOutput sample_censored(const EpsModel& model, const RewardModel* reward,
                              const GuidanceConfig& config, std::size_t n, std::uint64_t seed) {
  config.validate();
  if (n == 0) throw std::invalid_argument("sampler: n must be >= 1");
  const bool guided = config.mode != GuidanceMode::none;
  if ((guided || config.backward_steps > 0) && !reward)
    throw ConfigError("guided sampling needs a reward model");
  if (reward && reward->dim() != model.dim()) throw ShapeError("reward and eps model dimensions differ");

  const DiffusionGrid& grid = model.grid();
  ChainNoise noise(seed, n, model.dim());
  Points x = noise.draw();

  for (std::size_t k = grid.num_steps(); k >= 1; --k) {
    const double a = grid.alpha(k);
    std::size_t repeat = 0;
    auto reverse = [&](const Points& xt) -> Points {
      ++repeat;
      const Points eps = model.eps(xt, k);
      Points eps_hat;
      switch (config.mode) {
        case GuidanceMode::none: eps_hat = eps; break;
        case GuidanceMode::time_dependent:
          eps_hat = guided_eps_timedep(eps, xt, a, grid.time(k), *reward, config.omega);
          break;
        case GuidanceMode::time_independent:
          eps_hat = timeindep_eps(model, xt, eps, k, *reward, config.omega, config.jacobian);
          break;
      }
      if (config.backward_steps > 0 && (config.refine_every_repeat || repeat == config.recurrence)) {
        eps_hat = backward_refine(xt, xhat0(xt, eps_hat, a), a, *reward, config.backward_steps,
                                  config.backward_step_size)
                      .eps;
      }
      if (k == 1) return reverse_step(xt, eps_hat, grid, k, nullptr);
      const Points z = noise.draw();
      return reverse_step(xt, eps_hat, grid, k, &z);
    };
    x = config.recurrence == 1 ? reverse(x) : recurrent_step(x, reverse, config.recurrence, grid, k, noise);
    check_finite(x, k);
  }

  SamplerOutput out;
  out.samples = std::move(x);
  out.seeds = noise.seeds();
  out.steps.assign(n, grid.num_steps() * config.recurrence);
  return out;
}

SamplerOutput rejection_sample(const BatchSampler& base, const RewardModel& reward,
                               const RejectionConfig& config, std::uint64_t seed) {
  if (!(config.threshold > 0.0 && config.threshold < 1.0))
    throw ConfigError("rejection threshold must lie in (0, 1)");
  if (config.n_target == 0 || config.max_presented == 0 || config.batch == 0)
    throw ConfigError("rejection sampling needs positive target, cap and batch");

  SamplerOutput out;
  std::vector<Vec> kept;
  std::uint64_t batch_index = 0;
  while (out.accepted < config.n_target && out.presented < config.max_presented) {
    const std::size_t want = std::max(config.batch, 2 * (config.n_target - out.accepted));
    const std::size_t m = std::min(want, config.max_presented - out.presented);
    const SamplerOutput draw = base(m, mix_seed(seed, batch_index++));
    const Vec score = reward.acceptance_score(draw.samples);
    for (Eigen::Index j = 0; j < draw.samples.cols() && out.accepted < config.n_target; ++j) {
      ++out.presented;
      if (score[j] >= config.threshold) {
        ++out.accepted;
        kept.push_back(draw.samples.col(j));
        out.seeds.push_back(draw.seeds.empty() ? 0 : draw.seeds[static_cast<std::size_t>(j)]);
        out.steps.push_back(draw.steps.empty() ? 0 : draw.steps[static_cast<std::size_t>(j)]);
      }
    }
  }
  out.samples.resize(reward.dim(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t j = 0; j < kept.size(); ++j) out.samples.col(static_cast<Eigen::Index>(j)) = kept[j];
  if (out.accepted < config.n_target && out.acceptance_ratio() < config.min_acceptance) {
    std::ostringstream os;
    os << "rejection sampling: acceptance ratio " << out.acceptance_ratio() << " below floor "
       << config.min_acceptance << " after " << out.presented << " draws; returning "
       << out.accepted << " of " << config.n_target;
    out.warnings.push_back(os.str());
  }
  return out;
}

}  // namespace censor
