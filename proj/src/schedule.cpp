#include "censor/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace censor {

void NoiseSchedule::validate() const {
  if (!(horizon > 0.0) || !std::isfinite(horizon))
    throw ConfigError("schedule horizon must be positive");
  if (!(beta_min > 0.0) || !(beta_max > 0.0) || !std::isfinite(beta_min) ||
      !std::isfinite(beta_max))
    throw ConfigError("schedule betas must be positive and finite");
}

double NoiseSchedule::beta(double t) const {
  return beta_min + (t / horizon) * (beta_max - beta_min);
}

double NoiseSchedule::integrated_beta(double t) const {
  return beta_min * t + (beta_max - beta_min) * t * t / (2.0 * horizon);
}

double alpha_bar(const NoiseSchedule& schedule, double t) {
  if (!(t >= 0.0 && t <= schedule.horizon))
    throw std::domain_error("alpha_bar: t=" + std::to_string(t) + " outside [0, T]");
  return std::exp(-schedule.integrated_beta(t));
}

Vec forward_noise(const Vec& x0, double t, const Vec& eps, const NoiseSchedule& schedule) {
  require_shape(x0.size() == eps.size(), "forward_noise: x0 and eps differ in dimension");
  const double a = alpha_bar(schedule, t);
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

Vec forward_noise(const Vec& x0, double t, const NoiseSchedule& schedule, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vec eps(x0.size());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
  return forward_noise(x0, t, eps, schedule);
}

DiffusionGrid::DiffusionGrid(const NoiseSchedule& schedule, std::size_t num_steps)
    : schedule_(schedule) {
  if (num_steps == 0) throw std::domain_error("build_grid: need at least one step");
  schedule_.validate();
  times_.resize(num_steps + 1);
  alphas_.resize(num_steps + 1);
  betas_.resize(num_steps + 1);
  times_[0] = 0.0;
  alphas_[0] = 1.0;
  betas_[0] = 0.0;
  for (std::size_t k = 1; k <= num_steps; ++k) {
    times_[k] = k == num_steps
                    ? schedule_.horizon
                    : schedule_.horizon * static_cast<double>(k) / static_cast<double>(num_steps);
    // 1 - alpha_bar(t_k)/alpha_bar(t_{k-1}) without cancellation
    const double d_int =
        schedule_.integrated_beta(times_[k]) - schedule_.integrated_beta(times_[k - 1]);
    betas_[k] = -std::expm1(-d_int);
    alphas_[k] = alphas_[k - 1] * (1.0 - betas_[k]);
  }
}

DiffusionGrid build_grid(const NoiseSchedule& schedule, std::size_t num_steps) {
  return DiffusionGrid(schedule, num_steps);
}

}  // namespace censor
