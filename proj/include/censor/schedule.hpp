#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "censor/types.hpp"

namespace censor {

/// Linear variance-preserving noise schedule beta(t) on [0, horizon].
struct NoiseSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;
  double horizon = 1.0;

  /// Throws ConfigError unless beta stays positive on the whole horizon.
  void validate() const;

  double beta(double t) const;

  /// Integral of beta over [0, t], closed form.
  double integrated_beta(double t) const;
};

/// alpha_bar(t) = exp(-int_0^t beta). Throws std::domain_error outside [0, T].
double alpha_bar(const NoiseSchedule& schedule, double t);

/// sqrt(a) * x0 + sqrt(1 - a) * eps with a = alpha_bar(t).
Vec forward_noise(const Vec& x0, double t, const Vec& eps, const NoiseSchedule& schedule);

/// Same as above with eps ~ N(0, I) drawn from `rng`.
Vec forward_noise(const Vec& x0, double t, const NoiseSchedule& schedule, std::mt19937_64& rng);

/// Discretization of a schedule on uniform times 0 = t_0 < ... < t_N = T.
///
/// Step betas come from consecutive alpha_bar ratios and the stored
/// alpha_bars are the running product of (1 - beta_k), so the product
/// identity holds bit-for-bit.
class DiffusionGrid {
 public:
  DiffusionGrid(const NoiseSchedule& schedule, std::size_t num_steps);

  std::size_t num_steps() const { return betas_.size() - 1; }
  const NoiseSchedule& schedule() const { return schedule_; }

  double time(std::size_t k) const { return times_[k]; }
  /// alpha_bar at grid index k; alpha(0) == 1.
  double alpha(std::size_t k) const { return alphas_[k]; }
  /// Step beta for the transition k-1 -> k; defined for k >= 1.
  double beta(std::size_t k) const { return betas_[k]; }

  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& alphas() const { return alphas_; }

 private:
  NoiseSchedule schedule_;
  std::vector<double> times_;
  std::vector<double> alphas_;
  std::vector<double> betas_;  // betas_[0] unused (0)
};

DiffusionGrid build_grid(const NoiseSchedule& schedule, std::size_t num_steps);

}  // namespace censor
