#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "censor/mixture.hpp"
#include "censor/mlp.hpp"
#include "censor/reward_model.hpp"
#include "censor/schedule.hpp"

namespace censor {

/// Error network eps(x_t, t) = -sqrt(1 - alpha_t) * score, evaluated on the
/// steps of a fixed grid.
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual int dim() const = 0;
  virtual const DiffusionGrid& grid() const = 0;
  virtual Points eps(const Points& x, std::size_t step) const = 0;
  /// Columns v_j^T d eps / d x at x_j.
  virtual Points vjp(const Points& x, std::size_t step, const Points& v) const = 0;
};

/// Exact error network of a labeled mixture; marginals cached per grid step.
class AnalyticEps final : public EpsModel {
 public:
  AnalyticEps(const LabeledMixture& world, DiffusionGrid grid);

  int dim() const override { return dim_; }
  const DiffusionGrid& grid() const override { return grid_; }
  Points eps(const Points& x, std::size_t step) const override;
  Points vjp(const Points& x, std::size_t step, const Points& v) const override;

 private:
  int dim_;
  DiffusionGrid grid_;
  std::vector<Marginal> marginals_;
};

/// Learned error network: linear-head Mlp on (x, t/T).
class NetEps final : public EpsModel {
 public:
  NetEps(Mlp net, DiffusionGrid grid);

  int dim() const override { return net_.output_width(); }
  const DiffusionGrid& grid() const override { return grid_; }
  Points eps(const Points& x, std::size_t step) const override;
  Points vjp(const Points& x, std::size_t step, const Points& v) const override;

  const Mlp& net() const { return net_; }

 private:
  Mlp net_;
  DiffusionGrid grid_;
};

enum class GuidanceMode { none, time_dependent, time_independent };
enum class JacobianMode { exact_vjp, frozen_eps };

std::string to_string(GuidanceMode m);
std::string to_string(JacobianMode m);
GuidanceMode guidance_mode_from_string(const std::string& s);
JacobianMode jacobian_mode_from_string(const std::string& s);

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::none;
  double omega = 1.0;
  std::size_t backward_steps = 0;
  double backward_step_size = 2e-4;
  std::size_t recurrence = 1;
  JacobianMode jacobian = JacobianMode::exact_vjp;
  // Re-run backward refinement on every recurrence repeat (false: last only).
  bool refine_every_repeat = true;

  void validate() const;
};

nlohmann::json to_json(const GuidanceConfig& c);
GuidanceConfig guidance_config_from_json(const nlohmann::json& j);

struct SamplerOutput {
  Points samples;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> steps;
  std::size_t accepted = 0;
  std::size_t presented = 0;
  std::vector<std::string> warnings;

  std::size_t size() const { return static_cast<std::size_t>(samples.cols()); }
  double acceptance_ratio() const {
    return presented == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(presented);
  }
};

/// One independent N(0, I) stream per chain, seeded by mix_seed(seed, chain).
class ChainNoise {
 public:
  ChainNoise(std::uint64_t seed, std::size_t chains, int dim);
  Points draw();
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }

 private:
  int dim_;
  std::vector<std::uint64_t> seeds_;
  std::vector<std::mt19937_64> engines_;
  std::vector<std::normal_distribution<double>> normals_;
};

/// Reverse-SDE drift beta_t (eps_hat / sqrt(1 - alpha_t) - x / 2).
Points reverse_drift(const Points& eps_hat, const Points& x, double alpha, double beta);

/// eps - omega sqrt(1 - alpha) grad log r_t(x).
Points guided_eps_timedep(const Points& eps, const Points& x, double alpha, double t,
                          const RewardModel& reward, double omega);

/// (x - sqrt(1 - alpha) eps) / sqrt(alpha); throws NumericError for alpha < 1e-8.
Points xhat0(const Points& x, const Points& eps, double alpha);

/// Universal guidance through the denoised estimate:
/// eps - omega sqrt(1 - alpha) grad_x log r(xhat0(x)).
Points guided_eps_timeindep(const EpsModel& model, const Points& x, std::size_t step,
                            const RewardModel& reward, double omega, JacobianMode mode);

/// grad_x log r(xhat0(x)) for either Jacobian treatment; exposed for tests.
Points timeindep_guidance_gradient(const EpsModel& model, const Points& x, std::size_t step,
                                   const RewardModel& reward, JacobianMode mode);

struct BackwardResult {
  Points xhat0;
  Points eps;
};

/// B fixed-size ascent steps on log r (clean reward) from xhat0_fwd, then the
/// error vector that reconstructs x_t from the refined estimate.
BackwardResult backward_refine(const Points& x, const Points& xhat0_fwd, double alpha,
                               const RewardModel& reward, std::size_t steps, double step_size);

/// Ancestral step k -> k-1; `noise` may be null (final step).
Points reverse_step(const Points& x, const Points& eps_hat, const DiffusionGrid& grid,
                    std::size_t step, const Points* noise);

/// Repeat (reverse step, forward re-noise over one grid step) R times and
/// return the last reverse-step result.
Points recurrent_step(const Points& x, const std::function<Points(const Points&)>& reverse,
                      std::size_t repeats, const DiffusionGrid& grid, std::size_t step,
                      ChainNoise& noise);

SamplerOutput sample_unguided(const EpsModel& model, std::size_t n, std::uint64_t seed);

/// Full guided ancestral run. `reward` may be null only for mode none.
SamplerOutput sample_censored(const EpsModel& model, const RewardModel* reward,
                              const GuidanceConfig& config, std::size_t n, std::uint64_t seed);

using BatchSampler = std::function<SamplerOutput(std::size_t n, std::uint64_t seed)>;

struct RejectionConfig {
  double threshold = 0.5;
  std::size_t n_target = 1000;
  std::size_t max_presented = 100000;
  double min_acceptance = 1e-3;
  std::size_t batch = 256;
};

/// Draw from `base` and keep samples whose acceptance score reaches the
/// threshold, until n_target are kept or max_presented were drawn.
SamplerOutput rejection_sample(const BatchSampler& base, const RewardModel& reward,
                               const RejectionConfig& config, std::uint64_t seed);

}  // namespace censor
