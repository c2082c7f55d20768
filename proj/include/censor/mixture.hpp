#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "censor/schedule.hpp"
#include "censor/types.hpp"

namespace censor {

enum class Label : int { malign = 0, benign = 1 };

struct Component {
  double weight = 0.0;
  Vec mean;
  Mat cov;
  Label label = Label::benign;
};

class Marginal;

/// Gaussian mixture whose components carry a benign/malign label.
///
/// Serves as ground truth: its time-t marginals under the VP diffusion are
/// again Gaussian mixtures (means sqrt(a) mu, covariances a Sigma + (1-a) I),
/// so scores, Hessians and the time-dependent reward P(benign | x_t) are all
/// available in closed form.
class LabeledMixture {
 public:
  /// Validates weights (positive, sum to 1 within 1e-9), SPD covariances and
  /// that some benign mass exists. Throws ConfigError otherwise.
  explicit LabeledMixture(std::vector<Component> components);

  static LabeledMixture isotropic(const std::vector<double>& weights, const std::vector<Vec>& means,
                                  const std::vector<double>& sigmas,
                                  const std::vector<Label>& labels);

  int dim() const { return dim_; }
  std::size_t size() const { return components_.size(); }
  const std::vector<Component>& components() const { return components_; }
  const Component& component(std::size_t i) const { return components_[i]; }

  double benign_mass() const;
  double malign_mass() const { return 1.0 - benign_mass(); }
  bool has_malign() const;

  /// Mixture of the forward-diffused components at alpha_bar = alpha.
  Marginal marginal(double alpha) const;
  Marginal marginal_at(double t, const NoiseSchedule& schedule) const;

 private:
  int dim_ = 0;
  std::vector<Component> components_;
};

/// Time-t marginal of a LabeledMixture at a fixed alpha.
///
/// Batch methods take a d x n matrix of points and work column-wise; all
/// log-domain sums are stabilized.
class Marginal {
 public:
  Marginal(const LabeledMixture& world, double alpha);

  int dim() const { return dim_; }
  double alpha() const { return alpha_; }

  double log_density(const Vec& x) const;
  Vec log_densities(const Points& x) const;

  Vec score(const Vec& x) const;
  Points scores(const Points& x) const;

  /// Hessian of log p_t at x; symmetric by construction.
  Mat hessian(const Vec& x) const;
  /// Columns H(x_j) v_j.
  Points hessian_vector(const Points& x, const Points& v) const;

  /// log P(benign | x_t).
  double log_reward(const Vec& x) const;
  Vec log_rewards(const Points& x) const;
  Vec grad_log_reward(const Vec& x) const;
  Points grad_log_rewards(const Points& x) const;

  /// Posterior component probabilities, C x n.
  Mat responsibilities(const Points& x) const;

  /// True where the benign mass is at least the malign mass (ties benign).
  std::vector<int> benign_majority(const Points& x) const;

 private:
  struct Part {
    double log_norm;  // log w - 0.5 log det(2 pi cov)
    Vec mean;
    Mat precision;
    bool benign;
  };

  // C x n log(w_i N_i(x_j)) and the per-component precision-weighted offsets.
  void evaluate(const Points& x, Mat& log_terms, std::vector<Points>* offsets) const;

  int dim_;
  double alpha_;
  std::vector<Part> parts_;
};

/// Column-wise log-sum-exp over the rows selected by `mask` (all if empty).
Vec logsumexp_cols(const Mat& terms, const std::vector<bool>& mask = {});

struct Draws {
  Points points;
  std::vector<int> component;
};

/// n i.i.d. draws; component by weight then a Gaussian draw.
Draws sample(const LabeledMixture& world, std::size_t n, std::uint64_t seed);

Vec score_t(const LabeledMixture& world, const Vec& x, double t, const NoiseSchedule& schedule);
Mat score_jacobian_t(const LabeledMixture& world, const Vec& x, double t,
                     const NoiseSchedule& schedule);
double reward_exact_t(const LabeledMixture& world, const Vec& x, double t,
                      const NoiseSchedule& schedule);

/// 1 (benign) iff P(benign | x) >= 0.5 at t = 0.
std::vector<int> oracle_annotate(const LabeledMixture& world, const Points& points);
int oracle_label(const LabeledMixture& world, const Vec& x);

/// Benign sub-mixture with weights renormalized by the benign mass.
LabeledMixture censored_reference(const LabeledMixture& world);

/// Midpoint-rule integration box for 2-D worlds.
struct GridOracle {
  Eigen::Vector2d lo;
  Eigen::Vector2d hi;
  int resolution = 512;

  /// Box enclosing every component out to 7 marginal standard deviations,
  /// which leaves less than 1e-6 mass outside per component.
  static GridOracle covering(const LabeledMixture& world, int resolution = 512);

  /// Lower bound on the world mass inside the box (union bound per axis).
  double mass_lower_bound(const LabeledMixture& world) const;
};

/// Integral of f over the box; f receives one row of cell centers at a time
/// as a 2 x resolution matrix and returns one value per column.
double grid_expectation(const GridOracle& oracle, const std::function<Vec(const Points&)>& f);

// Preset worlds. Ring placements (radius 6, sigma 0.5) are our choice; the
// malign masses follow the reported baseline proportions.
std::vector<std::string> preset_names();
LabeledMixture preset_world(const std::string& name);

}  // namespace censor
