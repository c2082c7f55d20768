#include "censor/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace censor {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2 pi)

}  // namespace

LabeledMixture::LabeledMixture(std::vector<Component> components)
    : components_(std::move(components)) {
  if (components_.empty()) throw ConfigError("mixture needs at least one component");
  dim_ = static_cast<int>(components_.front().mean.size());
  if (dim_ < 1) throw ConfigError("mixture dimension must be positive");
  double total = 0.0;
  bool any_benign = false;
  for (std::size_t i = 0; i < components_.size(); ++i) {
    const auto& c = components_[i];
    const std::string tag = "component " + std::to_string(i) + ": ";
    if (c.mean.size() != dim_ || c.cov.rows() != dim_ || c.cov.cols() != dim_)
      throw ShapeError(tag + "mean/covariance dimension mismatch");
    if (!(c.weight > 0.0) || !std::isfinite(c.weight)) throw ConfigError(tag + "weight must be > 0");
    if ((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + c.cov.cwiseAbs().maxCoeff()))
      throw ConfigError(tag + "covariance not symmetric");
    Eigen::LLT<Mat> llt(c.cov);
    if (llt.info() != Eigen::Success) throw ConfigError(tag + "covariance not positive definite");
    total += c.weight;
    any_benign = any_benign || c.label == Label::benign;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
  if (!any_benign) throw ConfigError("mixture needs at least one benign component");
}

LabeledMixture LabeledMixture::isotropic(const std::vector<double>& weights,
                                         const std::vector<Vec>& means,
                                         const std::vector<double>& sigmas,
                                         const std::vector<Label>& labels) {
  if (weights.size() != means.size() || weights.size() != sigmas.size() ||
      weights.size() != labels.size())
    throw ShapeError("isotropic mixture: argument lists differ in length");
  std::vector<Component> comps;
  comps.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw ConfigError("isotropic mixture: sigma " + std::to_string(i) + " must be > 0");
    const auto d = means[i].size();
    comps.push_back({weights[i], means[i], sigmas[i] * sigmas[i] * Mat::Identity(d, d), labels[i]});
  }
  return LabeledMixture(std::move(comps));
}

double LabeledMixture::benign_mass() const {
  double b = 0.0;
  for (const auto& c : components_)
    if (c.label == Label::benign) b += c.weight;
  return b;
}

bool LabeledMixture::has_malign() const {
  return std::any_of(components_.begin(), components_.end(),
                     [](const Component& c) { return c.label == Label::malign; });
}

Marginal LabeledMixture::marginal(double alpha) const { return Marginal(*this, alpha); }

Marginal LabeledMixture::marginal_at(double t, const NoiseSchedule& schedule) const {
  return Marginal(*this, alpha_bar(schedule, t));
}

Marginal::Marginal(const LabeledMixture& world, double alpha) : dim_(world.dim()), alpha_(alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::domain_error("marginal: alpha outside (0, 1]");
  const Mat eye = Mat::Identity(dim_, dim_);
  parts_.reserve(world.size());
  for (const auto& c : world.components()) {
    Mat cov = alpha * c.cov + (1.0 - alpha) * eye;
    Eigen::LLT<Mat> llt(cov);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    parts_.push_back({std::log(c.weight) - 0.5 * (logdet + dim_ * kLog2Pi), std::sqrt(alpha) * c.mean,
                      llt.solve(eye), c.label == Label::benign});
  }
}

void Marginal::evaluate(const Points& x, Mat& log_terms, std::vector<Points>* offsets) const {
  require_shape(x.rows() == dim_, "marginal: point dimension mismatch");
  const auto n = x.cols();
  log_terms.resize(static_cast<Eigen::Index>(parts_.size()), n);
  if (offsets) offsets->resize(parts_.size());
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    const auto& p = parts_[i];
    Points diff = x.colwise() - p.mean;
    Points pd = p.precision * diff;
    log_terms.row(static_cast<Eigen::Index>(i)) =
        (p.log_norm - 0.5 * (diff.array() * pd.array()).colwise().sum()).matrix();
    if (offsets) (*offsets)[i] = std::move(pd);
  }
}

Vec logsumexp_cols(const Mat& terms, const std::vector<bool>& mask) {
  Vec out(terms.cols());
  for (Eigen::Index j = 0; j < terms.cols(); ++j) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < terms.rows(); ++i)
      if (mask.empty() || mask[static_cast<std::size_t>(i)]) m = std::max(m, terms(i, j));
    if (!std::isfinite(m)) {
      out[j] = m;
      continue;
    }
    double s = 0.0;
    for (Eigen::Index i = 0; i < terms.rows(); ++i)
      if (mask.empty() || mask[static_cast<std::size_t>(i)]) s += std::exp(terms(i, j) - m);
    out[j] = m + std::log(s);
  }
  return out;
}

Vec Marginal::log_densities(const Points& x) const {
  Mat terms;
  evaluate(x, terms, nullptr);
  return logsumexp_cols(terms);
}

double Marginal::log_density(const Vec& x) const { return log_densities(x)[0]; }

Mat Marginal::responsibilities(const Points& x) const {
  Mat terms;
  evaluate(x, terms, nullptr);
  const Vec lse = logsumexp_cols(terms);
  return (terms.rowwise() - lse.transpose()).array().exp().matrix();
}

Points Marginal::scores(const Points& x) const {
  Mat terms;
  std::vector<Points> pd;
  evaluate(x, terms, &pd);
  const Vec lse = logsumexp_cols(terms);
  Points s = Points::Zero(dim_, x.cols());
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const Eigen::RowVectorXd rho = (terms.row(row) - lse.transpose()).array().exp().matrix();
    s.noalias() -= pd[i] * rho.asDiagonal();
  }
  return s;
}

Vec Marginal::score(const Vec& x) const { return scores(x).col(0); }

Mat Marginal::hessian(const Vec& x) const {
  Mat terms;
  std::vector<Points> pd;
  evaluate(x, terms, &pd);
  const double lse = logsumexp_cols(terms)[0];
  Mat h = Mat::Zero(dim_, dim_);
  Vec s = Vec::Zero(dim_);
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    const double rho = std::exp(terms(static_cast<Eigen::Index>(i), 0) - lse);
    const Vec g = -pd[i].col(0);
    h += rho * (g * g.transpose() - parts_[i].precision);
    s += rho * g;
  }
  h -= s * s.transpose();
  return 0.5 * (h + h.transpose());
}

Points Marginal::hessian_vector(const Points& x, const Points& v) const {
  require_shape(v.rows() == x.rows() && v.cols() == x.cols(), "hessian_vector: shape mismatch");
  Mat terms;
  std::vector<Points> pd;
  evaluate(x, terms, &pd);
  const Vec lse = logsumexp_cols(terms);
  Points hv = Points::Zero(dim_, x.cols());
  Points s = Points::Zero(dim_, x.cols());
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const Eigen::ArrayXd rho = (terms.row(row) - lse.transpose()).array().exp().transpose();
    // g = -P (x - m); contribution rho (g g^T - P) v
    const Eigen::ArrayXd gv = -(pd[i].array() * v.array()).colwise().sum().transpose();
    Points pv = parts_[i].precision * v;
    hv.array() += ((-pd[i]).array().rowwise() * (rho * gv).transpose() -
                   pv.array().rowwise() * rho.transpose());
    s.array() -= pd[i].array().rowwise() * rho.transpose();
  }
  const Eigen::ArrayXd sv = (s.array() * v.array()).colwise().sum().transpose();
  hv.array() -= s.array().rowwise() * sv.transpose();
  return hv;
}

Vec Marginal::log_rewards(const Points& x) const {
  Mat terms;
  evaluate(x, terms, nullptr);
  std::vector<bool> benign(parts_.size());
  for (std::size_t i = 0; i < parts_.size(); ++i) benign[i] = parts_[i].benign;
  return logsumexp_cols(terms, benign) - logsumexp_cols(terms);
}

double Marginal::log_reward(const Vec& x) const { return log_rewards(x)[0]; }

Points Marginal::grad_log_rewards(const Points& x) const {
  Mat terms;
  std::vector<Points> pd;
  evaluate(x, terms, &pd);
  std::vector<bool> benign(parts_.size());
  for (std::size_t i = 0; i < parts_.size(); ++i) benign[i] = parts_[i].benign;
  const Vec lse_all = logsumexp_cols(terms);
  const Vec lse_benign = logsumexp_cols(terms, benign);
  Points g = Points::Zero(dim_, x.cols());
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    Eigen::RowVectorXd coef = -(terms.row(row) - lse_all.transpose()).array().exp().matrix();
    if (parts_[i].benign) coef.array() += (terms.row(row) - lse_benign.transpose()).array().exp();
    // gradient of log N_i is -pd
    g.noalias() -= pd[i] * coef.asDiagonal();
  }
  return g;
}

Vec Marginal::grad_log_reward(const Vec& x) const { return grad_log_rewards(x).col(0); }

std::vector<int> Marginal::benign_majority(const Points& x) const {
  Mat terms;
  evaluate(x, terms, nullptr);
  std::vector<bool> benign(parts_.size()), malign(parts_.size());
  bool any_malign = false;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    benign[i] = parts_[i].benign;
    malign[i] = !parts_[i].benign;
    any_malign = any_malign || malign[i];
  }
  std::vector<int> out(static_cast<std::size_t>(x.cols()), 1);
  if (!any_malign) return out;
  const Vec lb = logsumexp_cols(terms, benign);
  const Vec lm = logsumexp_cols(terms, malign);
  for (Eigen::Index j = 0; j < x.cols(); ++j) out[static_cast<std::size_t>(j)] = lb[j] >= lm[j] ? 1 : 0;
  return out;
}

Draws sample(const LabeledMixture& world, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("sample: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<double> weights;
  std::vector<Mat> chol;
  for (const auto& c : world.components()) {
    weights.push_back(c.weight);
    chol.push_back(Eigen::LLT<Mat>(c.cov).matrixL());
  }
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal;
  Draws out{Points(world.dim(), static_cast<Eigen::Index>(n)), std::vector<int>(n)};
  Vec z(world.dim());
  for (std::size_t j = 0; j < n; ++j) {
    const int i = pick(rng);
    for (int r = 0; r < world.dim(); ++r) z[r] = normal(rng);
    out.points.col(static_cast<Eigen::Index>(j)) = world.component(i).mean + chol[i] * z;
    out.component[j] = i;
  }
  return out;
}

Vec score_t(const LabeledMixture& world, const Vec& x, double t, const NoiseSchedule& schedule) {
  return world.marginal_at(t, schedule).score(x);
}

Mat score_jacobian_t(const LabeledMixture& world, const Vec& x, double t,
                     const NoiseSchedule& schedule) {
  return world.marginal_at(t, schedule).hessian(x);
}

double reward_exact_t(const LabeledMixture& world, const Vec& x, double t,
                      const NoiseSchedule& schedule) {
  return std::exp(world.marginal_at(t, schedule).log_reward(x));
}

std::vector<int> oracle_annotate(const LabeledMixture& world, const Points& points) {
  return world.marginal(1.0).benign_majority(points);
}

int oracle_label(const LabeledMixture& world, const Vec& x) {
  return oracle_annotate(world, x).front();
}

LabeledMixture censored_reference(const LabeledMixture& world) {
  const double b = world.benign_mass();
  std::vector<Component> kept;
  for (const auto& c : world.components()) {
    if (c.label != Label::benign) continue;
    Component copy = c;
    copy.weight = c.weight / b;
    kept.push_back(std::move(copy));
  }
  return LabeledMixture(std::move(kept));
}

GridOracle GridOracle::covering(const LabeledMixture& world, int resolution) {
  if (world.dim() != 2) throw ShapeError("grid oracle supports 2-D worlds only");
  if (resolution < 1) throw std::invalid_argument("grid oracle resolution must be >= 1");
  GridOracle g;
  g.resolution = resolution;
  g.lo.setConstant(std::numeric_limits<double>::infinity());
  g.hi.setConstant(-std::numeric_limits<double>::infinity());
  for (const auto& c : world.components()) {
    for (int a = 0; a < 2; ++a) {
      const double sd = std::sqrt(c.cov(a, a));
      g.lo[a] = std::min(g.lo[a], c.mean[a] - 7.0 * sd);
      g.hi[a] = std::max(g.hi[a], c.mean[a] + 7.0 * sd);
    }
  }
  return g;
}

double GridOracle::mass_lower_bound(const LabeledMixture& world) const {
  double inside = 0.0;
  for (const auto& c : world.components()) {
    double outside = 0.0;
    for (int a = 0; a < 2; ++a) {
      const double sd = std::sqrt(c.cov(a, a));
      const double zl = (c.mean[a] - lo[a]) / sd;
      const double zh = (hi[a] - c.mean[a]) / sd;
      outside += 0.5 * std::erfc(zl / std::numbers::sqrt2) + 0.5 * std::erfc(zh / std::numbers::sqrt2);
    }
    inside += c.weight * std::max(0.0, 1.0 - outside);
  }
  return inside;
}

double grid_expectation(const GridOracle& oracle, const std::function<Vec(const Points&)>& f) {
  const int res = oracle.resolution;
  const double hx = (oracle.hi[0] - oracle.lo[0]) / res;
  const double hy = (oracle.hi[1] - oracle.lo[1]) / res;
  Points row(2, res);
  for (int i = 0; i < res; ++i) row(0, i) = oracle.lo[0] + (i + 0.5) * hx;
  double total = 0.0;
  for (int j = 0; j < res; ++j) {
    row.row(1).setConstant(oracle.lo[1] + (j + 0.5) * hy);
    total += f(row).sum();
  }
  return total * hx * hy;
}

namespace {

LabeledMixture ring_world(int modes, const std::vector<int>& malign_modes, double malign_mass) {
  constexpr double kRadius = 6.0;
  constexpr double kSigma = 0.5;
  const auto n_malign = static_cast<double>(malign_modes.size());
  const double n_benign = modes - n_malign;
  std::vector<double> w;
  std::vector<Vec> mu;
  std::vector<double> sd;
  std::vector<Label> lab;
  for (int i = 0; i < modes; ++i) {
    const bool bad = std::find(malign_modes.begin(), malign_modes.end(), i) != malign_modes.end();
    const double angle = 2.0 * std::numbers::pi * i / modes;
    w.push_back(bad ? malign_mass / n_malign : (1.0 - malign_mass) / n_benign);
    mu.push_back(Eigen::Vector2d(kRadius * std::cos(angle), kRadius * std::sin(angle)));
    sd.push_back(kSigma);
    lab.push_back(bad ? Label::malign : Label::benign);
  }
  return LabeledMixture::isotropic(w, mu, sd, lab);
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"benign_dominant", "malign_dominant", "bedroom_like", "symmetric_pair", "standard_normal"};
}

LabeledMixture preset_world(const std::string& name) {
  if (name == "benign_dominant") return ring_world(8, {0}, 0.119);
  if (name == "malign_dominant") return ring_world(8, {0, 2, 4, 6}, 0.686);
  if (name == "bedroom_like") return ring_world(12, {0, 6}, 0.126);
  if (name == "symmetric_pair")
    return LabeledMixture::isotropic({0.5, 0.5}, {Eigen::Vector2d(3, 0), Eigen::Vector2d(-3, 0)},
                                     {0.5, 0.5}, {Label::benign, Label::malign});
  if (name == "standard_normal")
    return LabeledMixture::isotropic({1.0}, {Eigen::Vector2d(0, 0)}, {1.0}, {Label::benign});
  throw ConfigError("unknown world preset '" + name + "'");
}

}  // namespace censor
