#include "censor/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace censor {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Interval wilson_interval(std::size_t successes, std::size_t n, double z) {
  if (successes > n) throw std::invalid_argument("wilson_interval: more successes than trials");
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  // the bounds touch 0 and 1 exactly at the extremes, rounding aside
  return {successes == 0 ? 0.0 : std::max(0.0, center - half), successes == n ? 1.0 : std::min(1.0, center + half)};
}

namespace {

double max_sigma(const Mat& cov) {
  Eigen::SelfAdjointEigenSolver<Mat> es(cov, Eigen::EigenvaluesOnly);
  return std::sqrt(es.eigenvalues().maxCoeff());
}

// Smallest distance between means in units of the larger component sigma.
double min_separation(const LabeledMixture& world) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < world.size(); ++i) {
    for (std::size_t j = i + 1; j < world.size(); ++j) {
      const auto& a = world.component(i);
      const auto& b = world.component(j);
      const double s = std::max(max_sigma(a.cov), max_sigma(b.cov));
      best = std::min(best, (a.mean - b.mean).norm() / s);
    }
  }
  return best;
}

}  // namespace

Occupancy mode_occupancy(const Points& samples, const LabeledMixture& world) {
  require_shape(samples.rows() == world.dim(), "mode_occupancy: dimension mismatch");
  Occupancy occ;
  for (std::size_t i = 0; i < world.size(); ++i)
    if (world.component(i).label == Label::benign) occ.benign_components.push_back(i);
  const auto nb = static_cast<Eigen::Index>(occ.benign_components.size());
  occ.occupancy = Vec::Zero(nb);
  occ.reference.resize(nb);
  const double bmass = world.benign_mass();
  for (Eigen::Index k = 0; k < nb; ++k) occ.reference[k] = world.component(occ.benign_components[k]).weight / bmass;

  const auto n = samples.cols();
  if (n == 0) {
    occ.warnings.push_back("no samples");
    occ.tv = 0.5 * occ.reference.sum();
    return occ;
  }
  if (world.size() > 1 && min_separation(world) < 4.0) {
    occ.soft = true;
    occ.warnings.push_back("modes closer than 4 sigma; using soft assignment");
  }

  const Mat resp = world.marginal(1.0).responsibilities(samples);
  Vec mass = Vec::Zero(static_cast<Eigen::Index>(world.size()));
  if (occ.soft) {
    mass = resp.rowwise().sum();
  } else {
    for (Eigen::Index j = 0; j < n; ++j) {
      Eigen::Index best = 0;
      resp.col(j).maxCoeff(&best);
      mass[best] += 1.0;
    }
  }
  mass /= static_cast<double>(n);

  double benign_total = 0.0;
  for (Eigen::Index k = 0; k < nb; ++k) {
    occ.occupancy[k] = mass[static_cast<Eigen::Index>(occ.benign_components[static_cast<std::size_t>(k)])];
    benign_total += occ.occupancy[k];
  }
  occ.malign_occupancy = std::max(0.0, 1.0 - benign_total);
  occ.tv = 0.5 * ((occ.occupancy - occ.reference).cwiseAbs().sum() + occ.malign_occupancy);
  return occ;
}

std::size_t ArmReport::total() const {
  std::size_t s = 0;
  for (const auto& t : trials) s += t.n;
  return s;
}

void summarize(ArmReport& report) {
  const auto k = report.trials.size();
  report.mean = 0.0;
  report.std = 0.0;
  if (k == 0) return;
  for (const auto& t : report.trials) report.mean += t.malign_fraction;
  report.mean /= static_cast<double>(k);
  if (k > 1) {
    double ss = 0.0;
    for (const auto& t : report.trials) ss += (t.malign_fraction - report.mean) * (t.malign_fraction - report.mean);
    report.std = std::sqrt(ss / static_cast<double>(k - 1));
  }
}

std::vector<Points> split_trials(const Points& samples, std::size_t trials) {
  if (trials < 1) throw ConfigError("split_trials: need at least one trial");
  require_shape(samples.cols() % static_cast<Eigen::Index>(trials) == 0,
                "split_trials: sample count not divisible by trial count");
  const auto per = samples.cols() / static_cast<Eigen::Index>(trials);
  std::vector<Points> out;
  for (std::size_t t = 0; t < trials; ++t) out.push_back(samples.middleCols(static_cast<Eigen::Index>(t) * per, per));
  return out;
}

ArmReport evaluate_arm(const std::string& arm, const std::vector<Points>& trials, const LabeledMixture& world,
                       Annotator& annotator, const std::vector<double>& acceptance_ratios) {
  if (!acceptance_ratios.empty() && acceptance_ratios.size() != trials.size())
    throw ShapeError("evaluate_arm: one acceptance ratio per trial");
  ArmReport report;
  report.arm = arm;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    TrialReport t;
    t.n = static_cast<std::size_t>(trials[i].cols());
    if (t.n > 0) {
      const auto labels = annotator.label(trials[i]);
      t.malign = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
      t.malign_fraction = static_cast<double>(t.malign) / static_cast<double>(t.n);
    }
    t.ci = wilson_interval(t.malign, t.n);
    const Occupancy occ = mode_occupancy(trials[i], world);
    t.occupancy = occ.occupancy;
    t.occupancy_tv = occ.tv;
    if (occ.soft && report.warnings.empty()) report.warnings.push_back(occ.warnings.back());
    if (!acceptance_ratios.empty()) t.acceptance_ratio = acceptance_ratios[i];
    report.trials.push_back(std::move(t));
  }
  summarize(report);
  return report;
}

std::string arm_rows(const ArmReport& arm) {
  std::ostringstream os;
  double tv_sum = 0.0, acc_sum = 0.0;
  std::size_t malign = 0, acc_count = 0;
  for (std::size_t i = 0; i < arm.trials.size(); ++i) {
    const auto& t = arm.trials[i];
    os << arm.arm << ',' << i + 1 << ',' << t.n << ',' << format_number(t.malign_fraction) << ",,"
       << format_number(t.ci.low) << ',' << format_number(t.ci.high) << ',' << format_number(t.occupancy_tv) << ','
       << (t.acceptance_ratio ? format_number(*t.acceptance_ratio) : "") << '\n';
    tv_sum += t.occupancy_tv;
    malign += t.malign;
    if (t.acceptance_ratio) {
      acc_sum += *t.acceptance_ratio;
      ++acc_count;
    }
  }
  const Interval pooled = wilson_interval(malign, arm.total());
  const double k = static_cast<double>(std::max<std::size_t>(1, arm.trials.size()));
  os << arm.arm << ",mean," << arm.total() << ',' << format_number(arm.mean) << ',' << format_number(arm.std) << ','
     << format_number(pooled.low) << ',' << format_number(pooled.high) << ',' << format_number(tv_sum / k) << ','
     << (acc_count ? format_number(acc_sum / static_cast<double>(acc_count)) : "") << '\n';
  return os.str();
}

ArmComparison compare_arms(const std::vector<ArmReport>& arms) {
  if (arms.size() < 2) throw ConfigError("compare_arms: need at least two arms");
  ArmComparison cmp;
  std::string csv = std::string(kArmCsvHeader) + "\n";
  std::optional<double> prev;
  for (const auto& arm : arms) {
    if (arm.total() == 0) {
      cmp.warnings.push_back("arm '" + arm.arm + "' has no samples; excluded");
      continue;
    }
    cmp.included.push_back(arm.arm);
    csv += arm_rows(arm);
    if (prev && arm.mean > *prev) cmp.monotone = false;
    prev = arm.mean;
  }
  cmp.csv = std::move(csv);
  return cmp;
}

}  // namespace censor
