#pragma once

#include <optional>
#include <string>
#include <vector>

#include "censor/mixture.hpp"
#include "censor/reward_lab.hpp"

namespace censor {

/// Shortest decimal that parses back to the same double.
std::string format_number(double v);

struct Interval {
  double low = 0.0;
  double high = 1.0;
};

/// Wilson score interval for a binomial proportion (95% by default).
Interval wilson_interval(std::size_t successes, std::size_t n, double z = 1.959963984540054);

struct Occupancy {
  std::vector<std::size_t> benign_components;  // world component indices
  Vec occupancy;   // fraction of samples per benign component
  Vec reference;   // benign weights renormalized by the benign mass
  double malign_occupancy = 0.0;
  double tv = 0.0;
  bool soft = false;
  std::vector<std::string> warnings;
};

/// Assigns samples to the world component with the largest clean posterior.
/// When the closest pair of means is less than 4 sigma apart, falls back to
/// averaging posteriors (soft assignment) and says so in `warnings`.
/// tv = 0.5 (sum_i |occ_i - ref_i| + malign occupancy).
Occupancy mode_occupancy(const Points& samples, const LabeledMixture& world);

struct TrialReport {
  std::size_t n = 0;
  std::size_t malign = 0;
  double malign_fraction = 0.0;
  Interval ci;
  Vec occupancy;
  double occupancy_tv = 0.0;
  std::optional<double> acceptance_ratio;
};

struct ArmReport {
  std::string arm;
  std::vector<TrialReport> trials;
  double mean = 0.0;  // of per-trial malign fractions
  double std = 0.0;   // sample std across trials, 0 for one trial
  std::vector<std::string> warnings;

  std::size_t total() const;
};

/// One trial per entry of `trials`; labels come from `annotator`.
ArmReport evaluate_arm(const std::string& arm, const std::vector<Points>& trials, const LabeledMixture& world,
                       Annotator& annotator, const std::vector<double>& acceptance_ratios = {});

/// Splits `samples` column-wise into `trials` equal blocks.
std::vector<Points> split_trials(const Points& samples, std::size_t trials);

void summarize(ArmReport& report);

struct ArmComparison {
  std::string csv;
  bool monotone = true;  // arm means non-increasing in the given order
  std::vector<std::string> included;
  std::vector<std::string> warnings;
};

inline constexpr const char* kArmCsvHeader =
    "arm,row,n,malign_fraction,std,ci_low,ci_high,occupancy_tv,acceptance_ratio";

/// Per-trial rows and a "mean" row for one arm, without the header.
std::string arm_rows(const ArmReport& arm);

/// Per-trial rows and a "mean" row per arm. Arms without samples are left
/// out with a warning. Throws ConfigError for fewer than two arms.
ArmComparison compare_arms(const std::vector<ArmReport>& arms);

}  // namespace censor
