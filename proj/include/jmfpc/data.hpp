#pragma once

#include "jmfpc/numeric.hpp"

#include <optional>
#include <string>
#include <vector>

namespace jmfpc {

enum class Family { gaussian, binary };

std::string_view to_string(Family family);
Family parse_family(std::string_view name);

/// Closed observation window for the longitudinal process.
struct Interval {
  double lower = 0.0;
  double upper = 1.0;

  double width() const { return upper - lower; }
  bool contains(double t) const { return t >= lower && t <= upper; }
};

enum class CensorKind { exact, interval, right };

/// Observed relapse information (T^l, T^r, delta).
///
/// delta = 0 with T^l = T^r is right censoring at T^r; delta = 1 with T^l < T^r is
/// interval censoring; delta = 1 with T^l = T^r is an exactly observed event.
struct SurvivalRecord {
  double t_left = 0.0;
  double t_right = 0.0;
  int delta = 0;

  CensorKind kind() const {
    if (delta == 0) return CensorKind::right;
    return t_left == t_right ? CensorKind::exact : CensorKind::interval;
  }
  bool exact_event() const { return kind() == CensorKind::exact; }
  /// Midpoint of the censoring interval (event time for exact events, T^r when right censored).
  double midpoint() const {
    switch (kind()) {
      case CensorKind::interval: return 0.5 * (t_left + t_right);
      default: return t_right;
    }
  }
};

struct Subject {
  std::string id;
  Vector times;
  Vector responses;
  Vector covariates;
  std::optional<SurvivalRecord> survival;

  Eigen::Index n_obs() const { return times.size(); }
};

struct Dataset {
  Family family = Family::gaussian;
  Interval domain;
  std::vector<std::string> covariate_names;
  std::vector<Subject> subjects;

  std::size_t size() const { return subjects.size(); }
  int n_covariates() const { return static_cast<int>(covariate_names.size()); }
  std::vector<SurvivalRecord> survival_records() const;
  /// Subset (with repetition) by index, used for bootstrap resampling.
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

/// Throws validation_error when a subject breaks the data invariants.
void validate(const Dataset& data);

}  // namespace jmfpc
