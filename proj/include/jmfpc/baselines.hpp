#pragma once

#include "jmfpc/mcem.hpp"

#include <string>

namespace jmfpc {

/// Longitudinal-only fit: the joint machinery with the survival term removed.
FitResult fit_longitudinal_only(const Dataset& data, std::shared_ptr<const ModelBases> bases,
                                const TuningParams& tuning, const McemConfig& config);

/// Survival regression with known scores.
struct SurvivalEstimate {
  Eigen::Vector2d hazard_fixed = Eigen::Vector2d::Zero();
  Vector hazard_spline;
  Vector beta;
  Vector eta;
  Vector beta_se;
  Vector eta_se;
  Matrix covariance;  // (a, b, beta, eta)
  int iterations = 0;
};

/// Maximizes the penalized relapse log-likelihood with scores[i] treated as fixed covariates;
/// naive model-based SEs from the inverse negative Hessian.
SurvivalEstimate fit_survival_fixed_scores(const Dataset& data, const ModelBases& bases,
                                           const std::vector<Vector>& scores, double sigma_b2,
                                           const McemConfig& config);

struct TwoStageResult {
  FitResult stage1;
  SurvivalEstimate stage2;
};

TwoStageResult two_stage_fit(const Dataset& data, std::shared_ptr<const ModelBases> bases,
                             const TuningParams& tuning, const McemConfig& config);

struct RawPcaResult {
  Vector grid;
  Vector mean;
  Matrix eigenfunctions;  // grid x n_components, unit L2 norm under trapezoid weights
  Vector eigenvalues;
  Vector explained;  // shares of total variance
  std::vector<Vector> scores;
  SurvivalEstimate stage2;
};

/// PCA of the centered response matrix on a common grid (Gaussian family only), followed by the
/// fixed-score survival fit.
RawPcaResult raw_pca_fit(const Dataset& data, const ModelBases& bases, int n_components, double sigma_b2,
                         const McemConfig& config);

}  // namespace jmfpc
