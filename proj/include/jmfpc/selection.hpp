#pragma once

#include "jmfpc/mcem.hpp"

#include <map>
#include <string>

namespace jmfpc {

/// trace{(G + h J)^-1 G} with G = sum_i B_i' B_i.
double df_longitudinal(double h, const Matrix& total_gram, const PenaltyMatrix& penalty);
double df_longitudinal(double h, std::span<const Matrix> designs, const PenaltyMatrix& penalty);

/// trace{(sum T_i' T_i + I / sigma_b2)^-1 sum T_i' T_i} with T_i the truncated-power part of the
/// hazard design at the censoring-interval midpoint.
double df_hazard(double sigma_b2, std::span<const SurvivalRecord> records, const HazardBasis& basis);

struct DfBreakdown {
  double df_mu = 0.0;
  double df_psi = 0.0;
  double df_hazard = 0.0;
  int p = 0;
  int m = 0;
  int hazard_fixed = 2;

  /// df_mu + p (df_psi + 1) + df_hazard + m + p + 2.
  double total() const { return df_mu + p * (df_psi + 1.0) + df_hazard + m + p + hazard_fixed; }
};

DfBreakdown df_breakdown(const TuningParams& tuning, const Matrix& total_gram, const Dataset& data,
                         const ModelBases& bases);

struct AicValue {
  double aic = 0.0;
  double expected_loglik = 0.0;  // MC average of the complete-data log-likelihood, constants included
  DfBreakdown df;
};

/// Expected complete-data log-likelihood over the final draws with the Gaussian normalizing
/// constants reinstated.
double expected_complete_loglik(const FitResult& fit, const Dataset& data);
AicValue aic(const FitResult& fit, const Dataset& data);

struct SelectionConfig {
  std::vector<int> p_candidates{1, 2, 3};
  Vector h_grid;      // empty: default
  Vector sigma_grid;  // empty: default
  McemConfig fit;
};

Vector default_h_grid(const Matrix& total_gram, const PenaltyMatrix& penalty, int n = 5);
Vector default_sigma_grid(int n = 5);

struct Candidate {
  TuningParams tuning;
  bool ok = false;
  std::string error;
  bool converged = false;
  int iterations = 0;
  AicValue value;
};

struct AICReport {
  std::vector<Candidate> candidates;
  std::size_t best = 0;
  std::shared_ptr<const FitResult> best_fit;
  std::map<int, std::size_t> best_index_per_p;
  std::map<int, std::shared_ptr<const FitResult>> best_fit_per_p;

  const Candidate& best_candidate() const { return candidates.at(best); }
};

/// True when candidate a is preferred over b: lower AIC, then smaller p, larger h, smaller sigma_b2.
bool preferred(const Candidate& a, const Candidate& b);

AICReport grid_search(const Dataset& data, std::shared_ptr<const ModelBases> bases, const SelectionConfig& config);

}  // namespace jmfpc
