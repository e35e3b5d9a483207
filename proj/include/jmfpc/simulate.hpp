#pragma once

#include "jmfpc/baselines.hpp"
#include "jmfpc/inference.hpp"
#include "jmfpc/selection.hpp"

#include <functional>
#include <optional>
#include <string>

namespace jmfpc {

/// Simulation design: two eigenfunctions on [0, 20], Weibull-type baseline hazard
/// lambda0(t) = t/20, censoring visits at 4, 10 and 20.
struct SimDesign {
  int N = 100;
  int n_obs = 20;
  Family family = Family::gaussian;
  Interval domain{0.0, 20.0};
  Vector eigenvalues = (Vector(2) << 9.0, 2.25).finished();
  double sigma2_eps = 0.49;
  Vector beta = (Vector(2) << 1.0, 1.0).finished();
  double eta = 1.0;
  double p_delta = 0.5;
  std::vector<double> visits{4.0, 10.0, 20.0};
  std::uint64_t seed = 1;
};

double true_mean(double t);
/// l = 0 or 1.
double true_eigenfunction(int l, double t);
double true_cumulative_hazard(double t);
double true_log_hazard(double t);

struct SimTruth {
  std::vector<Vector> xi;
  Vector event_times;
};

struct SimData {
  Dataset data;
  SimTruth truth;
};

SimData generate_dataset(const SimDesign& design);

/// Per-replicate outcome of a simulation study.
struct ReplicateResult {
  bool ok = false;
  std::string error;
  bool converged = false;
  int selected_p = 0;  // AIC choice over p (0 when not selecting)
  TuningParams tuning;
  // joint estimates aligned to the truth
  Vector beta, eigenvalues;
  double eta = 0.0, sigma2_eps = 0.0;
  Vector beta_se, eigenvalue_se;
  double eta_se = 0.0, sigma2_se = 0.0;
  bool louis_indefinite = false;
  Vector imse;  // per eigenfunction
  Matrix psi_grid;  // grid x p
  Vector mu_grid, loghaz_grid;
  // two-stage comparator
  bool two_stage_ok = false;
  Vector beta_two_stage;
  double eta_two_stage = 0.0;
};

/// Fit settings of the simulation design: q = 8 cubic splines, K = 12 hazard knots.
inline McemConfig study_fit_config() {
  McemConfig c;
  c.hazard_knots = 12;
  return c;
}

struct StudyConfig {
  McemConfig fit = study_fit_config();
  TuningParams tuning;  // used when select == false
  bool h_relative = true;  // tuning.h_mu, h_psi and an explicit selection h_grid are multiples of tr(G)/tr(J)
  bool select = false;
  SelectionConfig selection;
  int estimate_p = 2;  // component count whose best fit is reported when selecting over p
  bool two_stage = true;
  bool louis = true;
  int grid_points = 200;
  int workers = 1;
  // called after each replicate finishes (serialized across workers)
  std::function<void(std::size_t, const ReplicateResult&)> on_replicate;
};

struct StudySummary {
  SimDesign design;
  int replicates = 0;
  std::vector<ReplicateResult> results;
  Vector grid;      // longitudinal grid
  Vector haz_grid;  // (0, 20]
};

ReplicateResult run_replicate(const SimDesign& design, const StudyConfig& config, const Vector& grid,
                              const Vector& haz_grid);
StudySummary run_study(const SimDesign& design, int n_replicates, const StudyConfig& config);

/// Writes table1.csv, curves_{mu,psi1,psi2,loghaz}.csv and aic_selection.csv.
void write_study(const StudySummary& summary, const std::string& dir);

/// Sign/order alignment of estimated eigenfunctions (grid x p) to reference functions (grid x r).
/// Returns for each reference column the matched estimate column and its sign.
struct Alignment {
  std::vector<int> index;
  std::vector<double> sign;
};
Alignment align_columns(const Matrix& estimate, const Matrix& reference, const Vector& grid);

}  // namespace jmfpc
