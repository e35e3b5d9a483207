#pragma once

#include "jmfpc/model.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>

namespace jmfpc {

struct TraceRecord {
  int iteration = 0;
  int R = 0;
  double q_hat = 0.0;       // MC average of the penalized complete log-likelihood at the new estimate
  double q_se = 0.0;        // batch-means SE of q_hat
  double delta_q = 0.0;     // Q(new) - Q(old) on the current draws
  double delta_q_se = 0.0;  // batch-means SE of delta_q
  double max_change = 0.0;  // max relative parameter change after normalization
  double noise_ratio = 0.0; // max |change| / MC standard error of the change (0 when exact)
  double acceptance = 0.0;  // post-burn-in MH acceptance rate
  Vector params;            // packed, normalized
  Vector mc_se;             // MC standard errors of the update, same layout
};

/// Controls for a Monte Carlo EM fit.
struct McemConfig {
  // bases
  int q = 8;
  int degree = 3;
  int hazard_knots = -1;  // < 0: default rule

  // sampler
  int R0 = 200;
  int Rmax = 10000;
  double R_growth = 1.5;
  double burn_in_fraction = 0.2;
  double target_acceptance = 0.3;

  // convergence
  double tol = 1e-3;
  double tol_floor = 0.1;  // relative change uses |dtheta| / (|theta| + tol_floor)
  double noise_multiple = 3.0;  // a change below this many MC standard errors counts as noise
  int max_iter = 100;
  int consecutive = 2;

  // M-step
  int newton_max_iter = 50;
  bool parameter_expansion = true;  // re-center and rotate with the score moments after each M-step
  int max_halvings = 50;

  std::uint64_t seed = 1;
  int workers = 1;
  bool include_survival = true;
  int init_max_iter = 30;  // longitudinal-only initializer

  /// Diagnostics channel; called once per completed iteration.
  std::function<void(const TraceRecord&)> on_iteration;
};

/// Random-walk Metropolis state of one subject.
struct MHState {
  Vector xi;
  Vector scale;
  Eigen::VectorXd accepted;  // per component, post-burn-in, last run
  Eigen::VectorXd proposed;
  std::mt19937_64 rng;

  static MHState initial(const Vector& xi, const Vector& eigenvalues, std::uint64_t seed);
  double acceptance() const;
};

/// Stream seed of subject `index` under a master seed.
std::uint64_t subject_seed(std::uint64_t seed, std::size_t index);

/// Log of the per-subject complete-data density as a function of xi, with all
/// xi-independent quantities precomputed.
class SubjectTarget {
 public:
  SubjectTarget(const PreparedSubject& ps, Family family, const JointParams& params, const SurvivalCache& cache,
                bool include_survival);

  int dim() const { return static_cast<int>(inv_d_.size()); }
  double operator()(const Vector& xi) const;
  double longitudinal(const Vector& xi) const;
  double survival(const Vector& xi) const;

 private:
  Family family_;
  // Gaussian: ||r0 - M xi||^2 = rr_ - 2 xi'c_ + xi'G_ xi
  double rr_ = 0.0, inv_two_s2_ = 0.0, long_const_ = 0.0;
  Vector c_;
  Matrix G_;
  // binary
  Vector x0_, y_;
  Matrix M_;
  // frailty
  Vector inv_d_;
  double frail_const_ = 0.0;
  // survival
  bool surv_ = false;
  CensorKind kind_ = CensorKind::right;
  double cum_left_ = 0.0, cum_right_ = 0.0, log_haz_ = 0.0, offset_ = 0.0;
  Vector beta_;
};

/// Runs burn-in (with proposal-scale adaptation) followed by R retained draws.
/// Returns a p x R matrix of draws; the state holds the last draw afterwards.
Matrix sample_scores(const SubjectTarget& target, int R, MHState& state, double burn_in_fraction = 0.2,
                     double target_acceptance = 0.3);
Matrix sample_scores(const Subject& subject, Family family, const JointParams& params, const ModelBases& bases,
                     int R, MHState& state, bool include_survival = true);

/// Monte Carlo sample sets of one E-step.
struct MonteCarloQ {
  std::vector<Matrix> draws;          // p x R per subject
  std::vector<Vector> mean;           // E[xi]
  std::vector<Matrix> second_moment;  // E[xi xi']
  double acceptance = 0.0;
  int R = 0;
  bool exact_moments = false;  // Gaussian longitudinal-only: closed-form posterior moments
};

MonteCarloQ estep(const PreparedData& prepared, const JointParams& params, int R, std::vector<MHState>& states,
                  const McemConfig& config);

/// Per-draw penalized complete log-likelihood summed over subjects (length R).
Vector q_contributions(const PreparedData& prepared, const JointParams& params, const TuningParams& tuning,
                       const MonteCarloQ& mcq, bool include_survival, int workers = 1);

struct MStepInfo {
  int survival_newton_iterations = 0;
  int longitudinal_iterations = 0;
};

/// One M-step (not normalized). Blocks: (theta_mu, Theta_psi) [+ sigma2], d, survival.
JointParams mstep(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                  const TuningParams& tuning, const McemConfig& config, MStepInfo* info = nullptr);

/// Survival block (a, b, beta, eta) maximized by damped Newton with the scores held at the draws.
JointParams maximize_survival(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                              const TuningParams& tuning, const McemConfig& config, int* iterations = nullptr);

/// Hessian of the MC-averaged penalized survival objective in (a0, a1, b, beta, eta).
Matrix survival_hessian(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                        const TuningParams& tuning, int workers = 1);

/// Monte Carlo standard errors of an M-step update in ParamLayout order: the inverse
/// block Hessian of the MC objective applied to the batch-means covariance of its gradient.
/// Zero when the E-step moments are exact.
Vector update_mc_error(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& updated,
                       const TuningParams& tuning, const McemConfig& config);

/// Result of rotating to the orthonormal/eigen parameterization.
struct Normalization {
  JointParams params;
  Matrix A;  // xi' = A xi
};

/// Uses the diagonal covariance diag(d).
Normalization normalize_identifiability(const JointParams& params);
/// Uses an explicit score covariance (full matrix) in place of diag(d).
Normalization normalize_identifiability(const JointParams& params, const Matrix& score_cov);

/// Batch-means standard error of the mean with floor(R^(1/3)) batches.
double mc_error(std::span<const double> values);
inline double mc_error(const Vector& values) { return mc_error(std::span<const double>(values.data(), values.size())); }

struct FitResult {
  JointParams params;
  TuningParams tuning;
  Family family = Family::gaussian;
  std::shared_ptr<const ModelBases> bases;
  std::vector<Vector> score_mean;
  std::vector<Matrix> score_cov;
  MonteCarloQ final_draws;  // E-step at the returned estimate
  std::vector<MHState> states;
  std::vector<TraceRecord> trace;
  bool converged = false;
  int iterations = 0;
  int final_R = 0;
  bool include_survival = true;

  ParamLayout layout() const { return layout_of(params, family); }
};

/// Deterministic starting values (P-spline mean, ridge-projection PCA) with survival at baseline.
JointParams initial_params(const PreparedData& prepared, const TuningParams& tuning);

/// Full fit. When `warm` is given its estimate and sampler states seed the run; otherwise the
/// longitudinal-only fit provides the start.
FitResult fit(const Dataset& data, std::shared_ptr<const ModelBases> bases, const TuningParams& tuning,
              const McemConfig& config, const FitResult* warm = nullptr);
FitResult fit(const Dataset& data, const TuningParams& tuning, const McemConfig& config);

/// Relative change max_j |a_j - b_j| / (|b_j| + floor).
double max_relative_change(const Vector& current, const Vector& previous, double floor);

}  // namespace jmfpc
