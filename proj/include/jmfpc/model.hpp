#pragma once

#include "jmfpc/basis.hpp"
#include "jmfpc/data.hpp"

#include <span>
#include <string>
#include <vector>

namespace jmfpc {

/// All parameters of the joint model.
///
/// X_i(t) = B(t)^T (theta_mu + theta_psi xi_i), xi_i ~ N(0, diag(eigenvalues));
/// hazard lambda0(t) exp(xi^T beta + Z^T eta) with a linear-spline log lambda0.
struct JointParams {
  Vector theta_mu;
  Matrix theta_psi;
  double sigma2_eps = 1.0;  // Gaussian family only
  Vector eigenvalues;
  Eigen::Vector2d hazard_fixed = Eigen::Vector2d::Zero();
  Vector hazard_spline;
  Vector beta;
  Vector eta;

  int q() const { return static_cast<int>(theta_mu.size()); }
  int p() const { return static_cast<int>(theta_psi.cols()); }
  int K() const { return static_cast<int>(hazard_spline.size()); }
  int m() const { return static_cast<int>(eta.size()); }

  static JointParams zeros(int q, int p, int K, int m);
};

struct TuningParams {
  int p = 2;
  double h_mu = 0.0;
  double h_psi = 0.0;
  double sigma_b2 = 1.0;

  void validate(int q) const;
};

/// Coordinates of the unconstrained parameter vector:
/// theta_mu | vec(theta_psi) | sigma2 (Gaussian) | d | a0 a1 | b | beta | eta.
struct ParamLayout {
  int q = 0, p = 0, K = 0, m = 0;
  bool has_sigma = true;

  int theta_mu() const { return 0; }
  int theta_psi() const { return q; }
  int sigma2() const { return q + q * p; }
  int eigenvalues() const { return sigma2() + (has_sigma ? 1 : 0); }
  int hazard_fixed() const { return eigenvalues() + p; }
  int hazard_spline() const { return hazard_fixed() + 2; }
  int beta() const { return hazard_spline() + K; }
  int eta() const { return beta() + p; }
  int size() const { return eta() + m; }
  /// First index of the survival block (a, b, beta, eta).
  int survival() const { return hazard_fixed(); }

  std::vector<std::string> labels() const;
};

ParamLayout layout_of(const JointParams& params, Family family);
Vector pack(const JointParams& params, const ParamLayout& layout);
JointParams unpack(const Vector& packed, const ParamLayout& layout);

// ---------------------------------------------------------------------------
// Baseline hazard

/// Lambda0(t) and its derivatives with respect to (a0, a1, b).
struct HazardIntegral {
  double value = 0.0;
  Vector gradient;  // size K + 2 when requested
  Matrix hessian;   // (K + 2)^2 when requested
};

/// Exact piecewise integral of exp(a0 + a1 u + sum b_k (u - kappa_k)_+) over [0, t].
/// order 0: value only, 1: + gradient, 2: + Hessian.
HazardIntegral integrate_hazard(const Eigen::Vector2d& a, const Vector& b, const Vector& knots, double t,
                                int order);

double cumulative_hazard(const JointParams& params, const HazardBasis& basis, double t);
double log_baseline_hazard(const JointParams& params, const HazardBasis& basis, double t);

/// One relapse log-likelihood term and its partial derivatives with respect to
/// Lambda0(T^l), Lambda0(T^r), log lambda0(T) and the linear predictor.
struct RelapseTerms {
  double value = 0.0;
  double d_left = 0.0, d_right = 0.0, d_loghaz = 0.0, d_lp = 0.0;
  double h_ll = 0.0, h_lr = 0.0, h_rr = 0.0, h_llp = 0.0, h_rlp = 0.0, h_lplp = 0.0;
};

/// Exact events use cum_right = Lambda0(T) and log_haz = log lambda0(T); right censoring uses
/// cum_right = Lambda0(T^r).
RelapseTerms relapse_terms(CensorKind kind, double cum_left, double cum_right, double log_haz, double lp,
                           bool second_order);

// ---------------------------------------------------------------------------
// Likelihood components. Additive constants (-log(2 pi)/2 per Gaussian observation and per
// score dimension) are dropped unless stated.

double latent_value(const JointParams& params, const BSplineBasis& basis, double t, const Vector& xi);
double loglik_long_gaussian(const Subject& subject, const JointParams& params, const BSplineBasis& basis,
                            const Vector& xi);
double loglik_long_binary(const Subject& subject, const JointParams& params, const BSplineBasis& basis,
                          const Vector& xi);
double loglik_long(Family family, const Subject& subject, const JointParams& params, const BSplineBasis& basis,
                   const Vector& xi);
double loglik_relapse(const Subject& subject, const JointParams& params, const HazardBasis& basis,
                      const Vector& xi);
double loglik_frailty(const JointParams& params, const Vector& xi);

double complete_loglik(const Dataset& data, const ModelBases& bases, const JointParams& params,
                       std::span<const Vector> all_xi);
/// Penalty part only: -b'b/(2 sigma_b2) - (h_mu theta_mu' J theta_mu + h_psi sum_l theta_psi_l' J theta_psi_l)/2.
double log_penalty(const JointParams& params, const TuningParams& tuning, const PenaltyMatrix& penalty);
double penalized_loglik(const Dataset& data, const ModelBases& bases, const JointParams& params,
                        const TuningParams& tuning, std::span<const Vector> all_xi);
/// Gradient of penalized_loglik over the ParamLayout coordinates.
Vector grad_penalized_loglik(const Dataset& data, const ModelBases& bases, const JointParams& params,
                             const TuningParams& tuning, std::span<const Vector> all_xi);

// ---------------------------------------------------------------------------
// Evaluation kernels shared by the sampler, the M-step and the information matrix.

struct PreparedSubject {
  const Subject* subject = nullptr;
  Matrix design;    // n_i x q
  Matrix gram;      // B_i' B_i
  Vector design_y;  // B_i' Y_i
  double yy = 0.0;
};

/// Per-fit precomputation. Holds references: `data` and `bases` must outlive it.
struct PreparedData {
  const Dataset* data = nullptr;
  const ModelBases* bases = nullptr;
  std::vector<PreparedSubject> subjects;
  Matrix total_gram;  // sum_i B_i' B_i

  Family family() const { return data->family; }
  std::size_t size() const { return subjects.size(); }
};

PreparedData prepare(const Dataset& data, const ModelBases& bases);

/// Baseline-hazard quantities of one subject at the current (a, b).
struct SurvivalCache {
  bool present = false;
  CensorKind kind = CensorKind::right;
  HazardIntegral left;   // Lambda0(T^l), interval censoring only
  HazardIntegral right;  // Lambda0(T^r) or Lambda0(T)
  double log_haz = 0.0;  // exact events
  Vector event_design;   // hazard design at T (exact events)
  double offset = 0.0;   // Z' eta
};

SurvivalCache survival_cache(const Subject& subject, const JointParams& params, const HazardBasis& basis,
                             int order);

double subject_long_loglik(const PreparedSubject& ps, Family family, const JointParams& params, const Vector& xi);
double subject_relapse_loglik(const SurvivalCache& cache, const JointParams& params, const Vector& xi);
double subject_complete_loglik(const PreparedSubject& ps, Family family, const JointParams& params,
                               const SurvivalCache& cache, const Vector& xi, bool include_survival = true);

/// Adds the gradient of one subject's complete-data log-likelihood (no penalty) at xi.
/// The cache must have been built with order >= 1.
void add_subject_gradient(const PreparedSubject& ps, Family family, const JointParams& params,
                          const ParamLayout& layout, const SurvivalCache& cache, const Vector& xi, Vector& grad,
                          bool include_survival = true);
void add_penalty_gradient(const JointParams& params, const TuningParams& tuning, const PenaltyMatrix& penalty,
                          const ParamLayout& layout, Vector& grad);

}  // namespace jmfpc
