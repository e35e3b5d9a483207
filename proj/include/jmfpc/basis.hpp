#pragma once

#include "jmfpc/data.hpp"
#include "jmfpc/numeric.hpp"

#include <span>

namespace jmfpc {

/// Cubic (or general-degree) B-splines on equally spaced knots, orthonormalized in L2
/// over the domain so that the Gram matrix of the returned functions is the identity.
class BSplineBasis {
 public:
  BSplineBasis(int q, int degree, Interval domain);

  int size() const { return q_; }
  int degree() const { return degree_; }
  const Interval& domain() const { return domain_; }
  const Vector& interior_knots() const { return interior_; }
  const Vector& knot_vector() const { return knots_; }
  /// Maps raw B-spline values to orthonormalized values: B(t) = T * raw(t).
  const Matrix& ortho_transform() const { return transform_; }

  /// Raw (non-orthonormalized) B-spline values or derivatives; zero outside the domain.
  Vector raw(double t, int derivative = 0) const;
  /// Orthonormalized values or derivatives; throws out_of_domain outside the domain.
  Vector operator()(double t, int derivative = 0) const;
  /// Rows are B(t_j)^T.
  Matrix design(const Vector& times) const;
  /// Exact L2 Gram matrix of the raw basis (or of its derivatives).
  Matrix raw_gram(int derivative = 0) const;

 private:
  int q_;
  int degree_;
  Interval domain_;
  Vector interior_;
  Vector knots_;
  Matrix transform_;
};

struct PenaltyMatrix {
  Matrix matrix;  // int B''(t) B''(t)^T dt
};

BSplineBasis make_orthonormal_bspline(int q, int degree, Interval domain);
Vector eval_basis(const BSplineBasis& basis, double t);
PenaltyMatrix roughness_penalty(const BSplineBasis& basis);

/// Truncated-power linear spline for the log baseline hazard:
/// log lambda0(t) = a0 + a1 t + sum_k b_k (t - kappa_k)_+.
struct HazardBasis {
  Vector knots;
  double support_end = 0.0;  // largest pooled censoring/event time

  int size() const { return static_cast<int>(knots.size()); }
};

/// min(floor(N/4), 30).
int default_hazard_knot_count(std::size_t n_subjects);

/// Knots at the k/(K+1) quantiles of the unique pooled {T^l, T^r, (T^l + T^r)/2}.
HazardBasis make_hazard_basis(std::span<const SurvivalRecord> records, int K);

/// (1, t, (t - kappa_1)_+, ..., (t - kappa_K)_+).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> hazard_design(const Vector& knots, Scalar t) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(knots.size() + 2);
  out[0] = Scalar(1);
  out[1] = t;
  for (Eigen::Index k = 0; k < knots.size(); ++k) {
    const Scalar d = t - Scalar(knots[k]);
    out[k + 2] = d > Scalar(0) ? d : Scalar(0);
  }
  return out;
}

Vector eval_hazard_design(const HazardBasis& basis, double t);

/// Bundle of everything fixed during a fit.
struct ModelBases {
  BSplineBasis longitudinal;
  PenaltyMatrix penalty;
  HazardBasis hazard;
};

/// Builds the longitudinal basis, its penalty and the hazard basis for a dataset.
/// K < 0 selects the default knot count.
ModelBases make_bases(const Dataset& data, int q, int degree, int K);

}  // namespace jmfpc
