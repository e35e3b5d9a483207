#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace jmfpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Gauss–Legendre nodes and weights on [-1, 1].
struct QuadratureRule {
  Vector nodes;
  Vector weights;
};

QuadratureRule gauss_legendre(int n);

/// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar log1pexp(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

/// Logistic function 1/(1 + exp(-x)).
template <typename Scalar>
Scalar expit(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

/// Linear-interpolation (type 7) empirical quantile of ascending data.
double quantile_sorted(std::span<const double> sorted, double prob);

/// Same, sorting a copy first.
double quantile(std::vector<double> values, double prob);

/// int_0^1 w^m exp(x w) dw for m = 0, 1, 2.
double exp_moment(int m, double x);

/// Orthonormal basis of the orthogonal complement of the column space of `frame`
/// (assumed orthonormal columns).
Matrix orthogonal_complement(const Matrix& frame);

/// Symmetric-part helper.
inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Trapezoid rule on an arbitrary grid.
double trapezoid(const Vector& grid, const Vector& values);

/// Evenly spaced grid of n points including both ends.
Vector linspace(double lo, double hi, int n);

/// n values log-spaced between lo and hi.
Vector logspace(double lo, double hi, int n);

}  // namespace jmfpc
