#include "jmfpc/numeric.hpp"

#include "jmfpc/error.hpp"

#include <algorithm>
#include <iostream>
#include <numbers>

namespace jmfpc {

namespace {
std::ostream* g_warning_sink = &std::cerr;
}

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::out_of_domain: return "out-of-domain";
    case ErrorKind::unsupported_degree: return "unsupported-degree";
    case ErrorKind::cannot_place_knots: return "cannot-place-knots";
    case ErrorKind::nonfinite_hazard: return "nonfinite-hazard";
    case ErrorKind::zero_probability_interval: return "zero-probability-interval";
    case ErrorKind::sampler_failure: return "sampler-failure";
    case ErrorKind::mstep_failure: return "mstep-failure";
    case ErrorKind::degenerate_component: return "degenerate-component";
    case ErrorKind::insufficient_samples: return "insufficient-samples";
    case ErrorKind::singular_design: return "singular-design";
    case ErrorKind::stale_fit: return "stale-fit";
    case ErrorKind::invalid_state: return "invalid-state";
    case ErrorKind::bootstrap_unreliable: return "bootstrap-unreliable";
    case ErrorKind::all_candidates_failed: return "all-candidates-failed";
    case ErrorKind::join_error: return "join-error";
    case ErrorKind::validation_error: return "validation-error";
    case ErrorKind::unsupported_grid: return "unsupported-grid";
    case ErrorKind::config_error: return "config-error";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

void set_warning_sink(std::ostream* sink) { g_warning_sink = sink; }

void warn(std::string_view message) {
  if (g_warning_sink) *g_warning_sink << "[jmfpc] warning: " << message << '\n';
}

QuadratureRule gauss_legendre(int n) {
  require(n >= 1, ErrorKind::invalid_argument, "quadrature order must be positive");
  QuadratureRule rule{Vector(n), Vector(n)};
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      if (n == 1) {
        p1 = x;
        p0 = 1.0;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // Recompute the derivative at the converged root.
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = pk;
    }
    dp = (n == 1) ? 1.0 : n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

double quantile_sorted(std::span<const double> sorted, double prob) {
  require(!sorted.empty(), ErrorKind::invalid_argument, "quantile of empty data");
  require(prob >= 0.0 && prob <= 1.0, ErrorKind::invalid_argument, "quantile probability outside [0,1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

double quantile(std::vector<double> values, double prob) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, prob);
}

double exp_moment(int m, double x) {
  if (std::abs(x) < 2.0) {
    // sum_k x^k / (k! (m + k + 1))
    double term = 1.0, sum = 0.0;
    for (int k = 0; k < 60; ++k) {
      const double add = term / (m + k + 1);
      sum += add;
      if (std::abs(add) < 1e-18 * std::abs(sum)) break;
      term *= x / (k + 1);
    }
    return sum;
  }
  const double ex = std::exp(x);
  const double g0 = std::expm1(x) / x;
  if (m == 0) return g0;
  const double g1 = (ex - g0) / x;
  if (m == 1) return g1;
  return (ex - 2.0 * g1) / x;
}

Matrix orthogonal_complement(const Matrix& frame) {
  const Eigen::Index q = frame.rows();
  const Eigen::Index p = frame.cols();
  Eigen::HouseholderQR<Matrix> qr(frame);
  Matrix full = qr.householderQ() * Matrix::Identity(q, q);
  return full.rightCols(q - p);
}

double trapezoid(const Vector& grid, const Vector& values) {
  double s = 0.0;
  for (Eigen::Index i = 1; i < grid.size(); ++i)
    s += 0.5 * (grid[i] - grid[i - 1]) * (values[i] + values[i - 1]);
  return s;
}

Vector linspace(double lo, double hi, int n) {
  if (n == 1) return Vector::Constant(1, lo);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * i / (n - 1);
  v[n - 1] = hi;
  return v;
}

Vector logspace(double lo, double hi, int n) {
  Vector v = linspace(std::log(lo), std::log(hi), n);
  return v.array().exp().matrix();
}

}  // namespace jmfpc
