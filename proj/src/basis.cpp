#include "jmfpc/basis.hpp"

#include "jmfpc/error.hpp"

#include <algorithm>
#include <sstream>

namespace jmfpc {

namespace {

// Cox–de Boor values of all degree-k B-splines on `knots` at t (size knots.size() - k - 1).
Vector bspline_values(const Vector& knots, int k, double t, double upper) {
  const Eigen::Index nk = knots.size();
  Vector n0 = Vector::Zero(nk - 1);
  if (t < knots[0] || t > upper) return Vector::Zero(nk - k - 1);
  if (t == upper) {
    // closed right end: the last nonempty span owns the endpoint
    for (Eigen::Index i = nk - 2; i >= 0; --i) {
      if (knots[i] < knots[i + 1]) {
        n0[i] = 1.0;
        break;
      }
    }
  } else {
    for (Eigen::Index i = 0; i < nk - 1; ++i) {
      if (knots[i] <= t && t < knots[i + 1]) {
        n0[i] = 1.0;
        break;
      }
    }
  }
  Vector prev = n0;
  for (int d = 1; d <= k; ++d) {
    Vector cur = Vector::Zero(nk - d - 1);
    for (Eigen::Index i = 0; i < cur.size(); ++i) {
      const double l = knots[i + d] - knots[i];
      const double r = knots[i + d + 1] - knots[i + 1];
      double v = 0.0;
      if (l > 0.0) v += (t - knots[i]) / l * prev[i];
      if (r > 0.0) v += (knots[i + d + 1] - t) / r * prev[i + 1];
      cur[i] = v;
    }
    prev = std::move(cur);
  }
  return prev;
}

Vector bspline_derivative(const Vector& knots, int k, int r, double t, double upper) {
  if (r == 0) return bspline_values(knots, k, t, upper);
  const Eigen::Index n = knots.size() - k - 1;
  if (r > k) return Vector::Zero(n);
  const Vector lower = bspline_derivative(knots, k - 1, r - 1, t, upper);
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double l = knots[i + k] - knots[i];
    const double rr = knots[i + k + 1] - knots[i + 1];
    double v = 0.0;
    if (l > 0.0) v += lower[i] / l;
    if (rr > 0.0) v -= lower[i + 1] / rr;
    out[i] = k * v;
  }
  return out;
}

}  // namespace

BSplineBasis::BSplineBasis(int q, int degree, Interval domain) : q_(q), degree_(degree), domain_(domain) {
  require(degree >= 0, ErrorKind::invalid_argument, "spline degree must be nonnegative");
  require(q >= degree + 1, ErrorKind::invalid_argument, "basis dimension q must be at least degree + 1");
  require(std::isfinite(domain.lower) && std::isfinite(domain.upper) && domain.width() > 0.0,
          ErrorKind::invalid_argument, "spline domain is degenerate");

  const int n_interior = q - degree - 1;
  interior_ = Vector(n_interior);
  for (int i = 0; i < n_interior; ++i)
    interior_[i] = domain.lower + domain.width() * (i + 1) / (n_interior + 1);

  knots_ = Vector(q + degree + 1);
  for (int i = 0; i <= degree; ++i) {
    knots_[i] = domain.lower;
    knots_[q + i] = domain.upper;
  }
  knots_.segment(degree + 1, n_interior) = interior_;

  const Matrix gram = raw_gram(0);
  Eigen::LLT<Matrix> llt(gram);
  require(llt.info() == Eigen::Success, ErrorKind::invalid_argument, "raw B-spline Gram matrix is singular");
  const Matrix lower = llt.matrixL();
  transform_ = lower.triangularView<Eigen::Lower>().solve(Matrix::Identity(q, q));
}

Vector BSplineBasis::raw(double t, int derivative) const {
  return bspline_derivative(knots_, degree_, derivative, t, domain_.upper);
}

Vector BSplineBasis::operator()(double t, int derivative) const {
  if (!domain_.contains(t)) {
    std::ostringstream os;
    os << "t = " << t << " outside [" << domain_.lower << ", " << domain_.upper << "]";
    fail(ErrorKind::out_of_domain, os.str());
  }
  return transform_ * raw(t, derivative);
}

Matrix BSplineBasis::design(const Vector& times) const {
  Matrix out(times.size(), q_);
  for (Eigen::Index j = 0; j < times.size(); ++j) out.row(j) = (*this)(times[j]).transpose();
  return out;
}

Matrix BSplineBasis::raw_gram(int derivative) const {
  // Products of piecewise polynomials of degree <= 2*degree are integrated exactly.
  const QuadratureRule rule = gauss_legendre(std::max(2 * degree_ + 2, 8));
  Matrix gram = Matrix::Zero(q_, q_);
  for (Eigen::Index s = 0; s + 1 < knots_.size(); ++s) {
    const double a = knots_[s], b = knots_[s + 1];
    if (!(b > a)) continue;
    const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    for (Eigen::Index g = 0; g < rule.nodes.size(); ++g) {
      const Vector v = raw(mid + half * rule.nodes[g], derivative);
      gram.noalias() += (half * rule.weights[g]) * v * v.transpose();
    }
  }
  return symmetrize(gram);
}

BSplineBasis make_orthonormal_bspline(int q, int degree, Interval domain) { return {q, degree, domain}; }

Vector eval_basis(const BSplineBasis& basis, double t) { return basis(t); }

PenaltyMatrix roughness_penalty(const BSplineBasis& basis) {
  require(basis.degree() >= 2, ErrorKind::unsupported_degree, "second-derivative penalty needs degree >= 2");
  const Matrix& T = basis.ortho_transform();
  return {symmetrize(T * basis.raw_gram(2) * T.transpose())};
}

int default_hazard_knot_count(std::size_t n_subjects) {
  return static_cast<int>(std::min<std::size_t>(n_subjects / 4, 30));
}

HazardBasis make_hazard_basis(std::span<const SurvivalRecord> records, int K) {
  require(!records.empty(), ErrorKind::invalid_argument, "no survival records");
  require(K >= 1, ErrorKind::invalid_argument, "hazard knot count must be >= 1");
  std::vector<double> pooled;
  pooled.reserve(3 * records.size());
  for (const auto& r : records) {
    pooled.push_back(r.t_left);
    pooled.push_back(r.t_right);
    pooled.push_back(0.5 * (r.t_left + r.t_right));
  }
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
  require(pooled.size() >= 2, ErrorKind::cannot_place_knots, "fewer than two distinct censoring times");

  std::vector<double> knots;
  for (int k = 1; k <= K; ++k) {
    const double kn = quantile_sorted(pooled, static_cast<double>(k) / (K + 1));
    if (knots.empty() || kn > knots.back()) knots.push_back(kn);
  }
  if (static_cast<int>(knots.size()) < K) {
    warn("hazard knots tied; using K = " + std::to_string(knots.size()) + " instead of " + std::to_string(K));
  }
  HazardBasis basis;
  basis.knots = Eigen::Map<const Vector>(knots.data(), static_cast<Eigen::Index>(knots.size()));
  basis.support_end = pooled.back();
  return basis;
}

Vector eval_hazard_design(const HazardBasis& basis, double t) {
  require(t >= 0.0, ErrorKind::invalid_argument, "hazard design at negative time");
  return hazard_design(basis.knots, t);
}

ModelBases make_bases(const Dataset& data, int q, int degree, int K) {
  BSplineBasis longitudinal(q, degree, data.domain);
  PenaltyMatrix penalty = roughness_penalty(longitudinal);
  const auto records = data.survival_records();
  if (records.empty()) return {std::move(longitudinal), std::move(penalty), HazardBasis{}};
  const int k = K < 0 ? std::max(1, default_hazard_knot_count(data.size())) : K;
  return {std::move(longitudinal), std::move(penalty), make_hazard_basis(records, k)};
}

}  // namespace jmfpc
