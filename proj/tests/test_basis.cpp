#include "oracles.hpp"

#include <doctest.h>

#include "jmfpc/basis.hpp"
#include "jmfpc/error.hpp"

using namespace jmfpc;

namespace {

std::vector<double> breakpoints(const BSplineBasis& b) {
  std::vector<double> v(b.interior_knots().data(), b.interior_knots().data() + b.interior_knots().size());
  return v;
}

Matrix quadrature_gram(const BSplineBasis& b, bool raw, int derivative = 0) {
  const int q = b.size();
  Matrix G(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = i; j < q; ++j) {
      auto f = [&](double t) {
        const Vector v = raw ? b.raw(t, derivative) : b(t, derivative);
        return v[i] * v[j];
      };
      G(i, j) = G(j, i) = oracle::integrate_pieces(f, breakpoints(b), b.domain().lower, b.domain().upper);
    }
  return G;
}

// Projection coefficients theta_k = int B_k f.
Vector project(const BSplineBasis& b, const std::function<double(double)>& f) {
  Vector th(b.size());
  for (int k = 0; k < b.size(); ++k)
    th[k] = oracle::integrate_pieces([&](double t) { return b(t)[k] * f(t); }, breakpoints(b), b.domain().lower,
                                     b.domain().upper);
  return th;
}

}  // namespace

TEST_SUITE("basis") {
  TEST_CASE("q=8 cubic basis on [0,20] is L2-orthonormal") {
    const BSplineBasis b(8, 3, {0.0, 20.0});
    const Matrix G = quadrature_gram(b, false);
    CHECK((G - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-8);
  }

  TEST_CASE("raw gram has off-diagonal mass that the transform removes") {
    const BSplineBasis b(8, 3, {0.0, 20.0});
    Matrix raw = quadrature_gram(b, true);
    CHECK((raw - b.raw_gram()).cwiseAbs().maxCoeff() < 1e-10);
    raw.diagonal().setZero();
    CHECK(raw.cwiseAbs().maxCoeff() > 0.1);
    Matrix ortho = quadrature_gram(b, false);
    ortho.diagonal().setZero();
    CHECK(ortho.cwiseAbs().maxCoeff() < 1e-8);
  }

  TEST_CASE("orthonormality holds across random constructions") {
    oracle::Gen g(11);
    for (int trial = 0; trial < 6; ++trial) {
      const int degree = g.integer(1, 3);
      const int q = g.integer(degree + 1, 10);
      const double lo = g.uniform(-5.0, 5.0);
      const BSplineBasis b(q, degree, {lo, lo + g.uniform(0.5, 30.0)});
      CHECK((quadrature_gram(b, false) - Matrix::Identity(q, q)).cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  TEST_CASE("four cubic functions on [0,1] reproduce any cubic") {
    const BSplineBasis b(4, 3, {0.0, 1.0});
    oracle::Gen g(3);
    const Vector c = g.normals(4);
    auto f = [&](double t) { return c[0] + t * (c[1] + t * (c[2] + t * c[3])); };
    const Vector th = project(b, f);
    for (double t : {0.0, 0.13, 0.5, 0.77, 1.0}) CHECK(b(t).dot(th) == doctest::Approx(f(t)).epsilon(1e-10));
  }

  TEST_CASE("constant reconstructs at the left endpoint") {
    const BSplineBasis b(8, 3, {0.0, 20.0});
    const Vector v = b(0.0);
    CHECK(v.allFinite());
    const Vector th = project(b, [](double) { return 1.0; });
    CHECK(std::abs(v.dot(th) - 1.0) < 1e-8);
  }

  TEST_CASE("random cubic reconstructs at t=7.3") {
    const BSplineBasis b(8, 3, {0.0, 20.0});
    oracle::Gen g(5);
    const Vector c = g.normals(4);
    auto f = [&](double t) { return c[0] + t * (c[1] + t * (c[2] + t * c[3] / 20.0) / 20.0); };
    const Vector th = project(b, f);
    CHECK(std::abs(b(7.3).dot(th) - f(7.3)) < 1e-8);
  }

  TEST_CASE("evaluation outside the window is an error") {
    const BSplineBasis b(8, 3, {0.0, 20.0});
    CHECK_THROWS_AS(b(20.0 + 1e-9), Error);
    CHECK_THROWS_AS(b(-1e-9), Error);
    try {
      b(21.0);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::out_of_domain);
    }
  }

  TEST_CASE("roughness penalty: null space, t^2 and symmetry") {
    const BSplineBasis b(6, 3, {0.0, 1.0});
    const PenaltyMatrix J = roughness_penalty(b);
    const Vector lin = project(b, [](double t) { return 2.0 - 3.0 * t; });
    CHECK(std::abs(lin.dot(J.matrix * lin)) < 1e-10);
    const Vector sq = project(b, [](double t) { return t * t; });
    CHECK(sq.dot(J.matrix * sq) == doctest::Approx(4.0).epsilon(1e-6));
    CHECK((J.matrix - J.matrix.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(J.matrix);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
  }

  TEST_CASE("penalty matches quadrature of the squared second derivative") {
    const BSplineBasis b(8, 3, {0.0, 20.0});
    const PenaltyMatrix J = roughness_penalty(b);
    oracle::Gen g(7);
    for (int trial = 0; trial < 20; ++trial) {
      const Vector th = g.normals(8);
      const double oracle_value = oracle::integrate_pieces(
          [&](double t) { return std::pow(b(t, 2).dot(th), 2); }, breakpoints(b), 0.0, 20.0);
      CHECK(oracle::rel_err(th.dot(J.matrix * th), oracle_value) < 1e-6);
    }
  }

  TEST_CASE("default hazard knot count") {
    CHECK(default_hazard_knot_count(100) == 25);
    CHECK(default_hazard_knot_count(200) == 30);
    CHECK(default_hazard_knot_count(7) == 1);
  }

  TEST_CASE("hazard knots at linear-interpolation quantiles of the pooled values") {
    std::vector<SurvivalRecord> recs;
    for (int t = 1; t <= 13; ++t) recs.push_back({double(t), double(t), 1});
    const HazardBasis hb = make_hazard_basis(recs, 12);
    REQUIRE(hb.size() == 12);
    std::vector<double> pooled;
    for (int t = 1; t <= 13; ++t) pooled.push_back(t);
    for (int k = 1; k <= 12; ++k) {
      const double pos = (pooled.size() - 1) * k / 13.0;
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const double expect = pooled[lo] + (pos - lo) * (pooled[std::min(lo + 1, pooled.size() - 1)] - pooled[lo]);
      CHECK(hb.knots[k - 1] == doctest::Approx(expect).epsilon(1e-12));
    }
    for (int k = 1; k < 12; ++k) CHECK(hb.knots[k] > hb.knots[k - 1]);
    CHECK(hb.support_end == 13.0);
  }

  TEST_CASE("hazard design entries") {
    HazardBasis hb;
    hb.knots = (Vector(2) << 2.0, 5.0).finished();
    hb.support_end = 10.0;
    const Vector below = eval_hazard_design(hb, 1.5);
    CHECK(below[0] == 1.0);
    CHECK(below[1] == 1.5);
    CHECK(below[2] == 0.0);
    CHECK(below[3] == 0.0);
    CHECK(eval_hazard_design(hb, 2.0)[2] == 0.0);
    const Vector at6 = eval_hazard_design(hb, 6.0);
    CHECK((at6 - (Vector(4) << 1, 6, 4, 1).finished()).norm() == 0.0);
  }

  TEST_CASE("hazard design is continuous and nondecreasing in the truncated coordinates") {
    oracle::Gen g(9);
    HazardBasis hb;
    hb.knots = Vector(5);
    for (int k = 0; k < 5; ++k) hb.knots[k] = 1.0 + 2.0 * k + g.uniform(0.0, 1.0);
    Vector prev = eval_hazard_design(hb, 0.0);
    for (int j = 1; j <= 2000; ++j) {
      const Vector cur = eval_hazard_design(hb, j * 0.01);
      CHECK((cur.tail(5) - prev.tail(5)).minCoeff() >= 0.0);
      CHECK((cur - prev).cwiseAbs().maxCoeff() <= 0.01 + 1e-12);
      prev = cur;
    }
  }
}
