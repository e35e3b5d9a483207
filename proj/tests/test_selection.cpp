#include "oracles.hpp"

#include <doctest.h>

#include "jmfpc/selection.hpp"

#include <numbers>

using namespace jmfpc;

namespace {

// trace{(G + hJ)^-1 G} through the generalized eigenvalues of (G, J).
double spectral_df(double h, const Matrix& G, const Matrix& J) {
  const Eigen::LLT<Matrix> llt(G);
  const Matrix L = llt.matrixL();
  const Matrix Li = L.inverse();
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(Li * J * Li.transpose());
  double df = 0.0;
  for (Eigen::Index k = 0; k < eig.eigenvalues().size(); ++k) df += 1.0 / (1.0 + h * std::max(0.0, eig.eigenvalues()[k]));
  return df;
}

}  // namespace

TEST_SUITE("selection") {
  TEST_CASE("longitudinal df limits and spectral oracle") {
    const SimData sim = oracle::Gen(1).dataset(40, Family::gaussian);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    const PreparedData prep = prepare(sim.data, bases);
    const Matrix& G = prep.total_gram;
    CHECK(df_longitudinal(0.0, G, bases.penalty) == doctest::Approx(8.0).epsilon(1e-10));
    // cubic splines keep linear functions unpenalized
    CHECK(std::abs(df_longitudinal(1e12, G, bases.penalty) - 2.0) < 0.01);
    oracle::Gen g(2);
    double prev = 9.0;
    for (int trial = 0; trial < 20; ++trial) {
      const double h = std::exp(g.uniform(-6.0, 10.0));
      CHECK(std::abs(df_longitudinal(h, G, bases.penalty) - spectral_df(h, G, bases.penalty.matrix)) < 1e-8);
    }
    for (double h : linspace(0.0, 500.0, 40)) {
      const double df = df_longitudinal(h, G, bases.penalty);
      CHECK(df <= prev + 1e-12);
      prev = df;
    }
    std::vector<Matrix> designs;
    for (const auto& s : sim.data.subjects) designs.push_back(bases.longitudinal.design(s.times));
    CHECK(df_longitudinal(3.0, designs, bases.penalty) == doctest::Approx(df_longitudinal(3.0, G, bases.penalty)));
  }

  TEST_CASE("hazard df limits and monotonicity") {
    const SimData sim = oracle::Gen(3).dataset(60, Family::gaussian);
    const ModelBases bases = make_bases(sim.data, 8, 3, 6);
    const auto recs = sim.data.survival_records();
    CHECK(df_hazard(1e-12, recs, bases.hazard) < 1e-6);
    CHECK(df_hazard(1e12, recs, bases.hazard) == doctest::Approx(6.0).epsilon(1e-4));
    double prev = 0.0;
    for (double s : {1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0}) {
      const double df = df_hazard(s, recs, bases.hazard);
      CHECK(df >= prev);
      CHECK(df <= 6.0);
      prev = df;
    }
    // oracle: trace{(T'T + I/s)^-1 T'T} from the midpoint designs
    Matrix TT = Matrix::Zero(6, 6);
    for (const auto& r : recs) {
      const Vector t = eval_hazard_design(bases.hazard, r.midpoint()).tail(6);
      TT += t * t.transpose();
    }
    const Matrix A = TT + Matrix::Identity(6, 6) / 0.7;
    CHECK(df_hazard(0.7, recs, bases.hazard) == doctest::Approx(A.ldlt().solve(TT).trace()).epsilon(1e-10));
  }

  TEST_CASE("model dimension arithmetic") {
    DfBreakdown df;
    df.df_mu = 5.0;
    df.df_psi = 5.0;
    df.df_hazard = 6.0;
    df.p = 2;
    df.m = 1;
    CHECK(df.total() == 28.0);
  }

  TEST_CASE("preference order breaks ties") {
    Candidate a, b;
    a.ok = b.ok = true;
    a.value.aic = b.value.aic = 100.0;
    a.tuning = {1, 1.0, 1.0, 1.0};
    b.tuning = {2, 1.0, 1.0, 1.0};
    CHECK(preferred(a, b));
    b.tuning = {1, 2.0, 2.0, 1.0};
    CHECK(preferred(b, a));
    b.tuning = {1, 1.0, 1.0, 0.5};
    CHECK(preferred(b, a));
    b.value.aic = 99.0;
    b.tuning = {3, 0.0, 0.0, 100.0};
    CHECK(preferred(b, a));
    b.ok = false;
    CHECK(preferred(a, b));
    CHECK_FALSE(preferred(b, a));
  }

  TEST_CASE("default grids") {
    const Vector s = default_sigma_grid();
    REQUIRE(s.size() == 5);
    CHECK(s[0] == doctest::Approx(1e-2));
    CHECK(s[2] == doctest::Approx(1.0));
    CHECK(s[4] == doctest::Approx(1e2));
  }
}

TEST_SUITE("selection.fit") {
  TEST_CASE("grid search report, AIC re-summation and best choice") {
    const SimData sim = oracle::Gen(5).dataset(40, Family::gaussian);
    const auto bases = std::make_shared<const ModelBases>(make_bases(sim.data, 8, 3, 4));
    const PreparedData prep = prepare(sim.data, *bases);
    const double scale = prep.total_gram.trace() / bases->penalty.matrix.trace();
    SelectionConfig c;
    c.p_candidates = {1, 2};
    c.h_grid = (Vector(2) << 0.1 * scale, 10.0 * scale).finished();
    c.sigma_grid = (Vector(2) << 0.1, 10.0).finished();
    c.fit.Rmax = 300;
    c.fit.max_iter = 6;
    const AICReport report = grid_search(sim.data, bases, c);
    REQUIRE(report.candidates.size() == 8);
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    for (const auto& cand : report.candidates) {
      REQUIRE(cand.ok);
      CHECK(cand.value.aic == doctest::Approx(-2.0 * cand.value.expected_loglik + 2.0 * cand.value.df.total()));
      CHECK(report.best_candidate().value.aic <= cand.value.aic);
    }
    CHECK(report.best_fit_per_p.size() == 2);
    CHECK(report.best_fit_per_p.at(report.best_candidate().tuning.p) == report.best_fit);

    // expected log-likelihood from the final draws with the likelihood pieces summed independently
    const FitResult& f = *report.best_fit;
    const int R = f.final_draws.R;
    double total = 0.0;
    for (int r = 0; r < R; ++r)
      for (std::size_t i = 0; i < sim.data.size(); ++i) {
        const Subject& s = sim.data.subjects[i];
        const Vector xi = f.final_draws.draws[i].col(r);
        total += loglik_long(Family::gaussian, s, f.params, bases->longitudinal, xi) +
                 loglik_relapse(s, f.params, bases->hazard, xi) + loglik_frailty(f.params, xi);
      }
    double n = 0.0;
    for (const auto& s : sim.data.subjects) n += static_cast<double>(s.n_obs());
    const double expect = total / R - 0.5 * (n + f.params.p() * static_cast<double>(sim.data.size())) * log_2pi;
    CHECK(expected_complete_loglik(f, sim.data) == doctest::Approx(expect).epsilon(1e-10));
  }

  TEST_CASE("a single candidate is the best") {
    const SimData sim = oracle::Gen(6).dataset(30, Family::binary);
    const auto bases = std::make_shared<const ModelBases>(make_bases(sim.data, 6, 3, 3));
    SelectionConfig c;
    c.p_candidates = {1};
    c.h_grid = Vector::Constant(1, 5.0);
    c.sigma_grid = Vector::Constant(1, 1.0);
    c.fit.Rmax = 200;
    c.fit.max_iter = 4;
    const AICReport report = grid_search(sim.data, bases, c);
    REQUIRE(report.candidates.size() == 1);
    CHECK(report.best == 0);
    CHECK(report.best_fit != nullptr);
  }
}
