#include "oracles.hpp"

#include <doctest.h>

#include "jmfpc/error.hpp"
#include "jmfpc/inference.hpp"
#include "jmfpc/mcem.hpp"

using namespace jmfpc;

namespace {

MonteCarloQ from_draws(std::vector<Matrix> draws) {
  MonteCarloQ q;
  q.R = static_cast<int>(draws.front().cols());
  for (auto& d : draws) {
    q.mean.push_back(d.rowwise().mean());
    q.second_moment.push_back(d * d.transpose() / static_cast<double>(d.cols()));
    q.draws.push_back(std::move(d));
  }
  return q;
}

double batch_se(const Vector& v) { return mc_error(v); }

// Posterior moments of a 1-D score by Gauss–Hermite against the N(0, d) prior.
std::pair<double, double> gh_moments(const std::function<double(double)>& loglik, double d, int n = 50) {
  const oracle::Rule r = oracle::gauss_hermite(n);
  std::vector<double> lv(n);
  double top = -INFINITY;
  for (int k = 0; k < n; ++k) {
    lv[k] = loglik(std::sqrt(2.0 * d) * r.nodes[k]);
    top = std::max(top, lv[k]);
  }
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double x = std::sqrt(2.0 * d) * r.nodes[k], w = r.weights[k] * std::exp(lv[k] - top);
    z += w;
    m1 += w * x;
    m2 += w * x * x;
  }
  const double mean = m1 / z;
  return {mean, m2 / z - mean * mean};
}

SimData small_data(std::uint64_t seed, Family family, int N = 25, int n_obs = 8) {
  return oracle::Gen(seed).dataset(N, family, n_obs);
}

}  // namespace

TEST_SUITE("mcem") {
  TEST_CASE("empty subject samples the prior") {
    const SimData sim = small_data(1, Family::gaussian, 5);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    JointParams P = oracle::Gen(2).params(8, 2, bases.hazard, 1, true);
    P.eigenvalues = (Vector(2) << 4.0, 1.0).finished();
    Subject empty;
    empty.times = Vector(0);
    empty.responses = Vector(0);
    empty.covariates = Vector::Zero(1);
    MHState st = MHState::initial(Vector::Zero(2), P.eigenvalues, 7);
    const Matrix d = sample_scores(empty, Family::gaussian, P, bases, 20000, st, false);
    for (int l = 0; l < 2; ++l) {
      const Vector x = d.row(l).transpose();
      CHECK(std::abs(x.mean()) < 3.0 * batch_se(x));
      const Vector sq = x.cwiseAbs2();
      CHECK(std::abs(sq.mean() - P.eigenvalues[l]) < 3.0 * batch_se(sq));
    }
  }

  TEST_CASE("one-dimensional posterior moments match Gauss-Hermite") {
    for (Family fam : {Family::gaussian, Family::binary}) {
      const SimData sim = small_data(3 + static_cast<int>(fam), fam, 10);
      const ModelBases bases = make_bases(sim.data, 8, 3, 3);
      JointParams P = oracle::Gen(4).params(8, 1, bases.hazard, 1, fam == Family::gaussian);
      P.eigenvalues[0] = 3.0;
      P.beta[0] = 0.8;
      P.hazard_fixed = Eigen::Vector2d(-2.0, 0.05);
      for (int i = 0; i < 3; ++i) {
        const Subject& s = sim.data.subjects[i];
        auto ll = [&](double x) {
          const Vector xi = Vector::Constant(1, x);
          return loglik_long(fam, s, P, bases.longitudinal, xi) + loglik_relapse(s, P, bases.hazard, xi);
        };
        const auto [mean, var] = gh_moments(ll, P.eigenvalues[0]);
        MHState st = MHState::initial(Vector::Zero(1), P.eigenvalues, 100 + i);
        const Matrix d = sample_scores(s, fam, P, bases, 20000, st, true);
        const Vector x = d.row(0).transpose();
        const Vector c2 = (x.array() - mean).square().matrix();
        INFO("family " << to_string(fam) << " subject " << i);
        CHECK(std::abs(x.mean() - mean) < 3.0 * batch_se(x));
        CHECK(std::abs(c2.mean() - var) < 3.0 * batch_se(c2));
        CHECK(st.acceptance() >= 0.15);
        CHECK(st.acceptance() <= 0.5);
      }
    }
  }

  TEST_CASE("batch-means standard error") {
    oracle::Gen g(5);
    CHECK(mc_error(Vector::Constant(1000, 2.5)) == 0.0);
    const Vector iid = g.normals(1000);
    CHECK(mc_error(iid) == doctest::Approx(1.0 / std::sqrt(1000.0)).epsilon(0.5));
    // 10 batches of 100 with batch k constant at k
    Vector steps(1000);
    for (int j = 0; j < 1000; ++j) steps[j] = j / 100;
    const Vector k = Vector::LinSpaced(10, 0, 9);
    const double sd = std::sqrt((k.array() - k.mean()).square().sum() / 9.0);
    CHECK(mc_error(steps) == doctest::Approx(sd / std::sqrt(10.0)).epsilon(1e-12));
    CHECK_THROWS_AS(mc_error(Vector::Zero(5)), Error);
  }

  TEST_CASE("doubling R shrinks the batch-means SE by about sqrt(2)") {
    oracle::Gen g(6);
    double ratio = 0.0;
    for (int trial = 0; trial < 20; ++trial) ratio += mc_error(g.normals(1000)) / mc_error(g.normals(2000));
    ratio /= 20.0;
    CHECK(ratio > std::sqrt(2.0) / 1.6);
    CHECK(ratio < std::sqrt(2.0) * 1.6);
  }

  TEST_CASE("Q at a single zero draw equals the penalized log-likelihood") {
    const SimData sim = small_data(7, Family::gaussian, 6);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    const JointParams P = oracle::Gen(8).params(8, 2, bases.hazard, 1, true);
    const TuningParams t{2, 0.4, 0.9, 0.7};
    const PreparedData prep = prepare(sim.data, bases);
    const MonteCarloQ q = from_draws(std::vector<Matrix>(6, Matrix::Zero(2, 1)));
    const std::vector<Vector> zeros(6, Vector::Zero(2));
    CHECK(q_contributions(prep, P, t, q, true)[0] ==
          doctest::Approx(penalized_loglik(sim.data, bases, P, t, zeros)).epsilon(1e-12));
  }

  TEST_CASE("E-step moments are the draw averages") {
    const SimData sim = small_data(9, Family::binary, 6);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    const JointParams P = oracle::Gen(10).params(8, 2, bases.hazard, 1, false);
    const PreparedData prep = prepare(sim.data, bases);
    std::vector<MHState> states;
    for (int i = 0; i < 6; ++i) states.push_back(MHState::initial(Vector::Zero(2), P.eigenvalues, 50 + i));
    McemConfig c;
    const MonteCarloQ q = estep(prep, P, 300, states, c);
    for (int i = 0; i < 6; ++i) {
      const Matrix& d = q.draws[i];
      CHECK(d.cols() == 300);
      CHECK((q.mean[i] - d.rowwise().mean()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((q.second_moment[i] - d * d.transpose() / 300.0).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("M-step with p=0 and no survival is penalized spline regression") {
    const SimData sim = small_data(11, Family::gaussian, 15);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    JointParams P = oracle::Gen(12).params(8, 0, bases.hazard, 1, true);
    const TuningParams t{0, 2.5, 2.5, 1.0};
    const PreparedData prep = prepare(sim.data, bases);
    const MonteCarloQ q = from_draws(std::vector<Matrix>(15, Matrix::Zero(0, 1)));
    McemConfig c;
    c.include_survival = false;
    const JointParams out = mstep(prep, q, P, t, c);
    Matrix G = Matrix::Zero(8, 8);
    Vector r = Vector::Zero(8);
    for (const auto& s : sim.data.subjects) {
      const Matrix B = bases.longitudinal.design(s.times);
      G += B.transpose() * B;
      r += B.transpose() * s.responses;
    }
    // stationary in theta_mu at the returned sigma2, and sigma2 is the mean squared residual
    const Vector expect = (G + out.sigma2_eps * 2.5 * bases.penalty.matrix).ldlt().solve(r);
    CHECK((out.theta_mu - expect).cwiseAbs().maxCoeff() < 1e-8);
    double rss = 0.0, n = 0.0;
    for (const auto& s : sim.data.subjects) {
      rss += (s.responses - bases.longitudinal.design(s.times) * out.theta_mu).squaredNorm();
      n += static_cast<double>(s.n_obs());
    }
    CHECK(out.sigma2_eps == doctest::Approx(rss / n).epsilon(1e-9));
  }

  TEST_CASE("eigenvalue update is the mean second moment") {
    const SimData sim = small_data(13, Family::gaussian, 10);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    const JointParams P = oracle::Gen(14).params(8, 2, bases.hazard, 1, true);
    const PreparedData prep = prepare(sim.data, bases);
    // draws +-1.7 e1 and +-0.6 e2: second moment diag(1.7^2, 0.6^2) / 2
    Matrix c = Matrix::Zero(2, 4);
    c(0, 0) = 1.7, c(0, 1) = -1.7, c(1, 2) = 0.6, c(1, 3) = -0.6;
    const MonteCarloQ q = from_draws(std::vector<Matrix>(10, c));
    McemConfig cfg;
    cfg.include_survival = false;
    const JointParams out = mstep(prep, q, P, {2, 1.0, 1.0, 1.0}, cfg);
    CHECK(out.eigenvalues[0] == doctest::Approx(1.7 * 1.7 / 2.0).epsilon(1e-12));
    CHECK(out.eigenvalues[1] == doctest::Approx(0.18).epsilon(1e-12));
  }

  TEST_CASE("prior draws leave the eigenvalue update near the prior") {
    const SimData sim = small_data(15, Family::gaussian, 40);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    JointParams P = oracle::Gen(16).params(8, 2, bases.hazard, 1, true);
    P.eigenvalues = (Vector(2) << 3.0, 1.0).finished();
    Subject empty;
    empty.times = Vector(0);
    empty.responses = Vector(0);
    empty.covariates = Vector::Zero(1);
    std::vector<Matrix> draws;
    for (int i = 0; i < 40; ++i) {
      MHState st = MHState::initial(Vector::Zero(2), P.eigenvalues, 900 + i);
      draws.push_back(sample_scores(empty, Family::gaussian, P, bases, 500, st, false));
    }
    McemConfig cfg;
    cfg.include_survival = false;
    const JointParams out = mstep(prepare(sim.data, bases), from_draws(draws), P, {2, 1.0, 1.0, 1.0}, cfg);
    CHECK(out.eigenvalues[0] == doctest::Approx(3.0).epsilon(0.1));
    CHECK(out.eigenvalues[1] == doctest::Approx(1.0).epsilon(0.1));
  }

  TEST_CASE("M-step does not decrease Q on its own draws") {
    for (Family fam : {Family::gaussian, Family::binary}) {
      const SimData sim = small_data(17 + static_cast<int>(fam), fam, 20);
      const ModelBases bases = make_bases(sim.data, 8, 3, 4);
      const PreparedData prep = prepare(sim.data, bases);
      oracle::Gen g(18);
      for (int start = 0; start < 20; ++start) {
        const JointParams P = g.params(8, 2, bases.hazard, 1, fam == Family::gaussian);
        const TuningParams t{2, g.uniform(0.1, 5.0), g.uniform(0.1, 5.0), g.uniform(0.2, 3.0)};
        std::vector<MHState> states;
        for (int i = 0; i < 20; ++i) states.push_back(MHState::initial(Vector::Zero(2), P.eigenvalues, 1000 * start + i));
        McemConfig c;
        const MonteCarloQ q = estep(prep, P, 100, states, c);
        const JointParams next = mstep(prep, q, P, t, c);
        const double before = q_contributions(prep, P, t, q, true).mean();
        const double after = q_contributions(prep, next, t, q, true).mean();
        INFO("family " << to_string(fam) << " start " << start);
        CHECK(after >= before - 1e-8 * std::abs(before));
      }
    }
  }

  TEST_CASE("normalization identities") {
    const SimData sim = small_data(19, Family::gaussian, 8);
    const ModelBases bases = make_bases(sim.data, 8, 3, 3);
    oracle::Gen g(20);
    for (int trial = 0; trial < 10; ++trial) {
      JointParams P = g.params(8, 3, bases.hazard, 1, true);
      P.theta_psi = P.theta_psi * g.invertible(3);
      const Normalization n = normalize_identifiability(P);
      const JointParams& Q = n.params;
      CHECK((Q.theta_psi.transpose() * Q.theta_psi - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(Q.eigenvalues[0] >= Q.eigenvalues[1]);
      CHECK(Q.eigenvalues[1] >= Q.eigenvalues[2]);
      CHECK(Q.eigenvalues[2] > 0.0);
      const Matrix before = P.theta_psi * P.eigenvalues.asDiagonal() * P.theta_psi.transpose();
      const Matrix after = Q.theta_psi * Q.eigenvalues.asDiagonal() * Q.theta_psi.transpose();
      CHECK((before - after).cwiseAbs().maxCoeff() < 1e-10);
      std::vector<Vector> xi, axi;
      for (std::size_t i = 0; i < sim.data.size(); ++i) {
        xi.push_back(g.normals(3));
        axi.push_back(n.A * xi.back());
        CHECK((Q.theta_psi * axi.back() - P.theta_psi * xi.back()).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(std::abs(axi.back().dot(Q.beta) - xi.back().dot(P.beta)) < 1e-10);
      }
      // frailty densities differ by the Jacobian of xi -> A xi
      const double jac = static_cast<double>(sim.data.size()) * std::log(std::abs(n.A.determinant()));
      CHECK(std::abs(complete_loglik(sim.data, bases, Q, axi) + jac - complete_loglik(sim.data, bases, P, xi)) < 1e-8);
      // idempotent up to column signs
      const Normalization again = normalize_identifiability(Q);
      CHECK((again.params.eigenvalues - Q.eigenvalues).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((again.params.theta_psi.cwiseAbs() - Q.theta_psi.cwiseAbs()).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  TEST_CASE("relative change") {
    const Vector a = (Vector(2) << 1.1, 0.0).finished(), b = (Vector(2) << 1.0, 0.05).finished();
    // the second coordinate dominates: 0.05 / (0.05 + 0.1)
    CHECK(max_relative_change(a, b, 0.1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
}

TEST_SUITE("mcem.fit") {
  TEST_CASE("identical seeds give bit-identical traces") {
    const SimData sim = small_data(21, Family::binary, 30);
    McemConfig c;
    c.Rmax = 400;
    c.max_iter = 4;
    c.hazard_knots = 4;
    c.seed = 99;
    const TuningParams t{2, 5.0, 5.0, 1.0};
    const FitResult a = fit(sim.data, t, c);
    c.workers = 2;
    const FitResult b = fit(sim.data, t, c);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) {
      CHECK(a.trace[k].R == b.trace[k].R);
      CHECK(a.trace[k].q_hat == b.trace[k].q_hat);
      CHECK(a.trace[k].params == b.trace[k].params);
    }
  }

  TEST_CASE("single-component data recovers its eigenfunction") {
    SimDesign d;
    d.N = 100;
    d.eigenvalues = (Vector(2) << 9.0, 1e-8).finished();
    d.beta = (Vector(2) << 1.0, 0.0).finished();
    d.seed = 23;
    const SimData sim = generate_dataset(d);
    McemConfig c = study_fit_config();
    c.Rmax = 2000;
    const auto bases = std::make_shared<const ModelBases>(make_bases(sim.data, 8, 3, 12));
    const PreparedData prep = prepare(sim.data, *bases);
    const double scale = prep.total_gram.trace() / bases->penalty.matrix.trace();
    const FitResult f = fit(sim.data, bases, {1, scale, scale, 1.0}, c);
    const Vector grid = linspace(0.0, 20.0, 200);
    Vector err(200);
    double sign = 0.0;
    for (int j = 0; j < 200; ++j) sign += (*bases).longitudinal(grid[j]).dot(f.params.theta_psi.col(0)) * true_eigenfunction(0, grid[j]);
    sign = sign < 0 ? -1.0 : 1.0;
    for (int j = 0; j < 200; ++j)
      err[j] = std::pow(sign * bases->longitudinal(grid[j]).dot(f.params.theta_psi.col(0)) - true_eigenfunction(0, grid[j]), 2);
    CHECK(trapezoid(grid, err) < 0.05);
  }

  TEST_CASE("Gaussian design fit: invariants along the trace and recovery") {
    SimDesign d;
    d.seed = 1;
    const SimData sim = generate_dataset(d);
    McemConfig c = study_fit_config();
    c.Rmax = 2000;
    const auto bases = std::make_shared<const ModelBases>(make_bases(sim.data, 8, 3, 12));
    const PreparedData prep = prepare(sim.data, *bases);
    const double scale = prep.total_gram.trace() / bases->penalty.matrix.trace();
    const FitResult f = fit(sim.data, bases, {2, scale, scale, 1.0}, c);
    CHECK(f.converged);
    const ParamLayout layout = f.layout();
    for (const auto& t : f.trace) {
      const JointParams P = unpack(t.params, layout);
      CHECK((P.theta_psi.transpose() * P.theta_psi - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);
      CHECK(P.eigenvalues[0] >= P.eigenvalues[1]);
      CHECK(P.eigenvalues[1] > 0.0);
      CHECK(t.delta_q >= -3.0 * t.delta_q_se - 1e-8 * std::abs(t.q_hat));
    }
    // Louis SEs of beta around the truth, up to the eigenfunction sign
    const CovarianceEstimate cov = louis_information(f, sim.data);
    for (int l = 0; l < 2; ++l) {
      const double se = cov.se("beta[" + std::to_string(l) + "]");
      CHECK(std::abs(std::abs(f.params.beta[l]) - 1.0) < 3.0 * se);
    }
    CHECK(std::abs(f.params.eta[0] - 1.0) < 3.0 * cov.se("eta[0]"));
  }
}
