#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>

using namespace jmfpc;

namespace {

SimDesign null_design(int N, std::uint64_t seed) {
  SimDesign d;
  d.N = N;
  d.n_obs = 1;
  d.beta = Vector::Zero(2);
  d.eta = 0.0;
  d.seed = seed;
  d.visits = {4.0, 10.0, 1e6};
  return d;
}

}  // namespace

TEST_SUITE("simulate") {
  TEST_CASE("censoring mix over 100 datasets") {
    double right = 0, interval = 0, exact = 0;
    for (int r = 0; r < 100; ++r) {
      SimDesign d;
      d.seed = 1000 + r;
      for (const auto& s : generate_dataset(d).data.subjects) {
        switch (s.survival->kind()) {
          case CensorKind::right: ++right; break;
          case CensorKind::interval: ++interval; break;
          case CensorKind::exact: ++exact; break;
        }
      }
    }
    const double n = right + interval + exact;
    // P(T > 20) = E exp(-10 e^LP) with LP ~ N(Z, 9 + 2.25), Z ~ Bernoulli(0.5)
    const oracle::Rule gh = oracle::gauss_hermite(80);
    double p_right = 0.0;
    for (double z : {0.0, 1.0})
      for (Eigen::Index k = 0; k < gh.nodes.size(); ++k)
        p_right += 0.5 * gh.weights[k] / std::sqrt(M_PI) *
                   std::exp(-10.0 * std::exp(z + std::sqrt(2.0 * 11.25) * gh.nodes[k]));
    CHECK(p_right == doctest::Approx(0.175).epsilon(0.02));
    CHECK(std::abs(right / n - p_right) < 0.01);
    CHECK(std::abs(interval / n - 0.5 * (1.0 - p_right)) < 0.015);
    CHECK(std::abs(exact / n - 0.5 * (1.0 - p_right)) < 0.015);
  }

  TEST_CASE("event times at a zero linear predictor") {
    const SimData sim = generate_dataset(null_design(10000, 2));
    std::vector<double> t(sim.truth.event_times.data(), sim.truth.event_times.data() + 10000);
    std::sort(t.begin(), t.end());
    const double median = 0.5 * (t[4999] + t[5000]);
    CHECK(std::sqrt(40.0 * std::log(2.0)) == doctest::Approx(5.2655).epsilon(1e-4));
    CHECK(median == doctest::Approx(5.2655).epsilon(0.02));
    // Kolmogorov-Smirnov distance to exp(-t^2/40)
    double ks = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double F = 1.0 - std::exp(-t[k] * t[k] / 40.0);
      ks = std::max({ks, std::abs(F - k / 10000.0), std::abs(F - (k + 1) / 10000.0)});
    }
    CHECK(ks < 0.05);
    CHECK(ks > 0.0);
  }

  TEST_CASE("censoring records bracket the event time") {
    SimDesign d;
    d.N = 500;
    d.seed = 3;
    const SimData sim = generate_dataset(d);
    bool saw_4_10 = false;
    for (std::size_t i = 0; i < sim.data.size(); ++i) {
      const SurvivalRecord& r = *sim.data.subjects[i].survival;
      const double T = sim.truth.event_times[i];
      switch (r.kind()) {
        case CensorKind::right:
          CHECK(T > 20.0);
          CHECK(r.t_right == 20.0);
          break;
        case CensorKind::exact:
          CHECK(r.t_right == T);
          break;
        case CensorKind::interval: {
          const double lo = T <= 4.0 ? 0.0 : (T <= 10.0 ? 4.0 : 10.0);
          const double hi = T <= 4.0 ? 4.0 : (T <= 10.0 ? 10.0 : 20.0);
          CHECK(r.t_left == lo);
          CHECK(r.t_right == hi);
          if (T > 7.0 && T < 7.4) {
            CHECK(r.t_left == 4.0);
            CHECK(r.t_right == 10.0);
            saw_4_10 = true;
          }
          break;
        }
      }
    }
    CHECK(saw_4_10);
  }

  TEST_CASE("generator moments") {
    SimDesign d;
    d.N = 4000;
    d.seed = 4;
    const SimData sim = generate_dataset(d);
    Vector x0(4000), x1(4000), z(4000);
    double rss = 0.0, n = 0.0;
    for (int i = 0; i < 4000; ++i) {
      x0[i] = sim.truth.xi[i][0];
      x1[i] = sim.truth.xi[i][1];
      const Subject& s = sim.data.subjects[i];
      z[i] = s.covariates[0];
      for (Eigen::Index j = 0; j < s.n_obs(); ++j) {
        const double t = s.times[j];
        rss += std::pow(s.responses[j] - true_mean(t) - x0[i] * true_eigenfunction(0, t) -
                            x1[i] * true_eigenfunction(1, t),
                        2);
        n += 1.0;
      }
    }
    CHECK(x0.squaredNorm() / 4000.0 == doctest::Approx(9.0).epsilon(0.07));
    CHECK(x1.squaredNorm() / 4000.0 == doctest::Approx(2.25).epsilon(0.07));
    CHECK(std::abs(x0.dot(x1) / 4000.0) < 0.25);
    CHECK(rss / n == doctest::Approx(0.49).epsilon(0.03));
    CHECK(z.mean() == doctest::Approx(0.5).epsilon(0.06));
    const Vector grid = linspace(0.0, 20.0, 2001);
    Vector f0(2001), f1(2001);
    for (int j = 0; j < 2001; ++j) {
      f0[j] = true_eigenfunction(0, grid[j]);
      f1[j] = true_eigenfunction(1, grid[j]);
    }
    CHECK(trapezoid(grid, f0.cwiseAbs2()) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(trapezoid(grid, f0.cwiseProduct(f1))) < 1e-6);
  }

  TEST_CASE("identical seeds give identical datasets") {
    SimDesign d;
    d.N = 20;
    d.family = Family::binary;
    const SimData a = generate_dataset(d), b = generate_dataset(d);
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(a.data.subjects[i].responses == b.data.subjects[i].responses);
      CHECK(a.data.subjects[i].survival->t_left == b.data.subjects[i].survival->t_left);
    }
    for (const auto& s : a.data.subjects)
      for (double y : s.responses) CHECK((y == 0.0 || y == 1.0));
  }

  TEST_CASE("column alignment") {
    const Vector grid = linspace(0.0, 20.0, 200);
    Matrix ref(200, 2);
    for (int j = 0; j < 200; ++j)
      for (int l = 0; l < 2; ++l) ref(j, l) = true_eigenfunction(l, grid[j]);
    const Alignment self = align_columns(ref, ref, grid);
    CHECK(self.index == std::vector<int>{0, 1});
    CHECK(self.sign == std::vector<double>{1.0, 1.0});
    Matrix est(200, 3);
    est.col(0) = 0.1 * Vector::Ones(200);
    est.col(1) = -ref.col(1);
    est.col(2) = ref.col(0) + 0.05 * ref.col(1);
    const Alignment a = align_columns(est, ref, grid);
    CHECK(a.index == std::vector<int>{2, 1});
    CHECK(a.sign == std::vector<double>{1.0, -1.0});
  }
}

TEST_SUITE("simulate.study") {
  TEST_CASE("single-replicate study writes NA standard deviations") {
    SimDesign d;
    d.N = 40;
    d.n_obs = 8;
    d.seed = 5;
    StudyConfig c;
    c.fit.Rmax = 200;
    c.fit.max_iter = 4;
    c.fit.hazard_knots = 4;
    c.tuning = {2, 1.0, 1.0, 1.0};
    c.louis = false;
    const StudySummary s = run_study(d, 1, c);
    REQUIRE(s.results.size() == 1);
    CHECK(s.results[0].ok);
    const auto dir = std::filesystem::temp_directory_path() / "jmfpc_test_study";
    std::filesystem::remove_all(dir);
    write_study(s, dir.string());
    const CsvTable t = read_csv((dir / "table1.csv").string());
    const std::size_t sd = t.column("sd");
    REQUIRE(!t.rows.empty());
    for (const auto& row : t.rows) CHECK(row[sd] == "NA");
    CHECK(std::filesystem::exists(dir / "summary.csv"));
    CHECK(std::filesystem::exists(dir / "curves_psi1.csv"));
    std::filesystem::remove_all(dir);
  }
}
