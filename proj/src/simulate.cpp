#include "jmfpc/simulate.hpp"

#include "jmfpc/error.hpp"
#include "jmfpc/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>

namespace jmfpc {

double true_mean(double t) { return t / 60.0 + std::sin(3.0 * std::numbers::pi * t / 20.0); }

double true_eigenfunction(int l, double t) {
  const double c = std::numbers::pi * t / 10.0;
  switch (l) {
    case 0: return -std::cos(c) / std::sqrt(10.0);
    case 1: return std::sin(c) / std::sqrt(10.0);
    default: fail(ErrorKind::invalid_argument, "simulation design has two eigenfunctions");
  }
}

double true_cumulative_hazard(double t) { return t * t / 40.0; }

double true_log_hazard(double t) { return std::log(t / 20.0); }

SimData generate_dataset(const SimDesign& design) {
  require(design.N >= 1 && design.n_obs >= 1, ErrorKind::invalid_argument, "design needs subjects and observations");
  require(design.eigenvalues.size() == 2 && design.beta.size() == 2, ErrorKind::invalid_argument,
          "design has two components");
  require(!design.visits.empty(), ErrorKind::invalid_argument, "design needs censoring visits");
  std::mt19937_64 rng(design.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  SimData out;
  out.data.family = design.family;
  out.data.domain = design.domain;
  out.data.covariate_names = {"Z"};
  out.truth.event_times = Vector(design.N);
  const Vector times = design.n_obs == 1 ? Vector::Constant(1, design.domain.lower)
                                         : linspace(design.domain.lower, design.domain.upper, design.n_obs);
  const double horizon = design.visits.back();
  for (int i = 0; i < design.N; ++i) {
    Subject s;
    std::ostringstream id;
    id << "s" << std::setw(4) << std::setfill('0') << i + 1;
    s.id = id.str();
    s.times = times;
    s.covariates = Vector::Constant(1, unif(rng) < 0.5 ? 1.0 : 0.0);
    Vector xi(2);
    for (int l = 0; l < 2; ++l) xi[l] = std::sqrt(design.eigenvalues[l]) * normal(rng);
    s.responses = Vector(design.n_obs);
    for (int j = 0; j < design.n_obs; ++j) {
      const double t = times[j];
      const double x = true_mean(t) + xi[0] * true_eigenfunction(0, t) + xi[1] * true_eigenfunction(1, t);
      if (design.family == Family::gaussian)
        s.responses[j] = x + std::sqrt(design.sigma2_eps) * normal(rng);
      else
        s.responses[j] = unif(rng) < expit(x) ? 1.0 : 0.0;
    }
    const double lp = xi.dot(design.beta) + design.eta * s.covariates[0];
    const double u = 1.0 - unif(rng);  // (0, 1]
    const double T = std::sqrt(-40.0 * std::log(u) * std::exp(-lp));
    const bool interval = unif(rng) < design.p_delta;
    SurvivalRecord rec;
    if (T > horizon) {
      rec = {horizon, horizon, 0};
    } else if (interval) {
      double lo = 0.0, hi = horizon;
      for (double v : design.visits) {
        if (v < T) lo = v;
        if (v >= T) {
          hi = v;
          break;
        }
      }
      rec = {lo, hi, 1};
    } else {
      rec = {T, T, 1};
    }
    s.survival = rec;
    out.truth.xi.push_back(xi);
    out.truth.event_times[i] = T;
    out.data.subjects.push_back(std::move(s));
  }
  return out;
}

Alignment align_columns(const Matrix& estimate, const Matrix& reference, const Vector& grid) {
  require(estimate.rows() == grid.size() && reference.rows() == grid.size(), ErrorKind::invalid_argument,
          "curves are not evaluated on the grid");
  const Eigen::Index p = estimate.cols(), r = reference.cols();
  Matrix ip(r, p);
  for (Eigen::Index a = 0; a < r; ++a)
    for (Eigen::Index b = 0; b < p; ++b)
      ip(a, b) = trapezoid(grid, reference.col(a).cwiseProduct(estimate.col(b)));
  Alignment out;
  out.index.assign(static_cast<std::size_t>(r), -1);
  out.sign.assign(static_cast<std::size_t>(r), 1.0);
  std::vector<bool> used(static_cast<std::size_t>(p), false);
  // Greedy on the largest remaining |inner product| over all pairs.
  for (Eigen::Index step = 0; step < std::min(p, r); ++step) {
    double best = -1.0;
    Eigen::Index ba = -1, bb = -1;
    for (Eigen::Index a = 0; a < r; ++a) {
      if (out.index[static_cast<std::size_t>(a)] >= 0) continue;
      for (Eigen::Index b = 0; b < p; ++b)
        if (!used[static_cast<std::size_t>(b)] && std::abs(ip(a, b)) > best) {
          best = std::abs(ip(a, b));
          ba = a;
          bb = b;
        }
    }
    out.index[static_cast<std::size_t>(ba)] = static_cast<int>(bb);
    out.sign[static_cast<std::size_t>(ba)] = ip(ba, bb) < 0.0 ? -1.0 : 1.0;
    used[static_cast<std::size_t>(bb)] = true;
  }
  return out;
}

namespace {

Vector study_grid(const Interval& domain, int n) { return linspace(domain.lower, domain.upper, n); }

// (0, end]: the log hazard is -inf at 0.
Vector hazard_grid(double end, int n) {
  Vector g(n);
  for (int k = 0; k < n; ++k) g[k] = end * (k + 1) / n;
  return g;
}

Matrix truth_psi(const Vector& grid) {
  Matrix out(grid.size(), 2);
  for (Eigen::Index j = 0; j < grid.size(); ++j)
    for (int l = 0; l < 2; ++l) out(j, l) = true_eigenfunction(l, grid[j]);
  return out;
}

double h_scale(const StudyConfig& config, const Dataset& data, const ModelBases& bases) {
  if (!config.h_relative) return 1.0;
  const PreparedData prepared = prepare(data, bases);
  return prepared.total_gram.trace() / bases.penalty.matrix.trace();
}

TuningParams resolve_tuning(const StudyConfig& config, const Dataset& data, const ModelBases& bases) {
  TuningParams t = config.tuning;
  const double scale = h_scale(config, data, bases);
  t.h_mu *= scale;
  t.h_psi *= scale;
  return t;
}

}  // namespace

ReplicateResult run_replicate(const SimDesign& design, const StudyConfig& config, const Vector& grid,
                              const Vector& haz_grid) {
  ReplicateResult out;
  try {
    const SimData sim = generate_dataset(design);
    const Dataset& data = sim.data;
    auto bases = std::make_shared<const ModelBases>(
        make_bases(data, config.fit.q, config.fit.degree, config.fit.hazard_knots));
    McemConfig fc = config.fit;
    fc.seed = subject_seed(design.seed, 1000003);
    fc.on_iteration = nullptr;

    std::shared_ptr<const FitResult> joint;
    if (config.select) {
      SelectionConfig sc = config.selection;
      sc.fit = fc;
      // an explicit grid is relative like the fixed tuning; the default grid is already scaled
      if (sc.h_grid.size() > 0) sc.h_grid *= h_scale(config, data, *bases);
      const AICReport report = grid_search(data, bases, sc);
      out.selected_p = report.best_candidate().tuning.p;
      const auto it = report.best_fit_per_p.find(config.estimate_p);
      joint = it != report.best_fit_per_p.end() ? it->second : report.best_fit;
    } else {
      joint = std::make_shared<const FitResult>(fit(data, bases, resolve_tuning(config, data, *bases), fc));
    }
    out.tuning = joint->tuning;
    out.converged = joint->converged;
    const JointParams& P = joint->params;
    const int p = P.p();

    Matrix psi(grid.size(), p);
    out.mu_grid = Vector(grid.size());
    for (Eigen::Index j = 0; j < grid.size(); ++j) {
      const Vector b = bases->longitudinal(grid[j]);
      out.mu_grid[j] = b.dot(P.theta_mu);
      psi.row(j) = (P.theta_psi.transpose() * b).transpose();
    }
    out.loghaz_grid = Vector(haz_grid.size());
    for (Eigen::Index j = 0; j < haz_grid.size(); ++j)
      out.loghaz_grid[j] = log_baseline_hazard(P, bases->hazard, haz_grid[j]);

    const Matrix truth = truth_psi(grid);
    const Alignment al = align_columns(psi, truth, grid);
    const int r = static_cast<int>(al.index.size());
    out.psi_grid = Matrix::Constant(grid.size(), r, std::numeric_limits<double>::quiet_NaN());
    out.imse = Vector::Constant(r, std::numeric_limits<double>::quiet_NaN());
    out.beta = out.eigenvalues = out.beta_se = out.eigenvalue_se = Vector::Constant(r, std::numeric_limits<double>::quiet_NaN());
    out.eta = P.eta[0];
    out.sigma2_eps = data.family == Family::gaussian ? P.sigma2_eps : std::numeric_limits<double>::quiet_NaN();
    for (int l = 0; l < r; ++l) {
      const int c = al.index[static_cast<std::size_t>(l)];
      if (c < 0) continue;
      const double sg = al.sign[static_cast<std::size_t>(l)];
      out.psi_grid.col(l) = sg * psi.col(c);
      out.imse[l] = trapezoid(grid, (out.psi_grid.col(l) - truth.col(l)).cwiseAbs2());
      out.beta[l] = sg * P.beta[c];
      out.eigenvalues[l] = P.eigenvalues[c];
    }

    out.eta_se = out.sigma2_se = std::numeric_limits<double>::quiet_NaN();
    if (config.louis) {
      const CovarianceEstimate cov = louis_information(*joint, data);
      out.louis_indefinite = cov.indefinite;
      for (int l = 0; l < r; ++l) {
        const int c = al.index[static_cast<std::size_t>(l)];
        if (c < 0) continue;
        out.beta_se[l] = cov.se("beta[" + std::to_string(c) + "]");
        out.eigenvalue_se[l] = cov.se("d[" + std::to_string(c) + "]");
      }
      out.eta_se = cov.se("eta[0]");
      if (data.family == Family::gaussian) out.sigma2_se = cov.se("sigma2_eps");
    }

    if (config.two_stage) {
      try {
        const TwoStageResult ts = two_stage_fit(data, bases, joint->tuning, fc);
        Matrix psi1(grid.size(), p);
        for (Eigen::Index j = 0; j < grid.size(); ++j)
          psi1.row(j) = (ts.stage1.params.theta_psi.transpose() * bases->longitudinal(grid[j])).transpose();
        const Alignment a1 = align_columns(psi1, truth, grid);
        out.beta_two_stage = Vector::Constant(r, std::numeric_limits<double>::quiet_NaN());
        for (int l = 0; l < r; ++l) {
          const int c = a1.index[static_cast<std::size_t>(l)];
          if (c >= 0) out.beta_two_stage[l] = a1.sign[static_cast<std::size_t>(l)] * ts.stage2.beta[c];
        }
        out.eta_two_stage = ts.stage2.eta[0];
        out.two_stage_ok = true;
      } catch (const Error& e) {
        warn(std::string("two-stage fit failed: ") + e.what());
      }
    }
    out.ok = true;
  } catch (const Error& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

StudySummary run_study(const SimDesign& design, int n_replicates, const StudyConfig& config) {
  require(n_replicates >= 1, ErrorKind::invalid_argument, "study needs at least one replicate");
  require(config.grid_points >= 2, ErrorKind::invalid_argument, "curve grid needs at least two points");
  StudySummary out;
  out.design = design;
  out.replicates = n_replicates;
  out.grid = study_grid(design.domain, config.grid_points);
  out.haz_grid = hazard_grid(design.visits.back(), config.grid_points);
  out.results.resize(static_cast<std::size_t>(n_replicates));
  StudyConfig inner = config;
  std::mutex progress_mutex;
  inner.fit.workers = std::max(1, config.fit.workers);
  parallel_for(static_cast<std::size_t>(n_replicates), config.workers, [&](std::size_t r) {
    SimDesign d = design;
    d.seed = subject_seed(design.seed, r);
    out.results[r] = run_replicate(d, inner, out.grid, out.haz_grid);
    if (config.on_replicate) {
      const std::lock_guard lock(progress_mutex);
      config.on_replicate(r, out.results[r]);
    }
  });
  return out;
}

namespace {

struct Column {
  double mean = 0.0, sd = 0.0, mean_se = 0.0;
  int n = 0, n_se = 0;
};

Column summarize(const std::vector<double>& values, const std::vector<double>& ses) {
  Column c;
  double sum = 0.0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++c.n;
    }
  c.mean = c.n > 0 ? sum / c.n : std::numeric_limits<double>::quiet_NaN();
  double ss = 0.0;
  for (double v : values)
    if (std::isfinite(v)) ss += (v - c.mean) * (v - c.mean);
  c.sd = c.n > 1 ? std::sqrt(ss / (c.n - 1)) : std::numeric_limits<double>::quiet_NaN();
  double se_sum = 0.0;
  for (double v : ses)
    if (std::isfinite(v)) {
      se_sum += v;
      ++c.n_se;
    }
  c.mean_se = c.n_se > 0 ? se_sum / c.n_se : std::numeric_limits<double>::quiet_NaN();
  return c;
}

std::string num(double v) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) fail(ErrorKind::io_error, "cannot write " + path.string());
  return f;
}

void write_curves(const std::filesystem::path& path, const Vector& grid, const std::vector<const Vector*>& curves,
                  const std::function<double(double)>& truth) {
  std::ofstream f = open_out(path);
  f << "grid,truth,p5,p50,p95\n";
  std::vector<double> col;
  for (Eigen::Index j = 0; j < grid.size(); ++j) {
    col.clear();
    for (const Vector* c : curves)
      if (std::isfinite((*c)[j])) col.push_back((*c)[j]);
    std::sort(col.begin(), col.end());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    f << num(grid[j]) << ',' << num(truth(grid[j])) << ',' << num(col.empty() ? nan : quantile_sorted(col, 0.05)) << ','
      << num(col.empty() ? nan : quantile_sorted(col, 0.5)) << ',' << num(col.empty() ? nan : quantile_sorted(col, 0.95))
      << '\n';
  }
}

}  // namespace

void write_study(const StudySummary& summary, const std::string& dir) {
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);
  const auto& res = summary.results;
  const SimDesign& d = summary.design;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  int failures = 0;
  for (const auto& r : res)
    if (!r.ok) ++failures;

  {
    std::ofstream f = open_out(root / "table1.csv");
    f << "estimator,parameter,true,mean,sd,mean_se,n\n";
    auto row = [&](const std::string& est, const std::string& name, double truth,
                   const std::function<double(const ReplicateResult&)>& v,
                   const std::function<double(const ReplicateResult&)>& se, bool two_stage) {
      std::vector<double> vals, ses;
      for (const auto& r : res) {
        if (!r.ok || (two_stage && !r.two_stage_ok)) continue;
        vals.push_back(v(r));
        ses.push_back(se ? se(r) : nan);
      }
      const Column c = summarize(vals, ses);
      f << est << ',' << name << ',' << num(truth) << ',' << num(c.mean) << ',' << num(c.sd) << ',' << num(c.mean_se)
        << ',' << c.n << '\n';
    };
    auto at = [](const Vector& v, int l) { return l < v.size() ? v[l] : std::numeric_limits<double>::quiet_NaN(); };
    for (int l = 0; l < 2; ++l)
      row("joint", "beta" + std::to_string(l + 1), d.beta[l], [&](const ReplicateResult& r) { return at(r.beta, l); },
          [&](const ReplicateResult& r) { return at(r.beta_se, l); }, false);
    row("joint", "eta", d.eta, [](const ReplicateResult& r) { return r.eta; },
        [](const ReplicateResult& r) { return r.eta_se; }, false);
    for (int l = 0; l < 2; ++l)
      row("joint", "d" + std::to_string(l + 1), d.eigenvalues[l],
          [&](const ReplicateResult& r) { return at(r.eigenvalues, l); },
          [&](const ReplicateResult& r) { return at(r.eigenvalue_se, l); }, false);
    if (d.family == Family::gaussian)
      row("joint", "sigma2_eps", d.sigma2_eps, [](const ReplicateResult& r) { return r.sigma2_eps; },
          [](const ReplicateResult& r) { return r.sigma2_se; }, false);
    for (int l = 0; l < 2; ++l)
      row("two_stage", "beta" + std::to_string(l + 1), d.beta[l],
          [&](const ReplicateResult& r) { return at(r.beta_two_stage, l); }, nullptr, true);
    row("two_stage", "eta", d.eta, [](const ReplicateResult& r) { return r.eta_two_stage; }, nullptr, true);
  }

  {
    std::ofstream f = open_out(root / "summary.csv");
    std::vector<double> i1, i2;
    for (const auto& r : res)
      if (r.ok) {
        i1.push_back(r.imse.size() > 0 ? r.imse[0] : nan);
        i2.push_back(r.imse.size() > 1 ? r.imse[1] : nan);
      }
    f << "family,replicates,failures,imse_psi1,imse_psi2\n"
      << to_string(d.family) << ',' << summary.replicates << ',' << failures << ',' << num(summarize(i1, {}).mean)
      << ',' << num(summarize(i2, {}).mean) << '\n';
  }

  {
    std::ofstream f = open_out(root / "aic_selection.csv");
    std::map<int, int> counts;
    int selected = 0;
    for (const auto& r : res)
      if (r.ok && r.selected_p > 0) {
        ++counts[r.selected_p];
        ++selected;
      }
    f << "p,count,fraction\n";
    for (const auto& [p, c] : counts) f << p << ',' << c << ',' << num(static_cast<double>(c) / selected) << '\n';
  }

  std::vector<const Vector*> mu, lh;
  std::vector<Vector> psi[2];
  for (const auto& r : res)
    if (r.ok) {
      mu.push_back(&r.mu_grid);
      lh.push_back(&r.loghaz_grid);
      for (int l = 0; l < 2; ++l)
        psi[l].push_back(l < r.psi_grid.cols() ? Vector(r.psi_grid.col(l))
                                               : Vector::Constant(summary.grid.size(), nan));
    }
  write_curves(root / "curves_mu.csv", summary.grid, mu, true_mean);
  write_curves(root / "curves_loghaz.csv", summary.haz_grid, lh, true_log_hazard);
  for (int l = 0; l < 2; ++l) {
    std::vector<const Vector*> ptr;
    for (const auto& v : psi[l]) ptr.push_back(&v);
    write_curves(root / ("curves_psi" + std::to_string(l + 1) + ".csv"), summary.grid, ptr,
                 [l](double t) { return true_eigenfunction(l, t); });
  }
}

}  // namespace jmfpc
