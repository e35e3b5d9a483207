#include "jmfpc/selection.hpp"

#include "jmfpc/error.hpp"
#include "jmfpc/parallel.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace jmfpc {

double df_longitudinal(double h, const Matrix& total_gram, const PenaltyMatrix& penalty) {
  require(h >= 0.0, ErrorKind::invalid_argument, "penalty parameter must be >= 0");
  require(total_gram.rows() == penalty.matrix.rows(), ErrorKind::invalid_argument, "gram/penalty size mismatch");
  const Matrix A = symmetrize(total_gram + h * penalty.matrix);
  const Eigen::LDLT<Matrix> ldlt(A);
  const double scale = std::max(1.0, A.diagonal().cwiseAbs().maxCoeff());
  const Vector dg = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !(dg.minCoeff() > 1e-12 * scale))
    fail(ErrorKind::singular_design, "penalized gram matrix is singular");
  return ldlt.solve(total_gram).trace();
}

double df_longitudinal(double h, std::span<const Matrix> designs, const PenaltyMatrix& penalty) {
  const Eigen::Index q = penalty.matrix.rows();
  Matrix G = Matrix::Zero(q, q);
  for (const auto& B : designs) {
    require(B.cols() == q, ErrorKind::invalid_argument, "design width does not match the penalty");
    G.noalias() += B.transpose() * B;
  }
  return df_longitudinal(h, G, penalty);
}

double df_hazard(double sigma_b2, std::span<const SurvivalRecord> records, const HazardBasis& basis) {
  require(sigma_b2 > 0.0, ErrorKind::invalid_argument, "sigma_b2 must be positive");
  const int K = basis.size();
  if (K == 0) return 0.0;
  Matrix S = Matrix::Zero(K, K);
  Vector row(K);
  for (const auto& r : records) {
    const double t = r.midpoint();
    for (int k = 0; k < K; ++k) row[k] = std::max(t - basis.knots[k], 0.0);
    S.noalias() += row * row.transpose();
  }
  // trace{(S + I/s)^-1 S} = sum lambda / (lambda + 1/s)
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(S), Eigen::EigenvaluesOnly);
  double df = 0.0;
  for (int k = 0; k < K; ++k) {
    const double lam = std::max(eig.eigenvalues()[k], 0.0);
    df += lam * sigma_b2 / (lam * sigma_b2 + 1.0);
  }
  return df;
}

DfBreakdown df_breakdown(const TuningParams& tuning, const Matrix& total_gram, const Dataset& data,
                         const ModelBases& bases) {
  DfBreakdown out;
  out.df_mu = df_longitudinal(tuning.h_mu, total_gram, bases.penalty);
  out.df_psi = df_longitudinal(tuning.h_psi, total_gram, bases.penalty);
  const auto records = data.survival_records();
  out.df_hazard = df_hazard(tuning.sigma_b2, records, bases.hazard);
  out.p = tuning.p;
  out.m = data.n_covariates();
  return out;
}

double expected_complete_loglik(const FitResult& fit, const Dataset& data) {
  require(fit.bases != nullptr, ErrorKind::stale_fit, "fit carries no bases");
  require(fit.final_draws.draws.size() == data.size() && fit.final_draws.R > 0, ErrorKind::stale_fit,
          "fit holds no final E-step draws for this dataset");
  const PreparedData prepared = prepare(data, *fit.bases);
  const Vector q = q_contributions(prepared, fit.params, fit.tuning, fit.final_draws, fit.include_survival);
  double value = q.mean() - log_penalty(fit.params, fit.tuning, fit.bases->penalty);
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  if (data.family == Family::gaussian) {
    double n = 0.0;
    for (const auto& s : data.subjects) n += static_cast<double>(s.n_obs());
    value -= 0.5 * n * log_2pi;
  }
  value -= 0.5 * static_cast<double>(fit.params.p()) * static_cast<double>(data.size()) * log_2pi;
  return value;
}

AicValue aic(const FitResult& fit, const Dataset& data) {
  AicValue out;
  out.expected_loglik = expected_complete_loglik(fit, data);
  const PreparedData prepared = prepare(data, *fit.bases);
  out.df = df_breakdown(fit.tuning, prepared.total_gram, data, *fit.bases);
  out.aic = -2.0 * out.expected_loglik + 2.0 * out.df.total();
  return out;
}

Vector default_h_grid(const Matrix& total_gram, const PenaltyMatrix& penalty, int n) {
  require(n >= 1, ErrorKind::invalid_argument, "grid needs at least one value");
  const double scale = total_gram.trace() / penalty.matrix.trace();
  return logspace(1e-2, 1e2, n) * scale;
}

Vector default_sigma_grid(int n) {
  require(n >= 1, ErrorKind::invalid_argument, "grid needs at least one value");
  return logspace(1e-2, 1e2, n);
}

bool preferred(const Candidate& a, const Candidate& b) {
  if (a.ok != b.ok) return a.ok;
  if (!a.ok) return false;
  if (a.value.aic != b.value.aic) return a.value.aic < b.value.aic;
  if (a.tuning.p != b.tuning.p) return a.tuning.p < b.tuning.p;
  if (a.tuning.h_mu != b.tuning.h_mu) return a.tuning.h_mu > b.tuning.h_mu;
  return a.tuning.sigma_b2 < b.tuning.sigma_b2;
}

AICReport grid_search(const Dataset& data, std::shared_ptr<const ModelBases> bases, const SelectionConfig& config) {
  require(bases != nullptr, ErrorKind::invalid_argument, "missing bases");
  require(!config.p_candidates.empty(), ErrorKind::invalid_argument, "no component counts to search");
  const PreparedData prepared = prepare(data, *bases);
  const Vector h_grid = config.h_grid.size() > 0 ? config.h_grid : default_h_grid(prepared.total_gram, bases->penalty);
  const Vector s_grid = config.sigma_grid.size() > 0 ? config.sigma_grid : default_sigma_grid();
  require(h_grid.size() > 0 && s_grid.size() > 0, ErrorKind::invalid_argument, "tuning grids must be nonempty");

  const std::size_t P = config.p_candidates.size();
  const std::size_t per_p = static_cast<std::size_t>(h_grid.size() * s_grid.size());
  std::vector<Candidate> candidates(P * per_p);
  std::vector<std::shared_ptr<const FitResult>> slice_best(P);
  std::vector<std::size_t> slice_best_index(P, 0);

  const int outer = std::max(1, std::min<int>(config.fit.workers, static_cast<int>(P)));
  McemConfig fit_config = config.fit;
  fit_config.workers = std::max(1, config.fit.workers / outer);

  // Candidates within a p-slice run in order, each warm-started from the last successful fit.
  parallel_for(P, outer, [&](std::size_t s) {
    std::shared_ptr<const FitResult> previous;
    for (Eigen::Index a = 0; a < h_grid.size(); ++a) {
      for (Eigen::Index b = 0; b < s_grid.size(); ++b) {
        const std::size_t idx = s * per_p + static_cast<std::size_t>(a * s_grid.size() + b);
        Candidate& c = candidates[idx];
        c.tuning = TuningParams{config.p_candidates[s], h_grid[a], h_grid[a], s_grid[b]};
        try {
          auto f = std::make_shared<const FitResult>(fit(data, bases, c.tuning, fit_config, previous.get()));
          c.value = aic(*f, data);
          c.converged = f->converged;
          c.iterations = f->iterations;
          c.ok = std::isfinite(c.value.aic);
          if (!c.ok) c.error = "nonfinite AIC";
          previous = f;
          if (c.ok && (!slice_best[s] || preferred(c, candidates[slice_best_index[s]]))) {
            slice_best[s] = f;
            slice_best_index[s] = idx;
          }
        } catch (const Error& e) {
          c.ok = false;
          c.error = e.what();
        }
      }
    }
  });

  AICReport report;
  report.candidates = std::move(candidates);
  bool any = false;
  for (std::size_t s = 0; s < P; ++s) {
    if (!slice_best[s]) continue;
    const int p = config.p_candidates[s];
    report.best_index_per_p[p] = slice_best_index[s];
    report.best_fit_per_p[p] = slice_best[s];
    if (!any || preferred(report.candidates[slice_best_index[s]], report.candidates[report.best])) {
      report.best = slice_best_index[s];
      report.best_fit = slice_best[s];
      any = true;
    }
  }
  if (!any) {
    std::ostringstream os;
    os << "all " << report.candidates.size() << " candidates failed";
    for (const auto& c : report.candidates)
      os << "\n  p=" << c.tuning.p << " h=" << c.tuning.h_mu << " sigma_b2=" << c.tuning.sigma_b2 << ": " << c.error;
    fail(ErrorKind::all_candidates_failed, os.str());
  }
  return report;
}

}  // namespace jmfpc
