#include "jmfpc/baselines.hpp"

#include "jmfpc/error.hpp"

#include <cmath>

namespace jmfpc {

FitResult fit_longitudinal_only(const Dataset& data, std::shared_ptr<const ModelBases> bases,
                                const TuningParams& tuning, const McemConfig& config) {
  McemConfig c = config;
  c.include_survival = false;
  return fit(data, std::move(bases), tuning, c);
}

SurvivalEstimate fit_survival_fixed_scores(const Dataset& data, const ModelBases& bases,
                                           const std::vector<Vector>& scores, double sigma_b2,
                                           const McemConfig& config) {
  validate(data);
  require(scores.size() == data.size(), ErrorKind::invalid_argument, "one score vector per subject required");
  require(sigma_b2 > 0.0, ErrorKind::invalid_argument, "sigma_b2 must be positive");
  const int p = scores.empty() ? 0 : static_cast<int>(scores.front().size());
  const int K = bases.hazard.size(), m = data.n_covariates();

  // The scores enter as a single fixed draw per subject.
  MonteCarloQ fixed;
  fixed.R = 1;
  for (const auto& s : scores) {
    require(s.size() == p, ErrorKind::invalid_argument, "score vectors differ in length");
    fixed.draws.push_back(s);
    fixed.mean.push_back(s);
    fixed.second_moment.push_back(s * s.transpose());
  }

  const PreparedData prepared = prepare(data, bases);
  JointParams params = JointParams::zeros(bases.longitudinal.size(), p, K, m);
  double exact = 0.0, follow = 0.0;
  for (const auto& s : data.subjects) {
    if (s.survival->exact_event()) exact += 1.0;
    follow += s.survival->t_right;
  }
  params.hazard_fixed[0] = std::log(std::max(exact, 0.5) / follow);

  const TuningParams tuning{p, 0.0, 0.0, sigma_b2};
  McemConfig c = config;
  c.include_survival = true;
  int iterations = 0;
  params = maximize_survival(prepared, fixed, params, tuning, c, &iterations);

  SurvivalEstimate out;
  out.hazard_fixed = params.hazard_fixed;
  out.hazard_spline = params.hazard_spline;
  out.beta = params.beta;
  out.eta = params.eta;
  out.iterations = iterations;
  const Matrix info = -survival_hessian(prepared, fixed, params, tuning);
  const Eigen::LDLT<Matrix> ldlt(info);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive())
    out.covariance = ldlt.solve(Matrix::Identity(info.rows(), info.cols()));
  else
    out.covariance = info.completeOrthogonalDecomposition().pseudoInverse();
  const Vector se = out.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  out.beta_se = se.segment(K + 2, p);
  out.eta_se = se.segment(K + 2 + p, m);
  return out;
}

TwoStageResult two_stage_fit(const Dataset& data, std::shared_ptr<const ModelBases> bases,
                             const TuningParams& tuning, const McemConfig& config) {
  TwoStageResult out;
  out.stage1 = fit_longitudinal_only(data, bases, tuning, config);
  out.stage2 = fit_survival_fixed_scores(data, *bases, out.stage1.score_mean, tuning.sigma_b2, config);
  return out;
}

RawPcaResult raw_pca_fit(const Dataset& data, const ModelBases& bases, int n_components, double sigma_b2,
                         const McemConfig& config) {
  require(data.family == Family::gaussian, ErrorKind::invalid_argument, "raw PCA needs Gaussian responses");
  require(data.size() >= 2, ErrorKind::invalid_argument, "raw PCA needs at least two subjects");
  const Vector& grid = data.subjects.front().times;
  const Eigen::Index n = grid.size();
  require(n >= 2, ErrorKind::unsupported_grid, "raw PCA needs at least two observation times");
  require(n_components >= 1 && n_components <= n, ErrorKind::invalid_argument, "invalid number of components");
  for (const auto& s : data.subjects) {
    if (s.times.size() != n || (s.times - grid).cwiseAbs().maxCoeff() > 1e-12)
      fail(ErrorKind::unsupported_grid, "subject '" + s.id + "' is not observed on the common grid");
  }

  const Eigen::Index N = static_cast<Eigen::Index>(data.size());
  Matrix Y(N, n);
  for (Eigen::Index i = 0; i < N; ++i) Y.row(i) = data.subjects[static_cast<std::size_t>(i)].responses.transpose();
  RawPcaResult out;
  out.grid = grid;
  out.mean = Y.colwise().mean().transpose();
  const Matrix C = Y.rowwise() - out.mean.transpose();
  const Matrix S = C.transpose() * C / static_cast<double>(N - 1);

  // Trapezoid weights turn the discrete covariance into an L2 operator on the grid.
  Vector w = Vector::Zero(n);
  for (Eigen::Index j = 1; j < n; ++j) {
    const double h = 0.5 * (grid[j] - grid[j - 1]);
    w[j - 1] += h;
    w[j] += h;
  }
  const Vector sw = w.cwiseSqrt();
  const Matrix op = symmetrize(sw.asDiagonal() * S * sw.asDiagonal());
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(op);
  const Vector all = eig.eigenvalues().reverse().cwiseMax(0.0);
  const double total = all.sum();

  out.eigenvalues = all.head(n_components);
  out.explained = total > 0.0 ? Vector(out.eigenvalues / total) : Vector::Zero(n_components);
  out.eigenfunctions = Matrix(n, n_components);
  Matrix U(n, n_components);
  for (int l = 0; l < n_components; ++l) {
    Vector u = eig.eigenvectors().col(n - 1 - l);
    Eigen::Index imax = 0;
    u.cwiseAbs().maxCoeff(&imax);
    if (u[imax] < 0.0) u = -u;
    U.col(l) = u;
    out.eigenfunctions.col(l) = u.cwiseQuotient(sw);
  }
  const Matrix scores = C * sw.asDiagonal() * U;
  out.scores.reserve(data.size());
  for (Eigen::Index i = 0; i < N; ++i) out.scores.push_back(scores.row(i).transpose());
  out.stage2 = fit_survival_fixed_scores(data, bases, out.scores, sigma_b2, config);
  return out;
}

}  // namespace jmfpc
