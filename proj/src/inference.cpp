#include "jmfpc/inference.hpp"

#include "jmfpc/error.hpp"
#include "jmfpc/parallel.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace jmfpc {

FrameChart::FrameChart(const Matrix& anchor) : anchor_(anchor) {
  require(anchor.cols() >= 0 && anchor.cols() <= anchor.rows(), ErrorKind::invalid_argument,
          "frame has more columns than rows");
  const Eigen::Index p = anchor.cols();
  if (p > 0) {
    const double err = (anchor.transpose() * anchor - Matrix::Identity(p, p)).cwiseAbs().maxCoeff();
    require(err < 1e-8, ErrorKind::invalid_state, "chart anchor is not orthonormal");
  }
  basis_ = Matrix(anchor.rows(), anchor.rows());
  basis_.leftCols(p) = anchor;
  basis_.rightCols(anchor.rows() - p) = orthogonal_complement(anchor);
}

Matrix FrameChart::generator(const Vector& w) const {
  require(w.size() == size(), ErrorKind::invalid_argument, "chart coordinate length mismatch");
  const int q = this->q(), p = this->p();
  Matrix omega = Matrix::Zero(q, q);
  int k = 0;
  for (int j = 0; j < p; ++j)
    for (int i = p; i < q; ++i) {
      omega(i, j) = w[k];
      omega(j, i) = -w[k];
      ++k;
    }
  for (int j = 1; j < p; ++j)
    for (int i = 0; i < j; ++i) {
      omega(i, j) = w[k];
      omega(j, i) = -w[k];
      ++k;
    }
  return omega;
}

Matrix FrameChart::frame(const Vector& w) const {
  const Matrix E = generator(w).exp();
  return basis_ * E.leftCols(p());
}

Matrix FrameChart::jacobian(const Vector& w) const {
  const int q = this->q(), p = this->p(), n = size();
  const Matrix omega = generator(w);
  Matrix J(q * p, n);
  // Frechet derivative of expm along each generator direction: upper-right block of
  // expm([[Omega, E], [0, Omega]]).
  Matrix big = Matrix::Zero(2 * q, 2 * q);
  big.topLeftCorner(q, q) = omega;
  big.bottomRightCorner(q, q) = omega;
  for (int k = 0; k < n; ++k) {
    Vector e = Vector::Zero(n);
    e[k] = 1.0;
    big.topRightCorner(q, q) = generator(e);
    const Matrix L = Matrix(big.exp()).topRightCorner(q, q);
    const Matrix d = basis_ * L.leftCols(p);
    J.col(k) = Eigen::Map<const Vector>(d.data(), q * p);
  }
  return J;
}

FreeParameterization::FreeParameterization(const JointParams& anchor, Family family)
    : anchor_(anchor), family_(family), layout_(layout_of(anchor, family)), chart_(anchor.theta_psi) {}

std::vector<std::string> FreeParameterization::labels() const {
  const auto all = layout_.labels();
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (int j = 0; j < layout_.q; ++j) out.push_back(all[static_cast<std::size_t>(j)]);
  for (int k = 0; k < chart_.size(); ++k) out.push_back("W[" + std::to_string(k) + "]");
  for (int j = layout_.sigma2(); j < layout_.size(); ++j) out.push_back(all[static_cast<std::size_t>(j)]);
  return out;
}

Vector FreeParameterization::at_anchor() const {
  const Vector packed = pack(anchor_, layout_);
  Vector phi(size());
  const int q = layout_.q, w = chart_.size();
  phi.head(q) = packed.head(q);
  phi.segment(q, w).setZero();
  phi.tail(layout_.size() - layout_.sigma2()) = packed.tail(layout_.size() - layout_.sigma2());
  return phi;
}

JointParams FreeParameterization::params(const Vector& phi) const {
  require(phi.size() == size(), ErrorKind::invalid_argument, "free parameter length mismatch");
  const int q = layout_.q, w = chart_.size();
  Vector packed(layout_.size());
  packed.head(q) = phi.head(q);
  const Matrix frame = chart_.frame(phi.segment(q, w));
  packed.segment(layout_.theta_psi(), q * layout_.p) = Eigen::Map<const Vector>(frame.data(), q * layout_.p);
  packed.tail(layout_.size() - layout_.sigma2()) = phi.tail(layout_.size() - layout_.sigma2());
  return unpack(packed, layout_);
}

Vector FreeParameterization::pull_back(const Vector& phi, const Vector& layout_grad) const {
  require(layout_grad.size() == layout_.size(), ErrorKind::invalid_argument, "gradient length mismatch");
  const int q = layout_.q, w = chart_.size();
  Vector out(size());
  out.head(q) = layout_grad.head(q);
  if (w > 0)
    out.segment(q, w) = chart_.jacobian(phi.segment(q, w)).transpose() *
                        layout_grad.segment(layout_.theta_psi(), q * layout_.p);
  out.tail(layout_.size() - layout_.sigma2()) = layout_grad.tail(layout_.size() - layout_.sigma2());
  return out;
}

int FreeParameterization::free_index(int layout_index) const {
  require(layout_index >= 0 && layout_index < layout_.size(), ErrorKind::invalid_argument,
          "layout index out of range");
  if (layout_index < layout_.q) return layout_index;
  if (layout_index < layout_.sigma2()) return -1;
  return layout_index - layout_.q * layout_.p + chart_.size();
}

FreeParameterization free_parameterization(const JointParams& params, Family family) {
  return FreeParameterization(params, family);
}

double CovarianceEstimate::se(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::numeric_limits<double>::quiet_NaN();
  const auto j = static_cast<Eigen::Index>(it - names.begin());
  return std::sqrt(std::max(covariance(j, j), 0.0));
}

namespace {

// Inverse of a symmetric information matrix; the positive-eigenvalue pseudo-inverse when it is
// not positive definite.
Matrix invert_information(const Matrix& info, bool& indefinite) {
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(info));
  const Vector& lam = eig.eigenvalues();
  const double top = lam.cwiseAbs().maxCoeff();
  indefinite = lam.minCoeff() <= 1e-12 * top;
  Vector inv = Vector::Zero(lam.size());
  for (Eigen::Index j = 0; j < lam.size(); ++j)
    if (lam[j] > 1e-12 * top) inv[j] = 1.0 / lam[j];
  return symmetrize(eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose());
}

}  // namespace

CovarianceEstimate louis_information(const FitResult& fit, const Dataset& data, const LouisOptions& options) {
  require(fit.bases != nullptr, ErrorKind::stale_fit, "fit carries no bases");
  const MonteCarloQ& mcq = fit.final_draws;
  require(mcq.draws.size() == data.size() && mcq.R > 0, ErrorKind::stale_fit,
          "fit holds no final E-step draws for this dataset");
  require(options.max_draws >= 1 && options.step > 0.0, ErrorKind::invalid_argument, "invalid Louis options");
  const FreeParameterization fp(fit.params, data.family);
  const PreparedData prepared = prepare(data, *fit.bases);
  const std::size_t N = prepared.size();
  const int dim = fp.size();
  const ParamLayout layout = fit.layout();
  const int stride = std::max(1, (mcq.R + options.max_draws - 1) / options.max_draws);

  // Per-subject gradients over the thinned draws, in free coordinates.
  auto subject_gradients = [&](const Vector& phi, std::vector<Matrix>& out) {
    const JointParams P = fp.params(phi);
    const Matrix J = fp.chart().size() > 0 ? fp.chart().jacobian(phi.segment(layout.q, fp.chart().size())) : Matrix();
    out.resize(N);
    parallel_for(N, options.workers, [&](std::size_t i) {
      const auto& ps = prepared.subjects[i];
      const SurvivalCache cache = survival_cache(*ps.subject, P, fit.bases->hazard, 1);
      const Matrix& d = mcq.draws[i];
      const int K = (static_cast<int>(d.cols()) + stride - 1) / stride;
      Matrix G(dim, K);
      Vector g(layout.size());
      for (int k = 0; k < K; ++k) {
        g.setZero();
        add_subject_gradient(ps, data.family, P, layout, cache, d.col(k * stride), g, fit.include_survival);
        Vector f(dim);
        const int q = layout.q, w = fp.chart().size();
        f.head(q) = g.head(q);
        if (w > 0) f.segment(q, w) = J.transpose() * g.segment(layout.theta_psi(), q * layout.p);
        f.tail(layout.size() - layout.sigma2()) = g.tail(layout.size() - layout.sigma2());
        G.col(k) = f;
      }
      out[i] = std::move(G);
    });
  };
  auto mean_gradient = [&](const Vector& phi) {
    std::vector<Matrix> parts;
    subject_gradients(phi, parts);
    Vector total = Vector::Zero(dim);
    for (const auto& G : parts) total += G.rowwise().mean();
    Vector pen = Vector::Zero(layout.size());
    const JointParams P = fp.params(phi);
    add_penalty_gradient(P, fit.tuning, fit.bases->penalty, layout, pen);
    return Vector(total + fp.pull_back(phi, pen));
  };

  const Vector phi0 = fp.at_anchor();
  std::vector<Matrix> at0;
  subject_gradients(phi0, at0);
  Matrix cov = Matrix::Zero(dim, dim);
  for (const auto& G : at0) {
    const Vector mu = G.rowwise().mean();
    const Matrix C = G.colwise() - mu;
    if (G.cols() > 1) cov.noalias() += C * C.transpose() / static_cast<double>(G.cols());
  }

  Matrix H(dim, dim);
  for (int j = 0; j < dim; ++j) {
    const double h = options.step * std::max(1.0, std::abs(phi0[j]));
    Vector up = phi0, down = phi0;
    up[j] += h;
    down[j] -= h;
    H.col(j) = (mean_gradient(up) - mean_gradient(down)) / (2.0 * h);
  }

  CovarianceEstimate out;
  out.names = fp.labels();
  out.method = CovarianceMethod::louis;
  out.information = symmetrize(-symmetrize(H) - cov);
  out.covariance = invert_information(out.information, out.indefinite);
  if (out.indefinite) warn("Louis information is not positive definite; using a pseudo-inverse");
  return out;
}

JointParams align_to_reference(const JointParams& replicate, const JointParams& reference) {
  const int p = replicate.p();
  require(reference.p() == p && reference.q() == replicate.q(), ErrorKind::invalid_argument,
          "replicate and reference dimensions differ");
  JointParams out = replicate;
  std::vector<bool> used(static_cast<std::size_t>(p), false);
  const Matrix ip = reference.theta_psi.transpose() * replicate.theta_psi;
  for (int r = 0; r < p; ++r) {
    int best = -1;
    for (int c = 0; c < p; ++c)
      if (!used[static_cast<std::size_t>(c)] && (best < 0 || std::abs(ip(r, c)) > std::abs(ip(r, best)))) best = c;
    used[static_cast<std::size_t>(best)] = true;
    const double sign = ip(r, best) < 0.0 ? -1.0 : 1.0;
    out.theta_psi.col(r) = sign * replicate.theta_psi.col(best);
    out.eigenvalues[r] = replicate.eigenvalues[best];
    out.beta[r] = sign * replicate.beta[best];
  }
  return out;
}

std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed, int replicate) {
  require(n >= 1, ErrorKind::invalid_argument, "cannot resample an empty dataset");
  std::mt19937_64 rng(subject_seed(seed, static_cast<std::size_t>(replicate)));
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = pick(rng);
  return out;
}

std::optional<JointParams> bootstrap_replicate(const Dataset& data, const FitResult& original,
                                               const std::vector<std::size_t>& indices, const McemConfig& config) {
  const Dataset sample = data.subset(indices);
  FitResult warm;
  warm.params = original.params;
  warm.states.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    MHState s = original.states.at(indices[j]);
    s.rng.seed(subject_seed(config.seed, j));
    warm.states.push_back(std::move(s));
  }
  McemConfig c = config;
  c.include_survival = original.include_survival;
  try {
    const FitResult f = fit(sample, original.bases, original.tuning, c, &warm);
    if (!f.converged) return std::nullopt;
    return align_to_reference(f.params, original.params);
  } catch (const Error&) {
    return std::nullopt;
  }
}

CovarianceEstimate bootstrap_covariance(const std::vector<Vector>& estimates, const std::vector<std::string>& names) {
  require(estimates.size() >= 2, ErrorKind::invalid_argument, "bootstrap covariance needs at least two estimates");
  const Eigen::Index d = estimates.front().size();
  require(static_cast<Eigen::Index>(names.size()) == d, ErrorKind::invalid_argument, "label count mismatch");
  Matrix X(d, static_cast<Eigen::Index>(estimates.size()));
  for (std::size_t b = 0; b < estimates.size(); ++b) X.col(static_cast<Eigen::Index>(b)) = estimates[b];
  const Vector mu = X.rowwise().mean();
  const Matrix C = X.colwise() - mu;
  CovarianceEstimate out;
  out.names = names;
  out.method = CovarianceMethod::bootstrap;
  out.covariance = symmetrize(C * C.transpose() / static_cast<double>(estimates.size() - 1));
  out.replicates = static_cast<int>(estimates.size());
  return out;
}

CovarianceEstimate bootstrap_se(const Dataset& data, const FitResult& original, int B, const McemConfig& config) {
  require(B >= 2, ErrorKind::invalid_argument, "bootstrap needs B >= 2");
  const ParamLayout layout = original.layout();
  std::vector<std::optional<JointParams>> results(static_cast<std::size_t>(B));
  McemConfig inner = config;
  inner.workers = 1;
  inner.on_iteration = nullptr;
  parallel_for(static_cast<std::size_t>(B), config.workers, [&](std::size_t b) {
    McemConfig c = inner;
    c.seed = subject_seed(config.seed ^ 0x9e3779b97f4a7c15ULL, b);
    results[b] = bootstrap_replicate(data, original, bootstrap_indices(data.size(), config.seed, static_cast<int>(b)), c);
  });
  std::vector<Vector> estimates;
  for (const auto& r : results)
    if (r) estimates.push_back(pack(*r, layout));
  const int dropped = B - static_cast<int>(estimates.size());
  if (dropped > 0.2 * B)
    fail(ErrorKind::bootstrap_unreliable, std::to_string(dropped) + " of " + std::to_string(B) +
                                              " bootstrap refits did not converge");
  CovarianceEstimate out = bootstrap_covariance(estimates, layout.labels());
  out.dropped = dropped;
  return out;
}

PredictionResult predict_new_subject(const FitResult& fit, const Subject& subject, int R, double alpha,
                                     std::uint64_t seed) {
  require(fit.bases != nullptr, ErrorKind::stale_fit, "fit carries no bases");
  return predict_new_subject(fit.params, fit.family, *fit.bases, subject, R, alpha, seed);
}

PredictionResult predict_new_subject(const JointParams& params, Family family, const ModelBases& bases,
                                     const Subject& subject, int R, double alpha, std::uint64_t seed) {
  require(R >= 1, ErrorKind::invalid_argument, "number of draws must be >= 1");
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::invalid_argument, "alpha must lie in (0, 1)");
  require(subject.covariates.size() == params.m(), ErrorKind::invalid_argument, "covariate length does not match eta");
  require(subject.responses.size() == subject.times.size(), ErrorKind::invalid_argument,
          "times and responses differ in length");
  const double end = bases.hazard.support_end;
  require(end > 0.0, ErrorKind::invalid_argument, "hazard basis has no support");

  PredictionResult out;
  out.alpha = alpha;
  Subject s = subject;
  s.survival.reset();
  MHState state = MHState::initial(Vector::Zero(params.p()), params.eigenvalues, subject_seed(seed, 0));
  out.score_draws = sample_scores(s, family, params, bases, R, state, false);

  std::mt19937_64 rng(subject_seed(seed, 1));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double offset = subject.covariates.dot(params.eta);
  const double cum_end = cumulative_hazard(params, bases.hazard, end);
  out.event_draws = Vector(R);
  for (int k = 0; k < R; ++k) {
    const double lp = out.score_draws.col(k).dot(params.beta) + offset;
    if (!std::isfinite(lp)) fail(ErrorKind::sampler_failure, "nonfinite linear predictor in prediction");
    const double u = 1.0 - unif(rng);  // (0, 1]
    const double target = -std::log(u) * std::exp(-lp);
    if (!(target < cum_end)) {
      out.event_draws[k] = end;
      ++out.truncated;
      continue;
    }
    double lo = 0.0, hi = end;
    for (int it = 0; it < 200 && hi - lo > 1e-12 * end; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (cumulative_hazard(params, bases.hazard, mid) < target)
        lo = mid;
      else
        hi = mid;
    }
    out.event_draws[k] = 0.5 * (lo + hi);
  }
  std::vector<double> sorted(out.event_draws.data(), out.event_draws.data() + R);
  std::sort(sorted.begin(), sorted.end());
  out.median = quantile_sorted(sorted, 0.5);
  out.lower = quantile_sorted(sorted, alpha / 2.0);
  out.upper = quantile_sorted(sorted, 1.0 - alpha / 2.0);
  if (out.truncated > 0)
    warn(std::to_string(out.truncated) + " predicted event times truncated at the hazard support end");
  return out;
}

}  // namespace jmfpc
