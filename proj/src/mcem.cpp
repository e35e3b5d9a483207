#include "jmfpc/mcem.hpp"

#include "jmfpc/error.hpp"
#include "jmfpc/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace jmfpc {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Bernoulli log-likelihood y x - log(1 + e^x).
double binary_term(double y, double x) { return y * x - log1pexp(x); }

// Solves a symmetric positive (semi)definite system, adding a small ridge when needed.
Vector solve_spd(const Matrix& A, const Vector& b, const char* what) {
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() == Eigen::Success) {
    Vector x = llt.solve(b);
    if (x.allFinite()) return x;
  }
  warn(std::string(what) + ": singular normal equations, adding ridge 1e-10");
  const double scale = std::max(1.0, A.diagonal().cwiseAbs().maxCoeff());
  Matrix Ar = A;
  Ar.diagonal().array() += 1e-10 * scale;
  Eigen::LDLT<Matrix> ldlt(Ar);
  Vector x = ldlt.solve(b);
  if (!x.allFinite()) fail(ErrorKind::mstep_failure, std::string(what) + ": normal equations unsolvable");
  return x;
}

// Augmented second moment E[(1, xi)(1, xi)'].
Matrix augmented_moment(const Vector& mean, const Matrix& second) {
  const Eigen::Index p = mean.size();
  Matrix S(p + 1, p + 1);
  S(0, 0) = 1.0;
  S.block(1, 0, p, 1) = mean;
  S.block(0, 1, 1, p) = mean.transpose();
  S.bottomRightCorner(p, p) = second;
  return S;
}

Matrix coefficient_matrix(const JointParams& params) {
  Matrix U(params.q(), params.p() + 1);
  U.col(0) = params.theta_mu;
  U.rightCols(params.p()) = params.theta_psi;
  return U;
}

void set_coefficients(JointParams& params, const Matrix& U) {
  params.theta_mu = U.col(0);
  params.theta_psi = U.rightCols(params.p());
}

// blockdiag(h_mu J, h_psi J, ..., h_psi J)
Matrix penalty_blocks(const Matrix& J, const TuningParams& tuning, int P) {
  const Eigen::Index q = J.rows();
  Matrix out = Matrix::Zero(q * P, q * P);
  for (int a = 0; a < P; ++a) out.block(a * q, a * q, q, q) = (a == 0 ? tuning.h_mu : tuning.h_psi) * J;
  return out;
}

double penalty_value(const Matrix& J, const TuningParams& tuning, const Matrix& U) {
  double s = 0.0;
  for (Eigen::Index a = 0; a < U.cols(); ++a)
    s += (a == 0 ? tuning.h_mu : tuning.h_psi) * U.col(a).dot(J * U.col(a));
  return 0.5 * s;
}

struct NormalEquations {
  Matrix A;
  Vector rhs;
  double yy = 0.0, n = 0.0;
};

// Expected Gaussian normal equations in vec([theta_mu, theta_psi]).
NormalEquations gaussian_normal_equations(const PreparedData& prepared, const MonteCarloQ& mcq, int q, int P) {
  const int dim = q * P;
  NormalEquations ne{Matrix::Zero(dim, dim), Vector::Zero(dim)};
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const auto& ps = prepared.subjects[i];
    if (ps.design.rows() == 0) continue;
    const Matrix S = augmented_moment(mcq.mean[i], mcq.second_moment[i]);
    Vector mt(P);
    mt[0] = 1.0;
    mt.tail(P - 1) = mcq.mean[i];
    for (int a = 0; a < P; ++a) {
      ne.rhs.segment(a * q, q) += mt[a] * ps.design_y;
      for (int b = 0; b < P; ++b) ne.A.block(a * q, b * q, q, q) += S(a, b) * ps.gram;
    }
    ne.yy += ps.yy;
    ne.n += static_cast<double>(ps.design.rows());
  }
  return ne;
}

void update_gaussian_longitudinal(const PreparedData& prepared, const MonteCarloQ& mcq, JointParams& params,
                                  const TuningParams& tuning, int* iterations) {
  const int q = params.q(), P = params.p() + 1;
  const NormalEquations ne = gaussian_normal_equations(prepared, mcq, q, P);
  const Matrix& A = ne.A;
  const Vector& rhs = ne.rhs;
  const double yy = ne.yy, n_total = ne.n;
  const Matrix pen = penalty_blocks(prepared.bases->penalty.matrix, tuning, P);
  double s2 = params.sigma2_eps;
  Vector u;
  int it = 0;
  for (; it < 200; ++it) {
    u = solve_spd(A + s2 * pen, rhs, "longitudinal M-step");
    const double rss = yy - 2.0 * u.dot(rhs) + u.dot(A * u);
    const double s2_new = n_total > 0.0 ? std::max(rss / n_total, 1e-12) : s2;
    const bool done = std::abs(s2_new - s2) <= 1e-12 * s2 || pen.isZero(0.0);
    s2 = s2_new;
    if (done) break;
  }
  if (iterations) *iterations = it + 1;
  set_coefficients(params, Eigen::Map<const Matrix>(u.data(), q, P));
  params.sigma2_eps = s2;
}

struct BinaryEval {
  double value = 0.0;
  Matrix grad;     // q x P
  Matrix hessian;  // qP x qP (negative definite part of the likelihood)
};

// MC-averaged binary log-likelihood of one subject at coefficients U.
void binary_subject(const PreparedSubject& ps, const Matrix& draws, const Matrix& U, bool derivs, BinaryEval& out) {
  const Eigen::Index n = ps.design.rows();
  if (n == 0) return;
  const Eigen::Index R = draws.cols(), P = U.cols(), q = U.rows();
  Matrix Xi(P, R);
  Xi.row(0).setOnes();
  Xi.bottomRows(P - 1) = draws;
  const Matrix BU = ps.design * U;
  const Matrix lin = BU * Xi;  // n x R
  const Vector& y = ps.subject->responses;
  double v = 0.0;
  if (!derivs) {
    for (Eigen::Index k = 0; k < R; ++k)
      for (Eigen::Index j = 0; j < n; ++j) v += binary_term(y[j], lin(j, k));
    out.value += v / static_cast<double>(R);
    return;
  }
  Matrix res(n, R), w(n, R);
  for (Eigen::Index k = 0; k < R; ++k)
    for (Eigen::Index j = 0; j < n; ++j) {
      // One exponential serves both log(1 + e^x) and the logistic function.
      const double x = lin(j, k);
      const double e = std::exp(-std::abs(x));
      const double pr = x >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      v += y[j] * x - std::max(x, 0.0) - std::log1p(e);
      res(j, k) = y[j] - pr;
      w(j, k) = pr * (1.0 - pr);
    }
  out.value += v / static_cast<double>(R);
  out.grad.noalias() += ps.design.transpose() * (res * Xi.transpose()) / static_cast<double>(R);
  for (Eigen::Index a = 0; a < P; ++a) {
    for (Eigen::Index b = a; b < P; ++b) {
      const Vector omega = (w * (Xi.row(a).cwiseProduct(Xi.row(b))).transpose()) / static_cast<double>(R);
      const Matrix blk = ps.design.transpose() * omega.asDiagonal() * ps.design;
      out.hessian.block(a * q, b * q, q, q) -= blk;
      if (b != a) out.hessian.block(b * q, a * q, q, q) -= blk;
    }
  }
}

BinaryEval binary_objective(const PreparedData& prepared, const MonteCarloQ& mcq, const Matrix& U,
                            const TuningParams& tuning, bool derivs, int workers) {
  const Eigen::Index q = U.rows(), P = U.cols();
  std::vector<BinaryEval> parts(prepared.size());
  parallel_for(prepared.size(), workers, [&](std::size_t i) {
    auto& e = parts[i];
    if (derivs) {
      e.grad = Matrix::Zero(q, P);
      e.hessian = Matrix::Zero(q * P, q * P);
    }
    binary_subject(prepared.subjects[i], mcq.draws[i], U, derivs, e);
  });
  BinaryEval out;
  if (derivs) {
    out.grad = Matrix::Zero(q, P);
    out.hessian = Matrix::Zero(q * P, q * P);
  }
  for (const auto& e : parts) {
    out.value += e.value;
    if (derivs) {
      out.grad += e.grad;
      out.hessian += e.hessian;
    }
  }
  const Matrix& J = prepared.bases->penalty.matrix;
  out.value -= penalty_value(J, tuning, U);
  if (derivs) {
    for (Eigen::Index a = 0; a < P; ++a) {
      const double h = a == 0 ? tuning.h_mu : tuning.h_psi;
      out.grad.col(a) -= h * (J * U.col(a));
      out.hessian.block(a * q, a * q, q, q) -= h * J;
    }
  }
  return out;
}

void update_binary_longitudinal(const PreparedData& prepared, const MonteCarloQ& mcq, JointParams& params,
                                const TuningParams& tuning, const McemConfig& config, int* iterations) {
  Matrix U = coefficient_matrix(params);
  const Eigen::Index dim = U.size();
  BinaryEval cur = binary_objective(prepared, mcq, U, tuning, true, config.workers);
  int it = 0;
  for (; it < config.newton_max_iter; ++it) {
    const Vector g = Eigen::Map<const Vector>(cur.grad.data(), dim);
    const Vector step = solve_spd(-cur.hessian, g, "binary longitudinal M-step");
    // Newton decrement g' (-H)^-1 g / 2 bounds the remaining ascent.
    if (0.5 * g.dot(step) <= 1e-10 * (1.0 + std::abs(cur.value))) break;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= config.max_halvings; ++h, t *= 0.5) {
      Matrix Un = U + t * Eigen::Map<const Matrix>(step.data(), U.rows(), U.cols());
      BinaryEval trial = binary_objective(prepared, mcq, Un, tuning, true, config.workers);
      if (std::isfinite(trial.value) && trial.value >= cur.value) {
        U = std::move(Un);
        cur = std::move(trial);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (g.norm() <= 1e-6 * (1.0 + std::abs(cur.value))) break;
      std::ostringstream os;
      os << "binary longitudinal Newton failed to ascend after " << config.max_halvings
         << " halvings (gradient norm " << g.norm() << ")";
      fail(ErrorKind::mstep_failure, os.str());
    }
  }
  if (iterations) *iterations = it + 1;
  set_coefficients(params, U);
}

// ---------------------------------------------------------------------------
// Survival block

struct SurvEval {
  double value = 0.0;
  Vector grad;
  Matrix hessian;
};

// Coordinates: omega = (a0, a1, b) | beta | eta.
JointParams with_survival(const JointParams& params, const Vector& phi) {
  JointParams out = params;
  const int K = params.K(), p = params.p(), m = params.m();
  out.hazard_fixed = phi.head<2>();
  out.hazard_spline = phi.segment(2, K);
  out.beta = phi.segment(2 + K, p);
  out.eta = phi.segment(2 + K + p, m);
  return out;
}

Vector survival_coordinates(const JointParams& params) {
  const int K = params.K(), p = params.p(), m = params.m();
  Vector phi(2 + K + p + m);
  phi.head<2>() = params.hazard_fixed;
  phi.segment(2, K) = params.hazard_spline;
  phi.segment(2 + K, p) = params.beta;
  phi.segment(2 + K + p, m) = params.eta;
  return phi;
}

void survival_subject(const Subject& subject, const Matrix& draws, const JointParams& params,
                      const HazardBasis& basis, int order, SurvEval& out) {
  if (!subject.survival) return;
  const SurvivalCache c = survival_cache(subject, params, basis, order);
  const Eigen::Index R = draws.cols(), p = draws.rows();
  const int K2 = params.K() + 2;
  const int m = params.m();
  const double invR = 1.0 / static_cast<double>(R);
  const bool interval = c.kind == CensorKind::interval;

  double v = 0.0, dl = 0.0, dr = 0.0, dlp = 0.0;
  double hll = 0.0, hlr = 0.0, hrr = 0.0, hllp = 0.0, hrlp = 0.0, hlplp = 0.0;
  Vector dlp_xi = Vector::Zero(p), hllp_xi = Vector::Zero(p), hrlp_xi = Vector::Zero(p);
  Vector hlplp_xi = Vector::Zero(p);
  Matrix hlplp_xx = Matrix::Zero(p, p);
  double d_loghaz = 0.0;
  const bool second = order >= 2;
  for (Eigen::Index k = 0; k < R; ++k) {
    const double lp = draws.col(k).dot(params.beta) + c.offset;
    const RelapseTerms r = relapse_terms(c.kind, c.left.value, c.right.value, c.log_haz, lp, second);
    v += r.value;
    if (order < 1) continue;
    dl += r.d_left;
    dr += r.d_right;
    dlp += r.d_lp;
    d_loghaz += r.d_loghaz;
    dlp_xi += r.d_lp * draws.col(k);
    if (!second) continue;
    hll += r.h_ll;
    hlr += r.h_lr;
    hrr += r.h_rr;
    hllp += r.h_llp;
    hrlp += r.h_rlp;
    hlplp += r.h_lplp;
    hllp_xi += r.h_llp * draws.col(k);
    hrlp_xi += r.h_rlp * draws.col(k);
    hlplp_xi += r.h_lplp * draws.col(k);
    hlplp_xx.noalias() += r.h_lplp * draws.col(k) * draws.col(k).transpose();
  }
  out.value += v * invR;
  if (order < 1) return;

  const Vector& Z = subject.covariates;
  auto g = out.grad.head(K2);
  g += dr * invR * c.right.gradient;
  if (interval) g += dl * invR * c.left.gradient;
  if (c.kind == CensorKind::exact) g += d_loghaz * invR * c.event_design;
  out.grad.segment(K2, p) += dlp_xi * invR;
  out.grad.segment(K2 + p, m) += dlp * invR * Z;
  if (!second) return;

  auto H = [&](Eigen::Index r0, Eigen::Index c0, Eigen::Index nr, Eigen::Index nc) {
    return out.hessian.block(r0, c0, nr, nc);
  };
  const Vector& gr = c.right.gradient;
  Matrix Hww = (hrr * invR) * gr * gr.transpose() + (dr * invR) * c.right.hessian;
  Matrix Hwb = gr * (hrlp_xi * invR).transpose();
  Vector hwl = (hrlp * invR) * gr;
  if (interval) {
    const Vector& gl = c.left.gradient;
    Hww += (hll * invR) * gl * gl.transpose() + (hlr * invR) * (gl * gr.transpose() + gr * gl.transpose()) +
           (dl * invR) * c.left.hessian;
    Hwb += gl * (hllp_xi * invR).transpose();
    hwl += (hllp * invR) * gl;
  }
  H(0, 0, K2, K2) += Hww;
  H(0, K2, K2, p) += Hwb;
  H(K2, 0, p, K2) += Hwb.transpose();
  const Matrix Hwe = hwl * Z.transpose();
  H(0, K2 + p, K2, m) += Hwe;
  H(K2 + p, 0, m, K2) += Hwe.transpose();
  H(K2, K2, p, p) += hlplp_xx * invR;
  const Matrix Hbe = (hlplp_xi * invR) * Z.transpose();
  H(K2, K2 + p, p, m) += Hbe;
  H(K2 + p, K2, m, p) += Hbe.transpose();
  H(K2 + p, K2 + p, m, m) += (hlplp * invR) * Z * Z.transpose();
}

SurvEval survival_objective(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                            const TuningParams& tuning, int order, int workers) {
  const Eigen::Index dim = params.K() + 2 + params.p() + params.m();
  std::vector<SurvEval> parts(prepared.size());
  parallel_for(prepared.size(), workers, [&](std::size_t i) {
    auto& e = parts[i];
    if (order >= 1) e.grad = Vector::Zero(dim);
    if (order >= 2) e.hessian = Matrix::Zero(dim, dim);
    survival_subject(*prepared.subjects[i].subject, mcq.draws[i], params, prepared.bases->hazard, order, e);
  });
  SurvEval out;
  if (order >= 1) out.grad = Vector::Zero(dim);
  if (order >= 2) out.hessian = Matrix::Zero(dim, dim);
  for (const auto& e : parts) {
    out.value += e.value;
    if (order >= 1) out.grad += e.grad;
    if (order >= 2) out.hessian += e.hessian;
  }
  const int K = params.K();
  out.value -= params.hazard_spline.squaredNorm() / (2.0 * tuning.sigma_b2);
  if (order >= 1) out.grad.segment(2, K) -= params.hazard_spline / tuning.sigma_b2;
  if (order >= 2) out.hessian.diagonal().segment(2, K).array() -= 1.0 / tuning.sigma_b2;
  return out;
}

// Newton direction on -H, with Levenberg–Marquardt damping when -H is not positive definite.
Vector damped_newton_step(const Matrix& H, const Vector& g) {
  Matrix A = -symmetrize(H);
  const double scale = std::max(1.0, A.diagonal().cwiseAbs().maxCoeff());
  double lambda = 0.0;
  for (int attempt = 0; attempt < 40; ++attempt) {
    Matrix Ad = A;
    if (lambda > 0.0) Ad.diagonal().array() += lambda;
    Eigen::LLT<Matrix> llt(Ad);
    if (llt.info() == Eigen::Success) {
      Vector step = llt.solve(g);
      if (step.allFinite()) return step;
    }
    lambda = lambda == 0.0 ? 1e-10 * scale : lambda * 10.0;
  }
  fail(ErrorKind::mstep_failure, "survival Hessian could not be regularized");
}

// Relapse part of the per-draw gradient, written into the survival block of g.
template <typename Xi>
void add_relapse_gradient(const SurvivalCache& cache, const JointParams& params, const ParamLayout& layout,
                          const Xi& xi, const Vector& Z, Vector& g) {
  const double lp = xi.dot(params.beta) + cache.offset;
  const RelapseTerms r = relapse_terms(cache.kind, cache.left.value, cache.right.value, cache.log_haz, lp, false);
  auto omega = g.segment(layout.hazard_fixed(), layout.K + 2);
  omega = r.d_right * cache.right.gradient;
  if (cache.kind == CensorKind::interval) omega += r.d_left * cache.left.gradient;
  if (cache.kind == CensorKind::exact) omega += r.d_loghaz * cache.event_design;
  g.segment(layout.beta(), layout.p) = r.d_lp * xi;
  g.segment(layout.eta(), layout.m) = r.d_lp * Z;
}

}  // namespace

// ---------------------------------------------------------------------------

std::uint64_t subject_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(seed ^ static_cast<std::uint64_t>(index));
}

MHState MHState::initial(const Vector& xi, const Vector& eigenvalues, std::uint64_t seed) {
  MHState s;
  s.xi = xi;
  s.scale = 0.5 * eigenvalues.cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index l = 0; l < s.scale.size(); ++l)
    if (!(s.scale[l] > 0.0)) s.scale[l] = 0.5;
  s.accepted = Vector::Zero(xi.size());
  s.proposed = Vector::Zero(xi.size());
  s.rng.seed(seed);
  return s;
}

double MHState::acceptance() const {
  const double n = proposed.sum();
  return n > 0.0 ? accepted.sum() / n : 0.0;
}

SubjectTarget::SubjectTarget(const PreparedSubject& ps, Family family, const JointParams& params,
                             const SurvivalCache& cache, bool include_survival)
    : family_(family) {
  const int p = params.p();
  const Eigen::Index n = ps.design.rows();
  if (family == Family::gaussian) {
    require(params.sigma2_eps > 0.0, ErrorKind::invalid_argument, "sigma2_eps must be positive");
    c_ = Vector::Zero(p);
    G_ = Matrix::Zero(p, p);
    inv_two_s2_ = 0.5 / params.sigma2_eps;
    if (n > 0) {
      const Vector r0 = ps.subject->responses - ps.design * params.theta_mu;
      const Matrix M = ps.design * params.theta_psi;
      rr_ = r0.squaredNorm();
      c_ = M.transpose() * r0;
      G_ = M.transpose() * M;
      long_const_ = -0.5 * static_cast<double>(n) * std::log(params.sigma2_eps);
    }
  } else if (n > 0) {
    x0_ = ps.design * params.theta_mu;
    M_ = ps.design * params.theta_psi;
    y_ = ps.subject->responses;
  }
  inv_d_ = Vector(p);
  for (int l = 0; l < p; ++l) {
    const double d = params.eigenvalues[l];
    require(d > 0.0, ErrorKind::invalid_argument, "eigenvalues must be positive");
    inv_d_[l] = 1.0 / d;
    frail_const_ -= 0.5 * std::log(d);
  }
  if (include_survival && cache.present) {
    surv_ = true;
    kind_ = cache.kind;
    cum_left_ = cache.left.value;
    cum_right_ = cache.right.value;
    log_haz_ = cache.log_haz;
    offset_ = cache.offset;
    beta_ = params.beta;
  }
}

double SubjectTarget::longitudinal(const Vector& xi) const {
  if (family_ == Family::gaussian) return long_const_ - inv_two_s2_ * (rr_ - 2.0 * xi.dot(c_) + xi.dot(G_ * xi));
  double s = 0.0;
  for (Eigen::Index j = 0; j < x0_.size(); ++j) s += binary_term(y_[j], x0_[j] + M_.row(j).dot(xi));
  return s;
}

double SubjectTarget::survival(const Vector& xi) const {
  if (!surv_) return 0.0;
  const double lp = xi.dot(beta_) + offset_;
  return relapse_terms(kind_, cum_left_, cum_right_, log_haz_, lp, false).value;
}

double SubjectTarget::operator()(const Vector& xi) const {
  return longitudinal(xi) + frail_const_ - 0.5 * xi.cwiseAbs2().dot(inv_d_) + survival(xi);
}

Matrix sample_scores(const SubjectTarget& target, int R, MHState& state, double burn_in_fraction,
                     double target_acceptance) {
  require(R >= 1, ErrorKind::invalid_argument, "number of draws must be >= 1");
  const int p = target.dim();
  Matrix draws(p, R);
  state.accepted = Vector::Zero(p);
  state.proposed = Vector::Zero(p);
  if (p == 0) return draws;
  require(state.xi.size() == p && state.scale.size() == p, ErrorKind::invalid_argument,
          "sampler state has wrong dimension");

  double cur = target(state.xi);
  if (!std::isfinite(cur)) {
    state.xi.setZero();
    cur = target(state.xi);
    if (!std::isfinite(cur)) fail(ErrorKind::sampler_failure, "target density is not finite at xi = 0");
  }
  const int burn = static_cast<int>(std::ceil(burn_in_fraction * R));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vector log_scale = state.scale.array().log();
  Vector& xi = state.xi;
  for (int it = 0; it < burn + R; ++it) {
    const bool adapting = it < burn;
    for (int l = 0; l < p; ++l) {
      const double old = xi[l];
      xi[l] = old + state.scale[l] * normal(state.rng);
      const double prop = target(xi);
      const double u = unif(state.rng);
      const bool accept = std::isfinite(prop) && std::log(u) < prop - cur;
      if (accept)
        cur = prop;
      else
        xi[l] = old;
      if (adapting) {
        const double gamma = 1.0 / std::pow(it + 1.0, 0.6);
        log_scale[l] = std::clamp(log_scale[l] + gamma * ((accept ? 1.0 : 0.0) - target_acceptance), -30.0, 30.0);
        state.scale[l] = std::exp(log_scale[l]);
      } else {
        state.proposed[l] += 1.0;
        if (accept) state.accepted[l] += 1.0;
      }
    }
    if (!adapting) draws.col(it - burn) = xi;
  }
  return draws;
}

Matrix sample_scores(const Subject& subject, Family family, const JointParams& params, const ModelBases& bases,
                     int R, MHState& state, bool include_survival) {
  PreparedSubject ps;
  ps.subject = &subject;
  ps.design = bases.longitudinal.design(subject.times);
  const SurvivalCache cache = survival_cache(subject, params, bases.hazard, 0);
  const SubjectTarget target(ps, family, params, cache, include_survival);
  return sample_scores(target, R, state);
}

MonteCarloQ estep(const PreparedData& prepared, const JointParams& params, int R, std::vector<MHState>& states,
                  const McemConfig& config) {
  require(states.size() == prepared.size(), ErrorKind::invalid_argument, "one sampler state per subject required");
  require(R >= 1, ErrorKind::invalid_argument, "number of draws must be >= 1");
  const std::size_t N = prepared.size();
  const int p = params.p();
  MonteCarloQ mcq;
  mcq.R = R;
  mcq.draws.resize(N);
  mcq.mean.resize(N);
  mcq.second_moment.resize(N);

  const bool exact = !config.include_survival && prepared.family() == Family::gaussian;
  mcq.exact_moments = exact;
  parallel_for(N, config.workers, [&](std::size_t i) {
    const auto& ps = prepared.subjects[i];
    MHState& st = states[i];
    if (exact) {
      // Closed-form Gaussian posterior of the scores.
      Matrix prec = Matrix::Zero(p, p);
      Vector lin = Vector::Zero(p);
      if (ps.design.rows() > 0) {
        const Matrix M = ps.design * params.theta_psi;
        prec = M.transpose() * M / params.sigma2_eps;
        lin = M.transpose() * (ps.subject->responses - ps.design * params.theta_mu) / params.sigma2_eps;
      }
      prec.diagonal() += params.eigenvalues.cwiseInverse();
      const Eigen::LLT<Matrix> llt(prec);
      const Matrix V = llt.solve(Matrix::Identity(p, p));
      const Vector mean = llt.solve(lin);
      const Eigen::LLT<Matrix> vchol(symmetrize(V));
      const Matrix L = vchol.matrixL();
      std::normal_distribution<double> normal(0.0, 1.0);
      Matrix draws(p, R);
      for (int k = 0; k < R; ++k) {
        Vector z(p);
        for (int l = 0; l < p; ++l) z[l] = normal(st.rng);
        draws.col(k) = mean + L * z;
      }
      mcq.draws[i] = std::move(draws);
      mcq.mean[i] = mean;
      mcq.second_moment[i] = symmetrize(V) + mean * mean.transpose();
      st.xi = mean;
      st.accepted = Vector::Ones(p);
      st.proposed = Vector::Ones(p);
      return;
    }
    const SurvivalCache cache = survival_cache(*ps.subject, params, prepared.bases->hazard, 0);
    const SubjectTarget target(ps, prepared.family(), params, cache, config.include_survival);
    try {
      mcq.draws[i] = sample_scores(target, R, st, config.burn_in_fraction, config.target_acceptance);
    } catch (const Error& e) {
      fail(e.kind(), "subject '" + ps.subject->id + "': " + e.what());
    }
    const Matrix& d = mcq.draws[i];
    mcq.mean[i] = d.rowwise().mean();
    mcq.second_moment[i] = d * d.transpose() / static_cast<double>(R);
  });
  double acc = 0.0, prop = 0.0;
  for (const auto& s : states) {
    acc += s.accepted.sum();
    prop += s.proposed.sum();
  }
  mcq.acceptance = prop > 0.0 ? acc / prop : 0.0;
  return mcq;
}

Vector q_contributions(const PreparedData& prepared, const JointParams& params, const TuningParams& tuning,
                       const MonteCarloQ& mcq, bool include_survival, int workers) {
  const std::size_t N = prepared.size();
  std::vector<Vector> parts(N);
  parallel_for(N, workers, [&](std::size_t i) {
    const auto& ps = prepared.subjects[i];
    const SurvivalCache cache = survival_cache(*ps.subject, params, prepared.bases->hazard, 0);
    const SubjectTarget target(ps, prepared.family(), params, cache, include_survival);
    const Matrix& d = mcq.draws[i];
    Vector v(d.cols());
    for (Eigen::Index k = 0; k < d.cols(); ++k) v[k] = target(d.col(k));
    parts[i] = std::move(v);
  });
  Vector out = Vector::Constant(mcq.R, log_penalty(params, tuning, prepared.bases->penalty));
  for (const auto& v : parts) out += v;
  return out;
}

JointParams maximize_survival(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                              const TuningParams& tuning, const McemConfig& config, int* iterations) {
  Vector phi = survival_coordinates(params);
  JointParams cur = params;
  SurvEval e = survival_objective(prepared, mcq, cur, tuning, 2, config.workers);
  int it = 0;
  for (; it < config.newton_max_iter; ++it) {
    const Vector step = damped_newton_step(e.hessian, e.grad);
    if (0.5 * e.grad.dot(step) <= 1e-10 * (1.0 + std::abs(e.value))) break;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= config.max_halvings; ++h, t *= 0.5) {
      const Vector trial = phi + t * step;
      const JointParams cand = with_survival(cur, trial);
      SurvEval te;
      try {
        te = survival_objective(prepared, mcq, cand, tuning, 2, config.workers);
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::nonfinite_hazard && err.kind() != ErrorKind::zero_probability_interval) throw;
        continue;
      }
      if (std::isfinite(te.value) && te.value >= e.value && te.grad.allFinite() && te.hessian.allFinite()) {
        phi = trial;
        cur = cand;
        e = std::move(te);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (e.grad.norm() <= 1e-6 * (1.0 + std::abs(e.value))) break;
      std::ostringstream os;
      os << "survival Newton failed to ascend after " << config.max_halvings << " halvings at iteration " << it
         << " (objective " << e.value << ", gradient norm " << e.grad.norm() << ")";
      fail(ErrorKind::mstep_failure, os.str());
    }
  }
  if (iterations) *iterations = it;
  return cur;
}

Matrix survival_hessian(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                        const TuningParams& tuning, int workers) {
  return symmetrize(survival_objective(prepared, mcq, params, tuning, 2, workers).hessian);
}

Vector update_mc_error(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& updated,
                       const TuningParams& tuning, const McemConfig& config) {
  const Family family = prepared.family();
  const ParamLayout layout = layout_of(updated, family);
  const int dim = layout.size();
  Vector out = Vector::Zero(dim);
  const int R = mcq.R;
  if (mcq.exact_moments || R < 8 || prepared.size() == 0) return out;
  int b = static_cast<int>(std::cbrt(static_cast<double>(R)));
  while ((b + 1) * (b + 1) * (b + 1) <= R) ++b;
  while (b * b * b > R) --b;
  const int size = R / b;
  const bool surv = config.include_survival && layout.K + 2 > 0;

  // Batch sums of the per-draw gradient at the update.
  std::vector<Matrix> parts(prepared.size());
  parallel_for(prepared.size(), config.workers, [&](std::size_t i) {
    const auto& ps = prepared.subjects[i];
    const SurvivalCache cache = surv ? survival_cache(*ps.subject, updated, prepared.bases->hazard, 1)
                                     : SurvivalCache{};
    Matrix sums = Matrix::Zero(dim, b);
    Vector g(dim);
    const Matrix& draws = mcq.draws[i];
    if (family == Family::gaussian) {
      // Residual score B'(Y - B c) = g0 - M xi and RSS = k0 - 2 xi'k1 + xi'K2 xi, c = theta_mu + theta_psi xi.
      const int q = layout.q, p = layout.p;
      const double s2 = updated.sigma2_eps;
      const double n = static_cast<double>(ps.design.rows());
      const Vector Gm = ps.gram * updated.theta_mu;
      const Vector g0 = ps.design_y - Gm;
      const Matrix M = ps.gram * updated.theta_psi;
      const double k0 = ps.yy - 2.0 * updated.theta_mu.dot(ps.design_y) + updated.theta_mu.dot(Gm);
      const Vector k1 = updated.theta_psi.transpose() * g0;
      const Matrix K2 = updated.theta_psi.transpose() * M;
      Vector score(q);
      for (int k = 0; k < b * size; ++k) {
        const auto xi = draws.col(k);
        g.setZero();
        if (n > 0) {
          score.noalias() = g0 - M * xi;
          score /= s2;
          g.segment(layout.theta_mu(), q) = score;
          for (int l = 0; l < p; ++l) g.segment(layout.theta_psi() + l * q, q) = xi[l] * score;
          const double rss = k0 - 2.0 * xi.dot(k1) + xi.dot(K2 * xi);
          g[layout.sigma2()] = -0.5 * n / s2 + rss / (2.0 * s2 * s2);
        }
        for (int l = 0; l < p; ++l) {
          const double d = updated.eigenvalues[l];
          g[layout.eigenvalues() + l] = -0.5 / d + 0.5 * xi[l] * xi[l] / (d * d);
        }
        if (surv && cache.present) add_relapse_gradient(cache, updated, layout, xi, ps.subject->covariates, g);
        sums.col(k / size) += g;
      }
    } else {
      const int q = layout.q, p = layout.p;
      const Eigen::Index n = ps.design.rows();
      const Vector x0 = ps.design * updated.theta_mu;
      const Matrix M = ps.design * updated.theta_psi;
      const Vector& y = ps.subject->responses;
      Vector res(n), score(q);
      for (int k = 0; k < b * size; ++k) {
        const auto xi = draws.col(k);
        g.setZero();
        if (n > 0) {
          res.noalias() = x0 + M * xi;
          for (Eigen::Index j = 0; j < n; ++j) res[j] = y[j] - expit(res[j]);
          score.noalias() = ps.design.transpose() * res;
          g.segment(layout.theta_mu(), q) = score;
          for (int l = 0; l < p; ++l) g.segment(layout.theta_psi() + l * q, q) = xi[l] * score;
        }
        for (int l = 0; l < p; ++l) {
          const double d = updated.eigenvalues[l];
          g[layout.eigenvalues() + l] = -0.5 / d + 0.5 * xi[l] * xi[l] / (d * d);
        }
        if (surv && cache.present) add_relapse_gradient(cache, updated, layout, xi, ps.subject->covariates, g);
        sums.col(k / size) += g;
      }
    }
    parts[i] = std::move(sums);
  });
  Matrix means = Matrix::Zero(dim, b);
  for (const auto& m : parts) means += m;
  means /= static_cast<double>(size);
  const Vector centre = means.rowwise().mean();
  means.colwise() -= centre;
  const Matrix V = means * means.transpose() / (static_cast<double>(b - 1) * static_cast<double>(b));

  auto block_se = [&](int start, const Matrix& negH) {
    const int n = static_cast<int>(negH.rows());
    if (n == 0) return;
    const Eigen::LDLT<Matrix> ldlt(symmetrize(negH));
    const Matrix X = ldlt.solve(V.block(start, start, n, n));
    const Matrix S = ldlt.solve(X.transpose());
    for (int j = 0; j < n; ++j) out[start + j] = std::sqrt(std::max(S(j, j), 0.0));
  };

  const int q = layout.q, P = layout.p + 1;
  if (family == Family::gaussian) {
    const NormalEquations ne = gaussian_normal_equations(prepared, mcq, q, P);
    const double s2 = updated.sigma2_eps;
    // Joint (U, sigma2) block; the cross term is nonzero through the penalty.
    const int nu = q * P;
    const Matrix pen = penalty_blocks(prepared.bases->penalty.matrix, tuning, P);
    const Vector u = pack(updated, layout).head(nu);
    Matrix negH(nu + 1, nu + 1);
    negH.topLeftCorner(nu, nu) = (ne.A + s2 * pen) / s2;
    const Vector cross = (ne.rhs - ne.A * u) / (s2 * s2);
    negH.topRightCorner(nu, 1) = cross;
    negH.bottomLeftCorner(1, nu) = cross.transpose();
    const double rss = ne.yy - 2.0 * u.dot(ne.rhs) + u.dot(ne.A * u);
    negH(nu, nu) = -ne.n / (2.0 * s2 * s2) + rss / (s2 * s2 * s2);
    block_se(layout.theta_mu(), negH);
  } else {
    const BinaryEval e = binary_objective(prepared, mcq, coefficient_matrix(updated), tuning, true, config.workers);
    block_se(layout.theta_mu(), -e.hessian);
  }
  const double N = static_cast<double>(prepared.size());
  for (int l = 0; l < layout.p; ++l) {
    const double d = updated.eigenvalues[l];
    Matrix hd(1, 1);
    hd(0, 0) = N / (2.0 * d * d);
    block_se(layout.eigenvalues() + l, hd);
  }
  if (surv) {
    bool any = false;
    for (const auto& ps : prepared.subjects) any = any || ps.subject->survival.has_value();
    if (any) block_se(layout.survival(), -survival_hessian(prepared, mcq, updated, tuning, config.workers));
  }
  return out;
}

JointParams mstep(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                  const TuningParams& tuning, const McemConfig& config, MStepInfo* info) {
  require(mcq.draws.size() == prepared.size(), ErrorKind::invalid_argument, "sample sets do not match data");
  JointParams out = params;
  int long_it = 0, surv_it = 0;
  if (prepared.family() == Family::gaussian)
    update_gaussian_longitudinal(prepared, mcq, out, tuning, &long_it);
  else
    update_binary_longitudinal(prepared, mcq, out, tuning, config, &long_it);

  const int p = params.p();
  if (p > 0) {
    Vector d = Vector::Zero(p);
    for (const auto& s : mcq.second_moment) d += s.diagonal();
    d /= static_cast<double>(prepared.size());
    for (int l = 0; l < p; ++l)
      if (!(d[l] > 0.0)) fail(ErrorKind::degenerate_component, "component " + std::to_string(l + 1) + " collapsed");
    out.eigenvalues = d;
  }
  if (config.include_survival && params.K() + 2 > 0) {
    bool any = false;
    for (const auto& ps : prepared.subjects) any = any || ps.subject->survival.has_value();
    if (any) out = maximize_survival(prepared, mcq, out, tuning, config, &surv_it);
  }
  if (info) {
    info->longitudinal_iterations = long_it;
    info->survival_newton_iterations = surv_it;
  }
  return out;
}

Normalization normalize_identifiability(const JointParams& params) {
  return normalize_identifiability(params, Matrix(params.eigenvalues.asDiagonal()));
}

Normalization normalize_identifiability(const JointParams& params, const Matrix& score_cov) {
  const int p = params.p();
  Normalization out{params, Matrix::Identity(p, p)};
  if (p == 0) return out;
  require(score_cov.rows() == p && score_cov.cols() == p, ErrorKind::invalid_argument,
          "score covariance has wrong dimension");
  const Matrix& Th = params.theta_psi;
  // Rank check on theta_psi itself.
  const Eigen::JacobiSVD<Matrix> svd(Th);
  const Vector sv = svd.singularValues();
  for (int l = 0; l < p; ++l) {
    if (!(sv[l] > 1e-10 * std::max(1.0, sv[0])))
      fail(ErrorKind::degenerate_component,
           "eigenfunction coefficients are rank deficient (component " + std::to_string(l + 1) + ")");
  }
  const Matrix C = symmetrize(Th * symmetrize(score_cov) * Th.transpose());
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(C);
  const int q = params.q();
  Matrix V(q, p);
  Vector d(p);
  for (int l = 0; l < p; ++l) {
    d[l] = eig.eigenvalues()[q - 1 - l];
    V.col(l) = eig.eigenvectors().col(q - 1 - l);
    if (!(d[l] > 1e-12 * std::max(1.0, eig.eigenvalues()[q - 1])))
      fail(ErrorKind::degenerate_component, "component " + std::to_string(l + 1) + " has zero variance");
    Eigen::Index imax = 0;
    V.col(l).cwiseAbs().maxCoeff(&imax);
    if (V(imax, l) < 0.0) V.col(l) = -V.col(l);
  }
  out.A = V.transpose() * Th;
  out.params.theta_psi = V;
  out.params.eigenvalues = d;
  out.params.beta = out.A.transpose().partialPivLu().solve(params.beta);
  return out;
}

double mc_error(std::span<const double> values) {
  const std::size_t R = values.size();
  if (R < 8) fail(ErrorKind::insufficient_samples, "batch means need at least 8 draws");
  std::size_t b = static_cast<std::size_t>(std::cbrt(static_cast<double>(R)));
  while ((b + 1) * (b + 1) * (b + 1) <= R) ++b;
  while (b * b * b > R) --b;
  const std::size_t size = R / b;
  Vector means(b);
  for (std::size_t j = 0; j < b; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < size; ++k) s += values[j * size + k];
    means[j] = s / static_cast<double>(size);
  }
  const double mu = means.mean();
  const double var = (means.array() - mu).square().sum() / static_cast<double>(b - 1);
  return std::sqrt(var / static_cast<double>(b));
}

double max_relative_change(const Vector& current, const Vector& previous, double floor) {
  require(current.size() == previous.size(), ErrorKind::invalid_argument, "parameter vectors differ in size");
  double out = 0.0;
  for (Eigen::Index j = 0; j < current.size(); ++j)
    out = std::max(out, std::abs(current[j] - previous[j]) / (std::abs(previous[j]) + floor));
  return out;
}

// ---------------------------------------------------------------------------

JointParams initial_params(const PreparedData& prepared, const TuningParams& tuning) {
  const Dataset& data = *prepared.data;
  const ModelBases& bases = *prepared.bases;
  const int q = bases.longitudinal.size(), p = tuning.p, K = bases.hazard.size(), m = data.n_covariates();
  const std::size_t N = prepared.size();
  const Matrix& J = bases.penalty.matrix;
  JointParams out = JointParams::zeros(q, p, K, m);
  const double gram_scale = std::max(1e-8, prepared.total_gram.trace() / (q * std::max<std::size_t>(N, 1)));

  // Mean function.
  if (prepared.family() == Family::gaussian) {
    Vector rhs = Vector::Zero(q);
    for (const auto& ps : prepared.subjects) rhs += ps.design_y;
    out.theta_mu = solve_spd(prepared.total_gram + tuning.h_mu * J, rhs, "initial mean");
  } else {
    Vector theta = Vector::Zero(q);
    for (int it = 0; it < 50; ++it) {
      Vector g = -tuning.h_mu * (J * theta) - 1e-6 * theta;
      Matrix H = tuning.h_mu * J;
      H.diagonal().array() += 1e-6;
      for (const auto& ps : prepared.subjects) {
        const Vector x = ps.design * theta;
        Vector res(x.size()), w(x.size());
        for (Eigen::Index j = 0; j < x.size(); ++j) {
          const double pr = expit(x[j]);
          res[j] = ps.subject->responses[j] - pr;
          w[j] = pr * (1.0 - pr);
        }
        g += ps.design.transpose() * res;
        H += ps.design.transpose() * w.asDiagonal() * ps.design;
      }
      const Vector step = solve_spd(H, g, "initial mean");
      theta += step;
      if (step.cwiseAbs().maxCoeff() < 1e-10) break;
    }
    out.theta_mu = theta;
  }

  // Per-subject ridge deviations and their principal directions.
  const double lambda = (prepared.family() == Family::gaussian ? 0.05 : 0.5) * gram_scale;
  std::vector<Vector> dev(N);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& ps = prepared.subjects[i];
    Matrix H = tuning.h_psi * J;
    H.diagonal().array() += lambda;
    if (ps.design.rows() == 0) {
      dev[i] = Vector::Zero(q);
      continue;
    }
    if (prepared.family() == Family::gaussian) {
      dev[i] = solve_spd(ps.gram + H, ps.design_y - ps.gram * out.theta_mu, "initial scores");
    } else {
      Vector c = Vector::Zero(q);
      const Vector base = ps.design * out.theta_mu;
      for (int it = 0; it < 20; ++it) {
        const Vector x = base + ps.design * c;
        Vector res(x.size()), w(x.size());
        for (Eigen::Index j = 0; j < x.size(); ++j) {
          const double pr = expit(x[j]);
          res[j] = ps.subject->responses[j] - pr;
          w[j] = pr * (1.0 - pr);
        }
        const Vector g = ps.design.transpose() * res - H * c;
        const Matrix Hc = ps.design.transpose() * w.asDiagonal() * ps.design + H;
        const Vector step = solve_spd(Hc, g, "initial scores");
        c += step;
        if (step.cwiseAbs().maxCoeff() < 1e-8) break;
      }
      dev[i] = c;
    }
  }
  if (p > 0) {
    Matrix C = Matrix::Zero(q, q);
    for (const auto& c : dev) C += c * c.transpose();
    C /= static_cast<double>(std::max<std::size_t>(N, 1));
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(C));
    const double top = std::max(eig.eigenvalues()[q - 1], 1e-6);
    for (int l = 0; l < p; ++l) {
      Vector v = eig.eigenvectors().col(q - 1 - l);
      Eigen::Index imax = 0;
      v.cwiseAbs().maxCoeff(&imax);
      if (v[imax] < 0.0) v = -v;
      out.theta_psi.col(l) = v;
      out.eigenvalues[l] = std::max(eig.eigenvalues()[q - 1 - l], 1e-3 * top);
    }
    for (int l = 1; l < p; ++l) out.eigenvalues[l] = std::min(out.eigenvalues[l], out.eigenvalues[l - 1]);
  }
  if (prepared.family() == Family::gaussian) {
    double rss = 0.0, n = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& ps = prepared.subjects[i];
      if (ps.design.rows() == 0) continue;
      const Vector coef = out.theta_mu + out.theta_psi * (out.theta_psi.transpose() * dev[i]);
      rss += (ps.subject->responses - ps.design * coef).squaredNorm();
      n += static_cast<double>(ps.design.rows());
    }
    out.sigma2_eps = n > 0.0 ? std::max(rss / n, 1e-6) : 1.0;
  }

  // Baseline hazard: constant rate from exact events over total follow-up.
  double exact = 0.0, follow = 0.0;
  for (const auto& s : data.subjects) {
    if (!s.survival) continue;
    if (s.survival->exact_event()) exact += 1.0;
    follow += s.survival->t_right;
  }
  if (follow > 0.0) out.hazard_fixed[0] = std::log(std::max(exact, 0.5) / follow);
  return out;
}

namespace {

void transform_states(std::vector<MHState>& states, const Matrix& A) {
  if (A.size() == 0) return;
  for (auto& s : states) {
    s.xi = A * s.xi;
    Vector sc(A.rows());
    for (Eigen::Index l = 0; l < A.rows(); ++l)
      sc[l] = std::sqrt(A.row(l).cwiseAbs2().dot(s.scale.cwiseAbs2()));
    s.scale = sc.cwiseMax(1e-8);
  }
}

// Maximizes -h_mu/2 (theta_mu + theta_psi c)' J (theta_mu + theta_psi c) + sum_i E log N(xi_i; c, D)
// over (c, diagonal D). D is returned through `d`.
Vector expansion_shift(const PreparedData& prepared, const MonteCarloQ& mcq, const JointParams& params,
                       const TuningParams& tuning, Vector& d) {
  const int p = params.p();
  const double N = static_cast<double>(prepared.size());
  Vector mean = Vector::Zero(p);
  Vector second = Vector::Zero(p);
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    mean += mcq.mean[i];
    second += mcq.second_moment[i].diagonal();
  }
  mean /= N;
  second /= N;
  const Matrix& J = prepared.bases->penalty.matrix;
  const Matrix JT = J * params.theta_psi;
  const Matrix TJT = tuning.h_mu * params.theta_psi.transpose() * JT;
  const Vector TJm = tuning.h_mu * JT.transpose() * params.theta_mu;
  Vector c = Vector::Zero(p);
  d = second;
  for (int it = 0; it < 100; ++it) {
    Matrix A = TJT;
    A.diagonal() += N * d.cwiseInverse();
    const Vector c_new = solve_spd(A, N * d.cwiseInverse().cwiseProduct(mean) - TJm, "score expansion");
    d = (second - 2.0 * c_new.cwiseProduct(mean) + c_new.cwiseAbs2()).cwiseMax(1e-12 * second.maxCoeff());
    const double step = (c_new - c).cwiseAbs().maxCoeff();
    c = c_new;
    if (step <= 1e-12 * (1.0 + c.cwiseAbs().maxCoeff())) break;
  }
  return c;
}

}  // namespace

FitResult fit(const Dataset& data, std::shared_ptr<const ModelBases> bases, const TuningParams& tuning,
              const McemConfig& config, const FitResult* warm) {
  require(data.size() > 0, ErrorKind::invalid_argument, "empty dataset");
  require(bases != nullptr, ErrorKind::invalid_argument, "missing bases");
  tuning.validate(bases->longitudinal.size());
  require(config.R0 >= 1 && config.Rmax >= config.R0, ErrorKind::invalid_argument, "invalid draw schedule");
  require(config.max_iter >= 1, ErrorKind::invalid_argument, "max_iter must be >= 1");
  if (config.include_survival) validate(data);
  const PreparedData prepared = prepare(data, *bases);
  const std::size_t N = data.size();
  const int p = tuning.p;

  FitResult res;
  res.tuning = tuning;
  res.family = data.family;
  res.bases = bases;
  res.include_survival = config.include_survival;

  JointParams params;
  std::vector<MHState> states;
  if (warm) {
    require(warm->params.p() == p && warm->states.size() == N, ErrorKind::invalid_argument,
            "warm start does not match the tuning or the data");
    params = warm->params;
    states = warm->states;
  } else if (config.include_survival) {
    McemConfig init = config;
    init.include_survival = false;
    init.max_iter = config.init_max_iter;
    init.Rmax = config.R0;
    init.on_iteration = nullptr;
    const FitResult lf = fit(data, bases, tuning, init);
    params = lf.params;
    states.reserve(N);
    for (std::size_t i = 0; i < N; ++i) states.push_back(MHState::initial(lf.score_mean[i], params.eigenvalues,
                                                                          subject_seed(config.seed, i)));
  } else {
    params = initial_params(prepared, tuning);
    states.reserve(N);
    for (std::size_t i = 0; i < N; ++i)
      states.push_back(MHState::initial(Vector::Zero(p), params.eigenvalues, subject_seed(config.seed, i)));
  }

  const ParamLayout layout = layout_of(params, data.family);
  int R = config.R0;
  int hits = 0;
  for (int iter = 1; iter <= config.max_iter; ++iter) {
    const MonteCarloQ mcq = estep(prepared, params, R, states, config);
    const JointParams updated = mstep(prepared, mcq, params, tuning, config);

    const Vector q_new = q_contributions(prepared, updated, tuning, mcq, config.include_survival, config.workers);
    const Vector q_old = q_contributions(prepared, params, tuning, mcq, config.include_survival, config.workers);
    const Vector diff = q_new - q_old;

    // Parameter expansion over the score mean c: the roughness penalty acts on theta_mu + theta_psi c
    // and the frailty prior is N(c, D); the maximizer is folded back into the mean curve and the
    // baseline hazard.
    JointParams expanded = updated;
    if (p > 0 && config.parameter_expansion) {
      const Vector c = expansion_shift(prepared, mcq, updated, tuning, expanded.eigenvalues);
      expanded.theta_mu += expanded.theta_psi * c;
      if (config.include_survival) expanded.hazard_fixed[0] += c.dot(expanded.beta);
      for (auto& st : states) st.xi -= c;
    }
    const Normalization norm = p > 0 ? normalize_identifiability(expanded) : Normalization{expanded, Matrix()};
    transform_states(states, norm.A);

    TraceRecord rec;
    rec.iteration = iter;
    rec.R = R;
    rec.q_hat = q_new.mean();
    rec.delta_q = diff.mean();
    if (R >= 8) {
      rec.q_se = mc_error(q_new);
      rec.delta_q_se = mc_error(diff);
    }
    rec.params = pack(norm.params, layout);
    rec.acceptance = mcq.acceptance;
    // A coordinate has settled when its relative change is below tol, or, once the draw count is
    // at its cap, when the change is within the Monte Carlo noise of the update.
    const Vector se = update_mc_error(prepared, mcq, updated, tuning, config);
    rec.mc_se = se;
    const Vector previous = pack(params, layout);
    bool all_noise = se.maxCoeff() > 0.0;
    bool settled = true;
    for (Eigen::Index j = 0; j < rec.params.size(); ++j) {
      const double change = std::abs(rec.params[j] - previous[j]);
      const double rel = change / (std::abs(previous[j]) + config.tol_floor);
      rec.max_change = std::max(rec.max_change, rel);
      // Both endpoints of the change carry Monte Carlo error.
      const double se_change = std::sqrt(2.0) * se[j];
      const bool noise = change <= config.noise_multiple * se_change;
      if (se[j] > 0.0) rec.noise_ratio = std::max(rec.noise_ratio, change / se_change);
      else if (change > 0.0) all_noise = false;
      all_noise = all_noise && noise;
      settled = settled && (rel < config.tol || (R >= config.Rmax && noise));
    }
    params = norm.params;
    res.trace.push_back(rec);
    if (config.on_iteration) config.on_iteration(rec);

    hits = settled ? hits + 1 : 0;
    res.iterations = iter;
    if (hits >= config.consecutive) {
      res.converged = true;
      break;
    }
    if (all_noise) R = std::min(config.Rmax, static_cast<int>(std::ceil(R * config.R_growth)));
  }

  res.final_draws = estep(prepared, params, R, states, config);
  res.final_R = R;
  res.params = params;
  res.states = std::move(states);
  res.score_mean = res.final_draws.mean;
  res.score_cov.resize(N);
  for (std::size_t i = 0; i < N; ++i)
    res.score_cov[i] = symmetrize(res.final_draws.second_moment[i] - res.score_mean[i] * res.score_mean[i].transpose());
  return res;
}

FitResult fit(const Dataset& data, const TuningParams& tuning, const McemConfig& config) {
  auto bases = std::make_shared<const ModelBases>(make_bases(data, config.q, config.degree, config.hazard_knots));
  return fit(data, bases, tuning, config);
}

}  // namespace jmfpc
