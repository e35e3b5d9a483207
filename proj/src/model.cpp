#include "jmfpc/model.hpp"

#include "jmfpc/error.hpp"

#include <sstream>

namespace jmfpc {

JointParams JointParams::zeros(int q, int p, int K, int m) {
  JointParams out;
  out.theta_mu = Vector::Zero(q);
  out.theta_psi = Matrix::Zero(q, p);
  out.sigma2_eps = 1.0;
  out.eigenvalues = Vector::Ones(p);
  out.hazard_spline = Vector::Zero(K);
  out.beta = Vector::Zero(p);
  out.eta = Vector::Zero(m);
  return out;
}

void TuningParams::validate(int q) const {
  require(p >= 0, ErrorKind::invalid_argument, "number of components must be nonnegative");
  require(p <= q, ErrorKind::invalid_argument, "number of components exceeds basis dimension");
  require(h_mu >= 0.0 && h_psi >= 0.0, ErrorKind::invalid_argument, "roughness penalties must be >= 0");
  require(sigma_b2 > 0.0, ErrorKind::invalid_argument, "sigma_b2 must be positive");
}

std::vector<std::string> ParamLayout::labels() const {
  std::vector<std::string> out;
  out.reserve(size());
  for (int i = 0; i < q; ++i) out.push_back("theta_mu[" + std::to_string(i) + "]");
  for (int l = 0; l < p; ++l)
    for (int i = 0; i < q; ++i) out.push_back("theta_psi[" + std::to_string(i) + "," + std::to_string(l) + "]");
  if (has_sigma) out.push_back("sigma2_eps");
  for (int l = 0; l < p; ++l) out.push_back("d[" + std::to_string(l) + "]");
  out.push_back("a0");
  out.push_back("a1");
  for (int k = 0; k < K; ++k) out.push_back("b[" + std::to_string(k) + "]");
  for (int l = 0; l < p; ++l) out.push_back("beta[" + std::to_string(l) + "]");
  for (int j = 0; j < m; ++j) out.push_back("eta[" + std::to_string(j) + "]");
  return out;
}

ParamLayout layout_of(const JointParams& params, Family family) {
  return {params.q(), params.p(), params.K(), params.m(), family == Family::gaussian};
}

Vector pack(const JointParams& params, const ParamLayout& layout) {
  Vector out(layout.size());
  out.segment(layout.theta_mu(), layout.q) = params.theta_mu;
  out.segment(layout.theta_psi(), layout.q * layout.p) =
      Eigen::Map<const Vector>(params.theta_psi.data(), layout.q * layout.p);
  if (layout.has_sigma) out[layout.sigma2()] = params.sigma2_eps;
  out.segment(layout.eigenvalues(), layout.p) = params.eigenvalues;
  out.segment(layout.hazard_fixed(), 2) = params.hazard_fixed;
  out.segment(layout.hazard_spline(), layout.K) = params.hazard_spline;
  out.segment(layout.beta(), layout.p) = params.beta;
  out.segment(layout.eta(), layout.m) = params.eta;
  return out;
}

JointParams unpack(const Vector& packed, const ParamLayout& layout) {
  require(packed.size() == layout.size(), ErrorKind::invalid_argument, "packed parameter size mismatch");
  JointParams out;
  out.theta_mu = packed.segment(layout.theta_mu(), layout.q);
  out.theta_psi = Eigen::Map<const Matrix>(packed.data() + layout.theta_psi(), layout.q, layout.p);
  out.sigma2_eps = layout.has_sigma ? packed[layout.sigma2()] : 1.0;
  out.eigenvalues = packed.segment(layout.eigenvalues(), layout.p);
  out.hazard_fixed = packed.segment(layout.hazard_fixed(), 2);
  out.hazard_spline = packed.segment(layout.hazard_spline(), layout.K);
  out.beta = packed.segment(layout.beta(), layout.p);
  out.eta = packed.segment(layout.eta(), layout.m);
  return out;
}

// ---------------------------------------------------------------------------

HazardIntegral integrate_hazard(const Eigen::Vector2d& a, const Vector& b, const Vector& knots, double t,
                                int order) {
  require(t >= 0.0, ErrorKind::invalid_argument, "cumulative hazard at negative time");
  const Eigen::Index K = knots.size();
  const Eigen::Index dim = K + 2;
  HazardIntegral out;
  if (order >= 1) out.gradient = Vector::Zero(dim);
  if (order >= 2) out.hessian = Matrix::Zero(dim, dim);
  if (t == 0.0) return out;

  // Knots at or below zero are active from the origin.
  Eigen::Index active = 0;
  while (active < K && knots[active] <= 0.0) ++active;

  Vector alpha(dim), gamma(dim);
  double u1 = 0.0;
  while (u1 < t) {
    const double u2 = (active < K && knots[active] < t) ? knots[active] : t;
    const double len = u2 - u1;
    if (len > 0.0) {
      double h1 = a[0] + a[1] * u1;
      double slope = a[1];
      for (Eigen::Index k = 0; k < active; ++k) {
        h1 += b[k] * (u1 - knots[k]);
        slope += b[k];
      }
      const double x = slope * len;
      const double base = std::exp(h1);
      const double m0 = base * len * exp_moment(0, x);
      out.value += m0;
      if (order >= 1) {
        const double m1 = base * len * len * exp_moment(1, x);
        alpha.setZero();
        gamma.setZero();
        alpha[0] = 1.0;
        alpha[1] = u1;
        gamma[1] = 1.0;
        for (Eigen::Index k = 0; k < active; ++k) {
          alpha[k + 2] = u1 - knots[k];
          gamma[k + 2] = 1.0;
        }
        out.gradient += m0 * alpha + m1 * gamma;
        if (order >= 2) {
          const double m2 = base * len * len * len * exp_moment(2, x);
          out.hessian.noalias() += m0 * alpha * alpha.transpose();
          out.hessian.noalias() += m1 * (alpha * gamma.transpose() + gamma * alpha.transpose());
          out.hessian.noalias() += m2 * gamma * gamma.transpose();
        }
      }
    }
    u1 = u2;
    if (u2 < t) ++active;
  }
  if (!std::isfinite(out.value)) {
    std::ostringstream os;
    os << "cumulative hazard overflow at t = " << t;
    fail(ErrorKind::nonfinite_hazard, os.str());
  }
  return out;
}

double cumulative_hazard(const JointParams& params, const HazardBasis& basis, double t) {
  return integrate_hazard(params.hazard_fixed, params.hazard_spline, basis.knots, t, 0).value;
}

double log_baseline_hazard(const JointParams& params, const HazardBasis& basis, double t) {
  const Vector phi = eval_hazard_design(basis, t);
  return params.hazard_fixed.dot(phi.head<2>()) + params.hazard_spline.dot(phi.tail(basis.size()));
}

RelapseTerms relapse_terms(CensorKind kind, double cum_left, double cum_right, double log_haz, double lp,
                           bool second_order) {
  RelapseTerms r;
  const double e = std::exp(lp);
  switch (kind) {
    case CensorKind::right:
      r.value = -e * cum_right;
      r.d_right = -e;
      r.d_lp = -e * cum_right;
      if (second_order) {
        r.h_rlp = -e;
        r.h_lplp = -e * cum_right;
      }
      break;
    case CensorKind::exact:
      r.value = log_haz + lp - e * cum_right;
      r.d_loghaz = 1.0;
      r.d_right = -e;
      r.d_lp = 1.0 - e * cum_right;
      if (second_order) {
        r.h_rlp = -e;
        r.h_lplp = -e * cum_right;
      }
      break;
    case CensorKind::interval: {
      const double delta = cum_right - cum_left;
      require(delta > 0.0, ErrorKind::zero_probability_interval,
              "censoring interval has zero baseline hazard mass");
      const double u = e * delta;
      // wu = u / (e^u - 1), finite for every u >= 0
      const double em1 = std::expm1(u);
      const double wu = u == 0.0 ? 1.0 : (std::isinf(em1) ? 0.0 : u / em1);
      const double ew = wu / delta;  // e * w
      r.value = -e * cum_left + std::log(-std::expm1(-u));
      r.d_left = -e - ew;
      r.d_right = ew;
      r.d_lp = -e * cum_left + wu;
      if (second_order) {
        const double c = ew * (e + ew);  // e^2 w (1 + w)
        const double ew2u = e * wu + wu * wu / delta;  // e w (1 + w) u
        r.h_ll = -c;
        r.h_rr = -c;
        r.h_lr = c;
        r.h_llp = -e - ew + ew2u;
        r.h_rlp = ew - ew2u;
        r.h_lplp = -e * cum_left + wu - wu * (u + wu);
      }
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

namespace {

void check_scores(const JointParams& params, const Vector& xi) {
  require(xi.size() == params.p(), ErrorKind::invalid_argument, "score vector length does not match p");
}

Vector latent_coefficients(const JointParams& params, const Vector& xi) {
  check_scores(params, xi);
  return params.theta_mu + params.theta_psi * xi;
}

// Bernoulli log-likelihood y x - log(1 + e^x).
double binary_term(double y, double x) { return y * x - log1pexp(x); }

}  // namespace

double latent_value(const JointParams& params, const BSplineBasis& basis, double t, const Vector& xi) {
  require(params.q() == basis.size(), ErrorKind::invalid_argument, "basis dimension mismatch");
  return basis(t).dot(latent_coefficients(params, xi));
}

double loglik_long_gaussian(const Subject& subject, const JointParams& params, const BSplineBasis& basis,
                            const Vector& xi) {
  require(params.sigma2_eps > 0.0, ErrorKind::invalid_argument, "sigma2_eps must be positive");
  const Vector coef = latent_coefficients(params, xi);
  const Vector resid = subject.responses - basis.design(subject.times) * coef;
  return -0.5 * static_cast<double>(subject.n_obs()) * std::log(params.sigma2_eps) -
         resid.squaredNorm() / (2.0 * params.sigma2_eps);
}

double loglik_long_binary(const Subject& subject, const JointParams& params, const BSplineBasis& basis,
                          const Vector& xi) {
  const Vector coef = latent_coefficients(params, xi);
  const Vector x = basis.design(subject.times) * coef;
  double s = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) s += binary_term(subject.responses[j], x[j]);
  return s;
}

double loglik_long(Family family, const Subject& subject, const JointParams& params, const BSplineBasis& basis,
                   const Vector& xi) {
  return family == Family::gaussian ? loglik_long_gaussian(subject, params, basis, xi)
                                    : loglik_long_binary(subject, params, basis, xi);
}

double loglik_relapse(const Subject& subject, const JointParams& params, const HazardBasis& basis,
                      const Vector& xi) {
  check_scores(params, xi);
  if (!subject.survival) return 0.0;
  const SurvivalCache cache = survival_cache(subject, params, basis, 0);
  return subject_relapse_loglik(cache, params, xi);
}

double loglik_frailty(const JointParams& params, const Vector& xi) {
  check_scores(params, xi);
  double s = 0.0;
  for (int l = 0; l < params.p(); ++l) {
    const double d = params.eigenvalues[l];
    require(d > 0.0, ErrorKind::invalid_argument, "eigenvalues must be positive");
    s += -0.5 * std::log(d) - 0.5 * xi[l] * xi[l] / d;
  }
  return s;
}

double complete_loglik(const Dataset& data, const ModelBases& bases, const JointParams& params,
                       std::span<const Vector> all_xi) {
  require(all_xi.size() == data.size(), ErrorKind::invalid_argument, "one score vector per subject required");
  const PreparedData prepared = prepare(data, bases);
  double s = 0.0;
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const auto cache = survival_cache(*prepared.subjects[i].subject, params, bases.hazard, 0);
    s += subject_complete_loglik(prepared.subjects[i], data.family, params, cache, all_xi[i]);
  }
  return s;
}

double log_penalty(const JointParams& params, const TuningParams& tuning, const PenaltyMatrix& penalty) {
  require(tuning.sigma_b2 > 0.0, ErrorKind::invalid_argument, "sigma_b2 must be positive");
  const Matrix& J = penalty.matrix;
  double rough = tuning.h_mu * params.theta_mu.dot(J * params.theta_mu);
  for (int l = 0; l < params.p(); ++l)
    rough += tuning.h_psi * params.theta_psi.col(l).dot(J * params.theta_psi.col(l));
  return -params.hazard_spline.squaredNorm() / (2.0 * tuning.sigma_b2) - 0.5 * rough;
}

double penalized_loglik(const Dataset& data, const ModelBases& bases, const JointParams& params,
                        const TuningParams& tuning, std::span<const Vector> all_xi) {
  const double pen = log_penalty(params, tuning, bases.penalty);
  return complete_loglik(data, bases, params, all_xi) + pen;
}

Vector grad_penalized_loglik(const Dataset& data, const ModelBases& bases, const JointParams& params,
                             const TuningParams& tuning, std::span<const Vector> all_xi) {
  require(all_xi.size() == data.size(), ErrorKind::invalid_argument, "one score vector per subject required");
  const PreparedData prepared = prepare(data, bases);
  const ParamLayout layout = layout_of(params, data.family);
  Vector grad = Vector::Zero(layout.size());
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const auto cache = survival_cache(*prepared.subjects[i].subject, params, bases.hazard, 1);
    add_subject_gradient(prepared.subjects[i], data.family, params, layout, cache, all_xi[i], grad);
  }
  add_penalty_gradient(params, tuning, bases.penalty, layout, grad);
  return grad;
}

// ---------------------------------------------------------------------------

PreparedData prepare(const Dataset& data, const ModelBases& bases) {
  PreparedData out;
  out.data = &data;
  out.bases = &bases;
  const int q = bases.longitudinal.size();
  out.total_gram = Matrix::Zero(q, q);
  out.subjects.reserve(data.size());
  for (const auto& s : data.subjects) {
    PreparedSubject ps;
    ps.subject = &s;
    ps.design = bases.longitudinal.design(s.times);
    ps.gram = ps.design.transpose() * ps.design;
    ps.design_y = ps.design.transpose() * s.responses;
    ps.yy = s.responses.squaredNorm();
    out.total_gram += ps.gram;
    out.subjects.push_back(std::move(ps));
  }
  return out;
}

SurvivalCache survival_cache(const Subject& subject, const JointParams& params, const HazardBasis& basis,
                             int order) {
  SurvivalCache c;
  require(subject.covariates.size() == params.m(), ErrorKind::invalid_argument,
          "covariate length does not match eta");
  if (!subject.survival) return c;
  const SurvivalRecord& rec = *subject.survival;
  c.present = true;
  c.kind = rec.kind();
  c.offset = subject.covariates.dot(params.eta);
  const auto& a = params.hazard_fixed;
  const auto& b = params.hazard_spline;
  c.right = integrate_hazard(a, b, basis.knots, rec.t_right, order);
  if (c.kind == CensorKind::interval) c.left = integrate_hazard(a, b, basis.knots, rec.t_left, order);
  if (c.kind == CensorKind::exact) {
    c.event_design = eval_hazard_design(basis, rec.t_right);
    c.log_haz = a.dot(c.event_design.head<2>()) + b.dot(c.event_design.tail(basis.size()));
  }
  return c;
}

double subject_long_loglik(const PreparedSubject& ps, Family family, const JointParams& params, const Vector& xi) {
  if (ps.design.rows() == 0) return 0.0;
  const Vector coef = params.theta_mu + params.theta_psi * xi;
  const Vector fitted = ps.design * coef;
  const Vector& y = ps.subject->responses;
  if (family == Family::gaussian) {
    const double rss = (y - fitted).squaredNorm();
    return -0.5 * static_cast<double>(y.size()) * std::log(params.sigma2_eps) - rss / (2.0 * params.sigma2_eps);
  }
  double s = 0.0;
  for (Eigen::Index j = 0; j < y.size(); ++j) s += binary_term(y[j], fitted[j]);
  return s;
}

double subject_relapse_loglik(const SurvivalCache& cache, const JointParams& params, const Vector& xi) {
  if (!cache.present) return 0.0;
  const double lp = xi.dot(params.beta) + cache.offset;
  return relapse_terms(cache.kind, cache.left.value, cache.right.value, cache.log_haz, lp, false).value;
}

double subject_complete_loglik(const PreparedSubject& ps, Family family, const JointParams& params,
                               const SurvivalCache& cache, const Vector& xi, bool include_survival) {
  double s = subject_long_loglik(ps, family, params, xi) + loglik_frailty(params, xi);
  if (include_survival) s += subject_relapse_loglik(cache, params, xi);
  return s;
}

void add_subject_gradient(const PreparedSubject& ps, Family family, const JointParams& params,
                          const ParamLayout& layout, const SurvivalCache& cache, const Vector& xi, Vector& grad,
                          bool include_survival) {
  const int q = layout.q, p = layout.p;
  if (ps.design.rows() > 0) {
    const Vector coef = params.theta_mu + params.theta_psi * xi;
    const Vector fitted = ps.design * coef;
    const Vector& y = ps.subject->responses;
    Vector score(q);
    if (family == Family::gaussian) {
      const Vector resid = y - fitted;
      const double s2 = params.sigma2_eps;
      score = ps.design.transpose() * resid / s2;
      grad[layout.sigma2()] += -0.5 * static_cast<double>(y.size()) / s2 + resid.squaredNorm() / (2.0 * s2 * s2);
    } else {
      Vector resid(y.size());
      for (Eigen::Index j = 0; j < y.size(); ++j) resid[j] = y[j] - expit(fitted[j]);
      score = ps.design.transpose() * resid;
    }
    grad.segment(layout.theta_mu(), q) += score;
    for (int l = 0; l < p; ++l) grad.segment(layout.theta_psi() + l * q, q) += xi[l] * score;
  }
  for (int l = 0; l < p; ++l) {
    const double d = params.eigenvalues[l];
    grad[layout.eigenvalues() + l] += -0.5 / d + 0.5 * xi[l] * xi[l] / (d * d);
  }
  if (!include_survival || !cache.present) return;
  const double lp = xi.dot(params.beta) + cache.offset;
  const RelapseTerms r = relapse_terms(cache.kind, cache.left.value, cache.right.value, cache.log_haz, lp, false);
  auto omega = grad.segment(layout.hazard_fixed(), layout.K + 2);
  omega += r.d_right * cache.right.gradient;
  if (cache.kind == CensorKind::interval) omega += r.d_left * cache.left.gradient;
  if (cache.kind == CensorKind::exact) omega += r.d_loghaz * cache.event_design;
  grad.segment(layout.beta(), p) += r.d_lp * xi;
  grad.segment(layout.eta(), layout.m) += r.d_lp * ps.subject->covariates;
}

void add_penalty_gradient(const JointParams& params, const TuningParams& tuning, const PenaltyMatrix& penalty,
                          const ParamLayout& layout, Vector& grad) {
  const Matrix& J = penalty.matrix;
  grad.segment(layout.theta_mu(), layout.q) -= tuning.h_mu * (J * params.theta_mu);
  for (int l = 0; l < layout.p; ++l)
    grad.segment(layout.theta_psi() + l * layout.q, layout.q) -= tuning.h_psi * (J * params.theta_psi.col(l));
  grad.segment(layout.hazard_spline(), layout.K) -= params.hazard_spline / tuning.sigma_b2;
}

}  // namespace jmfpc
