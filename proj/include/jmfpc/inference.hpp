#pragma once

#include "jmfpc/mcem.hpp"

#include <optional>
#include <string>

namespace jmfpc {

/// Local chart of orthonormal q x p frames around an anchor:
/// Theta(W) = [Theta0, Theta0_perp] expm(Omega) [I; 0], Omega = [[A, -B'], [B, 0]],
/// with B (q - p) x p and A p x p skew-symmetric. W lists B column-major, then the strict
/// upper triangle of A column by column.
class FrameChart {
 public:
  explicit FrameChart(const Matrix& anchor);

  int q() const { return static_cast<int>(anchor_.rows()); }
  int p() const { return static_cast<int>(anchor_.cols()); }
  int size() const { return q() * p() - p() * (p() + 1) / 2; }
  const Matrix& anchor() const { return anchor_; }

  Matrix generator(const Vector& w) const;
  Matrix frame(const Vector& w) const;
  /// d vec(Theta(W)) / dW, (q p) x size().
  Matrix jacobian(const Vector& w) const;

 private:
  Matrix anchor_;
  Matrix basis_;  // [Theta0, Theta0_perp]
};

/// Unconstrained coordinates: theta_mu | W | sigma2 (Gaussian) | d | a | b | beta | eta.
class FreeParameterization {
 public:
  FreeParameterization(const JointParams& anchor, Family family);

  const FrameChart& chart() const { return chart_; }
  const JointParams& anchor() const { return anchor_; }
  int size() const { return layout_.size() - layout_.q * layout_.p + chart_.size(); }
  std::vector<std::string> labels() const;

  Vector at_anchor() const;
  JointParams params(const Vector& phi) const;
  /// Maps a gradient over ParamLayout coordinates at params(phi) into free coordinates.
  Vector pull_back(const Vector& phi, const Vector& layout_grad) const;
  /// Index in the free vector of ParamLayout coordinate j (-1 for theta_psi entries).
  int free_index(int layout_index) const;

 private:
  JointParams anchor_;
  Family family_;
  ParamLayout layout_;
  FrameChart chart_;
};

FreeParameterization free_parameterization(const JointParams& params, Family family);

enum class CovarianceMethod { louis, bootstrap };

struct CovarianceEstimate {
  std::vector<std::string> names;
  Matrix covariance;
  Matrix information;  // Louis only
  CovarianceMethod method = CovarianceMethod::louis;
  bool indefinite = false;
  int replicates = 0;  // bootstrap: used replicates
  int dropped = 0;     // bootstrap: nonconverged replicates

  Vector se() const { return covariance.diagonal().cwiseMax(0.0).cwiseSqrt(); }
  /// SE by label; NaN when absent.
  double se(const std::string& name) const;
};

struct LouisOptions {
  int max_draws = 1000;  // thinned draws per subject
  double step = 1e-5;
  int workers = 1;
};

CovarianceEstimate louis_information(const FitResult& fit, const Dataset& data, const LouisOptions& options = {});

/// Column alignment of a replicate's eigenfunctions to a reference fit. Columns are permuted and
/// sign-flipped, and the same map is applied to d and beta.
JointParams align_to_reference(const JointParams& replicate, const JointParams& reference);

std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed, int replicate);

/// Refit on data.subset(indices) with fixed tuning and bases, warm-started at the original fit;
/// returns the aligned estimate or nullopt when the refit did not converge.
std::optional<JointParams> bootstrap_replicate(const Dataset& data, const FitResult& original,
                                               const std::vector<std::size_t>& indices, const McemConfig& config);

CovarianceEstimate bootstrap_covariance(const std::vector<Vector>& estimates, const std::vector<std::string>& names);

CovarianceEstimate bootstrap_se(const Dataset& data, const FitResult& original, int B, const McemConfig& config);

struct PredictionResult {
  Vector event_draws;
  Matrix score_draws;  // p x R
  double median = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double alpha = 0.05;
  int truncated = 0;  // draws clamped at the hazard support end
};

/// Empirical-Bayes prediction of the event time of a new subject (times/responses/covariates used;
/// any survival record is ignored).
PredictionResult predict_new_subject(const FitResult& fit, const Subject& subject, int R, double alpha,
                                     std::uint64_t seed);
/// Same with explicit parameters and bases.
PredictionResult predict_new_subject(const JointParams& params, Family family, const ModelBases& bases,
                                     const Subject& subject, int R, double alpha, std::uint64_t seed);

}  // namespace jmfpc
