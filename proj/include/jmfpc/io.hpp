#pragma once

#include "jmfpc/inference.hpp"
#include "jmfpc/selection.hpp"

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace jmfpc {

/// %.17g; "NA" for non-finite values.
std::string format_double(double v);

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // 1-based file line of each row

  /// Column index by name; throws validation_error naming the file when absent.
  std::size_t column(const std::string& name) const;
};

CsvTable parse_csv(std::string_view text, const std::string& path = "<memory>");
CsvTable read_csv(const std::string& path);

/// Joins longitudinal (subject_id,time,value), survival (subject_id,t_left,t_right,delta) and
/// covariate (subject_id,<name>...) files on subject_id. Subjects follow the survival file order.
/// An empty covariates path means no covariates. Without a domain the window is the observed
/// time range.
Dataset ingest(const std::string& longitudinal, const std::string& survival, const std::string& covariates,
               Family family, std::optional<Interval> domain = std::nullopt);
Dataset ingest_tables(const CsvTable& longitudinal, const CsvTable& survival, const CsvTable* covariates,
                      Family family, std::optional<Interval> domain = std::nullopt);

/// Subjects without survival records (prediction input).
std::vector<Subject> ingest_new_subjects(const std::string& longitudinal, const std::string& covariates,
                                         Family family, const std::vector<std::string>& covariate_names);

/// longitudinal.csv, survival.csv, covariates.csv.
void write_dataset(const Dataset& data, const std::string& dir);

/// Flat `key = value` text; '#' starts a comment. Keys outside `allowed` are config errors.
std::map<std::string, std::string> parse_flat_config(std::string_view text, const std::vector<std::string>& allowed,
                                                     const std::string& source = "<config>");

/// Every setting of a command-line run, defaults materialized.
struct RunConfig {
  std::uint64_t seed = 1;
  Family family = Family::gaussian;
  int q = 8;
  int degree = 3;
  int K = -1;  // < 0: min(floor(N/4), 30)
  int p = 2;
  std::optional<double> h_mu, h_psi;  // unset: tr(G)/tr(J)
  std::optional<double> sigma_b2 = 1.0;  // unset: grid search
  int R0 = 200;
  int Rmax = 10000;
  double tol = 1e-3;
  int max_iter = 100;
  std::string output_dir = "jmfpc_out";
  int workers = 1;

  std::string longitudinal, survival, covariates;
  std::optional<double> domain_lower, domain_upper;

  std::vector<int> p_candidates{1, 2, 3};
  int h_grid_size = 5;
  int sigma_grid_size = 5;

  int B = 200;

  std::string model;  // estimates.json of an earlier fit
  std::string new_longitudinal, new_covariates;
  int predict_draws = 2000;
  double alpha = 0.05;

  int N = 100;
  int n_obs = 20;
  int replicates = 0;  // > 0: run a simulation study
  bool study_select = false;

  static const std::vector<std::string>& keys();
};

RunConfig resolve_config(const std::map<std::string, std::string>& values);
RunConfig read_run_config(const std::string& path);
/// key = value lines for every key, in keys() order.
std::string render_config(const RunConfig& config);

McemConfig mcem_config(const RunConfig& config);
std::optional<Interval> config_domain(const RunConfig& config);
/// Absolute tuning for a dataset (auto penalty = tr(G)/tr(J)).
TuningParams resolve_tuning(const RunConfig& config, const PreparedData& prepared, int p);

/// estimates.json: labeled estimate, SEs when given, AIC when given, bases, tuning.
void write_estimates(const std::string& path, const FitResult& fit, const Dataset& data,
                     const CovarianceEstimate* covariance, const AicValue* aic);
/// grid evaluations of mu, psi_l on the window and log lambda0 on (0, support_end].
void write_functions(const std::string& path, const JointParams& params, const ModelBases& bases, int n = 200);
void write_trace(const std::string& path, const FitResult& fit);
void write_aic_report(const std::string& path, const AICReport& report);

struct LoadedModel {
  JointParams params;
  Family family = Family::gaussian;
  TuningParams tuning;
  std::vector<std::string> covariate_names;
  std::shared_ptr<const ModelBases> bases;
};

LoadedModel load_model(const std::string& estimates_path);

}  // namespace jmfpc
