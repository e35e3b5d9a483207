// jmfpc: command-line front end for the joint FPCA / interval-censored relapse model.
#include "jmfpc/error.hpp"
#include "jmfpc/io.hpp"
#include "jmfpc/simulate.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace jmfpc;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_validation = 2;
constexpr int exit_convergence = 3;

const char* footer = R"(Config: flat `key = value` file, '#' comments, unknown keys rejected. Keys:
  seed family q degree K p h_mu h_psi sigma_b2 R0 Rmax tol max_iter output_dir workers
  longitudinal survival covariates domain_lower domain_upper p_candidates h_grid_size
  sigma_grid_size B model new_longitudinal new_covariates predict_draws alpha N n_obs
  replicates study_select
K = auto uses min(floor(N/4), 30); h_mu/h_psi = auto use tr(G)/tr(J); sigma_b2 = select grid-searches.
Environment: JMFPC_OUTPUT_DIR and JMFPC_WORKERS override the config; --workers overrides both.

Outputs (output_dir):
  config_resolved   every key with defaults materialized
  estimates.json    family, tuning, bases, estimates [{name, value, se}], aic   (fit/select/bootstrap)
  functions.csv     t,mu,psi1..psiP,hazard_t,log_hazard                       (fit/select/bootstrap/predict)
  trace.csv         iteration,R,q_hat,q_se,delta_q,delta_q_se,max_change,noise_ratio,acceptance,<labels>
  aic_report.csv    p,h_mu,h_psi,sigma_b2,ok,converged,iterations,expected_loglik,df_mu,df_psi,
                    df_hazard,df_total,aic,selected,error                    (select, sigma_b2 = select)
  predictions.csv   subject_id,median,lower,upper,truncated                   (predict)
  simulate:         longitudinal.csv, survival.csv, covariates.csv, truth.csv (subject_id,xi1,xi2,event_time);
                    with replicates > 0: table1.csv, summary.csv, aic_selection.csv,
                    curves_{mu,psi1,psi2,loghaz}.csv (grid,truth,p5,p50,p95)
Exit status: 0 success, 2 validation/config error, 3 convergence failure (best-so-far written), 1 other.)";

struct Context {
  RunConfig config;
  fs::path out;
  bool verbose = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io_error, "cannot write " + path.string());
  f << text;
}

Context load_context(const std::string& config_path, int workers_flag, bool verbose) {
  Context ctx;
  ctx.config = read_run_config(config_path);
  if (const char* dir = std::getenv("JMFPC_OUTPUT_DIR"); dir && *dir) ctx.config.output_dir = dir;
  if (const char* w = std::getenv("JMFPC_WORKERS"); w && *w) {
    try {
      ctx.config.workers = std::stoi(w);
    } catch (const std::exception&) {
      fail(ErrorKind::config_error, "JMFPC_WORKERS is not an integer");
    }
  }
  if (workers_flag > 0) ctx.config.workers = workers_flag;
  if (ctx.config.workers < 1) fail(ErrorKind::config_error, "workers must be >= 1");
  ctx.verbose = verbose;
  ctx.out = ctx.config.output_dir;
  fs::create_directories(ctx.out);
  write_text(ctx.out / "config_resolved", render_config(ctx.config));
  return ctx;
}

McemConfig fit_config(const Context& ctx) {
  McemConfig m = mcem_config(ctx.config);
  if (ctx.verbose)
    m.on_iteration = [](const TraceRecord& t) {
      std::cerr << "iter " << t.iteration << " R=" << t.R << " change=" << t.max_change
                << " noise=" << t.noise_ratio << '\n';
    };
  return m;
}

Dataset load_data(const RunConfig& c) {
  if (c.longitudinal.empty() || c.survival.empty())
    fail(ErrorKind::config_error, "longitudinal and survival files are required");
  return ingest(c.longitudinal, c.survival, c.covariates, c.family, config_domain(c));
}

void write_fit_outputs(const Context& ctx, const FitResult& f, const Dataset& data, const CovarianceEstimate* cov,
                       const AicValue* a) {
  write_estimates((ctx.out / "estimates.json").string(), f, data, cov, a);
  write_functions((ctx.out / "functions.csv").string(), f.params, *f.bases);
  write_trace((ctx.out / "trace.csv").string(), f);
}

// Louis SEs when the information is usable; a failure here leaves SEs out rather than the fit.
std::optional<CovarianceEstimate> try_louis(const FitResult& f, const Dataset& data, int workers) {
  try {
    LouisOptions o;
    o.workers = workers;
    return louis_information(f, data, o);
  } catch (const Error& e) {
    warn(std::string("standard errors unavailable: ") + e.what());
    return std::nullopt;
  }
}

SelectionConfig selection_config(const Context& ctx, const Dataset& data, const ModelBases& bases,
                                 std::vector<int> p_candidates) {
  SelectionConfig s;
  s.p_candidates = std::move(p_candidates);
  s.fit = fit_config(ctx);
  const PreparedData prepared = prepare(data, bases);
  s.h_grid = ctx.config.h_mu ? Vector::Constant(1, *ctx.config.h_mu)
                             : default_h_grid(prepared.total_gram, bases.penalty, ctx.config.h_grid_size);
  s.sigma_grid = default_sigma_grid(ctx.config.sigma_grid_size);
  return s;
}

// Fit at the configured tuning, or grid-search sigma_b2 (and h when auto) at the configured p.
std::shared_ptr<const FitResult> fit_configured(const Context& ctx, const Dataset& data,
                                                std::shared_ptr<const ModelBases> bases) {
  if (!ctx.config.sigma_b2) {
    const AICReport report = grid_search(data, bases, selection_config(ctx, data, *bases, {ctx.config.p}));
    write_aic_report((ctx.out / "aic_report.csv").string(), report);
    return report.best_fit;
  }
  const PreparedData prepared = prepare(data, *bases);
  return std::make_shared<const FitResult>(
      fit(data, bases, resolve_tuning(ctx.config, prepared, ctx.config.p), fit_config(ctx)));
}

std::shared_ptr<const ModelBases> bases_for(const RunConfig& c, const Dataset& data) {
  return std::make_shared<const ModelBases>(make_bases(data, c.q, c.degree, c.K));
}

int finish(const FitResult& f) {
  if (!f.converged) {
    std::cerr << "jmfpc: MCEM did not converge in " << f.iterations << " iterations; best-so-far written\n";
    return exit_convergence;
  }
  return exit_ok;
}

int cmd_simulate(const Context& ctx) {
  const RunConfig& c = ctx.config;
  SimDesign design;
  design.N = c.N;
  design.n_obs = c.n_obs;
  design.family = c.family;
  design.seed = c.seed;
  if (c.replicates == 0) {
    const SimData sim = generate_dataset(design);
    write_dataset(sim.data, ctx.out.string());
    std::ofstream f(ctx.out / "truth.csv", std::ios::binary);
    if (!f) fail(ErrorKind::io_error, "cannot write truth.csv");
    f << "subject_id,xi1,xi2,event_time\n";
    for (std::size_t i = 0; i < sim.data.size(); ++i)
      f << sim.data.subjects[i].id << ',' << format_double(sim.truth.xi[i][0]) << ','
        << format_double(sim.truth.xi[i][1]) << ',' << format_double(sim.truth.event_times[static_cast<Eigen::Index>(i)])
        << '\n';
    return exit_ok;
  }
  StudyConfig sc;
  sc.fit = mcem_config(c);
  sc.fit.workers = 1;
  sc.workers = c.workers;
  sc.tuning = {c.p, c.h_mu.value_or(1.0), c.h_psi.value_or(1.0), c.sigma_b2.value_or(1.0)};
  sc.h_relative = !c.h_mu;
  if (c.h_mu.has_value() != c.h_psi.has_value())
    fail(ErrorKind::config_error, "simulation studies need h_mu and h_psi both auto or both given");
  sc.select = c.study_select || !c.sigma_b2;
  if (sc.select) {
    sc.selection.p_candidates = c.study_select ? c.p_candidates : std::vector<int>{c.p};
    if (c.h_mu) sc.selection.h_grid = Vector::Constant(1, *c.h_mu);
    sc.selection.sigma_grid = default_sigma_grid(c.sigma_grid_size);
  }
  sc.estimate_p = c.p;
  const StudySummary summary = run_study(design, c.replicates, sc);
  write_study(summary, ctx.out.string());
  int failures = 0;
  for (const auto& r : summary.results)
    if (!r.ok) ++failures;
  std::cerr << "jmfpc: " << summary.replicates - failures << " of " << summary.replicates << " replicates succeeded\n";
  return exit_ok;
}

int cmd_fit(const Context& ctx) {
  const Dataset data = load_data(ctx.config);
  const auto bases = bases_for(ctx.config, data);
  const auto f = fit_configured(ctx, data, bases);
  const AicValue a = aic(*f, data);
  const auto cov = try_louis(*f, data, ctx.config.workers);
  write_fit_outputs(ctx, *f, data, cov ? &*cov : nullptr, &a);
  return finish(*f);
}

int cmd_select(const Context& ctx) {
  const Dataset data = load_data(ctx.config);
  const auto bases = bases_for(ctx.config, data);
  const AICReport report = grid_search(data, bases, selection_config(ctx, data, *bases, ctx.config.p_candidates));
  write_aic_report((ctx.out / "aic_report.csv").string(), report);
  const FitResult& f = *report.best_fit;
  const auto cov = try_louis(f, data, ctx.config.workers);
  write_fit_outputs(ctx, f, data, cov ? &*cov : nullptr, &report.best_candidate().value);
  return finish(f);
}

int cmd_bootstrap(const Context& ctx) {
  const Dataset data = load_data(ctx.config);
  const auto bases = bases_for(ctx.config, data);
  const auto f = fit_configured(ctx, data, bases);
  const AicValue a = aic(*f, data);
  try {
    const CovarianceEstimate cov = bootstrap_se(data, *f, ctx.config.B, fit_config(ctx));
    write_fit_outputs(ctx, *f, data, &cov, &a);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::bootstrap_unreliable) throw;
    write_fit_outputs(ctx, *f, data, nullptr, &a);
    std::cerr << "jmfpc: " << e.what() << '\n';
    return exit_convergence;
  }
  return finish(*f);
}

int cmd_predict(const Context& ctx) {
  const RunConfig& c = ctx.config;
  if (c.model.empty() || c.new_longitudinal.empty())
    fail(ErrorKind::config_error, "predict needs model and new_longitudinal");
  const LoadedModel m = load_model(c.model);
  const auto subjects = ingest_new_subjects(c.new_longitudinal, c.new_covariates, m.family, m.covariate_names);
  std::vector<PredictionResult> res(subjects.size());
  for (std::size_t i = 0; i < subjects.size(); ++i)
    res[i] = predict_new_subject(m.params, m.family, *m.bases, subjects[i], c.predict_draws, c.alpha,
                                 subject_seed(c.seed, i));
  std::ofstream f(ctx.out / "predictions.csv", std::ios::binary);
  if (!f) fail(ErrorKind::io_error, "cannot write predictions.csv");
  f << "subject_id,median,lower,upper,truncated\n";
  for (std::size_t i = 0; i < subjects.size(); ++i)
    f << subjects[i].id << ',' << format_double(res[i].median) << ',' << format_double(res[i].lower) << ','
      << format_double(res[i].upper) << ',' << res[i].truncated << '\n';
  write_functions((ctx.out / "functions.csv").string(), m.params, *m.bases);
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint functional principal components and interval-censored relapse model"};
  app.footer(footer);
  app.require_subcommand(1);
  std::string config_path;
  int workers = 0;
  bool verbose = false;
  app.add_option("--workers", workers, "worker threads (overrides config and JMFPC_WORKERS)")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", verbose, "print MCEM progress to stderr");

  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "generate a dataset, or run a simulation study when replicates > 0"},
      {"fit", "fit at the configured tuning (sigma_b2 = select grid-searches)"},
      {"select", "AIC grid search over p_candidates x h x sigma_b2"},
      {"bootstrap", "fit, then B nonparametric bootstrap refits for SEs"},
      {"predict", "event-time prediction for new subjects from a saved estimates.json"}};
  std::string chosen;
  for (const auto& [name, text] : commands) {
    auto* sub = app.add_subcommand(name, text);
    sub->add_option("config", config_path, "config file")->required()->check(CLI::ExistingFile);
    sub->callback([&chosen, name = name] { chosen = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_validation;
  }

  try {
    const Context ctx = load_context(config_path, workers, verbose);
    if (chosen == "simulate") return cmd_simulate(ctx);
    if (chosen == "fit") return cmd_fit(ctx);
    if (chosen == "select") return cmd_select(ctx);
    if (chosen == "bootstrap") return cmd_bootstrap(ctx);
    return cmd_predict(ctx);
  } catch (const Error& e) {
    std::cerr << "jmfpc: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::validation_error:
      case ErrorKind::join_error:
      case ErrorKind::config_error:
      case ErrorKind::invalid_argument:
      case ErrorKind::unsupported_grid:
        return exit_validation;
      case ErrorKind::all_candidates_failed:
      case ErrorKind::mstep_failure:
      case ErrorKind::sampler_failure:
        return exit_convergence;
      default:
        return exit_failure;
    }
  } catch (const std::exception& e) {
    std::cerr << "jmfpc: " << e.what() << '\n';
    return exit_failure;
  }
}
