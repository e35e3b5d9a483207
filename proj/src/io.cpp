#include "jmfpc/io.hpp"

#include "jmfpc/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace jmfpc {

using nlohmann::json;

std::string format_double(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::string unquote(std::string s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io_error, "cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::ofstream open_out(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io_error, "cannot write " + path);
  return f;
}

std::string where(const CsvTable& t, std::size_t row) {
  return t.path + " line " + std::to_string(t.lines[row]);
}

double parse_number(const std::string& s, const std::string& context) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v))
    fail(ErrorKind::validation_error, context + ": '" + s + "' is not a finite number");
  return v;
}

long long parse_integer(const std::string& s, const std::string& context) {
  long long v = 0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) fail(ErrorKind::validation_error, context + ": '" + s + "' is not an integer");
  return v;
}

struct Longitudinal {
  std::vector<double> times, values;
};

// Observations grouped by id in file order.
std::unordered_map<std::string, Longitudinal> read_longitudinal(const CsvTable& t, Family family,
                                                                std::vector<std::string>& order) {
  const std::size_t ci = t.column("subject_id"), ct = t.column("time"), cv = t.column("value");
  std::unordered_map<std::string, Longitudinal> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const double time = parse_number(row[ct], where(t, r));
    const double value = parse_number(row[cv], where(t, r));
    if (family == Family::binary && value != 0.0 && value != 1.0)
      fail(ErrorKind::validation_error, where(t, r) + ": binary response must be 0 or 1, got " + row[cv]);
    auto [it, added] = out.try_emplace(row[ci]);
    if (added) order.push_back(row[ci]);
    it->second.times.push_back(time);
    it->second.values.push_back(value);
  }
  return out;
}

struct Covariates {
  std::vector<std::string> names;
  std::unordered_map<std::string, Vector> values;
};

Covariates read_covariates(const CsvTable& t) {
  Covariates out;
  const std::size_t ci = t.column("subject_id");
  for (std::size_t j = 0; j < t.header.size(); ++j)
    if (j != ci) out.names.push_back(t.header[j]);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    Vector z(static_cast<Eigen::Index>(out.names.size()));
    Eigen::Index k = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
      if (j != ci) z[k++] = parse_number(row[j], where(t, r));
    if (!out.values.emplace(row[ci], z).second)
      fail(ErrorKind::validation_error, where(t, r) + ": duplicate covariate row for subject '" + row[ci] + "'");
  }
  return out;
}

void fill_observations(Subject& s, Longitudinal obs) {
  std::vector<std::size_t> idx(obs.times.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (!std::is_sorted(obs.times.begin(), obs.times.end())) {
    warn("subject '" + s.id + "': observation times were not sorted; sorting");
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return obs.times[a] < obs.times[b]; });
  }
  s.times = Vector(static_cast<Eigen::Index>(idx.size()));
  s.responses = Vector(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    s.times[static_cast<Eigen::Index>(j)] = obs.times[idx[j]];
    s.responses[static_cast<Eigen::Index>(j)] = obs.values[idx[j]];
  }
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) fail(ErrorKind::validation_error, path + ": missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable parse_csv(std::string_view text, const std::string& path) {
  CsvTable t;
  t.path = path;
  std::size_t line = 0, pos = 0;
  bool have_header = false;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view raw = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line;
    if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
    if (trim(raw).empty()) {
      if (nl == text.size()) break;
      continue;
    }
    std::vector<std::string> cells;
    std::size_t a = 0;
    while (true) {
      const std::size_t c = raw.find(',', a);
      cells.push_back(unquote(trim(raw.substr(a, c == std::string_view::npos ? raw.size() - a : c - a))));
      if (c == std::string_view::npos) break;
      a = c + 1;
    }
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size())
        fail(ErrorKind::validation_error, path + " line " + std::to_string(line) + ": expected " +
                                              std::to_string(t.header.size()) + " fields, found " +
                                              std::to_string(cells.size()));
      t.rows.push_back(std::move(cells));
      t.lines.push_back(line);
    }
    if (nl == text.size()) break;
  }
  if (!have_header) fail(ErrorKind::validation_error, path + ": empty file");
  return t;
}

CsvTable read_csv(const std::string& path) { return parse_csv(slurp(path), path); }

Dataset ingest(const std::string& longitudinal, const std::string& survival, const std::string& covariates,
               Family family, std::optional<Interval> domain) {
  const CsvTable lt = read_csv(longitudinal), st = read_csv(survival);
  if (covariates.empty()) return ingest_tables(lt, st, nullptr, family, domain);
  const CsvTable ct = read_csv(covariates);
  return ingest_tables(lt, st, &ct, family, domain);
}

Dataset ingest_tables(const CsvTable& longitudinal, const CsvTable& survival, const CsvTable* covariates,
                      Family family, std::optional<Interval> domain) {
  std::vector<std::string> long_order;
  auto obs = read_longitudinal(longitudinal, family, long_order);
  Covariates cov;
  if (covariates) cov = read_covariates(*covariates);

  Dataset data;
  data.family = family;
  data.covariate_names = cov.names;
  const std::size_t ci = survival.column("subject_id"), cl = survival.column("t_left"),
                    cr = survival.column("t_right"), cd = survival.column("delta");
  std::set<std::string> seen;
  for (std::size_t r = 0; r < survival.rows.size(); ++r) {
    const auto& row = survival.rows[r];
    const std::string ctx = where(survival, r);
    if (!seen.insert(row[ci]).second)
      fail(ErrorKind::validation_error, ctx + ": duplicate survival row for subject '" + row[ci] + "'");
    SurvivalRecord rec;
    rec.t_left = parse_number(row[cl], ctx);
    rec.t_right = parse_number(row[cr], ctx);
    const long long delta = parse_integer(row[cd], ctx);
    if (delta != 0 && delta != 1) fail(ErrorKind::validation_error, ctx + ": delta must be 0 or 1");
    rec.delta = static_cast<int>(delta);
    if (rec.t_left < 0.0) fail(ErrorKind::validation_error, ctx + ": t_left is negative");
    if (rec.t_left > rec.t_right) fail(ErrorKind::validation_error, ctx + ": t_left exceeds t_right");
    if (rec.delta == 0 && rec.t_left != rec.t_right)
      fail(ErrorKind::validation_error, ctx + ": right censoring (delta = 0) requires t_left == t_right");

    Subject s;
    s.id = row[ci];
    const auto it = obs.find(s.id);
    if (it == obs.end()) fail(ErrorKind::join_error, "subject '" + s.id + "' has no longitudinal observations");
    fill_observations(s, std::move(it->second));
    obs.erase(it);
    if (covariates) {
      const auto jt = cov.values.find(s.id);
      if (jt == cov.values.end()) fail(ErrorKind::join_error, "subject '" + s.id + "' is missing from the covariates");
      s.covariates = jt->second;
      cov.values.erase(jt);
    } else {
      s.covariates = Vector(0);
    }
    s.survival = rec;
    data.subjects.push_back(std::move(s));
  }
  for (const auto& id : long_order)
    if (obs.count(id)) fail(ErrorKind::join_error, "subject '" + id + "' has no survival record");
  if (!cov.values.empty()) {
    std::vector<std::string> extra;
    for (const auto& [id, z] : cov.values) extra.push_back(id);
    std::sort(extra.begin(), extra.end());
    fail(ErrorKind::join_error, "subject '" + extra.front() + "' has covariates but no survival record");
  }
  require(!data.subjects.empty(), ErrorKind::validation_error, "no subjects");

  if (domain) {
    data.domain = *domain;
  } else {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : data.subjects) {
      lo = std::min(lo, s.times.minCoeff());
      hi = std::max(hi, s.times.maxCoeff());
    }
    data.domain = {lo, hi};
  }
  validate(data);
  return data;
}

std::vector<Subject> ingest_new_subjects(const std::string& longitudinal, const std::string& covariates,
                                         Family family, const std::vector<std::string>& covariate_names) {
  const CsvTable lt = read_csv(longitudinal);
  std::vector<std::string> order;
  auto obs = read_longitudinal(lt, family, order);
  Covariates cov;
  if (!covariates.empty()) cov = read_covariates(read_csv(covariates));
  if (cov.names != covariate_names)
    fail(ErrorKind::validation_error, "covariate columns of the new subjects do not match the fitted model");
  std::vector<Subject> out;
  for (const auto& id : order) {
    Subject s;
    s.id = id;
    fill_observations(s, std::move(obs[id]));
    if (!covariate_names.empty()) {
      const auto jt = cov.values.find(id);
      if (jt == cov.values.end()) fail(ErrorKind::join_error, "subject '" + id + "' is missing from the covariates");
      s.covariates = jt->second;
    } else {
      s.covariates = Vector(0);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const Dataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  std::ofstream lf = open_out((root / "longitudinal.csv").string());
  std::ofstream sf = open_out((root / "survival.csv").string());
  std::ofstream cf = open_out((root / "covariates.csv").string());
  lf << "subject_id,time,value\n";
  sf << "subject_id,t_left,t_right,delta\n";
  cf << "subject_id";
  for (const auto& n : data.covariate_names) cf << ',' << n;
  cf << '\n';
  for (const auto& s : data.subjects) {
    for (Eigen::Index j = 0; j < s.n_obs(); ++j)
      lf << s.id << ',' << format_double(s.times[j]) << ',' << format_double(s.responses[j]) << '\n';
    if (s.survival)
      sf << s.id << ',' << format_double(s.survival->t_left) << ',' << format_double(s.survival->t_right) << ','
         << s.survival->delta << '\n';
    cf << s.id;
    for (Eigen::Index k = 0; k < s.covariates.size(); ++k) cf << ',' << format_double(s.covariates[k]);
    cf << '\n';
  }
}

std::map<std::string, std::string> parse_flat_config(std::string_view text, const std::vector<std::string>& allowed,
                                                     const std::string& source) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(std::string_view(raw).substr(0, hash));
    if (body.empty()) continue;
    const std::string ctx = source + " line " + std::to_string(line);
    const auto eq = body.find('=');
    if (eq == std::string::npos) fail(ErrorKind::config_error, ctx + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      fail(ErrorKind::config_error, ctx + ": unknown key '" + key + "'");
    if (!out.emplace(key, value).second) fail(ErrorKind::config_error, ctx + ": duplicate key '" + key + "'");
  }
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k{
      "seed",          "family",          "q",          "degree",         "K",
      "p",             "h_mu",            "h_psi",      "sigma_b2",       "R0",
      "Rmax",          "tol",             "max_iter",   "output_dir",     "workers",
      "longitudinal",  "survival",        "covariates", "domain_lower",   "domain_upper",
      "p_candidates",  "h_grid_size",     "sigma_grid_size", "B",         "model",
      "new_longitudinal", "new_covariates", "predict_draws", "alpha",     "N",
      "n_obs",         "replicates",      "study_select"};
  return k;
}

namespace {

int config_int(const std::string& key, const std::string& v) {
  try {
    return static_cast<int>(parse_integer(v, "config key '" + key + "'"));
  } catch (const Error& e) {
    fail(ErrorKind::config_error, e.what());
  }
}

double config_double(const std::string& key, const std::string& v) {
  try {
    return parse_number(v, "config key '" + key + "'");
  } catch (const Error& e) {
    fail(ErrorKind::config_error, e.what());
  }
}

bool config_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::config_error, "config key '" + key + "': expected true or false");
}

std::string opt(const std::optional<double>& v, const char* unset) { return v ? format_double(*v) : unset; }

}  // namespace

RunConfig resolve_config(const std::map<std::string, std::string>& values) {
  RunConfig c;
  for (const auto& [key, v] : values) {
    if (key == "seed") {
      std::uint64_t s = 0;
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
      if (ec != std::errc() || ptr != v.data() + v.size()) fail(ErrorKind::config_error, "seed must be an unsigned integer");
      c.seed = s;
    } else if (key == "family") {
      try {
        c.family = parse_family(v);
      } catch (const Error& e) {
        fail(ErrorKind::config_error, e.what());
      }
    } else if (key == "q") c.q = config_int(key, v);
    else if (key == "degree") c.degree = config_int(key, v);
    else if (key == "K") c.K = v == "auto" ? -1 : config_int(key, v);
    else if (key == "p") c.p = config_int(key, v);
    else if (key == "h_mu") c.h_mu = v == "auto" ? std::nullopt : std::optional<double>(config_double(key, v));
    else if (key == "h_psi") c.h_psi = v == "auto" ? std::nullopt : std::optional<double>(config_double(key, v));
    else if (key == "sigma_b2") c.sigma_b2 = v == "select" ? std::nullopt : std::optional<double>(config_double(key, v));
    else if (key == "R0") c.R0 = config_int(key, v);
    else if (key == "Rmax") c.Rmax = config_int(key, v);
    else if (key == "tol") c.tol = config_double(key, v);
    else if (key == "max_iter") c.max_iter = config_int(key, v);
    else if (key == "output_dir") c.output_dir = v;
    else if (key == "workers") c.workers = config_int(key, v);
    else if (key == "longitudinal") c.longitudinal = v;
    else if (key == "survival") c.survival = v;
    else if (key == "covariates") c.covariates = v;
    else if (key == "domain_lower") c.domain_lower = v == "auto" ? std::nullopt : std::optional<double>(config_double(key, v));
    else if (key == "domain_upper") c.domain_upper = v == "auto" ? std::nullopt : std::optional<double>(config_double(key, v));
    else if (key == "p_candidates") {
      c.p_candidates.clear();
      std::istringstream in(v);
      std::string item;
      while (std::getline(in, item, ',')) c.p_candidates.push_back(config_int(key, trim(item)));
      if (c.p_candidates.empty()) fail(ErrorKind::config_error, "p_candidates is empty");
    } else if (key == "h_grid_size") c.h_grid_size = config_int(key, v);
    else if (key == "sigma_grid_size") c.sigma_grid_size = config_int(key, v);
    else if (key == "B") c.B = config_int(key, v);
    else if (key == "model") c.model = v;
    else if (key == "new_longitudinal") c.new_longitudinal = v;
    else if (key == "new_covariates") c.new_covariates = v;
    else if (key == "predict_draws") c.predict_draws = config_int(key, v);
    else if (key == "alpha") c.alpha = config_double(key, v);
    else if (key == "N") c.N = config_int(key, v);
    else if (key == "n_obs") c.n_obs = config_int(key, v);
    else if (key == "replicates") c.replicates = config_int(key, v);
    else if (key == "study_select") c.study_select = config_bool(key, v);
    else fail(ErrorKind::config_error, "unknown key '" + key + "'");
  }
  if (c.q < 1 || c.degree < 0 || c.p < 0 || c.R0 < 1 || c.Rmax < c.R0 || c.max_iter < 1 || c.workers < 1 ||
      c.h_grid_size < 1 || c.sigma_grid_size < 1 || c.B < 2 || c.predict_draws < 1 || c.N < 1 || c.n_obs < 1 ||
      c.replicates < 0 || !(c.tol > 0.0) || !(c.alpha > 0.0 && c.alpha < 1.0))
    fail(ErrorKind::config_error, "a numeric setting is out of range");
  if ((c.h_mu && *c.h_mu < 0.0) || (c.h_psi && *c.h_psi < 0.0) || (c.sigma_b2 && *c.sigma_b2 <= 0.0))
    fail(ErrorKind::config_error, "penalty settings must be positive");
  return c;
}

RunConfig read_run_config(const std::string& path) {
  return resolve_config(parse_flat_config(slurp(path), RunConfig::keys(), path));
}

std::string render_config(const RunConfig& c) {
  std::ostringstream os;
  std::string pc;
  for (std::size_t j = 0; j < c.p_candidates.size(); ++j) pc += (j ? "," : "") + std::to_string(c.p_candidates[j]);
  os << "seed = " << c.seed << '\n'
     << "family = " << to_string(c.family) << '\n'
     << "q = " << c.q << '\n'
     << "degree = " << c.degree << '\n'
     << "K = " << (c.K < 0 ? std::string("auto") : std::to_string(c.K)) << '\n'
     << "p = " << c.p << '\n'
     << "h_mu = " << opt(c.h_mu, "auto") << '\n'
     << "h_psi = " << opt(c.h_psi, "auto") << '\n'
     << "sigma_b2 = " << opt(c.sigma_b2, "select") << '\n'
     << "R0 = " << c.R0 << '\n'
     << "Rmax = " << c.Rmax << '\n'
     << "tol = " << format_double(c.tol) << '\n'
     << "max_iter = " << c.max_iter << '\n'
     << "output_dir = " << c.output_dir << '\n'
     << "workers = " << c.workers << '\n'
     << "longitudinal = " << c.longitudinal << '\n'
     << "survival = " << c.survival << '\n'
     << "covariates = " << c.covariates << '\n'
     << "domain_lower = " << opt(c.domain_lower, "auto") << '\n'
     << "domain_upper = " << opt(c.domain_upper, "auto") << '\n'
     << "p_candidates = " << pc << '\n'
     << "h_grid_size = " << c.h_grid_size << '\n'
     << "sigma_grid_size = " << c.sigma_grid_size << '\n'
     << "B = " << c.B << '\n'
     << "model = " << c.model << '\n'
     << "new_longitudinal = " << c.new_longitudinal << '\n'
     << "new_covariates = " << c.new_covariates << '\n'
     << "predict_draws = " << c.predict_draws << '\n'
     << "alpha = " << format_double(c.alpha) << '\n'
     << "N = " << c.N << '\n'
     << "n_obs = " << c.n_obs << '\n'
     << "replicates = " << c.replicates << '\n'
     << "study_select = " << (c.study_select ? "true" : "false") << '\n';
  return os.str();
}

McemConfig mcem_config(const RunConfig& c) {
  McemConfig m;
  m.q = c.q;
  m.degree = c.degree;
  m.hazard_knots = c.K;
  m.R0 = c.R0;
  m.Rmax = c.Rmax;
  m.tol = c.tol;
  m.max_iter = c.max_iter;
  m.seed = c.seed;
  m.workers = c.workers;
  return m;
}

std::optional<Interval> config_domain(const RunConfig& c) {
  if (!c.domain_lower && !c.domain_upper) return std::nullopt;
  if (!c.domain_lower || !c.domain_upper)
    fail(ErrorKind::config_error, "domain_lower and domain_upper must be given together");
  return Interval{*c.domain_lower, *c.domain_upper};
}

TuningParams resolve_tuning(const RunConfig& c, const PreparedData& prepared, int p) {
  const double scale = prepared.total_gram.trace() / prepared.bases->penalty.matrix.trace();
  TuningParams t;
  t.p = p;
  t.h_mu = c.h_mu.value_or(scale);
  t.h_psi = c.h_psi.value_or(scale);
  t.sigma_b2 = c.sigma_b2.value_or(1.0);
  return t;
}

namespace {

json vec_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index j = 0; j < v.size(); ++j) a.push_back(std::isfinite(v[j]) ? json(v[j]) : json(nullptr));
  return a;
}

Vector json_vec(const json& a) {
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t j = 0; j < a.size(); ++j) v[static_cast<Eigen::Index>(j)] = a[j].get<double>();
  return v;
}

}  // namespace

void write_estimates(const std::string& path, const FitResult& fit, const Dataset& data,
                     const CovarianceEstimate* covariance, const AicValue* aic) {
  require(fit.bases != nullptr, ErrorKind::stale_fit, "fit carries no bases");
  const ParamLayout layout = fit.layout();
  const auto labels = layout.labels();
  const Vector packed = pack(fit.params, layout);
  json j;
  j["family"] = std::string(to_string(fit.family));
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["final_R"] = fit.final_R;
  j["include_survival"] = fit.include_survival;
  j["tuning"] = {{"p", fit.tuning.p}, {"h_mu", fit.tuning.h_mu}, {"h_psi", fit.tuning.h_psi},
                 {"sigma_b2", fit.tuning.sigma_b2}};
  const auto& lb = fit.bases->longitudinal;
  j["bases"] = {{"q", lb.size()},
                {"degree", lb.degree()},
                {"domain", {lb.domain().lower, lb.domain().upper}},
                {"hazard_knots", vec_json(fit.bases->hazard.knots)},
                {"hazard_support_end", fit.bases->hazard.support_end}};
  j["covariate_names"] = data.covariate_names;
  json est = json::array();
  for (std::size_t k = 0; k < labels.size(); ++k) {
    json e = {{"name", labels[k]}, {"value", packed[static_cast<Eigen::Index>(k)]}};
    if (covariance) {
      const double se = covariance->se(labels[k]);
      e["se"] = std::isfinite(se) ? json(se) : json(nullptr);
    }
    est.push_back(std::move(e));
  }
  j["estimates"] = std::move(est);
  if (covariance) {
    j["se_method"] = covariance->method == CovarianceMethod::louis ? "louis" : "bootstrap";
    j["se_indefinite"] = covariance->indefinite;
    if (covariance->method == CovarianceMethod::bootstrap) {
      j["bootstrap_replicates"] = covariance->replicates;
      j["bootstrap_dropped"] = covariance->dropped;
    }
  }
  if (aic) {
    j["aic"] = {{"aic", aic->aic},
                {"expected_loglik", aic->expected_loglik},
                {"df_mu", aic->df.df_mu},
                {"df_psi", aic->df.df_psi},
                {"df_hazard", aic->df.df_hazard},
                {"df_total", aic->df.total()}};
  }
  std::ofstream f = open_out(path);
  f << j.dump(2) << '\n';
}

void write_functions(const std::string& path, const JointParams& params, const ModelBases& bases, int n) {
  require(n >= 2, ErrorKind::invalid_argument, "function grid needs at least two points");
  const Interval& dom = bases.longitudinal.domain();
  const Vector grid = linspace(dom.lower, dom.upper, n);
  const double end = bases.hazard.support_end;
  std::ofstream f = open_out(path);
  f << "t,mu";
  for (int l = 0; l < params.p(); ++l) f << ",psi" << l + 1;
  f << ",hazard_t,log_hazard\n";
  for (int j = 0; j < n; ++j) {
    const Vector b = bases.longitudinal(grid[j]);
    f << format_double(grid[j]) << ',' << format_double(b.dot(params.theta_mu));
    const Vector psi = params.theta_psi.transpose() * b;
    for (int l = 0; l < params.p(); ++l) f << ',' << format_double(psi[l]);
    if (end > 0.0) {
      const double t = end * (j + 1) / n;
      f << ',' << format_double(t) << ',' << format_double(log_baseline_hazard(params, bases.hazard, t));
    } else {
      f << ",NA,NA";
    }
    f << '\n';
  }
}

void write_trace(const std::string& path, const FitResult& fit) {
  const auto labels = fit.layout().labels();
  std::ofstream f = open_out(path);
  f << "iteration,R,q_hat,q_se,delta_q,delta_q_se,max_change,noise_ratio,acceptance";
  for (const auto& l : labels) f << ',' << l;
  f << '\n';
  for (const auto& t : fit.trace) {
    f << t.iteration << ',' << t.R << ',' << format_double(t.q_hat) << ',' << format_double(t.q_se) << ','
      << format_double(t.delta_q) << ',' << format_double(t.delta_q_se) << ',' << format_double(t.max_change) << ','
      << format_double(t.noise_ratio) << ',' << format_double(t.acceptance);
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(labels.size()); ++k)
      f << ',' << (k < t.params.size() ? format_double(t.params[k]) : std::string("NA"));
    f << '\n';
  }
}

void write_aic_report(const std::string& path, const AICReport& report) {
  std::ofstream f = open_out(path);
  f << "p,h_mu,h_psi,sigma_b2,ok,converged,iterations,expected_loglik,df_mu,df_psi,df_hazard,df_total,aic,selected,"
       "error\n";
  for (std::size_t k = 0; k < report.candidates.size(); ++k) {
    const Candidate& c = report.candidates[k];
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    f << c.tuning.p << ',' << format_double(c.tuning.h_mu) << ',' << format_double(c.tuning.h_psi) << ','
      << format_double(c.tuning.sigma_b2) << ',' << (c.ok ? 1 : 0) << ',' << (c.converged ? 1 : 0) << ','
      << c.iterations << ',';
    if (c.ok)
      f << format_double(c.value.expected_loglik) << ',' << format_double(c.value.df.df_mu) << ','
        << format_double(c.value.df.df_psi) << ',' << format_double(c.value.df.df_hazard) << ','
        << format_double(c.value.df.total()) << ',' << format_double(c.value.aic);
    else
      f << "NA,NA,NA,NA,NA,NA";
    f << ',' << (k == report.best ? 1 : 0) << ',' << err << '\n';
  }
}

LoadedModel load_model(const std::string& estimates_path) {
  json j;
  try {
    j = json::parse(slurp(estimates_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::validation_error, estimates_path + ": " + e.what());
  }
  try {
    LoadedModel m;
    m.family = parse_family(j.at("family").get<std::string>());
    const auto& t = j.at("tuning");
    m.tuning = {t.at("p").get<int>(), t.at("h_mu").get<double>(), t.at("h_psi").get<double>(),
                t.at("sigma_b2").get<double>()};
    m.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
    const auto& b = j.at("bases");
    const auto dom = b.at("domain").get<std::vector<double>>();
    require(dom.size() == 2, ErrorKind::validation_error, "bases.domain must have two entries");
    BSplineBasis lb(b.at("q").get<int>(), b.at("degree").get<int>(), Interval{dom[0], dom[1]});
    PenaltyMatrix pen = roughness_penalty(lb);
    HazardBasis hb{json_vec(b.at("hazard_knots")), b.at("hazard_support_end").get<double>()};
    m.bases = std::make_shared<const ModelBases>(ModelBases{std::move(lb), std::move(pen), std::move(hb)});
    const auto& est = j.at("estimates");
    Vector packed(static_cast<Eigen::Index>(est.size()));
    for (std::size_t k = 0; k < est.size(); ++k) packed[static_cast<Eigen::Index>(k)] = est[k].at("value").get<double>();
    const ParamLayout layout{m.bases->longitudinal.size(), m.tuning.p, m.bases->hazard.size(),
                             static_cast<int>(m.covariate_names.size()), m.family == Family::gaussian};
    require(layout.size() == packed.size(), ErrorKind::validation_error, "estimate count does not match the bases");
    m.params = unpack(packed, layout);
    return m;
  } catch (const json::exception& e) {
    fail(ErrorKind::validation_error, estimates_path + ": " + e.what());
  }
}

}  // namespace jmfpc
