#include "jmfpc/data.hpp"

#include "jmfpc/error.hpp"

namespace jmfpc {

std::string_view to_string(Family family) {
  return family == Family::gaussian ? "gaussian" : "binary";
}

Family parse_family(std::string_view name) {
  if (name == "gaussian") return Family::gaussian;
  if (name == "binary") return Family::binary;
  fail(ErrorKind::config_error, "unknown family '" + std::string(name) + "'");
}

std::vector<SurvivalRecord> Dataset::survival_records() const {
  std::vector<SurvivalRecord> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects)
    if (s.survival) out.push_back(*s.survival);
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.family = family;
  out.domain = domain;
  out.covariate_names = covariate_names;
  out.subjects.reserve(indices.size());
  for (std::size_t idx : indices) out.subjects.push_back(subjects.at(idx));
  return out;
}

void validate(const Dataset& data) {
  require(data.domain.width() > 0.0, ErrorKind::validation_error, "observation window is degenerate");
  const int m = data.n_covariates();
  for (const auto& s : data.subjects) {
    const std::string who = "subject '" + s.id + "'";
    require(s.n_obs() >= 1, ErrorKind::validation_error, who + " has no longitudinal observations");
    require(s.responses.size() == s.times.size(), ErrorKind::validation_error,
            who + " has mismatched times/responses");
    require(s.covariates.size() == m, ErrorKind::validation_error, who + " has wrong covariate count");
    for (Eigen::Index j = 0; j < s.n_obs(); ++j) {
      require(std::isfinite(s.times[j]) && data.domain.contains(s.times[j]), ErrorKind::validation_error,
              who + " has an observation time outside the window");
      require(std::isfinite(s.responses[j]), ErrorKind::validation_error, who + " has a nonfinite response");
      if (data.family == Family::binary)
        require(s.responses[j] == 0.0 || s.responses[j] == 1.0, ErrorKind::validation_error,
                who + " has a non-{0,1} binary response");
    }
    require(s.survival.has_value(), ErrorKind::validation_error, who + " has no survival record");
    const auto& r = *s.survival;
    require(r.t_left >= 0.0 && r.t_right >= r.t_left, ErrorKind::validation_error,
            who + " has an invalid censoring interval");
    require(r.delta == 0 || r.delta == 1, ErrorKind::validation_error, who + " has delta outside {0,1}");
    require(r.delta == 1 || r.t_left == r.t_right, ErrorKind::validation_error,
            who + ": right censoring requires t_left == t_right");
    require(r.t_right > 0.0, ErrorKind::validation_error, who + " has a zero event/censoring time");
  }
}

}  // namespace jmfpc
