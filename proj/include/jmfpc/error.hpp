#pragma once

#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace jmfpc {

enum class ErrorKind {
  invalid_argument,
  out_of_domain,
  unsupported_degree,
  cannot_place_knots,
  nonfinite_hazard,
  zero_probability_interval,
  sampler_failure,
  mstep_failure,
  degenerate_component,
  insufficient_samples,
  singular_design,
  stale_fit,
  invalid_state,
  bootstrap_unreliable,
  all_candidates_failed,
  join_error,
  validation_error,
  unsupported_grid,
  config_error,
  io_error,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

// Warnings go to a process-wide sink (stderr by default, nullptr silences).
void set_warning_sink(std::ostream* sink);
void warn(std::string_view message);

}  // namespace jmfpc
