#pragma once

#include <stdexcept>
#include <string>

namespace tiered {

struct Options {
  double tol = 1e-9;             // idempotency, orthogonality and balance checks (max-norm)
  double rank_tol = 1e-7;        // singular-value threshold when validating ranks
  double pinv_rel = 1e-9;        // relative eigenvalue cut-off for pseudo-inverses
  int snap_den = 64;             // largest denominator used for rational display
  double snap_tol = 1e-9;
  double residual_trace = 0.5;   // residual parts with smaller trace are dropped
  double damping = 0.5;
  double iter_tol = 1e-8;
  int max_iter = 200;
  int full_check_units = 200;    // above this size projector checks use random probes

  // Defaults, with TIERED_TOL overriding `tol` when set.
  static Options from_env();
};

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StructureError : Error {
  using Error::Error;
};

struct ChainError : Error {
  using Error::Error;
};

struct BalanceError : Error {
  BalanceError(const std::string& msg, std::string stage_, std::string upper_, std::string lower_)
      : Error(msg), stage(std::move(stage_)), upper(std::move(upper_)), lower(std::move(lower_)) {}
  std::string stage;
  std::string upper;
  std::string lower;
};

struct SpecError : Error {
  SpecError(const std::string& msg, int line_) : Error(msg), line(line_) {}
  int line = 0;
};

struct DataError : Error {
  using Error::Error;
};

struct ApplicabilityError : Error {
  using Error::Error;
};

}  // namespace tiered
