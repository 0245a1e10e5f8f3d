#pragma once

#include <stdexcept>
#include <string>

namespace cqlearn {

// Base class for all library failures. Subclasses partition into the
// exit-code classes used by the CLI: input/config (2), numerical (3),
// inference quality (4).
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A required column or field is missing, or a document is malformed.
class schema_error : public error {
 public:
  using error::error;
};

// Data violates a dataset invariant (e.g. a cluster-level field that
// differs across rows of the same cluster).
class integrity_error : public error {
 public:
  using error::error;
};

// A value lies outside its admissible set (e.g. a treatment code other
// than -1, +1 or the ABSENT encoding).
class domain_error : public error {
 public:
  using error::error;
};

// No usable rows remain after applying stage-inclusion masks.
class insufficient_data_error : public error {
 public:
  using error::error;
};

// Normal-equations matrix lost rank; `column` is the offending design
// column (index into the stacked design, -1 if unknown).
class singular_design_error : public error {
 public:
  singular_design_error(const std::string& msg, int col)
      : error(msg), column(col) {}
  int column = -1;
};

// API misuse (mismatched stages, wrong vector lengths).
class usage_error : public error {
 public:
  using error::error;
};

// Too many bootstrap replicates failed for the interval to be trusted.
class inference_failure_error : public error {
 public:
  using error::error;
};

// Too many Monte Carlo runs failed for the experiment summary to be trusted.
class experiment_error : public error {
 public:
  using error::error;
};

}  // namespace cqlearn
