#pragma once

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace proxstrata {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside the mathematical domain of a function (non-finite, negative scale).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: out-of-range orders, incompatible parameter shapes,
/// generator constraints that cannot hold.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced during a numerical search.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::vector<double> snapshot = {})
      : Error(what), snapshot_(std::move(snapshot)) {}

  const std::vector<double>& snapshot() const noexcept { return snapshot_; }

 private:
  std::vector<double> snapshot_;
};

/// One violated dataset rule together with the offending rows (0-based).
struct Violation {
  std::string rule;
  std::vector<std::size_t> rows;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<Violation> violations)
      : Error(format(violations)), violations_(std::move(violations)) {}

  const std::vector<Violation>& violations() const noexcept {
    return violations_;
  }

 private:
  static std::string format(const std::vector<Violation>& violations) {
    std::ostringstream os;
    os << "dataset validation failed:";
    for (const auto& v : violations) {
      os << " [" << v.rule;
      if (!v.rows.empty()) {
        os << " at row";
        if (v.rows.size() > 1) os << 's';
        const std::size_t shown = std::min<std::size_t>(v.rows.size(), 10);
        for (std::size_t i = 0; i < shown; ++i) os << ' ' << v.rows[i];
        if (v.rows.size() > shown) os << " ... (" << v.rows.size() << " total)";
      }
      os << ']';
    }
    return os.str();
  }

  std::vector<Violation> violations_;
};

/// A pipeline step failed; `step()` names it (e.g. "fit_bridge").
class EstimationError : public Error {
 public:
  EstimationError(std::string step, const std::string& what)
      : Error(step + ": " + what), step_(std::move(step)) {}

  const std::string& step() const noexcept { return step_; }

 private:
  std::string step_;
};

/// A simulation study or Monte Carlo oracle could not produce a result.
class StudyError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace proxstrata
