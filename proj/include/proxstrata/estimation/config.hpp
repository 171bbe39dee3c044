#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/gmm.hpp"
#include "proxstrata/models.hpp"
#include "proxstrata/numerics.hpp"

namespace proxstrata::estimation {

/// Instrument terms available to the bridge equations, functions of (Z,A,C)
/// only. `C` and `C2` expand to one column per covariate.
enum class InstrumentTerm { One, Z, A, C, C2, A2, ZA };

inline std::string_view to_string(InstrumentTerm t) {
  switch (t) {
    case InstrumentTerm::One: return "1";
    case InstrumentTerm::Z: return "z";
    case InstrumentTerm::A: return "a";
    case InstrumentTerm::C: return "c";
    case InstrumentTerm::C2: return "c2";
    case InstrumentTerm::A2: return "a2";
    case InstrumentTerm::ZA: return "za";
  }
  return "?";
}

inline InstrumentTerm parse_instrument(std::string_view s) {
  if (s == "1" || s == "one") return InstrumentTerm::One;
  if (s == "z") return InstrumentTerm::Z;
  if (s == "a") return InstrumentTerm::A;
  if (s == "c") return InstrumentTerm::C;
  if (s == "c2") return InstrumentTerm::C2;
  if (s == "a2") return InstrumentTerm::A2;
  if (s == "za") return InstrumentTerm::ZA;
  throw ConfigError("unknown instrument term '" + std::string(s) + "'");
}

/// Extra per-block instruments for the outcome moments; each term is added to
/// every (z,s) block separately, which over-identifies the outcome system.
enum class OutcomeInstrument { A, W, C };

inline std::string_view to_string(OutcomeInstrument t) {
  switch (t) {
    case OutcomeInstrument::A: return "a";
    case OutcomeInstrument::W: return "w";
    case OutcomeInstrument::C: return "c";
  }
  return "?";
}

inline OutcomeInstrument parse_outcome_instrument(std::string_view s) {
  if (s == "a") return OutcomeInstrument::A;
  if (s == "w") return OutcomeInstrument::W;
  if (s == "c") return OutcomeInstrument::C;
  throw ConfigError("unknown outcome instrument '" + std::string(s) + "'");
}

struct IntegralMethod {
  enum class Kind { ClosedForm, Quadrature } kind = Kind::ClosedForm;
  int order = numerics::kDefaultQuadratureOrder;

  static IntegralMethod closed_form() { return {}; }
  static IntegralMethod quadrature(int order) {
    return {Kind::Quadrature, order};
  }
};

/// "closed" or "quad:K".
inline IntegralMethod parse_integral(std::string_view s) {
  if (s == "closed" || s == "closed_form") return IntegralMethod::closed_form();
  if (s.substr(0, 5) == "quad:") {
    const std::string digits(s.substr(5));
    std::size_t used = 0;
    int order = 0;
    try {
      order = std::stoi(digits, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != digits.size()) {
      throw ConfigError("integral: bad quadrature order in '" + std::string(s) + "'");
    }
    if (order < 1 || order > numerics::kMaxQuadratureOrder) {
      throw ConfigError("integral: quadrature order must lie in [1, 256]");
    }
    return IntegralMethod::quadrature(order);
  }
  throw ConfigError("integral: expected 'closed' or 'quad:K', got '" +
                    std::string(s) + "'");
}

inline std::string to_string(const IntegralMethod& m) {
  return m.kind == IntegralMethod::Kind::ClosedForm
             ? std::string("closed")
             : "quad:" + std::to_string(m.order);
}

/// How the stratum probabilities are obtained. `NaiveProbit` ignores the
/// latent confounder and reads them off a probit of S on (Z,A,W,C); it exists
/// as a contrast to the bridge-based estimator.
enum class StrataMethod { Bridge, NaiveProbit };

enum class IntervalKind { Percentile, Normal };

struct EstimationConfig {
  OutcomeCase outcome_case = OutcomeCase::I;
  /// Bridge basis {1, z, w, c, c^2}; false drops the c^2 terms.
  bool bridge_squares = true;
  /// W-model mean basis {1, z, a, c, c^2}; false drops the c^2 terms.
  bool w_squares = true;
  std::vector<InstrumentTerm> bridge_instruments = {
      InstrumentTerm::One, InstrumentTerm::A, InstrumentTerm::Z,
      InstrumentTerm::C, InstrumentTerm::C2};
  std::vector<OutcomeInstrument> outcome_instruments;
  /// Fit the ordered-probit strata model. Forced on for cases III and IV.
  bool use_psi = false;
  StrataMethod strata_method = StrataMethod::Bridge;
  IntegralMethod integral;
  int bootstrap_reps = 0;
  IntervalKind interval = IntervalKind::Percentile;
  std::uint64_t seed = 20230101;
  int threads = 1;
  gmm::Options solver;

  bool psi_required() const {
    return strata_method == StrataMethod::Bridge &&
           (use_psi || weight_conditioning(outcome_case) == Conditioning::X);
  }
};

/// One solver step in the pipeline.
struct StepReport {
  std::string step;
  bool converged = false;
  int iterations = 0;
  double moment_norm = 0.0;
  double gradient_norm = 0.0;
  /// More moments than parameters; the contract is then on gradient_norm.
  bool over_identified = false;
};

struct Diagnostics {
  std::vector<StepReport> steps;
  std::size_t clipped_units = 0;
  std::size_t out_of_range_units = 0;
  std::vector<std::string> warnings;

  void record(const std::string& step, const gmm::Solution& sol) {
    steps.push_back({step, sol.converged, sol.iterations, sol.moment_norm,
                     sol.gradient_norm, sol.weight.rows() > sol.params.size()});
    for (const auto& d : sol.diagnostics) warnings.push_back(step + ": " + d);
  }
};

}  // namespace proxstrata::estimation
