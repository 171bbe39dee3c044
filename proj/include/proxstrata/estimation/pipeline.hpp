#pragma once

// Full estimator: nuisances, weights, outcome means, effects, and the
// nonparametric bootstrap around all of it.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/estimation/config.hpp"
#include "proxstrata/estimation/nuisance.hpp"
#include "proxstrata/estimation/outcome.hpp"
#include "proxstrata/estimation/weights.hpp"
#include "proxstrata/parallel.hpp"

namespace proxstrata::estimation {

struct FitResult {
  ParamSet params;
  /// Coefficients of the naive S probit when that strata method is active.
  std::optional<Eigen::VectorXd> naive_coef;
  StrataWeights weights;
  EffectEstimates effects;
  Diagnostics diagnostics;
  bool w_degenerate = false;
};

/// One pass of the estimator. `warm`, when given, seeds every iterative step.
inline FitResult estimate(const Dataset& data, const EstimationConfig& config,
                          const FitResult* warm = nullptr) {
  FitResult out;
  if (config.strata_method == StrataMethod::NaiveProbit) {
    const Eigen::VectorXd* w0 =
        warm && warm->naive_coef ? &*warm->naive_coef : nullptr;
    NaiveFit naive = naive_weights(data, config.solver, w0);
    out.diagnostics.record("naive_probit", naive.solution);
    out.naive_coef = naive.solution.params;
    out.weights = std::move(naive.weights);
  } else {
    TreatmentFit beta =
        fit_treatment(data, config.solver, warm ? &warm->params.beta : nullptr);
    out.diagnostics.record("fit_treatment", beta.solution);
    out.params.beta = beta.beta;

    WModelFit gamma = fit_w_model(data, config.w_squares);
    out.params.gamma = gamma.gamma;
    out.w_degenerate = gamma.degenerate;
    if (gamma.degenerate) {
      out.diagnostics.warnings.push_back("fit_w_model: sigma_w is numerically zero");
    }

    BridgeFit alpha =
        fit_bridge(data, config, warm ? &warm->params.alpha : nullptr);
    out.diagnostics.record("fit_bridge", alpha.solution);
    out.params.alpha = alpha.alpha;

    StrataWeights wac = weights_ac(data, out.params.alpha, out.params.gamma,
                                   out.params.beta, config.integral);
    if (config.psi_required()) {
      const StrataParams* w0 =
          warm && warm->params.psi ? &*warm->params.psi : nullptr;
      PsiFit psi = fit_psi(data, wac, out.params.gamma, config.solver, w0);
      out.diagnostics.record("fit_psi", psi.solution);
      out.params.psi = psi.psi;
    }
    if (weight_conditioning(config.outcome_case) == Conditioning::X) {
      out.weights = weights_x(data, *out.params.psi, out.params.beta, out.params.gamma);
    } else {
      out.weights = std::move(wac);
    }
  }
  out.diagnostics.clipped_units = out.weights.clipped_units;
  out.diagnostics.out_of_range_units = out.weights.out_of_range_units;
  for (const auto& w : out.weights.warnings) out.diagnostics.warnings.push_back(w);

  OutcomeFit theta =
      fit_outcome(data, out.weights, config, warm ? &warm->params.theta : nullptr);
  out.diagnostics.record("fit_outcome", theta.solution);
  for (const auto& d : theta.diagnostics) {
    out.diagnostics.warnings.push_back("fit_outcome: " + d);
  }
  out.params.theta = theta.theta;
  out.effects = principal_effects(data, out.weights, out.params.theta,
                                  config.outcome_case);
  return out;
}

/// Linear-interpolation sample quantile (the common "type 7" definition).
inline double quantile_type7(std::vector<double> x, double prob) {
  if (x.empty()) throw ConfigError("quantile of an empty sample");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

/// Largest tolerated share of failed bootstrap replicates.
inline constexpr double kMaxBootstrapFailureRate = 0.20;

struct BootstrapRun {
  FitResult point;
  /// Point estimates plus intervals when bootstrap_reps > 0.
  EffectEstimates effects;
  /// Successful replicate estimates, in replicate order.
  std::vector<std::array<double, 3>> draws;
  std::map<std::string, int> failures_by_step;
};

/// Units drawn with replacement for bootstrap replicate `rep`.
inline std::vector<Eigen::Index> bootstrap_rows(Eigen::Index n, std::uint64_t seed,
                                                std::uint64_t rep) {
  Rng rng = make_stream(seed, rep, StreamId::Bootstrap);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  for (auto& r : rows) r = pick(rng);
  return rows;
}

/// Point estimate plus a nonparametric bootstrap that refits every step on
/// each resample, warm-started from the point estimate. Replicates that fail
/// are skipped and counted.
inline BootstrapRun run_bootstrap(const Dataset& data, const EstimationConfig& config) {
  if (config.bootstrap_reps < 0) throw ConfigError("bootstrap_reps must be >= 0");
  BootstrapRun run;
  run.point = estimate(data, config);
  run.effects = run.point.effects;
  const int reps = config.bootstrap_reps;
  if (reps == 0) return run;

  std::vector<std::optional<std::array<double, 3>>> results(static_cast<std::size_t>(reps));
  std::vector<std::string> failures(static_cast<std::size_t>(reps));
  parallel_for(static_cast<std::size_t>(reps), config.threads, [&](std::size_t b) {
    try {
      const Dataset sample = data.resample(bootstrap_rows(data.n(), config.seed, b));
      const FitResult fit = estimate(sample, config, &run.point);
      results[b] = fit.effects.delta;
    } catch (const ValidationError&) {
      failures[b] = "resample";
    } catch (const EstimationError& e) {
      failures[b] = e.step();
    } catch (const NumericError&) {
      failures[b] = "numeric";
    } catch (const DomainError&) {
      failures[b] = "numeric";
    }
  });
  int failed = 0;
  for (std::size_t b = 0; b < results.size(); ++b) {
    if (results[b]) {
      run.draws.push_back(*results[b]);
    } else {
      ++failed;
      ++run.failures_by_step[failures[b]];
    }
  }
  run.effects.bootstrap_reps = reps;
  run.effects.bootstrap_failures = failed;
  if (failed > kMaxBootstrapFailureRate * reps) {
    std::string detail;
    for (const auto& [step, count] : run.failures_by_step) {
      detail += " " + step + "=" + std::to_string(count);
    }
    throw EstimationError("bootstrap", std::to_string(failed) + " of " +
                                           std::to_string(reps) +
                                           " replicates failed:" + detail);
  }
  if (run.draws.size() < 2) {
    throw EstimationError("bootstrap", "fewer than two successful replicates");
  }
  std::array<double, 3> lo{}, hi{};
  for (int g = 0; g < 3; ++g) {
    std::vector<double> x;
    x.reserve(run.draws.size());
    for (const auto& d : run.draws) x.push_back(d[static_cast<std::size_t>(g)]);
    const double point = run.effects.delta[static_cast<std::size_t>(g)];
    double l = 0.0, h = 0.0;
    if (config.interval == IntervalKind::Percentile) {
      l = quantile_type7(x, 0.025);
      h = quantile_type7(x, 0.975);
    } else {
      double mean = 0.0;
      for (double v : x) mean += v;
      mean /= static_cast<double>(x.size());
      double ss = 0.0;
      for (double v : x) ss += (v - mean) * (v - mean);
      const double sd = std::sqrt(ss / static_cast<double>(x.size() - 1));
      const double zq = numerics::std_normal_quantile(0.975);
      l = point - zq * sd;
      h = point + zq * sd;
    }
    // The interval always contains the point estimate.
    lo[static_cast<std::size_t>(g)] = std::min(l, point);
    hi[static_cast<std::size_t>(g)] = std::max(h, point);
  }
  run.effects.ci_lower = lo;
  run.effects.ci_upper = hi;
  return run;
}

inline EffectEstimates bootstrap(const Dataset& data, const EstimationConfig& config) {
  return run_bootstrap(data, config).effects;
}

}  // namespace proxstrata::estimation
