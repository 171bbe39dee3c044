#pragma once

// Data-generating process with a latent confounder U, closed-form truth for
// the bridge and strata-model parameters it implies, a Monte Carlo oracle for
// the principal effects, and the replication harness.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/estimation/pipeline.hpp"
#include "proxstrata/models.hpp"
#include "proxstrata/numerics.hpp"
#include "proxstrata/parallel.hpp"

namespace proxstrata::simulation {

struct DgpConfig {
  // Covariates (A, C), bivariate normal.
  double delta_a = 0.0, delta_c = 0.0;
  double sigma_a = 0.5, sigma_c = 0.5, rho1 = 0.5;
  // Treatment probit.
  double beta0 = 0.0, beta_a = 1.0, beta_c = 1.0;
  // (U, W) | Z, A, C.
  double iota0 = 1.0, iota_z = 1.0, iota_a = 1.5, iota_c1 = 1.5, iota_c2 = -0.75;
  double sigma_u = 0.5, rho2 = 0.5;
  double gamma0 = 1.0, gamma_c1 = 1.5, sigma_w = 0.5;
  // Ordered-probit strata model on G = zeta0 + zeta_w W + zeta_u U + zeta_c C.
  double zeta0 = 0.5, zeta1 = 0.0, zeta_w = 0.5, zeta_u = 0.2, zeta_c = 1.0;
  // Outcome intercepts indexed [z][Stratum] and shared slopes.
  std::array<std::array<double, 3>, 2> theta = {{{2.0, 1.0, 0.0}, {4.0, 3.0, 2.0}}};
  double theta_c = 1.0, theta_a = 0.0, theta_w = 0.0, sigma_y = 0.5;
  int n = 1000;
  std::uint64_t seed = 1;

  // Constraints that make W independent of (Z, A) given (U, C) and
  // E(U | Z, A, W, C) linear in C.
  double gamma_a() const { return iota_a * sigma_w * rho2 / sigma_u; }
  double gamma_z() const { return iota_z * sigma_w * rho2 / sigma_u; }
  double gamma_c2() const { return iota_c2 * sigma_w / (sigma_u * rho2); }

  /// Sets (theta_a, theta_w) to the values of an outcome case.
  void set_case(OutcomeCase k) {
    theta_a = uses_a(k) ? 1.0 : 0.0;
    theta_w = uses_w(k) ? 1.0 : 0.0;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("dgp: " + m); };
    const double all[] = {delta_a, delta_c, sigma_a, sigma_c, rho1, beta0, beta_a,
                          beta_c, iota0, iota_z, iota_a, iota_c1, iota_c2, sigma_u,
                          rho2, gamma0, gamma_c1, sigma_w, zeta0, zeta1, zeta_w,
                          zeta_u, zeta_c, theta_c, theta_a, theta_w, sigma_y};
    for (double v : all) {
      if (!std::isfinite(v)) fail("all parameters must be finite");
    }
    for (const auto& row : theta) {
      for (double v : row) {
        if (!std::isfinite(v)) fail("all parameters must be finite");
      }
    }
    if (!(std::abs(rho1) < 1.0)) fail("rho1 must satisfy |rho1| < 1");
    if (!(rho2 > 0.0 && rho2 < 1.0)) fail("rho2 must satisfy 0 < rho2 < 1");
    if (!(sigma_a > 0 && sigma_c > 0 && sigma_u > 0 && sigma_w > 0 && sigma_y > 0)) {
      fail("every sigma must be positive");
    }
    if (n < 1) fail("n must be positive");
  }
};

struct LatentDataset {
  Dataset data;
  Eigen::VectorXd u;
  std::vector<int> s0, s1;
  Eigen::VectorXd y0, y1;
  std::vector<Stratum> g;
};

/// One unit with all latent quantities.
struct LatentUnit {
  double a, c, u, w, y0, y1;
  int z;
  Stratum g;
};

/// Draws one unit. Potential outcomes share the noise draw.
template <class Gen>
LatentUnit draw_unit(const DgpConfig& cfg, Gen& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  LatentUnit x{};
  const double e1 = normal(rng), e2 = normal(rng);
  x.a = cfg.delta_a + cfg.sigma_a * e1;
  x.c = cfg.delta_c + cfg.sigma_c * (cfg.rho1 * e1 + std::sqrt(1.0 - cfg.rho1 * cfg.rho1) * e2);
  const double pz =
      numerics::std_normal_cdf(cfg.beta0 + cfg.beta_a * x.a + cfg.beta_c * x.c);
  x.z = unif(rng) < pz ? 1 : 0;
  const double c2 = x.c * x.c;
  const double mu_u = cfg.iota0 + cfg.iota_z * x.z + cfg.iota_a * x.a +
                      cfg.iota_c1 * x.c + cfg.iota_c2 * c2;
  const double mu_w = cfg.gamma0 + cfg.gamma_z() * x.z + cfg.gamma_a() * x.a +
                      cfg.gamma_c1 * x.c + cfg.gamma_c2() * c2;
  const double e3 = normal(rng), e4 = normal(rng);
  x.u = mu_u + cfg.sigma_u * e3;
  x.w = mu_w + cfg.sigma_w * (cfg.rho2 * e3 + std::sqrt(1.0 - cfg.rho2 * cfg.rho2) * e4);
  const double gd = cfg.zeta0 + cfg.zeta_w * x.w + cfg.zeta_u * x.u + cfg.zeta_c * x.c;
  const double p_nt = numerics::std_normal_cdf(-gd);
  const double p_at = numerics::std_normal_cdf(gd - std::exp(cfg.zeta1));
  const double v = unif(rng);
  x.g = v < p_nt ? Stratum::NeverTaker
                 : (v < 1.0 - p_at ? Stratum::Complier : Stratum::AlwaysTaker);
  const double slope = cfg.theta_a * x.a + cfg.theta_w * x.w + cfg.theta_c * x.c;
  const double noise = cfg.sigma_y * normal(rng);
  x.y0 = cfg.theta[0][static_cast<std::size_t>(index(x.g))] + slope + noise;
  x.y1 = cfg.theta[1][static_cast<std::size_t>(index(x.g))] + slope + noise;
  return x;
}

/// Draws cfg.n units from the stream (seed, replicate).
inline LatentDataset generate(const DgpConfig& cfg, std::uint64_t replicate = 0) {
  cfg.validate();
  Rng rng = make_stream(cfg.seed, replicate, StreamId::Generate);
  const auto n = static_cast<std::size_t>(cfg.n);
  RawColumns raw;
  raw.z.resize(n);
  raw.s.resize(n);
  raw.y.resize(n);
  raw.a.resize(n);
  raw.w.resize(n);
  raw.c.assign(1, std::vector<double>(n));
  std::vector<double> u(n), y0(n), y1(n);
  std::vector<int> s0(n), s1(n);
  std::vector<Stratum> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    const LatentUnit x = draw_unit(cfg, rng);
    s0[i] = x.g == Stratum::AlwaysTaker ? 1 : 0;
    s1[i] = x.g == Stratum::NeverTaker ? 0 : 1;
    raw.z[i] = x.z;
    raw.s[i] = x.z ? s1[i] : s0[i];
    raw.y[i] = x.z ? x.y1 : x.y0;
    raw.a[i] = x.a;
    raw.w[i] = x.w;
    raw.c[0][i] = x.c;
    u[i] = x.u;
    y0[i] = x.y0;
    y1[i] = x.y1;
    g[i] = x.g;
  }
  const auto ni = static_cast<Eigen::Index>(n);
  return LatentDataset{Dataset::validate(raw),
                       Eigen::Map<Eigen::VectorXd>(u.data(), ni),
                       std::move(s0),
                       std::move(s1),
                       Eigen::Map<Eigen::VectorXd>(y0.data(), ni),
                       Eigen::Map<Eigen::VectorXd>(y1.data(), ni),
                       std::move(g)};
}

// ---------------------------------------------------------------------------
// Closed-form truth.

/// Coefficients of W | U, C ~ N(tau0 + tau_u U + tau_c1 C + tau_c2 C^2, Sigma_w^2).
struct WGivenUC {
  double tau0, tau_u, tau_c1, tau_c2, sd;
};

inline WGivenUC w_given_uc(const DgpConfig& cfg) {
  const double r = cfg.sigma_w * cfg.rho2;
  return {(cfg.gamma0 * cfg.sigma_u - cfg.iota0 * r) / cfg.sigma_u,
          r / cfg.sigma_u,
          (cfg.gamma_c1 * cfg.sigma_u - cfg.iota_c1 * r) / cfg.sigma_u,
          (cfg.gamma_c2() * cfg.sigma_u - cfg.iota_c2 * r) / cfg.sigma_u,
          cfg.sigma_w * std::sqrt(1.0 - cfg.rho2 * cfg.rho2)};
}

/// Bridge parameters whose conditional expectation given (U, C) reproduces
/// pr(S_t = 1 | U, C): match the probit coefficients of both sides, solve
/// the U coefficient for alpha_w, then back-substitute.
inline BridgeParams derive_true_bridge(const DgpConfig& cfg) {
  cfg.validate();
  const WGivenUC t = w_given_uc(cfg);
  const double s2 = t.sd * t.sd;
  const double dz = std::sqrt(1.0 + cfg.zeta_w * cfg.zeta_w * s2);
  const double ku = (cfg.zeta_u + cfg.zeta_w * t.tau_u) / dz;
  const double disc = t.tau_u * t.tau_u - ku * ku * s2;
  if (!(disc > 0.0)) {
    throw ConfigError("derive_true_bridge: no real root for alpha_w; the DGP is not "
                      "compatible with a probit bridge");
  }
  const double aw = ku / std::sqrt(disc);
  const double da = std::sqrt(1.0 + aw * aw * s2);
  const double gap = std::exp(cfg.zeta1);
  BridgeParams b;
  b.aw = aw;
  b.a0 = da * (cfg.zeta0 + cfg.zeta_w * t.tau0 - gap) / dz - aw * t.tau0;
  b.log_gap = std::log(da * gap / dz);
  b.ac = Eigen::VectorXd::Constant(1, da * (cfg.zeta_c + cfg.zeta_w * t.tau_c1) / dz -
                                          aw * t.tau_c1);
  b.ac2 = Eigen::VectorXd::Constant(1, da * cfg.zeta_w * t.tau_c2 / dz - aw * t.tau_c2);
  return b;
}

/// pr(S_t = 1 | U, C) under the generator.
inline double strata_prob_uc(const DgpConfig& cfg, int t, double u, double c) {
  const WGivenUC w = w_given_uc(cfg);
  const double a = cfg.zeta0 - std::exp(cfg.zeta1) * (1 - t) + cfg.zeta_u * u + cfg.zeta_c * c;
  const double m = w.tau0 + w.tau_u * u + w.tau_c1 * c + w.tau_c2 * c * c;
  return numerics::normal_probit_integral(a, cfg.zeta_w, m, w.sd);
}

/// E{h(t, W, C; alpha) | U, C} under the generator.
inline double bridge_mean_uc(const DgpConfig& cfg, const BridgeParams& alpha, int t,
                             double u, double c) {
  const WGivenUC w = w_given_uc(cfg);
  const Eigen::Matrix<double, 1, 1> cv(c);
  const double m = w.tau0 + w.tau_u * u + w.tau_c1 * c + w.tau_c2 * c * c;
  return numerics::normal_probit_integral(bridge_offset(t, cv, alpha), alpha.aw, m, w.sd);
}

/// max over a (t, u, c) grid of |E{h(t,W,C)|U,C} - pr(S_t=1|U,C)|.
inline double bridge_grid_residual(const DgpConfig& cfg, const BridgeParams& alpha,
                                   int points = 41) {
  double worst = 0.0;
  for (int t = 0; t < 2; ++t) {
    for (int i = 0; i < points; ++i) {
      const double u = -2.0 + 6.0 * i / (points - 1);
      for (int j = 0; j < points; ++j) {
        const double c = -2.0 + 4.0 * j / (points - 1);
        worst = std::max(worst, std::abs(bridge_mean_uc(cfg, alpha, t, u, c) -
                                         strata_prob_uc(cfg, t, u, c)));
      }
    }
  }
  return worst;
}

/// Strata-model parameters implied by the generator: integrate U out of the
/// ordered probit given (Z, A, W, C).
inline StrataParams derive_true_psi(const DgpConfig& cfg) {
  cfg.validate();
  const double r = cfg.sigma_u * cfg.rho2;
  const double nu0 = (cfg.iota0 * cfg.sigma_w - cfg.gamma0 * r) / cfg.sigma_w;
  const double nuz = (cfg.iota_z * cfg.sigma_w - cfg.gamma_z() * r) / cfg.sigma_w;
  const double nua = (cfg.iota_a * cfg.sigma_w - cfg.gamma_a() * r) / cfg.sigma_w;
  const double nuc = (cfg.iota_c1 * cfg.sigma_w - cfg.gamma_c1 * r) / cfg.sigma_w;
  const double nuw = r / cfg.sigma_w;
  const double su2 = cfg.sigma_u * cfg.sigma_u * (1.0 - cfg.rho2 * cfg.rho2);
  const double d = std::sqrt(1.0 + cfg.zeta_u * cfg.zeta_u * su2);
  StrataParams p;
  p.p0 = (cfg.zeta0 + cfg.zeta_u * nu0) / d;
  p.log_gap = cfg.zeta1 - std::log(d);
  p.pz = cfg.zeta_u * nuz / d;
  p.pa = cfg.zeta_u * nua / d;
  p.pw = (cfg.zeta_w + cfg.zeta_u * nuw) / d;
  p.pc = Eigen::VectorXd::Constant(1, (cfg.zeta_u * nuc + cfg.zeta_c) / d);
  return p;
}

/// Treatment and W-model parameters of the generator.
inline TreatmentParams true_treatment(const DgpConfig& cfg) {
  TreatmentParams b;
  b.b0 = cfg.beta0;
  b.ba = cfg.beta_a;
  b.bc = Eigen::VectorXd::Constant(1, cfg.beta_c);
  return b;
}

inline WModelParams true_w_model(const DgpConfig& cfg) {
  WModelParams g;
  g.g0 = cfg.gamma0;
  g.gz = cfg.gamma_z();
  g.ga = cfg.gamma_a();
  g.gc = Eigen::VectorXd::Constant(1, cfg.gamma_c1);
  g.gc2 = Eigen::VectorXd::Constant(1, cfg.gamma_c2());
  g.sigma_w = cfg.sigma_w;
  return g;
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle.

inline constexpr long kMinOracleDraws = 100000;
inline constexpr long kMinStratumDraws = 100;

struct OracleResult {
  std::array<double, 3> delta{};
  std::array<double, 3> mc_error{};
  std::array<long, 3> count{};
};

/// E(Y_1 - Y_0 | G = g) over n_mc latent draws, with the Monte Carlo
/// standard error of each mean.
inline OracleResult oracle_true_effects(const DgpConfig& cfg, long n_mc,
                                        std::uint64_t seed) {
  cfg.validate();
  if (n_mc < kMinOracleDraws) {
    throw ConfigError("oracle: n_mc must be at least " + std::to_string(kMinOracleDraws));
  }
  Rng rng = make_stream(seed, 0, StreamId::Oracle);
  std::array<double, 3> sum{}, sum2{};
  OracleResult out;
  for (long i = 0; i < n_mc; ++i) {
    const LatentUnit x = draw_unit(cfg, rng);
    const auto g = static_cast<std::size_t>(index(x.g));
    const double d = x.y1 - x.y0;
    sum[g] += d;
    sum2[g] += d * d;
    ++out.count[g];
  }
  for (Stratum g : kStrata) {
    const auto k = static_cast<std::size_t>(index(g));
    if (out.count[k] < kMinStratumDraws) {
      throw StudyError("oracle: stratum " + std::string(to_string(g)) + " has only " +
                       std::to_string(out.count[k]) + " draws");
    }
    const double m = sum[k] / static_cast<double>(out.count[k]);
    const double var = std::max(0.0, sum2[k] / static_cast<double>(out.count[k]) - m * m);
    out.delta[k] = m;
    out.mc_error[k] = std::sqrt(var / static_cast<double>(out.count[k]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replication harness.

struct StudyRow {
  int n = 0;
  double zeta_u = 0.0;
  OutcomeCase outcome_case = OutcomeCase::I;
  Stratum stratum = Stratum::AlwaysTaker;
  double bias = 0.0, sd = 0.0, cp = 0.0;
  int reps = 0, failures = 0;
};

struct Replicate {
  bool ok = false;
  std::string failure;
  std::array<double, 3> delta{};
  std::optional<std::array<double, 3>> lower, upper;
};

struct StudySummary {
  std::vector<StudyRow> rows;
  std::vector<Replicate> replicates;
  OracleResult truth;

  const StudyRow& row(Stratum g) const { return rows.at(static_cast<std::size_t>(index(g))); }

  static constexpr const char* kHeader = "n,zeta_u,case,stratum,bias,sd,cp,reps,failures";

  void write_csv(std::ostream& os) const {
    os << kHeader << '\n';
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d,%.4g,%s,%s,%.6f,%.6f,%.4f,%d,%d\n", r.n,
                    r.zeta_u, std::string(to_string(r.outcome_case)).c_str(),
                    std::string(to_string(r.stratum)).c_str(), r.bias, r.sd, r.cp,
                    r.reps, r.failures);
      os << buf;
    }
  }
};

struct StudyOptions {
  int threads = 1;
  long oracle_draws = 1000000;
  /// Replaces the derived data seed of replicate r when set.
  std::function<std::uint64_t(int)> rep_seed;
  /// Called after each replicate finishes (from a worker thread).
  std::function<void(int)> progress;
};

/// Largest tolerated share of failed replications.
inline constexpr double kMaxStudyFailureRate = 0.05;

/// Generates `reps` datasets, runs the estimator with its bootstrap on each,
/// and summarizes bias, empirical sd and interval coverage against the
/// Monte Carlo truth.
inline StudySummary run_study(const DgpConfig& dgp,
                              const estimation::EstimationConfig& est, int reps,
                              std::uint64_t master_seed, const StudyOptions& opt = {}) {
  if (reps < 2) throw ConfigError("run_study: reps ≥ 2 required");
  dgp.validate();
  StudySummary out;
  out.truth = oracle_true_effects(dgp, opt.oracle_draws, master_seed);
  out.replicates.resize(static_cast<std::size_t>(reps));
  parallel_for(static_cast<std::size_t>(reps), opt.threads, [&](std::size_t r) {
    const int ri = static_cast<int>(r);
    DgpConfig cfg = dgp;
    cfg.seed = opt.rep_seed ? opt.rep_seed(ri)
                            : derive_seed(master_seed, r, StreamId::Study);
    estimation::EstimationConfig ec = est;
    ec.seed = derive_seed(cfg.seed, 0, StreamId::Bootstrap);
    ec.threads = 1;
    Replicate& rep = out.replicates[r];
    try {
      const LatentDataset data = generate(cfg);
      const estimation::BootstrapRun run = estimation::run_bootstrap(data.data, ec);
      rep.delta = run.effects.delta;
      rep.lower = run.effects.ci_lower;
      rep.upper = run.effects.ci_upper;
      rep.ok = true;
    } catch (const EstimationError& e) {
      rep.failure = e.step();
    } catch (const Error& e) {
      rep.failure = e.what();
    }
    if (opt.progress) opt.progress(ri);
  });
  int failed = 0;
  for (const auto& r : out.replicates) failed += r.ok ? 0 : 1;
  if (failed > kMaxStudyFailureRate * reps) {
    throw StudyError("study: " + std::to_string(failed) + " of " + std::to_string(reps) +
                     " replications failed");
  }
  for (Stratum g : kStrata) {
    const auto k = static_cast<std::size_t>(index(g));
    StudyRow row;
    row.n = dgp.n;
    row.zeta_u = dgp.zeta_u;
    row.outcome_case = est.outcome_case;
    row.stratum = g;
    row.failures = failed;
    double sum = 0.0;
    int ok = 0, covered = 0, with_ci = 0;
    for (const auto& r : out.replicates) {
      if (!r.ok) continue;
      ++ok;
      sum += r.delta[k];
      if (r.lower && r.upper) {
        ++with_ci;
        if ((*r.lower)[k] <= out.truth.delta[k] && out.truth.delta[k] <= (*r.upper)[k]) {
          ++covered;
        }
      }
    }
    const double mean = sum / ok;
    double ss = 0.0;
    for (const auto& r : out.replicates) {
      if (r.ok) ss += (r.delta[k] - mean) * (r.delta[k] - mean);
    }
    row.reps = ok;
    row.bias = mean - out.truth.delta[k];
    row.sd = ok > 1 ? std::sqrt(ss / (ok - 1)) : 0.0;
    row.cp = with_ci > 0 ? static_cast<double>(covered) / with_ci
                         : std::numeric_limits<double>::quiet_NaN();
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace proxstrata::simulation
