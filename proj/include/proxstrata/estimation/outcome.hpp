#pragma once

// Step two and three: outcome means from the mixture moment restrictions of
// the four (z,s) cells, then principal effects as pi-weighted contrasts.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/estimation/config.hpp"
#include "proxstrata/estimation/nuisance.hpp"
#include "proxstrata/gmm.hpp"
#include "proxstrata/models.hpp"

namespace proxstrata::estimation {

/// Intercept columns whose largest entry is below this are unidentified and
/// dropped from the outcome system.
inline constexpr double kZeroColumn = 1e-6;

struct OutcomeFit {
  OutcomeParams theta;
  gmm::Solution solution;
  std::vector<std::string> diagnostics;
};

namespace detail {

inline std::string cell_name(int z, int s) {
  return "(z=" + std::to_string(z) + ",s=" + std::to_string(s) + ")";
}

/// Strata present in cell (z,s) under monotonicity.
inline std::vector<Stratum> cell_strata(int z, int s) {
  if (z == 0 && s == 1) return {Stratum::AlwaysTaker};
  if (z == 0 && s == 0) return {Stratum::Complier, Stratum::NeverTaker};
  if (z == 1 && s == 1) return {Stratum::AlwaysTaker, Stratum::Complier};
  return {Stratum::NeverTaker};
}

inline Eigen::Index intercept_col(int z, Stratum g) { return z * 3 + index(g); }

}  // namespace detail

/// Fits intercepts theta_{z,g} and the case's shared slopes from
///   E{Y - sum_g eta_g(z,V) mu_{z,g}(X) | Z=z, S=s, X} = 0
/// in each cell, with eta held at its plug-in value. The instruments are the
/// regressors themselves (eta columns and slopes), which is exactly identified;
/// each configured outcome instrument adds one moment per cell.
inline OutcomeFit fit_outcome(const Dataset& data, const StrataWeights& weights,
                              const EstimationConfig& config,
                              const OutcomeParams* warm = nullptr) {
  const OutcomeCase kase = config.outcome_case;
  if (config.strata_method == StrataMethod::Bridge &&
      weights.conditioning != weight_conditioning(kase)) {
    throw ConfigError(std::string("fit_outcome: case ") +
                      std::string(to_string(kase)) + " needs weights conditioned on " +
                      std::string(to_string(weight_conditioning(kase))));
  }
  const Eigen::Index n = data.n(), p = data.p();
  const bool ua = uses_a(kase), uw = uses_w(kase);
  const Eigen::Index n_slope = p + (ua ? 1 : 0) + (uw ? 1 : 0);
  const Eigen::Index k_full = 6 + n_slope;

  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, k_full);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int z = data.zi(i), s = data.si(i);
    const auto strata = detail::cell_strata(z, s);
    for (Stratum g : strata) {
      d(i, detail::intercept_col(z, g)) =
          strata.size() == 1 ? 1.0 : weights.eta[z](i, index(g));
    }
  }
  if (p > 0) d.middleCols(6, p) = data.c();
  Eigen::Index col = 6 + p;
  if (ua) d.col(col++) = data.a();
  if (uw) d.col(col++) = data.w();

  OutcomeFit out;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < k_full; ++j) {
    if (j < 6 && d.col(j).lpNorm<Eigen::Infinity>() <= kZeroColumn) {
      const int z = static_cast<int>(j / 3);
      out.diagnostics.push_back(
          "intercept (z=" + std::to_string(z) + ", " +
          std::string(to_string(kStrata[static_cast<std::size_t>(j % 3)])) +
          ") has no weight in any cell; dropped");
      continue;
    }
    keep.push_back(j);
  }
  const Eigen::Index k = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd dk(n, k);
  for (Eigen::Index j = 0; j < k; ++j) dk.col(j) = d.col(keep[static_cast<std::size_t>(j)]);

  // Extra per-cell instruments.
  std::vector<Eigen::VectorXd> extra;
  for (OutcomeInstrument t : config.outcome_instruments) {
    std::vector<Eigen::VectorXd> base;
    switch (t) {
      case OutcomeInstrument::A: base.push_back(data.a()); break;
      case OutcomeInstrument::W: base.push_back(data.w()); break;
      case OutcomeInstrument::C:
        for (Eigen::Index j = 0; j < p; ++j) base.push_back(data.c().col(j));
        break;
    }
    for (const auto& b : base) {
      for (int z = 0; z < 2; ++z) {
        for (int s = 0; s < 2; ++s) {
          Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
          for (Eigen::Index i = 0; i < n; ++i) {
            if (data.zi(i) == z && data.si(i) == s) v(i) = b(i);
          }
          extra.push_back(std::move(v));
        }
      }
    }
  }
  const Eigen::Index q = k + static_cast<Eigen::Index>(extra.size());
  Eigen::MatrixXd inst(n, q);
  inst.leftCols(k) = dk;
  for (std::size_t j = 0; j < extra.size(); ++j) {
    inst.col(k + static_cast<Eigen::Index>(j)) = extra[j];
  }

  // Identification: the regressor matrix must have full column rank.
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dk);
    qr.setThreshold(1e-10);
    if (qr.rank() < k) {
      std::string failing = "shared slopes";
      for (int z = 0; z < 2 && failing == "shared slopes"; ++z) {
        for (int s = 0; s < 2; ++s) {
          std::vector<Eigen::Index> cols;
          for (Stratum g : detail::cell_strata(z, s)) {
            const Eigen::Index j = detail::intercept_col(z, g);
            for (Eigen::Index m = 0; m < k; ++m) {
              if (keep[static_cast<std::size_t>(m)] == j) cols.push_back(m);
            }
          }
          std::vector<Eigen::Index> rows;
          for (Eigen::Index i = 0; i < n; ++i) {
            if (data.zi(i) == z && data.si(i) == s) rows.push_back(i);
          }
          Eigen::MatrixXd block(static_cast<Eigen::Index>(rows.size()),
                                static_cast<Eigen::Index>(cols.size()));
          for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t c = 0; c < cols.size(); ++c) {
              block(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                  dk(rows[r], cols[c]);
            }
          }
          Eigen::ColPivHouseholderQR<Eigen::MatrixXd> bqr(block);
          bqr.setThreshold(1e-10);
          if (bqr.rank() < block.cols()) {
            failing = "block " + detail::cell_name(z, s);
            break;
          }
        }
      }
      throw EstimationError("fit_outcome",
                            "instrument design is rank-deficient; failing " + failing);
    }
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::MatrixXd zd = inst.transpose() * dk * inv_n;
  const Eigen::VectorXd zy = inst.transpose() * data.y() * inv_n;
  gmm::MomentProblem problem;
  problem.dim_param = k;
  problem.dim_moment = q;
  problem.mean_moments = [zd, zy](const Eigen::VectorXd& th) {
    return Eigen::VectorXd(zy - zd * th);
  };
  problem.unit_moments = [&inst, &dk, &data](const Eigen::VectorXd& th) {
    const Eigen::VectorXd r = data.y() - dk * th;
    return Eigen::MatrixXd(inst.array().colwise() * r.array());
  };
  problem.jacobian = [zd](const Eigen::VectorXd&) { return Eigen::MatrixXd(-zd); };
  problem.init = Eigen::VectorXd::Zero(k);
  if (warm) {
    Eigen::VectorXd full(k_full);
    for (int z = 0; z < 2; ++z) {
      for (int g = 0; g < 3; ++g) full(z * 3 + g) = warm->intercept[z][g];
    }
    if (p > 0) full.segment(6, p) = warm->theta_c;
    Eigen::Index c2 = 6 + p;
    if (ua) full(c2++) = warm->theta_a;
    if (uw) full(c2++) = warm->theta_w;
    for (Eigen::Index j = 0; j < k; ++j) {
      const double v = full(keep[static_cast<std::size_t>(j)]);
      problem.init(j) = std::isfinite(v) ? v : 0.0;
    }
  }
  out.solution = q == k ? gmm::solve(problem, config.solver)
                        : gmm::two_step(problem, config.solver);
  require_converged("fit_outcome", out.solution);

  Eigen::VectorXd full =
      Eigen::VectorXd::Constant(k_full, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index j = 0; j < k; ++j) {
    full(keep[static_cast<std::size_t>(j)]) = out.solution.params(j);
  }
  for (int z = 0; z < 2; ++z) {
    for (int g = 0; g < 3; ++g) out.theta.intercept[z][g] = full(z * 3 + g);
  }
  out.theta.theta_c = full.segment(6, p);
  col = 6 + p;
  out.theta.theta_a = ua ? full(col++) : 0.0;
  out.theta.theta_w = uw ? full(col++) : 0.0;
  return out;
}

/// Threshold on E_n{pi_g} below which a stratum counts as empty.
inline constexpr double kEmptyStratum = 1e-6;

/// Delta_g = E_n{mu_{1,g} pi_g}/E_n{pi_g} - E_n{mu_{0,g} pi_g}/E_n{pi_g}.
inline EffectEstimates principal_effects(const Dataset& data,
                                         const StrataWeights& weights,
                                         const OutcomeParams& theta,
                                         OutcomeCase kase) {
  const Eigen::VectorXd slope = outcome_slope_index(data, theta, kase);
  EffectEstimates out;
  for (Stratum g : kStrata) {
    const int gi = index(g);
    const double mass = weights.pi.col(gi).mean();
    if (!(mass > kEmptyStratum)) {
      throw EstimationError("principal_effects",
                            "empty stratum " + std::string(to_string(g)));
    }
    const double slope_part = slope.dot(weights.pi.col(gi)) /
                              static_cast<double>(data.n()) / mass;
    for (int z = 0; z < 2; ++z) {
      out.mu[z][gi] = theta.intercept[z][gi] + slope_part;
    }
    out.delta[gi] = out.mu[1][gi] - out.mu[0][gi];
  }
  return out;
}

}  // namespace proxstrata::estimation
