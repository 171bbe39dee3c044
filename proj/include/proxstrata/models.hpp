#pragma once

// Evaluatable parametric models. Each function is a pure function of one data
// row and a parameter bundle; the *_index helpers are the vectorized linear
// predictors used by the estimators.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/numerics.hpp"

namespace proxstrata {

/// Outcome mean specification, indexed by which of A and W enter the mean.
///   I:   theta_{z,g,0} + theta_c C
///   II:  adds theta_a A
///   III: adds theta_w W
///   IV:  adds both
enum class OutcomeCase { I, II, III, IV };

inline bool uses_a(OutcomeCase k) {
  return k == OutcomeCase::II || k == OutcomeCase::IV;
}
inline bool uses_w(OutcomeCase k) {
  return k == OutcomeCase::III || k == OutcomeCase::IV;
}
/// Cases without W use weights given (A,C); cases with W need them given X.
inline Conditioning weight_conditioning(OutcomeCase k) {
  return uses_w(k) ? Conditioning::X : Conditioning::AC;
}

inline std::string_view to_string(OutcomeCase k) {
  switch (k) {
    case OutcomeCase::I: return "i";
    case OutcomeCase::II: return "ii";
    case OutcomeCase::III: return "iii";
    case OutcomeCase::IV: return "iv";
  }
  return "?";
}

inline OutcomeCase parse_outcome_case(std::string_view text) {
  if (text == "i" || text == "I" || text == "1") return OutcomeCase::I;
  if (text == "ii" || text == "II" || text == "2") return OutcomeCase::II;
  if (text == "iii" || text == "III" || text == "3") return OutcomeCase::III;
  if (text == "iv" || text == "IV" || text == "4") return OutcomeCase::IV;
  throw ConfigError("unknown outcome case '" + std::string(text) +
                    "' (expected i, ii, iii or iv)");
}

namespace detail {

template <class Row>
void require_dim(const Row& c, Eigen::Index p, const char* what) {
  if (c.size() != p) {
    throw ConfigError(std::string(what) + ": covariate dimension " +
                      std::to_string(c.size()) + " does not match parameter "
                      "dimension " + std::to_string(p));
  }
}

template <class Row>
double dot(const Row& c, const Eigen::VectorXd& coef) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < coef.size(); ++j) acc += c(j) * coef(j);
  return acc;
}

template <class Row>
double squares_dot(const Row& c, const Eigen::VectorXd& coef) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < coef.size(); ++j) acc += c(j) * c(j) * coef(j);
  return acc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bridge function.

/// Linear predictor of the bridge without the W term:
/// a0 + exp(log_gap) z + ac'c + ac2'c^2.
template <class Row>
double bridge_offset(int z, const Row& c, const BridgeParams& alpha) {
  detail::require_dim(c, alpha.ac.size(), "bridge_h");
  return alpha.a0 + std::exp(alpha.log_gap) * z + detail::dot(c, alpha.ac) +
         detail::squares_dot(c, alpha.ac2);
}

template <class Row>
double bridge_h(int z, double w, const Row& c, const BridgeParams& alpha) {
  return numerics::std_normal_cdf(bridge_offset(z, c, alpha) + alpha.aw * w);
}

/// Vectorized bridge offsets for all rows of `c` at a fixed z.
inline Eigen::VectorXd bridge_offset_index(int z, const Eigen::MatrixXd& c,
                                           const BridgeParams& alpha) {
  Eigen::VectorXd out =
      Eigen::VectorXd::Constant(c.rows(), alpha.a0 + std::exp(alpha.log_gap) * z);
  if (c.cols() > 0) out.noalias() += c * alpha.ac;
  if (alpha.ac2.size() > 0) out.noalias() += c.array().square().matrix() * alpha.ac2;
  return out;
}

// ---------------------------------------------------------------------------
// Treatment model.

template <class Row>
double treatment_index(double a, const Row& c, const TreatmentParams& beta) {
  detail::require_dim(c, beta.bc.size(), "treatment_prob");
  return beta.b0 + beta.ba * a + detail::dot(c, beta.bc);
}

/// pr(Z=1 | A=a, C=c).
template <class Row>
double treatment_prob(double a, const Row& c, const TreatmentParams& beta) {
  return numerics::std_normal_cdf(treatment_index(a, c, beta));
}

// ---------------------------------------------------------------------------
// Negative-control intermediate model.

struct NormalMoments {
  double mean;
  double sd;
};

template <class Row>
NormalMoments w_model(int z, double a, const Row& c, const WModelParams& gamma) {
  detail::require_dim(c, gamma.gc.size(), "w_model");
  const double mean = gamma.g0 + gamma.gz * z + gamma.ga * a +
                      detail::dot(c, gamma.gc) +
                      detail::squares_dot(c, gamma.gc2);
  return {mean, gamma.sigma_w};
}

/// Regressor row (1, z, a, c, [c^2]) of the W model.
inline Eigen::MatrixXd w_design(const Eigen::VectorXd& z, const Eigen::VectorXd& a,
                                const Eigen::MatrixXd& c, bool squares) {
  const Eigen::Index n = z.size(), p = c.cols();
  Eigen::MatrixXd x(n, 3 + p * (squares ? 2 : 1));
  x.col(0).setOnes();
  x.col(1) = z;
  x.col(2) = a;
  if (p > 0) x.middleCols(3, p) = c;
  if (squares && p > 0) x.middleCols(3 + p, p) = c.array().square().matrix();
  return x;
}

/// Conditional mean of W for every row with Z forced to `z`.
inline Eigen::VectorXd w_mean_index(int z, const Eigen::VectorXd& a,
                                    const Eigen::MatrixXd& c,
                                    const WModelParams& gamma) {
  Eigen::VectorXd m = Eigen::VectorXd::Constant(a.size(), gamma.g0 + gamma.gz * z);
  m.noalias() += gamma.ga * a;
  if (c.cols() > 0) m.noalias() += c * gamma.gc;
  if (gamma.gc2.size() > 0) m.noalias() += c.array().square().matrix() * gamma.gc2;
  return m;
}

// ---------------------------------------------------------------------------
// Strata model.

/// Stratum probabilities indexed by Stratum.
using StratumProbs = std::array<double, 3>;

template <class Row>
double strata_index(int z, double a, double w, const Row& c,
                    const StrataParams& psi) {
  detail::require_dim(c, psi.pc.size(), "strata_probs_psi");
  return psi.p0 + psi.pz * z + psi.pw * w + psi.pa * a +
         detail::dot(c, psi.pc);
}

/// Ordered-probit stratum probabilities given (Z, X): always-taker is
/// pr(S_0=1), never-taker is 1 - pr(S_1=1), complier is the difference.
template <class Row>
StratumProbs strata_probs_psi(int z, double a, double w, const Row& c,
                              const StrataParams& psi) {
  const double idx = strata_index(z, a, w, c, psi);
  const double p1 = numerics::std_normal_cdf(idx);
  const double p0 = numerics::std_normal_cdf(idx - std::exp(psi.log_gap));
  StratumProbs out{};
  out[index(Stratum::AlwaysTaker)] = p0;
  out[index(Stratum::NeverTaker)] = 1.0 - p1;
  out[index(Stratum::Complier)] = p1 - p0;
  return out;
}

// ---------------------------------------------------------------------------
// Outcome means.

template <class Row>
double outcome_mean(int z, Stratum g, double a, double w, const Row& c,
                    const OutcomeParams& theta, OutcomeCase k) {
  if (theta.theta_c.size() != c.size()) {
    throw ConfigError("outcome_mean: theta_c has " +
                      std::to_string(theta.theta_c.size()) +
                      " entries but the row has " + std::to_string(c.size()) +
                      " covariates");
  }
  double mean = theta.at(z, g) + detail::dot(c, theta.theta_c);
  if (uses_a(k)) mean += theta.theta_a * a;
  if (uses_w(k)) mean += theta.theta_w * w;
  return mean;
}

/// Shared slope part theta_c'c + [theta_a a] + [theta_w w] for every unit.
inline Eigen::VectorXd outcome_slope_index(const Dataset& data,
                                           const OutcomeParams& theta,
                                           OutcomeCase k) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(data.n());
  if (data.p() > 0) out.noalias() += data.c() * theta.theta_c;
  if (uses_a(k)) out.noalias() += theta.theta_a * data.a();
  if (uses_w(k)) out.noalias() += theta.theta_w * data.w();
  return out;
}

}  // namespace proxstrata
