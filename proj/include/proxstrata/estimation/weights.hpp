#pragma once

// Stratum weights: omega_g(z,V), the mixing weights eta_g(z,V) of the two
// mixed (z,s) cells, and the principal scores pi_g(V), for V = (A,C) from the
// bridge or V = X from the ordered-probit strata model.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/estimation/config.hpp"
#include "proxstrata/estimation/nuisance.hpp"
#include "proxstrata/gmm.hpp"
#include "proxstrata/models.hpp"
#include "proxstrata/numerics.hpp"

namespace proxstrata::estimation {

inline constexpr double kWeightClip = 1e-8;
inline constexpr double kWeightWarnSlack = 1e-6;
inline constexpr double kWeightFailSlack = 0.05;

namespace detail {

constexpr int kAT = index(Stratum::AlwaysTaker);
constexpr int kCO = index(Stratum::Complier);
constexpr int kNT = index(Stratum::NeverTaker);

/// Range-checks raw omega, clips to [kWeightClip, 1 - kWeightClip],
/// renormalizes, and forms eta and pi. `arm_prob` holds the per-unit weights
/// of z = 0 and z = 1 used to average omega into pi; its rows sum to one.
inline StrataWeights finalize_weights(const char* step,
                                      std::array<Eigen::MatrixXd, 2> omega,
                                      const Eigen::MatrixXd& arm_prob,
                                      Conditioning conditioning,
                                      bool check_range = true) {
  const Eigen::Index n = omega[0].rows();
  StrataWeights out;
  out.conditioning = conditioning;
  std::vector<char> clipped(static_cast<std::size_t>(n), 0);
  std::vector<char> outside(static_cast<std::size_t>(n), 0);
  for (int z = 0; z < 2; ++z) {
    Eigen::MatrixXd& om = omega[z];
    for (Eigen::Index i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int g = 0; g < 3; ++g) {
        const double v = om(i, g);
        if (check_range) {
          if (!std::isfinite(v) || v < -kWeightFailSlack || v > 1.0 + kWeightFailSlack) {
            throw EstimationError(step, "stratum weight " + std::to_string(v) +
                                            " at unit " + std::to_string(i) +
                                            " is far outside [0,1]; model badly "
                                            "misspecified");
          }
          if (v < -kWeightWarnSlack || v > 1.0 + kWeightWarnSlack) {
            outside[static_cast<std::size_t>(i)] = 1;
          }
        }
        const double c = std::clamp(v, kWeightClip, 1.0 - kWeightClip);
        if (c != v) clipped[static_cast<std::size_t>(i)] = 1;
        om(i, g) = c;
        sum += c;
      }
      om.row(i) /= sum;
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    out.clipped_units += clipped[static_cast<std::size_t>(i)];
    out.out_of_range_units += outside[static_cast<std::size_t>(i)];
  }
  if (out.out_of_range_units > 0) {
    out.warnings.push_back(std::string(step) + ": " +
                           std::to_string(out.out_of_range_units) +
                           " unit(s) with raw weights outside [0,1] before clipping");
  }

  // Cell (z=1, s=1) mixes always-takers and compliers; cell (z=0, s=0) mixes
  // never-takers and compliers.
  out.eta[0] = Eigen::MatrixXd::Zero(n, 3);
  out.eta[1] = Eigen::MatrixXd::Zero(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d1 = omega[1](i, kAT) + omega[1](i, kCO);
    out.eta[1](i, kAT) = omega[1](i, kAT) / d1;
    out.eta[1](i, kCO) = omega[1](i, kCO) / d1;
    const double d0 = omega[0](i, kNT) + omega[0](i, kCO);
    out.eta[0](i, kNT) = omega[0](i, kNT) / d0;
    out.eta[0](i, kCO) = omega[0](i, kCO) / d0;
  }
  out.pi = (omega[0].array().colwise() * arm_prob.col(0).array() +
            omega[1].array().colwise() * arm_prob.col(1).array())
               .matrix();
  out.omega = std::move(omega);
  return out;
}

/// Per-unit (pr(Z=0|A,C), pr(Z=1|A,C)) under the treatment probit.
inline Eigen::MatrixXd treatment_arm_probs(const Dataset& data,
                                           const TreatmentParams& beta) {
  const Eigen::VectorXd idx = treatment_design(data) * beta.to_vector();
  Eigen::MatrixXd r(data.n(), 2);
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    r(i, 1) = numerics::std_normal_cdf(idx(i));
    r(i, 0) = numerics::std_normal_cdf(-idx(i));
  }
  return r;
}

}  // namespace detail

/// E{h(t,W,C) | Z=z,A,C} for every unit, by the closed form when `method` is
/// closed-form and by Gauss-Hermite quadrature otherwise.
inline Eigen::VectorXd bridge_expectation(const Dataset& data, int t, int z,
                                          const BridgeParams& alpha,
                                          const WModelParams& gamma,
                                          const IntegralMethod& method) {
  const Eigen::VectorXd off = bridge_offset_index(t, data.c(), alpha);
  const Eigen::VectorXd m = w_mean_index(z, data.a(), data.c(), gamma);
  const Eigen::Index n = data.n();
  Eigen::VectorXd e(n);
  if (alpha.aw == 0.0) {
    for (Eigen::Index i = 0; i < n; ++i) e(i) = numerics::std_normal_cdf(off(i));
  } else if (method.kind == IntegralMethod::Kind::ClosedForm) {
    for (Eigen::Index i = 0; i < n; ++i) {
      e(i) = numerics::normal_probit_integral(off(i), alpha.aw, m(i), gamma.sigma_w);
    }
  } else {
    const numerics::QuadratureRule& rule = numerics::cached_gauss_hermite_rule(method.order);
    for (Eigen::Index i = 0; i < n; ++i) {
      e(i) = numerics::normal_probit_quadrature(off(i), alpha.aw, m(i), gamma.sigma_w, rule);
    }
  }
  return e;
}

/// Weights given V = (A,C): omega_ss = E h(0), omega_sbarsbar = 1 - E h(1),
/// omega_ssbar = E h(1) - E h(0), all conditional on (Z=z, A, C), and
/// pi_g(A,C) = sum_z omega_g(z,A,C) pr(z|A,C).
inline StrataWeights weights_ac(const Dataset& data, const BridgeParams& alpha,
                                const WModelParams& gamma,
                                const TreatmentParams& beta,
                                const IntegralMethod& method = {}) {
  std::array<Eigen::MatrixXd, 2> omega;
  for (int z = 0; z < 2; ++z) {
    const Eigen::VectorXd e0 = bridge_expectation(data, 0, z, alpha, gamma, method);
    const Eigen::VectorXd e1 = bridge_expectation(data, 1, z, alpha, gamma, method);
    omega[z].resize(data.n(), 3);
    omega[z].col(detail::kAT) = e0;
    omega[z].col(detail::kNT) = (1.0 - e1.array()).matrix();
    omega[z].col(detail::kCO) = e1 - e0;
  }
  return detail::finalize_weights("weights_ac", std::move(omega),
                                  detail::treatment_arm_probs(data, beta),
                                  Conditioning::AC);
}

// ---------------------------------------------------------------------------
// Ordered-probit strata model.

struct PsiFit {
  StrataParams psi;
  gmm::Solution solution;
};

/// Fits psi so that, at the observed (Z,A,C),
///   omega_ss          = E{pr(S_0=1|Z,X;psi) | Z,A,C}
///   omega_ss + omega_ssbar = E{pr(S_1=1|Z,X;psi) | Z,A,C}
/// with the right-hand sides in closed form under the Gaussian W model,
/// instrumented by {1, Z, A, C, m(Z,A,C)} and solved by identity-weighted GMM.
inline PsiFit fit_psi(const Dataset& data, const StrataWeights& wac,
                      const WModelParams& gamma, const gmm::Options& opt = {},
                      const StrataParams* warm = nullptr) {
  const Eigen::Index n = data.n(), p = data.p();
  const Eigen::VectorXd m0 = w_mean_index(0, data.a(), data.c(), gamma);
  const Eigen::VectorXd m1 = w_mean_index(1, data.a(), data.c(), gamma);
  Eigen::VectorXd m(n), t0(n), t1(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int z = data.zi(i);
    m(i) = z ? m1(i) : m0(i);
    t0(i) = wac.omega[z](i, detail::kAT);
    t1(i) = 1.0 - wac.omega[z](i, detail::kNT);
  }
  // Instruments and the linear part of the index share columns (1,Z,A,C,m).
  Eigen::MatrixXd q(n, 4 + p);
  q.col(0).setOnes();
  q.col(1) = data.z();
  q.col(2) = data.a();
  if (p > 0) q.middleCols(3, p) = data.c();
  q.col(3 + p) = m;
  const double s2 = gamma.sigma_w * gamma.sigma_w;
  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::Index k = 5 + p, nq = q.cols();

  // Numerator of the index without the gap term, for parameter vector v.
  auto base_index = [&q, p](const Eigen::VectorXd& v) {
    Eigen::VectorXd coef(4 + p);
    coef(0) = v(0);
    coef(1) = v(2);
    coef(2) = v(4);
    if (p > 0) coef.segment(3, p) = v.tail(p);
    coef(3 + p) = v(3);
    return Eigen::VectorXd(q * coef);
  };
  auto residuals = [&, base_index](const Eigen::VectorXd& v, Eigen::MatrixXd* jac) {
    const Eigen::VectorXd base = base_index(v);
    const double gap = std::exp(v(1));
    const double pw = v(3);
    const double d = std::sqrt(1.0 + pw * pw * s2);
    Eigen::MatrixXd r(n, 2);
    if (jac) jac->setZero(2 * nq, k);
    for (int t = 0; t < 2; ++t) {
      const Eigen::VectorXd& target = t == 0 ? t0 : t1;
      const double shift = t == 0 ? -gap : 0.0;
      Eigen::VectorXd dens(n), num(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        num(i) = base(i) + shift;
        const double u = num(i) / d;
        r(i, t) = target(i) - numerics::std_normal_cdf(u);
        if (jac) dens(i) = numerics::std_normal_pdf(u);
      }
      if (jac) {
        // du/dv columns in parameter order (p0, log_gap, pz, pw, pa, pc).
        Eigen::MatrixXd du(n, k);
        du.col(0).setConstant(1.0 / d);
        du.col(1).setConstant(t == 0 ? -gap / d : 0.0);
        du.col(2) = data.z() / d;
        du.col(3) = (m.array() / d - num.array() * pw * s2 / (d * d * d)).matrix();
        du.col(4) = data.a() / d;
        if (p > 0) du.rightCols(p) = data.c() / d;
        jac->middleRows(t * nq, nq) =
            -(q.transpose() * (du.array().colwise() * dens.array()).matrix()) * inv_n;
      }
    }
    return r;
  };

  gmm::MomentProblem problem;
  problem.dim_param = k;
  problem.dim_moment = 2 * nq;
  problem.mean_moments = [&, residuals](const Eigen::VectorXd& v) {
    const Eigen::MatrixXd r = residuals(v, nullptr);
    Eigen::VectorXd g(2 * nq);
    g.head(nq) = q.transpose() * r.col(0) * inv_n;
    g.tail(nq) = q.transpose() * r.col(1) * inv_n;
    return g;
  };
  problem.unit_moments = [&, residuals](const Eigen::VectorXd& v) {
    const Eigen::MatrixXd r = residuals(v, nullptr);
    Eigen::MatrixXd u(n, 2 * nq);
    u.leftCols(nq) = q.array().colwise() * r.col(0).array();
    u.rightCols(nq) = q.array().colwise() * r.col(1).array();
    return u;
  };
  problem.jacobian = [residuals](const Eigen::VectorXd& v) {
    Eigen::MatrixXd jac;
    residuals(v, &jac);
    return jac;
  };

  if (warm) {
    problem.init = warm->to_vector();
  } else {
    // Probit-scale least squares of each target on (1,Z,A,C,m), then undo
    // the sqrt(1 + pw^2 sigma^2) scaling.
    Eigen::VectorXd y0(n), y1(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      y0(i) = numerics::std_normal_quantile(std::clamp(t0(i), 1e-6, 1.0 - 1e-6));
      y1(i) = numerics::std_normal_quantile(std::clamp(t1(i), 1e-6, 1.0 - 1e-6));
    }
    const auto qr = q.colPivHouseholderQr();
    Eigen::VectorXd c0 = qr.solve(y0), c1 = qr.solve(y1);
    if (!c0.allFinite()) c0.setZero();
    if (!c1.allFinite()) c1.setZero();
    const Eigen::VectorXd slope = 0.5 * (c0 + c1);
    double cm = slope(3 + p);
    const double cap = 0.98 / std::max(s2, 1e-12);
    if (cm * cm > cap) cm = std::copysign(std::sqrt(cap), cm);
    const double pw = cm / std::sqrt(1.0 - cm * cm * s2);
    const double d = std::sqrt(1.0 + pw * pw * s2);
    StrataParams init;
    init.p0 = c1(0) * d;
    init.log_gap = std::log(std::max((c1(0) - c0(0)) * d, 1e-3));
    init.pz = slope(1) * d;
    init.pw = pw;
    init.pa = slope(2) * d;
    init.pc = slope.segment(3, p) * d;
    problem.init = init.to_vector();
  }
  gmm::Solution sol = gmm::solve(problem, opt);
  require_converged("fit_psi", sol);
  return {StrataParams::from_vector(sol.params), std::move(sol)};
}

/// Weights given V = X from the strata model, with
/// pi_g(X) = sum_z omega_g(z,X) pr(z|A,C) f(W|z,A,C) / sum_z pr(z|A,C) f(W|z,A,C).
inline StrataWeights weights_x(const Dataset& data, const StrataParams& psi,
                               const TreatmentParams& beta,
                               const WModelParams& gamma) {
  const Eigen::Index n = data.n();
  std::array<Eigen::MatrixXd, 2> omega;
  for (int z = 0; z < 2; ++z) {
    omega[z].resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
      const StratumProbs pr =
          strata_probs_psi(z, data.a()(i), data.w()(i), data.c().row(i), psi);
      for (int g = 0; g < 3; ++g) omega[z](i, g) = pr[static_cast<std::size_t>(g)];
    }
  }
  if (!(gamma.sigma_w > 0.0)) {
    throw EstimationError("weights_x", "zero denominator: sigma_w is not positive");
  }
  const Eigen::VectorXd tidx = treatment_design(data) * beta.to_vector();
  const std::array<Eigen::VectorXd, 2> mean = {
      w_mean_index(0, data.a(), data.c(), gamma),
      w_mean_index(1, data.a(), data.c(), gamma)};
  Eigen::MatrixXd r(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::array<double, 2> logw{};
    for (int z = 0; z < 2; ++z) {
      const double dev = (data.w()(i) - mean[z](i)) / gamma.sigma_w;
      logw[z] = numerics::log_std_normal_cdf(z ? tidx(i) : -tidx(i)) - 0.5 * dev * dev;
    }
    const double top = std::max(logw[0], logw[1]);
    if (!std::isfinite(top)) {
      throw EstimationError("weights_x", "zero denominator in principal score at unit " +
                                             std::to_string(i));
    }
    const double e0 = std::exp(logw[0] - top), e1 = std::exp(logw[1] - top);
    r(i, 0) = e0 / (e0 + e1);
    r(i, 1) = e1 / (e0 + e1);
  }
  return detail::finalize_weights("weights_x", std::move(omega), r, Conditioning::X);
}

// ---------------------------------------------------------------------------
// Naive contrast.

struct NaiveFit {
  StrataWeights weights;
  gmm::Solution solution;
};

/// Stratum weights from a plain probit of S on (1, Z, A, W, C), which treats
/// strata as ignorable given X: omega_ss = pr(S=1|Z=0,X),
/// omega_sbarsbar = 1 - pr(S=1|Z=1,X), complier share the nonnegative
/// remainder. omega does not depend on z and pi = omega.
inline NaiveFit naive_weights(const Dataset& data, const gmm::Options& opt = {},
                              const Eigen::VectorXd* warm = nullptr) {
  const Eigen::Index n = data.n(), p = data.p();
  Eigen::MatrixXd x(n, 4 + p);
  x.col(0).setOnes();
  x.col(1) = data.z();
  x.col(2) = data.a();
  x.col(3) = data.w();
  if (p > 0) x.rightCols(p) = data.c();
  const Eigen::VectorXd init = warm ? *warm : probit_start(x, data.s());
  ProbitFit fit = probit_mle(x, data.s(), init, opt);
  require_converged("naive_probit", fit.solution);
  const Eigen::VectorXd idx0 = x * fit.coef - data.z() * fit.coef(1);
  Eigen::MatrixXd om(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p0 = numerics::std_normal_cdf(idx0(i));
    const double p1 = numerics::std_normal_cdf(idx0(i) + fit.coef(1));
    om(i, detail::kAT) = p0;
    om(i, detail::kNT) = 1.0 - p1;
    om(i, detail::kCO) = std::max(p1 - p0, 0.0);
    om.row(i) /= om.row(i).sum();
  }
  Eigen::MatrixXd arm(n, 2);
  arm.col(0).setConstant(0.5);
  arm.col(1).setConstant(0.5);
  NaiveFit out;
  out.weights = detail::finalize_weights("naive_weights", {om, om}, arm,
                                         Conditioning::X, false);
  out.solution = std::move(fit.solution);
  return out;
}

}  // namespace proxstrata::estimation
