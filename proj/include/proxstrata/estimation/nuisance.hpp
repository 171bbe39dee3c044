#pragma once

// Step-one nuisance fits: treatment probit, Gaussian W model and the bridge
// function.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/estimation/config.hpp"
#include "proxstrata/gmm.hpp"
#include "proxstrata/models.hpp"
#include "proxstrata/numerics.hpp"

namespace proxstrata::estimation {

// ---------------------------------------------------------------------------
// Probit maximum likelihood.

struct ProbitFit {
  Eigen::VectorXd coef;
  gmm::Solution solution;
};

/// Probit MLE of binary y on the columns of x, solved as the score equations
/// with the analytic Hessian. Reports non-convergence through the solution.
inline ProbitFit probit_mle(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& init,
                            const gmm::Options& opt = {}) {
  const Eigen::Index n = x.rows(), k = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  gmm::MomentProblem problem;
  problem.dim_param = k;
  problem.dim_moment = k;
  problem.init = init;
  // lambda_i = d log-likelihood / d index and its derivative.
  auto lambdas = [&x, &y, n](const Eigen::VectorXd& b, Eigen::VectorXd* dl) {
    const Eigen::VectorXd q = x * b;
    Eigen::VectorXd l(n);
    if (dl) dl->resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sgn = y(i) > 0.5 ? 1.0 : -1.0;
      const double m = numerics::inverse_mills(sgn * q(i));
      l(i) = sgn * m;
      if (dl) (*dl)(i) = -m * (m + sgn * q(i));
    }
    return l;
  };
  problem.mean_moments = [&x, lambdas, inv_n](const Eigen::VectorXd& b) {
    return Eigen::VectorXd(x.transpose() * lambdas(b, nullptr) * inv_n);
  };
  problem.unit_moments = [&x, lambdas](const Eigen::VectorXd& b) {
    const Eigen::VectorXd l = lambdas(b, nullptr);
    return Eigen::MatrixXd(x.array().colwise() * l.array());
  };
  problem.jacobian = [&x, lambdas, inv_n](const Eigen::VectorXd& b) {
    Eigen::VectorXd dl;
    lambdas(b, &dl);
    return Eigen::MatrixXd(x.transpose() * (x.array().colwise() * dl.array()).matrix() *
                           inv_n);
  };
  ProbitFit fit;
  fit.solution = gmm::solve(problem, opt);
  fit.coef = fit.solution.params;
  return fit;
}

/// Least-squares start for a probit: linear probability slopes rescaled.
inline Eigen::VectorXd probit_start(const Eigen::MatrixXd& x,
                                    const Eigen::VectorXd& y) {
  const double mean = std::clamp(y.mean(), 0.01, 0.99);
  Eigen::VectorXd b = x.colPivHouseholderQr().solve(y);
  if (!b.allFinite()) b.setZero();
  b *= 1.0 / numerics::std_normal_pdf(numerics::std_normal_quantile(mean));
  // Column 0 is the intercept in every caller.
  const Eigen::VectorXd xm = x.colwise().mean().transpose();
  b(0) = 0.0;
  b(0) = numerics::std_normal_quantile(mean) - xm.dot(b);
  return b;
}

inline void require_converged(const char* step, const gmm::Solution& sol) {
  if (!sol.converged) {
    throw EstimationError(step, "solver did not converge after " +
                                    std::to_string(sol.starts_used) +
                                    " start(s); moment norm " +
                                    std::to_string(sol.moment_norm));
  }
}

// ---------------------------------------------------------------------------
// Treatment model.

/// Regressors (1, a, c) of the treatment probit.
inline Eigen::MatrixXd treatment_design(const Dataset& data) {
  Eigen::MatrixXd x(data.n(), 2 + data.p());
  x.col(0).setOnes();
  x.col(1) = data.a();
  if (data.p() > 0) x.rightCols(data.p()) = data.c();
  return x;
}

/// Coefficient sup-norm beyond which the probit is treated as separated.
inline constexpr double kSeparationBound = 25.0;

struct TreatmentFit {
  TreatmentParams beta;
  gmm::Solution solution;
};

inline TreatmentFit fit_treatment(const Dataset& data,
                                  const gmm::Options& opt = {},
                                  const TreatmentParams* warm = nullptr) {
  const Eigen::MatrixXd x = treatment_design(data);
  const Eigen::VectorXd init =
      warm ? warm->to_vector() : probit_start(x, data.z());
  ProbitFit fit = probit_mle(x, data.z(), init, opt);
  if (!fit.solution.converged ||
      fit.coef.lpNorm<Eigen::Infinity>() > kSeparationBound) {
    throw EstimationError("fit_treatment",
                          "perfect separation: probit coefficients diverge "
                          "(sup-norm " +
                              std::to_string(fit.coef.lpNorm<Eigen::Infinity>()) +
                              ")");
  }
  return {TreatmentParams::from_vector(fit.coef), std::move(fit.solution)};
}

// ---------------------------------------------------------------------------
// W model.

struct WModelFit {
  WModelParams gamma;
  /// sigma_w is numerically zero: W is an exact linear function of the regressors.
  bool degenerate = false;
};

inline std::vector<std::string> w_design_names(Eigen::Index p, bool squares) {
  std::vector<std::string> names = {"1", "z", "a"};
  for (Eigen::Index j = 0; j < p; ++j) names.push_back("c" + std::to_string(j + 1));
  if (squares) {
    for (Eigen::Index j = 0; j < p; ++j) {
      names.push_back("c" + std::to_string(j + 1) + "^2");
    }
  }
  return names;
}

/// Gaussian-linear MLE: least squares with sigma_w = sqrt(RSS / n).
inline WModelFit fit_w_model(const Dataset& data, bool squares = true) {
  const Eigen::MatrixXd x = w_design(data.z(), data.a(), data.c(), squares);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < x.cols()) {
    const auto names = w_design_names(data.p(), squares);
    std::string cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index j = qr.rank(); j < x.cols(); ++j) {
      if (!cols.empty()) cols += ", ";
      cols += names[static_cast<std::size_t>(perm(j))];
    }
    throw EstimationError("fit_w_model",
                          "rank-deficient design; collinear columns: " + cols);
  }
  const Eigen::VectorXd coef = qr.solve(data.w());
  const Eigen::VectorXd resid = data.w() - x * coef;
  const double sigma = std::sqrt(resid.squaredNorm() / static_cast<double>(data.n()));
  WModelFit fit;
  fit.gamma = WModelParams::from_coef(coef, data.p(), squares, sigma);
  const double scale = std::max(1.0, data.w().lpNorm<Eigen::Infinity>());
  fit.degenerate = sigma <= 1e-10 * scale;
  return fit;
}

// ---------------------------------------------------------------------------
// Bridge function.

/// Matrix of instrument functions B(Z,A,C), one row per unit.
inline Eigen::MatrixXd instrument_matrix(const Dataset& data,
                                         const std::vector<InstrumentTerm>& terms) {
  const Eigen::Index n = data.n(), p = data.p();
  Eigen::Index q = 0;
  for (auto t : terms) q += (t == InstrumentTerm::C || t == InstrumentTerm::C2) ? p : 1;
  Eigen::MatrixXd b(n, q);
  Eigen::Index col = 0;
  for (auto t : terms) {
    switch (t) {
      case InstrumentTerm::One: b.col(col++).setOnes(); break;
      case InstrumentTerm::Z: b.col(col++) = data.z(); break;
      case InstrumentTerm::A: b.col(col++) = data.a(); break;
      case InstrumentTerm::A2: b.col(col++) = data.a().array().square().matrix(); break;
      case InstrumentTerm::ZA:
        b.col(col++) = (data.z().array() * data.a().array()).matrix();
        break;
      case InstrumentTerm::C:
        if (p > 0) b.middleCols(col, p) = data.c();
        col += p;
        break;
      case InstrumentTerm::C2:
        if (p > 0) b.middleCols(col, p) = data.c().array().square().matrix();
        col += p;
        break;
    }
  }
  return b;
}

/// Which bridge terms are free. A dropped z term fixes the gap at zero and a
/// dropped w term fixes aw at zero.
struct BridgeLayout {
  Eigen::Index p = 0;
  bool z = true;
  bool w = true;
  bool c = true;
  bool squares = true;

  Eigen::Index size() const {
    return 1 + (z ? 1 : 0) + (w ? 1 : 0) + (c ? p : 0) + (squares ? p : 0);
  }

  Eigen::VectorXd pack(const BridgeParams& b) const {
    Eigen::VectorXd v(size());
    Eigen::Index k = 0;
    v(k++) = b.a0;
    if (z) v(k++) = b.log_gap;
    if (w) v(k++) = b.aw;
    if (c) { v.segment(k, p) = b.ac; k += p; }
    if (squares) v.segment(k, p) = b.ac2;
    return v;
  }

  BridgeParams unpack(const Eigen::VectorXd& v) const {
    BridgeParams b;
    Eigen::Index k = 0;
    b.a0 = v(k++);
    b.log_gap = z ? v(k++) : -std::numeric_limits<double>::infinity();
    b.aw = w ? v(k++) : 0.0;
    b.ac = c ? Eigen::VectorXd(v.segment(k, p)) : Eigen::VectorXd::Zero(p);
    if (c) k += p;
    b.ac2 = squares ? Eigen::VectorXd(v.segment(k, p)) : Eigen::VectorXd();
    return b;
  }

  /// Regressor columns of the bridge index with the gap column unscaled.
  Eigen::MatrixXd design(const Dataset& data) const {
    Eigen::MatrixXd x(data.n(), size());
    Eigen::Index k = 0;
    x.col(k++).setOnes();
    if (z) x.col(k++) = data.z();
    if (w) x.col(k++) = data.w();
    if (c && p > 0) { x.middleCols(k, p) = data.c(); k += p; }
    if (squares && p > 0) x.middleCols(k, p) = data.c().array().square().matrix();
    return x;
  }
};

struct BridgeFit {
  BridgeParams alpha;
  gmm::Solution solution;
};

/// Solves E_n[{S - h(Z,W,C; alpha)} B(Z,A,C)] = 0. Exactly identified
/// systems use gmm::solve and over-identified ones gmm::two_step.
inline BridgeFit fit_bridge(const Dataset& data, const EstimationConfig& config,
                            const BridgeParams* warm = nullptr,
                            BridgeLayout layout = {}) {
  layout.p = data.p();
  layout.squares = config.bridge_squares;
  const Eigen::MatrixXd b = instrument_matrix(data, config.bridge_instruments);
  const Eigen::MatrixXd x = layout.design(data);
  const Eigen::Index n = data.n(), k = layout.size(), q = b.cols();
  if (q < k) {
    throw ConfigError("fit_bridge: " + std::to_string(q) +
                      " instruments for " + std::to_string(k) + " bridge parameters");
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::Index gap_col = layout.z ? 1 : -1;
  const Eigen::VectorXd& s = data.s();

  auto index = [&x, gap_col](const Eigen::VectorXd& v) {
    Eigen::VectorXd coef = v;
    if (gap_col >= 0) coef(gap_col) = std::exp(v(gap_col));
    return Eigen::VectorXd(x * coef);
  };
  gmm::MomentProblem problem;
  problem.dim_param = k;
  problem.dim_moment = q;
  problem.mean_moments = [&, index](const Eigen::VectorXd& v) {
    const Eigen::VectorXd idx = index(v);
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = s(i) - numerics::std_normal_cdf(idx(i));
    return Eigen::VectorXd(b.transpose() * r * inv_n);
  };
  problem.unit_moments = [&, index](const Eigen::VectorXd& v) {
    const Eigen::VectorXd idx = index(v);
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = s(i) - numerics::std_normal_cdf(idx(i));
    return Eigen::MatrixXd(b.array().colwise() * r.array());
  };
  problem.jacobian = [&, index](const Eigen::VectorXd& v) {
    const Eigen::VectorXd idx = index(v);
    Eigen::VectorXd d(n);
    for (Eigen::Index i = 0; i < n; ++i) d(i) = numerics::std_normal_pdf(idx(i));
    Eigen::MatrixXd dx = x.array().colwise() * d.array();
    if (gap_col >= 0) dx.col(gap_col) *= std::exp(v(gap_col));
    return Eigen::MatrixXd(-(b.transpose() * dx) * inv_n);
  };

  if (warm) {
    problem.init = layout.pack(*warm);
  } else {
    // Start from a probit of S on the bridge regressors.
    Eigen::VectorXd start = probit_start(x, s);
    ProbitFit naive = probit_mle(x, s, start, config.solver);
    start = naive.solution.params.allFinite() ? naive.solution.params : start;
    if (gap_col >= 0) start(gap_col) = std::log(std::max(start(gap_col), 0.05));
    problem.init = start;
  }
  gmm::Solution sol = q == k ? gmm::solve(problem, config.solver)
                             : gmm::two_step(problem, config.solver);
  require_converged("fit_bridge", sol);
  return {layout.unpack(sol.params), std::move(sol)};
}

}  // namespace proxstrata::estimation
