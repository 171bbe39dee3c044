#pragma once

// Generalized method of moments. Exactly identified systems are solved by
// damped Newton on the sample moments; over-identified systems minimize the
// quadratic form gbar' W gbar by damped Gauss-Newton. Both use a backtracking
// line search on the merit function and restart from jittered points when a
// start fails to converge.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "proxstrata/errors.hpp"
#include "proxstrata/numerics.hpp"

namespace proxstrata::gmm {

struct MomentProblem {
  Eigen::Index dim_param = 0;
  Eigen::Index dim_moment = 0;
  /// Sample mean of the moment vector at the given parameters (length q).
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> mean_moments;
  /// Per-unit moments, n x q. Required by two_step.
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> unit_moments;
  /// Analytic q x k Jacobian of mean_moments; central differences otherwise.
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian;
  Eigen::VectorXd init;
  /// q x q positive semidefinite weight; empty means identity.
  Eigen::MatrixXd weight;

  /// Builds a problem from a per-unit moment function (params, unit) -> q-vector.
  template <class UnitFn>
  static MomentProblem from_unit_fn(Eigen::Index n_units, Eigen::Index q,
                                    Eigen::VectorXd init, UnitFn fn) {
    MomentProblem p;
    p.dim_param = init.size();
    p.dim_moment = q;
    p.init = std::move(init);
    p.unit_moments = [n_units, q, fn](const Eigen::VectorXd& theta) {
      Eigen::MatrixXd g(n_units, q);
      for (Eigen::Index i = 0; i < n_units; ++i) g.row(i) = fn(theta, i).transpose();
      return g;
    };
    auto units = p.unit_moments;
    p.mean_moments = [units](const Eigen::VectorXd& theta) -> Eigen::VectorXd {
      return units(theta).colwise().mean().transpose();
    };
    return p;
  }
};

struct Options {
  double tolerance = 1e-8;
  int max_iterations = 200;
  /// Total starts including the supplied init.
  int starts = 5;
  double jitter = 0.25;
  std::uint64_t seed = 0x5eed;
};

struct Solution {
  Eigen::VectorXd params;
  /// gbar' W gbar at params.
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
  /// Infinity norm of gbar at params.
  double moment_norm = 0.0;
  /// Infinity norm of J' W gbar at params.
  double gradient_norm = 0.0;
  int starts_used = 0;
  Eigen::MatrixXd weight;
  std::vector<std::string> diagnostics;
};

/// Jacobian of the sample moments: analytic when supplied, else central
/// differences.
inline Eigen::MatrixXd moment_jacobian(const MomentProblem& problem,
                                       const Eigen::VectorXd& theta) {
  if (problem.jacobian) return problem.jacobian(theta);
  return numerics::finite_diff_jacobian(problem.mean_moments, theta);
}

namespace detail {

inline void validate(const MomentProblem& p) {
  if (!p.mean_moments) throw ConfigError("gmm: moment function missing");
  if (p.dim_param < 1 || p.init.size() != p.dim_param) {
    throw ConfigError("gmm: init has " + std::to_string(p.init.size()) +
                      " entries, expected " + std::to_string(p.dim_param));
  }
  if (p.dim_moment < p.dim_param) {
    throw ConfigError("gmm: fewer moments (" + std::to_string(p.dim_moment) +
                      ") than parameters (" + std::to_string(p.dim_param) + ")");
  }
  if (p.weight.size() > 0) {
    if (p.weight.rows() != p.dim_moment || p.weight.cols() != p.dim_moment) {
      throw ConfigError("gmm: weight matrix has wrong shape");
    }
    if (!p.weight.isApprox(p.weight.transpose(), 1e-12)) {
      throw ConfigError("gmm: weight matrix is not symmetric");
    }
  }
}

inline std::vector<double> snapshot(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

struct Merit {
  const Eigen::MatrixXd* weight;
  double operator()(const Eigen::VectorXd& g) const {
    return weight ? g.dot(*weight * g) : g.squaredNorm();
  }
};

inline Solution run_start(const MomentProblem& problem, const Eigen::VectorXd& init,
                          const Options& opt) {
  const bool exact = problem.dim_moment == problem.dim_param;
  const Eigen::MatrixXd* w = problem.weight.size() > 0 ? &problem.weight : nullptr;
  const Merit merit{w};
  const Eigen::Index k = problem.dim_param;

  Solution sol;
  Eigen::VectorXd theta = init;
  Eigen::VectorXd g = problem.mean_moments(theta);
  if (g.size() != problem.dim_moment || !g.allFinite()) {
    std::ostringstream os;
    os << "gmm: non-finite or mis-sized sample moments at the starting point";
    throw NumericError(os.str(), snapshot(theta));
  }
  double f = merit(g);
  double lambda = 0.0;
  Eigen::VectorXd grad;
  for (int it = 0; it < opt.max_iterations; ++it) {
    sol.iterations = it;
    if (exact && g.lpNorm<Eigen::Infinity>() <= opt.tolerance) {
      sol.converged = true;
      break;
    }
    const Eigen::MatrixXd jac = moment_jacobian(problem, theta);
    if (!jac.allFinite()) {
      throw NumericError("gmm: non-finite moment Jacobian", snapshot(theta));
    }
    const Eigen::MatrixXd jtw = w ? Eigen::MatrixXd(jac.transpose() * *w)
                                  : Eigen::MatrixXd(jac.transpose());
    grad = jtw * g;
    if (!exact && grad.lpNorm<Eigen::Infinity>() <= opt.tolerance) {
      sol.converged = true;
      break;
    }
    Eigen::MatrixXd normal = jtw * jac;
    bool accepted = false;
    for (int attempt = 0; attempt < 8 && !accepted; ++attempt) {
      Eigen::VectorXd step;
      if (exact && lambda == 0.0) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(jac);
        if (qr.rank() < k) {
          lambda = 1e-8 * std::max(1.0, normal.diagonal().maxCoeff());
          continue;
        }
        step = qr.solve(-g);
      } else {
        Eigen::MatrixXd damped = normal;
        damped.diagonal().array() +=
            lambda * normal.diagonal().array().max(1e-12);
        step = damped.ldlt().solve(-grad);
      }
      if (!step.allFinite()) {
        lambda = std::max(1e-8, lambda * 10.0);
        continue;
      }
      double t = 1.0;
      for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
        const Eigen::VectorXd trial = theta + t * step;
        const Eigen::VectorXd gt = problem.mean_moments(trial);
        if (!gt.allFinite()) continue;
        const double ft = merit(gt);
        if (ft < f) {
          theta = trial;
          g = gt;
          f = ft;
          accepted = true;
          break;
        }
      }
      if (!accepted) lambda = std::max(1e-6, lambda * 100.0);
      else lambda = lambda > 0 ? lambda * 0.1 : 0.0;
      if (lambda < 1e-12) lambda = 0.0;
    }
    if (!accepted) {
      sol.diagnostics.push_back("line search failed at iteration " +
                                std::to_string(it));
      break;
    }
    sol.iterations = it + 1;
  }
  sol.params = theta;
  sol.objective = f;
  sol.moment_norm = g.lpNorm<Eigen::Infinity>();
  if (exact) {
    sol.converged = sol.converged || sol.moment_norm <= opt.tolerance;
    sol.gradient_norm = 0.0;
  } else {
    const Eigen::MatrixXd jac = moment_jacobian(problem, theta);
    grad = w ? Eigen::VectorXd(jac.transpose() * (*w * g))
             : Eigen::VectorXd(jac.transpose() * g);
    sol.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    sol.converged = sol.gradient_norm <= opt.tolerance;
  }
  return sol;
}

}  // namespace detail

/// Solves the moment problem. Exactly identified: a root with
/// ||gbar||_inf <= tolerance. Over-identified: a minimizer of gbar' W gbar
/// with ||J' W gbar||_inf <= tolerance. Non-convergence after all starts is
/// reported through `converged == false`, never silently.
inline Solution solve(const MomentProblem& problem, const Options& opt = {}) {
  detail::validate(problem);
  Solution best = detail::run_start(problem, problem.init, opt);
  best.starts_used = 1;
  int attempted = 1;
  if (!best.converged && opt.starts > 1) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int s = 1; s < opt.starts; ++s) {
      Eigen::VectorXd start = problem.init;
      for (Eigen::Index j = 0; j < start.size(); ++j) {
        start(j) += opt.jitter * normal(rng) * (1.0 + std::abs(start(j)));
      }
      Solution trial;
      attempted = s + 1;
      try {
        trial = detail::run_start(problem, start, opt);
      } catch (const NumericError&) {
        continue;
      }
      trial.starts_used = s + 1;
      best.diagnostics.push_back("restart " + std::to_string(s) +
                                 (trial.converged ? " converged" : " failed"));
      const bool better = trial.converged ||
                          (!best.converged && trial.objective < best.objective);
      if (better) {
        trial.diagnostics.insert(trial.diagnostics.begin(),
                                 best.diagnostics.begin(), best.diagnostics.end());
        best = std::move(trial);
      }
      if (best.converged) break;
    }
  }
  if (!best.converged) best.starts_used = attempted;
  best.weight = problem.weight.size() > 0
                    ? problem.weight
                    : Eigen::MatrixXd::Identity(problem.dim_moment,
                                                problem.dim_moment);
  return best;
}

/// Optimal weight from the uncentered moment outer product at theta, with a
/// ridge fallback when that matrix is numerically singular.
inline Eigen::MatrixXd optimal_weight(const MomentProblem& problem,
                                      const Eigen::VectorXd& theta,
                                      std::vector<std::string>* diagnostics = nullptr) {
  if (!problem.unit_moments) {
    throw ConfigError("gmm: two_step needs per-unit moments");
  }
  const Eigen::MatrixXd units = problem.unit_moments(theta);
  const double n = static_cast<double>(units.rows());
  Eigen::MatrixXd omega = (units.transpose() * units) / n;
  const Eigen::Index q = omega.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(omega);
  const double max_ev = eig.eigenvalues().maxCoeff();
  const double min_ev = eig.eigenvalues().minCoeff();
  if (!(max_ev > 0) || min_ev <= 1e-12 * max_ev) {
    const double ridge = std::max(1e-8 * omega.trace() / static_cast<double>(q),
                                  std::numeric_limits<double>::min());
    omega.diagonal().array() += ridge;
    if (diagnostics) {
      std::ostringstream os;
      os << "singular moment covariance; ridge " << ridge << " added";
      diagnostics->push_back(os.str());
    }
  }
  Eigen::MatrixXd weight = omega.ldlt().solve(Eigen::MatrixXd::Identity(q, q));
  return 0.5 * (weight + weight.transpose());
}

/// Two-step efficient GMM: identity-weighted solve, re-weight by the inverse
/// moment covariance, re-solve from the first-step estimate.
inline Solution two_step(const MomentProblem& problem, const Options& opt = {}) {
  if (problem.dim_moment == problem.dim_param) return solve(problem, opt);
  MomentProblem first = problem;
  first.weight.resize(0, 0);
  Solution step1 = solve(first, opt);
  std::vector<std::string> diagnostics = step1.diagnostics;
  MomentProblem second = problem;
  second.weight = optimal_weight(problem, step1.params, &diagnostics);
  second.init = step1.params;
  Solution step2 = solve(second, opt);
  diagnostics.insert(diagnostics.end(), step2.diagnostics.begin(),
                     step2.diagnostics.end());
  step2.diagnostics = std::move(diagnostics);
  step2.iterations += step1.iterations;
  return step2;
}

}  // namespace proxstrata::gmm
