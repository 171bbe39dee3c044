#pragma once

// Scalar and vector numerical primitives: standard normal functions, the
// normal-probit integral identity, Gauss-Hermite quadrature and central
// finite-difference Jacobians.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "proxstrata/errors.hpp"

namespace proxstrata::numerics {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

/// Phi(x) through erfc, which keeps relative accuracy in both tails.
inline double std_normal_cdf(double x) {
  if (!std::isfinite(x)) {
    throw DomainError("std_normal_cdf: non-finite argument");
  }
  return 0.5 * std::erfc(-x * kInvSqrt2);
}

inline double std_normal_pdf(double x) {
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

/// log Phi(x), accurate for very negative x where Phi underflows.
inline double log_std_normal_cdf(double x) {
  if (x > -30.0) return std::log(std_normal_cdf(x));
  // Asymptotic expansion of the Mills ratio.
  const double x2 = x * x;
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) +
         std::log1p(-1.0 / x2 + 3.0 / (x2 * x2));
}

/// phi(x) / Phi(x) without overflow in the lower tail.
inline double inverse_mills(double x) {
  if (x > -30.0) return std_normal_pdf(x) / std_normal_cdf(x);
  const double x2 = x * x;
  return -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2));
}

/// Phi^{-1}(p) by bisection-safeguarded Newton on std_normal_cdf.
inline double std_normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw DomainError("std_normal_quantile: probability must lie in (0,1)");
  }
  double lo = -40.0, hi = 40.0, x = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double f = std_normal_cdf(x) - p;
    if (f > 0) hi = x; else lo = x;
    const double d = std_normal_pdf(x);
    double next = d > 0 ? x - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-15 * (1.0 + std::abs(x))) return next;
    x = next;
  }
  return x;
}

/// E[Phi(a + b W)] for W ~ N(m, sigma^2), which equals
/// Phi((a + b m) / sqrt(1 + b^2 sigma^2)).
inline double normal_probit_integral(double a, double b, double m,
                                     double sigma) {
  if (!(std::isfinite(a) && std::isfinite(b) && std::isfinite(m) &&
        std::isfinite(sigma))) {
    throw DomainError("normal_probit_integral: non-finite argument");
  }
  if (sigma < 0) {
    throw DomainError("normal_probit_integral: negative sigma");
  }
  return std_normal_cdf((a + b * m) / std::sqrt(1.0 + b * b * sigma * sigma));
}

/// Gauss-Hermite rule normalized to the standard normal measure, so that
/// sum_i weights[i] * f(nodes[i]) approximates E f(X), X ~ N(0,1).
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
  int order = 0;

  template <class F>
  double expect(F&& f) const {
    double acc = 0.0;
    for (int i = 0; i < order; ++i) acc += weights[i] * f(nodes[i]);
    return acc;
  }

  /// E f(W) for W ~ N(mean, sd^2).
  template <class F>
  double expect_normal(double mean, double sd, F&& f) const {
    double acc = 0.0;
    for (int i = 0; i < order; ++i) acc += weights[i] * f(mean + sd * nodes[i]);
    return acc;
  }
};

inline constexpr int kMaxQuadratureOrder = 256;
inline constexpr int kDefaultQuadratureOrder = 32;

/// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
/// polynomials: off-diagonal sqrt(k), nodes are eigenvalues, weights are
/// squared first eigenvector components.
inline void check_quadrature_order(int order) {
  if (order < 1 || order > kMaxQuadratureOrder) {
    throw ConfigError("gauss_hermite_rule: order must lie in [1, 256], got " +
                      std::to_string(order));
  }
}

inline QuadratureRule gauss_hermite_rule(int order) {
  check_quadrature_order(order);
  QuadratureRule rule;
  rule.order = order;
  if (order == 1) {
    rule.nodes = {0.0};
    rule.weights = {1.0};
    return rule;
  }
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  const auto& values = eig.eigenvalues();
  const auto& vectors = eig.eigenvectors();
  rule.nodes.resize(order);
  rule.weights.resize(order);
  for (int i = 0; i < order; ++i) {
    rule.nodes[i] = values(i);
    rule.weights[i] = vectors(0, i) * vectors(0, i);
  }
  // Enforce the symmetry of the exact rule and the unit total mass.
  for (int i = 0; i < order / 2; ++i) {
    const int j = order - 1 - i;
    const double node = 0.5 * (rule.nodes[j] - rule.nodes[i]);
    const double weight = 0.5 * (rule.weights[i] + rule.weights[j]);
    rule.nodes[i] = -node;
    rule.nodes[j] = node;
    rule.weights[i] = rule.weights[j] = weight;
  }
  if (order % 2 == 1) rule.nodes[order / 2] = 0.0;
  double total = 0.0;
  for (double w : rule.weights) total += w;
  for (double& w : rule.weights) w /= total;
  return rule;
}

/// Shared rule of the given order, built once per process.
inline const QuadratureRule& cached_gauss_hermite_rule(int order) {
  check_quadrature_order(order);
  static std::array<std::unique_ptr<QuadratureRule>, kMaxQuadratureOrder + 1> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[static_cast<std::size_t>(order)];
  if (!slot) slot = std::make_unique<QuadratureRule>(gauss_hermite_rule(order));
  return *slot;
}

/// E[Phi(a + b W)] for W ~ N(m, sigma^2) by Gauss-Hermite quadrature. The
/// integral equals pr(e - b sigma X <= a + b m) for independent standard
/// normals e and X; the rule integrates over whichever of the two keeps the
/// integrand slope at most one, so a near-step integrand never occurs.
inline double normal_probit_quadrature(double a, double b, double m, double sigma,
                                       const QuadratureRule& rule) {
  if (sigma < 0) {
    throw DomainError("normal_probit_quadrature: negative sigma");
  }
  const double c = a + b * m;
  const double scale = b * sigma;
  if (std::abs(scale) <= 1.0) {
    return rule.expect([&](double x) { return std_normal_cdf(c + scale * x); });
  }
  const double inv = 1.0 / std::abs(scale);
  return rule.expect([&](double e) { return std_normal_cdf((c - e) * inv); });
}

/// Default central-difference step for coordinate value x.
inline double default_step(double x) {
  return std::max(1e-6, 1e-7 * std::abs(x));
}

/// Central-difference Jacobian of f at x. With `step` unset the per-coordinate
/// step is max(1e-6, 1e-7 |x_i|).
template <class F>
Eigen::MatrixXd finite_diff_jacobian(F&& f, const Eigen::VectorXd& x,
                                     std::optional<double> step = std::nullopt) {
  if (step && !(*step > 0)) {
    throw DomainError("finite_diff_jacobian: step must be positive");
  }
  auto eval = [&](const Eigen::VectorXd& point, Eigen::Index coord) {
    Eigen::VectorXd value = f(point);
    if (!value.allFinite()) {
      std::ostringstream os;
      os << "finite_diff_jacobian: non-finite function value while "
            "perturbing coordinate "
         << coord;
      throw NumericError(os.str(),
                         std::vector<double>(point.data(),
                                             point.data() + point.size()));
    }
    return value;
  };
  const Eigen::Index k = x.size();
  Eigen::MatrixXd jac;
  Eigen::VectorXd probe = x;
  for (Eigen::Index j = 0; j < k; ++j) {
    const double h = step ? *step : default_step(x(j));
    probe(j) = x(j) + h;
    const Eigen::VectorXd up = eval(probe, j);
    probe(j) = x(j) - h;
    const Eigen::VectorXd down = eval(probe, j);
    probe(j) = x(j);
    if (j == 0) jac.resize(up.size(), k);
    jac.col(j) = (up - down) / (2.0 * h);
  }
  return jac;
}

}  // namespace proxstrata::numerics
