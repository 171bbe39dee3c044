#pragma once

// Independent reference computations and fixtures shared by the test binaries.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/simulation.hpp"

namespace testsupport {

/// Standard normal CDF in long double, independent of the library routine.
inline long double phi_ref(long double x) {
  return 0.5L * std::erfc(-x / std::sqrt(2.0L));
}

/// Composite Simpson rule of f(w) times the Normal(m, sigma^2) density over
/// m +/- 12 sigma.
inline double normal_expectation_simpson(const std::function<long double(long double)>& f,
                                         double m, double sigma, int panels = 4000) {
  if (sigma == 0.0) return static_cast<double>(f(m));
  const long double lo = m - 12.0L * sigma, hi = m + 12.0L * sigma;
  const long double h = (hi - lo) / panels;
  const long double norm = 1.0L / (sigma * std::sqrt(2.0L * 3.14159265358979323846264L));
  auto g = [&](long double w) {
    const long double d = (w - m) / sigma;
    return f(w) * norm * std::exp(-0.5L * d * d);
  };
  long double acc = g(lo) + g(hi);
  for (int i = 1; i < panels; ++i) acc += g(lo + i * h) * (i % 2 ? 4.0L : 2.0L);
  return static_cast<double>(acc * h / 3.0L);
}

/// Probit log-likelihood evaluated in long double.
inline long double probit_loglik(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                 const Eigen::VectorXd& b) {
  long double ll = 0.0L;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    long double q = 0.0L;
    for (Eigen::Index j = 0; j < x.cols(); ++j) q += static_cast<long double>(x(i, j)) * b(j);
    const long double p = phi_ref(y(i) > 0.5 ? q : -q);
    ll += std::log(std::max(p, 1e-300L));
  }
  return ll;
}

/// Brute-force probit MLE: exhaustive search on a 21-point-per-axis grid,
/// repeatedly re-centred on the best point and narrowed, until the grid
/// spacing drops below `resolution`.
inline Eigen::VectorXd probit_grid_mle(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       double half_width = 3.0, double resolution = 1e-6) {
  const Eigen::Index k = x.cols();
  constexpr int kPoints = 21;
  Eigen::VectorXd centre = Eigen::VectorXd::Zero(k);
  double hw = half_width;
  for (;;) {
    const double step = 2.0 * hw / (kPoints - 1);
    Eigen::VectorXd best = centre;
    long double best_ll = probit_loglik(x, y, centre);
    std::vector<int> idx(static_cast<std::size_t>(k), 0);
    for (;;) {
      Eigen::VectorXd b(k);
      for (Eigen::Index j = 0; j < k; ++j) b(j) = centre(j) - hw + step * idx[static_cast<std::size_t>(j)];
      const long double ll = probit_loglik(x, y, b);
      if (ll > best_ll) {
        best_ll = ll;
        best = b;
      }
      Eigen::Index j = 0;
      while (j < k && ++idx[static_cast<std::size_t>(j)] == kPoints) idx[static_cast<std::size_t>(j++)] = 0;
      if (j == k) break;
    }
    centre = best;
    if (step < resolution) return centre;
    hw = 2.0 * step;
  }
}

/// 200-row probit sample: x = (1, a, c) with a, c standard normal and
/// coefficients (0.3, 0.8, -0.5).
struct ProbitSample {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

inline ProbitSample probit_sample(std::uint64_t seed, Eigen::Index n = 200) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ProbitSample s{Eigen::MatrixXd(n, 3), Eigen::VectorXd(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    s.x(i, 0) = 1.0;
    s.x(i, 1) = normal(rng);
    s.x(i, 2) = normal(rng);
    const double q = 0.3 + 0.8 * s.x(i, 1) - 0.5 * s.x(i, 2);
    s.y(i) = normal(rng) < q ? 1.0 : 0.0;
  }
  return s;
}

/// Generated data under the default simulation design.
inline proxstrata::simulation::LatentDataset design_data(int n, double zeta_u,
                                                        std::uint64_t seed,
                                                        proxstrata::OutcomeCase k =
                                                            proxstrata::OutcomeCase::I) {
  proxstrata::simulation::DgpConfig cfg;
  cfg.n = n;
  cfg.zeta_u = zeta_u;
  cfg.seed = seed;
  cfg.set_case(k);
  return proxstrata::simulation::generate(cfg);
}

/// Largest violations of the weight invariants.
struct WeightInvariants {
  double omega_sum = 0.0;     // max |sum_g omega_g(z) - 1|
  double eta_sum = 0.0;       // max |eta pair sum - 1|
  double pi_sum = 0.0;        // max |sum_g pi_g - 1|
  double range = 0.0;         // max distance of any entry outside [0,1]
};

inline WeightInvariants weight_invariants(const proxstrata::StrataWeights& w) {
  using proxstrata::Stratum;
  using proxstrata::index;
  WeightInvariants out;
  auto outside = [](double v) { return std::max({0.0, -v, v - 1.0}); };
  const Eigen::Index n = w.pi.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int z = 0; z < 2; ++z) {
      out.omega_sum = std::max(out.omega_sum, std::abs(w.omega[z].row(i).sum() - 1.0));
      for (int g = 0; g < 3; ++g) {
        out.range = std::max({out.range, outside(w.omega[z](i, g)), outside(w.eta[z](i, g))});
      }
    }
    const double e1 = w.eta[1](i, index(Stratum::AlwaysTaker)) + w.eta[1](i, index(Stratum::Complier));
    const double e0 = w.eta[0](i, index(Stratum::NeverTaker)) + w.eta[0](i, index(Stratum::Complier));
    out.eta_sum = std::max({out.eta_sum, std::abs(e1 - 1.0), std::abs(e0 - 1.0)});
    out.pi_sum = std::max(out.pi_sum, std::abs(w.pi.row(i).sum() - 1.0));
    for (int g = 0; g < 3; ++g) out.range = std::max(out.range, outside(w.pi(i, g)));
  }
  return out;
}

/// Units whose latent potential values form the excluded (S_0, S_1) = (1, 0).
inline long defier_count(const proxstrata::simulation::LatentDataset& d) {
  long count = 0;
  for (std::size_t i = 0; i < d.s0.size(); ++i) count += (d.s0[i] == 1 && d.s1[i] == 0) ? 1 : 0;
  return count;
}

}  // namespace testsupport
