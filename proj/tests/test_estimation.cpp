#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>

#include "proxstrata/estimation/pipeline.hpp"
#include "proxstrata/simulation.hpp"
#include "support.hpp"

namespace ps = proxstrata;
namespace est = proxstrata::estimation;
namespace sim = proxstrata::simulation;
namespace nm = proxstrata::numerics;
using ps::Stratum;
using testsupport::design_data;

namespace {

constexpr int kAT = ps::index(Stratum::AlwaysTaker);
constexpr int kCO = ps::index(Stratum::Complier);
constexpr int kNT = ps::index(Stratum::NeverTaker);

/// Dataset from columns; covariates optional.
ps::Dataset make_data(const Eigen::VectorXd& z, const Eigen::VectorXd& s, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& a, const Eigen::VectorXd& w,
                      const std::vector<Eigen::VectorXd>& c = {}) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  ps::RawColumns r{vec(z), vec(s), vec(y), vec(a), vec(w), {}};
  for (const auto& col : c) r.c.push_back(vec(col));
  return ps::validate_dataset(r);
}

/// Random dataset with all four cells and a given S / Z rule.
ps::Dataset noise_data(std::uint64_t seed, Eigen::Index n, double s_prob, double z_prob) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd z(n), s(n), y(n), a(n), w(n), c(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    z(i) = u(rng) < z_prob ? 1 : 0;
    s(i) = u(rng) < s_prob ? 1 : 0;
    y(i) = nd(rng);
    a(i) = nd(rng);
    w(i) = nd(rng);
    c(i) = nd(rng);
  }
  return make_data(z, s, y, a, w, {c});
}

struct Bin {
  double weight_sum[3] = {0, 0, 0};
  double freq[3] = {0, 0, 0};
  long count = 0;
};

}  // namespace

// ---------------------------------------------------------------------------
// Nuisance models.

TEST(ProbitMle, MatchesLikelihoodGridOn200Rows) {
  const testsupport::ProbitSample sample = testsupport::probit_sample(515);
  // Put the sample into a dataset as treatment on (1, a, c).
  Eigen::VectorXd s(200), y = Eigen::VectorXd::Zero(200);
  for (Eigen::Index i = 0; i < 200; ++i) s(i) = i % 2;
  const ps::Dataset d = make_data(sample.y, s, y, sample.x.col(1), sample.x.col(2), {sample.x.col(2)});
  const est::TreatmentFit fit = est::fit_treatment(d);
  ASSERT_TRUE(fit.solution.converged);
  EXPECT_LE(fit.solution.moment_norm, 1e-8);
  const Eigen::VectorXd grid = testsupport::probit_grid_mle(sample.x, sample.y);
  EXPECT_LE((fit.beta.to_vector() - grid).lpNorm<Eigen::Infinity>(), 1e-3);
}

TEST(ProbitMle, InterceptOnlyIsQuantileOfMean) {
  const ps::Dataset d = noise_data(4, 1000, 0.5, 0.5);
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(d.n(), 1);
  const est::ProbitFit fit = est::probit_mle(ones, d.z(), Eigen::VectorXd::Zero(1));
  ASSERT_TRUE(fit.solution.converged);
  EXPECT_NEAR(fit.coef(0), nm::std_normal_quantile(d.z().mean()), 1e-8);
}

TEST(FitTreatment, RecoversDesignCoefficients) {
  const auto d = design_data(50000, 0.2, 101);
  const est::TreatmentFit fit = est::fit_treatment(d.data);
  EXPECT_NEAR(fit.beta.b0, 0.0, 0.05);
  EXPECT_NEAR(fit.beta.ba, 1.0, 0.05);
  EXPECT_NEAR(fit.beta.bc(0), 1.0, 0.05);
  EXPECT_LE(fit.solution.moment_norm, 1e-8);
}

TEST(FitTreatment, SeparationIsAnError) {
  ps::Dataset base = noise_data(6, 400, 0.5, 0.5);
  Eigen::VectorXd z(base.n());
  for (Eigen::Index i = 0; i < base.n(); ++i) z(i) = base.a()(i) > 0 ? 1 : 0;
  const ps::Dataset d = make_data(z, base.s(), base.y(), base.a(), base.w(), {base.c().col(0)});
  try {
    est::fit_treatment(d);
    FAIL();
  } catch (const ps::EstimationError& e) {
    EXPECT_EQ(e.step(), "fit_treatment");
  }
}

TEST(FitWModel, RecoversDesignCoefficients) {
  const auto d = design_data(50000, 0.2, 102);
  const est::WModelFit fit = est::fit_w_model(d.data);
  const sim::DgpConfig cfg;
  EXPECT_NEAR(fit.gamma.g0, 1.0, 0.05);
  EXPECT_NEAR(fit.gamma.gz, 0.5, 0.05);
  EXPECT_NEAR(fit.gamma.ga, 0.75, 0.05);
  EXPECT_NEAR(fit.gamma.gc(0), 1.5, 0.05);
  EXPECT_NEAR(fit.gamma.gc2(0), -1.5, 0.05);
  EXPECT_NEAR(fit.gamma.sigma_w, 0.5, 0.05);
  EXPECT_FALSE(fit.degenerate);
  // Normal equations.
  const Eigen::MatrixXd x = ps::w_design(d.data.z(), d.data.a(), d.data.c(), true);
  const Eigen::VectorXd ne = x.transpose() * (d.data.w() - x * fit.gamma.coef()) / 50000.0;
  EXPECT_LE(ne.lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(FitWModel, ExactFitIsFlaggedDegenerate) {
  const ps::Dataset base = noise_data(7, 300, 0.5, 0.5);
  const Eigen::VectorXd c = base.c().col(0);
  const Eigen::VectorXd w = (1.0 + 0.5 * base.z().array() + 0.75 * base.a().array() + 1.5 * c.array() -
                             1.5 * c.array().square())
                                .matrix();
  const ps::Dataset d = make_data(base.z(), base.s(), base.y(), base.a(), w, {c});
  const est::WModelFit fit = est::fit_w_model(d);
  EXPECT_TRUE(fit.degenerate);
  EXPECT_LE(fit.gamma.sigma_w, 1e-10);
}

TEST(FitWModel, CollinearColumnsAreNamed) {
  const ps::Dataset base = noise_data(8, 300, 0.5, 0.5);
  const ps::Dataset d = make_data(base.z(), base.s(), base.y(), base.a(), base.w(), {base.a()});
  try {
    est::fit_w_model(d);
    FAIL();
  } catch (const ps::EstimationError& e) {
    const std::string msg = e.what();
    EXPECT_EQ(e.step(), "fit_w_model");
    EXPECT_TRUE(msg.find("c1") != std::string::npos || msg.find(" a") != std::string::npos) << msg;
  }
}

// ---------------------------------------------------------------------------
// Bridge.

TEST(FitBridge, InterceptOnlyRoot) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ps::Dataset base = noise_data(9, 2000, 0.5, 0.5);
  Eigen::VectorXd s(base.n());
  const double p = nm::std_normal_cdf(0.3);
  for (Eigen::Index i = 0; i < base.n(); ++i) s(i) = u(rng) < p ? 1 : 0;
  const ps::Dataset d = make_data(base.z(), s, base.y(), base.a(), base.w(), {base.c().col(0)});
  est::EstimationConfig cfg;
  cfg.bridge_squares = false;
  cfg.bridge_instruments = {est::InstrumentTerm::One};
  est::BridgeLayout layout;
  layout.z = layout.w = layout.c = false;
  const est::BridgeFit fit = est::fit_bridge(d, cfg, nullptr, layout);
  EXPECT_NEAR(fit.alpha.a0, nm::std_normal_quantile(s.mean()), 1e-8);
  EXPECT_LE(fit.solution.moment_norm, 1e-8);
}

TEST(FitBridge, MomentResidualAtSolution) {
  const auto d = design_data(5000, 0.2, 103);
  const est::BridgeFit fit = est::fit_bridge(d.data, est::EstimationConfig{});
  ASSERT_TRUE(fit.solution.converged);
  EXPECT_LE(fit.solution.moment_norm, 1e-8);
  // Recompute the moments independently.
  const Eigen::MatrixXd b = est::instrument_matrix(d.data, est::EstimationConfig{}.bridge_instruments);
  Eigen::VectorXd r(d.data.n());
  for (Eigen::Index i = 0; i < d.data.n(); ++i) {
    r(i) = d.data.s()(i) - ps::bridge_h(d.data.zi(i), d.data.w()(i), d.data.c().row(i), fit.alpha);
  }
  EXPECT_LE((b.transpose() * r / static_cast<double>(d.data.n())).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(FitBridge, RecoversAnalyticBridgeAtLargeN) {
  const auto d = design_data(1000000, 0.2, 104);
  const est::BridgeFit fit = est::fit_bridge(d.data, est::EstimationConfig{});
  sim::DgpConfig cfg;
  cfg.zeta_u = 0.2;
  const ps::BridgeParams truth = sim::derive_true_bridge(cfg);
  EXPECT_LE((fit.alpha.to_vector() - truth.to_vector()).lpNorm<Eigen::Infinity>(), 0.02)
      << fit.alpha.to_vector().transpose() << " vs " << truth.to_vector().transpose();
}

TEST(FitBridge, OverIdentifiedUsesTwoStep) {
  const auto d = design_data(5000, 0.2, 105);
  est::EstimationConfig cfg;
  cfg.bridge_instruments.push_back(est::InstrumentTerm::A2);
  cfg.bridge_instruments.push_back(est::InstrumentTerm::ZA);
  const est::BridgeFit fit = est::fit_bridge(d.data, cfg);
  ASSERT_TRUE(fit.solution.converged);
  EXPECT_LE(fit.solution.gradient_norm, 1e-8);
  EXPECT_EQ(fit.solution.weight.rows(), 7);
}

TEST(FitBridge, TooFewInstrumentsIsAConfigError) {
  const auto d = design_data(1000, 0.2, 106);
  est::EstimationConfig cfg;
  cfg.bridge_instruments = {est::InstrumentTerm::One, est::InstrumentTerm::Z};
  EXPECT_THROW(est::fit_bridge(d.data, cfg), ps::ConfigError);
}

// ---------------------------------------------------------------------------
// Weights given (A, C).

TEST(WeightsAc, BridgeWithoutWNeedsNoIntegration) {
  const auto d = design_data(500, 0.2, 107);
  ps::BridgeParams alpha;
  alpha.a0 = -0.4;
  alpha.log_gap = 0.1;
  alpha.aw = 0.0;
  alpha.ac = Eigen::VectorXd::Constant(1, 0.6);
  alpha.ac2 = Eigen::VectorXd::Constant(1, 0.2);
  const est::WModelFit g = est::fit_w_model(d.data);
  const est::TreatmentFit b = est::fit_treatment(d.data);
  const ps::StrataWeights w = est::weights_ac(d.data, alpha, g.gamma, b.beta);
  for (Eigen::Index i = 0; i < d.data.n(); ++i) {
    const double h0 = ps::bridge_h(0, 123.0, d.data.c().row(i), alpha);
    EXPECT_NEAR(w.omega[0](i, kAT), h0, 1e-14);
    EXPECT_NEAR(w.omega[1](i, kAT), h0, 1e-14);
  }
}

TEST(WeightsAc, ClosedFormMatchesQuadrature64OnFittedModels) {
  for (std::uint64_t seed : {111u, 112u, 113u}) {
    const auto d = design_data(2000, 0.5, seed);
    const est::FitResult fit = est::estimate(d.data, est::EstimationConfig{});
    const auto& p = fit.params;
    const ps::StrataWeights closed = est::weights_ac(d.data, p.alpha, p.gamma, p.beta);
    const ps::StrataWeights quad =
        est::weights_ac(d.data, p.alpha, p.gamma, p.beta, est::parse_integral("quad:64"));
    for (int z = 0; z < 2; ++z) {
      EXPECT_LE((closed.omega[z] - quad.omega[z]).lpNorm<Eigen::Infinity>(), 1e-8);
    }
    EXPECT_LE((closed.pi - quad.pi).lpNorm<Eigen::Infinity>(), 1e-8);
  }
}

TEST(WeightsAc, MatchesLatentStrataFrequenciesWithoutConfounding) {
  const auto d = design_data(50000, 0.0, 114);
  const est::FitResult fit = est::estimate(d.data, est::EstimationConfig{});
  const ps::StrataWeights& w = fit.weights;
  // Bins: Z arm by sign of C.
  Bin bins[4];
  for (Eigen::Index i = 0; i < d.data.n(); ++i) {
    const int z = d.data.zi(i);
    Bin& b = bins[2 * z + (d.data.c()(i, 0) > 0 ? 1 : 0)];
    ++b.count;
    for (int g = 0; g < 3; ++g) {
      b.weight_sum[g] += w.omega[z](i, g);
      b.freq[g] += ps::index(d.g[static_cast<std::size_t>(i)]) == g ? 1.0 : 0.0;
    }
  }
  for (const Bin& b : bins) {
    ASSERT_GT(b.count, 2000);
    for (int g = 0; g < 3; ++g) {
      EXPECT_NEAR(b.weight_sum[g] / b.count, b.freq[g] / b.count, 0.03) << g;
    }
  }
}

TEST(WeightsAc, SatisfiesSimplexInvariants) {
  const auto d = design_data(3000, 0.5, 115);
  const est::FitResult fit = est::estimate(d.data, est::EstimationConfig{});
  const auto inv = testsupport::weight_invariants(fit.weights);
  EXPECT_LE(inv.omega_sum, 1e-10);
  EXPECT_LE(inv.eta_sum, 1e-10);
  EXPECT_LE(inv.pi_sum, 1e-10);
  EXPECT_EQ(inv.range, 0.0);
  EXPECT_EQ(fit.weights.conditioning, ps::Conditioning::AC);
}

TEST(FinalizeWeights, RangeChecksAndClipping) {
  const Eigen::Index n = 3;
  Eigen::MatrixXd om(n, 3);
  om << 0.2, 0.3, 0.5,
        -2e-6, 0.5, 0.500002,
        0.0, 0.4, 0.6;
  Eigen::MatrixXd arm(n, 2);
  arm.setConstant(0.5);
  const ps::StrataWeights w =
      est::detail::finalize_weights("t", {om, om}, arm, ps::Conditioning::AC);
  EXPECT_EQ(w.out_of_range_units, 1u);
  EXPECT_EQ(w.clipped_units, 2u);
  ASSERT_EQ(w.warnings.size(), 1u);
  EXPECT_GE(w.omega[0].minCoeff(), est::kWeightClip * 0.99);
  const auto inv = testsupport::weight_invariants(w);
  EXPECT_LE(inv.omega_sum, 1e-12);
  Eigen::MatrixXd bad = om;
  bad(0, 0) = -0.2;
  try {
    est::detail::finalize_weights("weights_ac", {bad, om}, arm, ps::Conditioning::AC);
    FAIL();
  } catch (const ps::EstimationError& e) {
    EXPECT_EQ(e.step(), "weights_ac");
  }
}

// ---------------------------------------------------------------------------
// Strata model given X.

TEST(FitPsi, ExactTargetsWithoutWRecoverPlainProbit) {
  const auto d = design_data(2000, 0.2, 120);
  const ps::Dataset& data = d.data;
  const est::WModelFit g = est::fit_w_model(data);
  ps::StrataParams truth;
  truth.p0 = 0.3;
  truth.log_gap = -0.2;
  truth.pz = 0.4;
  truth.pw = 0.0;
  truth.pa = -0.3;
  truth.pc = Eigen::VectorXd::Constant(1, 0.8);
  std::array<Eigen::MatrixXd, 2> om;
  for (int z = 0; z < 2; ++z) {
    om[z].resize(data.n(), 3);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      const auto pr = ps::strata_probs_psi(z, data.a()(i), 0.0, data.c().row(i), truth);
      for (int k = 0; k < 3; ++k) om[z](i, k) = pr[static_cast<std::size_t>(k)];
    }
  }
  Eigen::MatrixXd arm(data.n(), 2);
  arm.setConstant(0.5);
  const ps::StrataWeights wac =
      est::detail::finalize_weights("t", om, arm, ps::Conditioning::AC);
  const est::PsiFit fit = est::fit_psi(data, wac, g.gamma);
  ASSERT_TRUE(fit.solution.converged);
  EXPECT_LE((fit.psi.to_vector() - truth.to_vector()).lpNorm<Eigen::Infinity>(), 1e-6)
      << fit.psi.to_vector().transpose();
  EXPECT_LE(fit.solution.moment_norm, 1e-8);
}

TEST(FitPsi, ImpliedPotentialValueProbabilitiesMatchLatentFrequencies) {
  const auto d = design_data(50000, 0.2, 121, ps::OutcomeCase::III);
  est::EstimationConfig cfg;
  cfg.outcome_case = ps::OutcomeCase::III;
  const est::FitResult fit = est::estimate(d.data, cfg);
  ASSERT_TRUE(fit.params.psi.has_value());
  const ps::StrataParams& psi = *fit.params.psi;
  const ps::WModelParams& gm = fit.params.gamma;
  const double scale = std::sqrt(1.0 + psi.pw * psi.pw * gm.sigma_w * gm.sigma_w);
  for (int z = 0; z < 2; ++z) {
    for (int t = 0; t < 2; ++t) {
      double implied = 0.0, freq = 0.0;
      long count = 0;
      for (Eigen::Index i = 0; i < d.data.n(); ++i) {
        if (d.data.zi(i) != z) continue;
        const double m = ps::w_model(z, d.data.a()(i), d.data.c().row(i), gm).mean;
        const double idx = psi.p0 + std::exp(psi.log_gap) * (t - 1) + psi.pz * z + psi.pa * d.data.a()(i) +
                           psi.pc(0) * d.data.c()(i, 0) + psi.pw * m;
        implied += nm::std_normal_cdf(idx / scale);
        freq += t ? d.s1[static_cast<std::size_t>(i)] : d.s0[static_cast<std::size_t>(i)];
        ++count;
      }
      EXPECT_NEAR(implied / count, freq / count, 0.03) << "z=" << z << " t=" << t;
    }
  }
  for (const auto& s : fit.diagnostics.steps) {
    if (s.step == "fit_psi") {
      EXPECT_TRUE(s.over_identified);
      EXPECT_LE(s.gradient_norm, 1e-8);
    }
  }
}

TEST(WeightsX, CommonDensityFactorCancelsWhenWIgnoresZ) {
  const auto d = design_data(1000, 0.2, 122);
  ps::StrataParams psi;
  psi.p0 = 0.2;
  psi.log_gap = 0.0;
  psi.pz = 0.1;
  psi.pw = 0.5;
  psi.pa = 0.2;
  psi.pc = Eigen::VectorXd::Constant(1, 0.7);
  ps::TreatmentParams beta;
  beta.ba = 1.0;
  beta.bc = Eigen::VectorXd::Constant(1, 1.0);
  est::WModelFit g = est::fit_w_model(d.data);
  g.gamma.gz = 0.0;
  const ps::StrataWeights w = est::weights_x(d.data, psi, beta, g.gamma);
  for (Eigen::Index i = 0; i < d.data.n(); ++i) {
    const double p1 = ps::treatment_prob(d.data.a()(i), d.data.c().row(i), beta);
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(w.pi(i, k), (1 - p1) * w.omega[0](i, k) + p1 * w.omega[1](i, k), 1e-12);
    }
  }
  const auto inv = testsupport::weight_invariants(w);
  EXPECT_LE(inv.omega_sum, 1e-10);
  EXPECT_LE(inv.pi_sum, 1e-10);
  EXPECT_EQ(w.conditioning, ps::Conditioning::X);
}

TEST(WeightsX, MatchesLatentStrataFrequenciesInCovariateBins) {
  const auto d = design_data(50000, 0.2, 123, ps::OutcomeCase::IV);
  est::EstimationConfig cfg;
  cfg.outcome_case = ps::OutcomeCase::IV;
  const est::FitResult fit = est::estimate(d.data, cfg);
  const ps::StrataWeights& w = fit.weights;
  Bin bins[4];
  for (Eigen::Index i = 0; i < d.data.n(); ++i) {
    Bin& b = bins[(d.data.w()(i) > 1.0 ? 2 : 0) + (d.data.c()(i, 0) > 0 ? 1 : 0)];
    ++b.count;
    for (int g = 0; g < 3; ++g) {
      b.weight_sum[g] += w.pi(i, g);
      b.freq[g] += ps::index(d.g[static_cast<std::size_t>(i)]) == g ? 1.0 : 0.0;
    }
  }
  for (const Bin& b : bins) {
    ASSERT_GT(b.count, 2000);
    for (int g = 0; g < 3; ++g) EXPECT_NEAR(b.weight_sum[g] / b.count, b.freq[g] / b.count, 0.03);
  }
  const auto inv = testsupport::weight_invariants(w);
  EXPECT_LE(inv.omega_sum, 1e-10);
  EXPECT_LE(inv.eta_sum, 1e-10);
  EXPECT_LE(inv.pi_sum, 1e-10);
}

// ---------------------------------------------------------------------------
// Outcome means and effects.

TEST(FitOutcome, RecoversDesignInterceptsAtLargeN) {
  const auto d = design_data(50000, 0.2, 130);
  const est::FitResult fit = est::estimate(d.data, est::EstimationConfig{});
  const sim::DgpConfig cfg;
  for (int z = 0; z < 2; ++z) {
    for (int g = 0; g < 3; ++g) {
      EXPECT_NEAR(fit.params.theta.intercept[z][g], cfg.theta[z][g], 0.1) << z << g;
    }
  }
  EXPECT_NEAR(fit.params.theta.theta_c(0), 1.0, 0.1);
}

TEST(FitOutcome, ResidualsOrthogonalToMixtureColumns) {
  const auto d = design_data(5000, 0.2, 131, ps::OutcomeCase::IV);
  est::EstimationConfig cfg;
  cfg.outcome_case = ps::OutcomeCase::IV;
  const est::FitResult fit = est::estimate(d.data, cfg);
  const ps::OutcomeParams& th = fit.params.theta;
  const ps::StrataWeights& w = fit.weights;
  const Eigen::Index n = d.data.n();
  // Fitted cell mean: sum over the cell's strata of eta times mu.
  Eigen::VectorXd r(n);
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int z = d.data.zi(i), s = d.data.si(i);
    const double slope = th.theta_c(0) * d.data.c()(i, 0) + th.theta_a * d.data.a()(i) +
                         th.theta_w * d.data.w()(i);
    double fitted = 0.0;
    if (z == 0 && s == 1) {
      fitted = th.intercept[0][kAT];
      cols(i, kAT) = 1;
    } else if (z == 1 && s == 0) {
      fitted = th.intercept[1][kNT];
      cols(i, 3 + kNT) = 1;
    } else if (z == 1) {
      fitted = w.eta[1](i, kAT) * th.intercept[1][kAT] + w.eta[1](i, kCO) * th.intercept[1][kCO];
      cols(i, 3 + kAT) = w.eta[1](i, kAT);
      cols(i, 3 + kCO) = w.eta[1](i, kCO);
    } else {
      fitted = w.eta[0](i, kNT) * th.intercept[0][kNT] + w.eta[0](i, kCO) * th.intercept[0][kCO];
      cols(i, kNT) = w.eta[0](i, kNT);
      cols(i, kCO) = w.eta[0](i, kCO);
    }
    r(i) = d.data.y()(i) - fitted - slope;
  }
  EXPECT_LE((cols.transpose() * r / static_cast<double>(n)).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_LE(std::abs(r.dot(d.data.w()) / static_cast<double>(n)), 1e-8);
}

TEST(FitOutcome, NoCompliersReducesToNeverTakerMean) {
  const ps::Dataset d0 = noise_data(132, 400, 0.5, 0.5);
  const ps::Dataset d = make_data(d0.z(), d0.s(), d0.y(), d0.a(), d0.w());
  const Eigen::Index n = d.n();
  Eigen::MatrixXd om(n, 3);
  om.col(kAT).setConstant(0.5);
  om.col(kCO).setZero();
  om.col(kNT).setConstant(0.5);
  Eigen::MatrixXd arm(n, 2);
  arm.setConstant(0.5);
  // Clipping leaves complier weights at 1e-8, below the zero-column threshold.
  const ps::StrataWeights w = est::detail::finalize_weights("t", {om, om}, arm, ps::Conditioning::AC);
  const est::OutcomeFit fit = est::fit_outcome(d, w, est::EstimationConfig{});
  double sum = 0.0;
  long count = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d.zi(i) == 0 && d.si(i) == 0) {
      sum += d.y()(i);
      ++count;
    }
  }
  EXPECT_NEAR(fit.theta.intercept[0][kNT], sum / count, 1e-6);
  EXPECT_TRUE(std::isnan(fit.theta.intercept[0][kCO]));
  EXPECT_TRUE(std::isnan(fit.theta.intercept[1][kCO]));
  EXPECT_EQ(fit.diagnostics.size(), 2u);
}

TEST(FitOutcome, RankDeficiencyNamesTheBlock) {
  const auto d = design_data(1000, 0.2, 133);
  const Eigen::Index n = d.data.n();
  Eigen::MatrixXd om(n, 3);
  om.col(kAT).setConstant(0.3);
  om.col(kCO).setConstant(0.3);
  om.col(kNT).setConstant(0.4);
  Eigen::MatrixXd arm(n, 2);
  arm.setConstant(0.5);
  const ps::StrataWeights w = est::detail::finalize_weights("t", {om, om}, arm, ps::Conditioning::AC);
  try {
    est::fit_outcome(d.data, w, est::EstimationConfig{});
    FAIL();
  } catch (const ps::EstimationError& e) {
    EXPECT_EQ(e.step(), "fit_outcome");
    EXPECT_NE(std::string(e.what()).find("(z=0,s=0)"), std::string::npos) << e.what();
  }
}

TEST(FitOutcome, ConditioningMustMatchCase) {
  const auto d = design_data(1000, 0.2, 134);
  const est::FitResult fit = est::estimate(d.data, est::EstimationConfig{});
  est::EstimationConfig cfg;
  cfg.outcome_case = ps::OutcomeCase::III;
  EXPECT_THROW(est::fit_outcome(d.data, fit.weights, cfg), ps::ConfigError);
}

TEST(FitOutcome, ExtraInstrumentsOverIdentify) {
  const auto d = design_data(3000, 0.2, 135, ps::OutcomeCase::II);
  est::EstimationConfig cfg;
  cfg.outcome_case = ps::OutcomeCase::II;
  cfg.outcome_instruments = {est::OutcomeInstrument::W};
  const est::FitResult fit = est::estimate(d.data, cfg);
  const auto& s = fit.diagnostics.steps.back();
  EXPECT_EQ(s.step, "fit_outcome");
  EXPECT_TRUE(s.over_identified);
  EXPECT_LE(s.gradient_norm, 1e-8);
  for (int g = 0; g < 3; ++g) EXPECT_NEAR(fit.effects.delta[g], 2.0, 0.5);
}

TEST(PrincipalEffects, ConstantWeightsGiveInterceptGaps) {
  const auto d = design_data(300, 0.2, 140);
  const Eigen::Index n = d.data.n();
  ps::StrataWeights w;
  w.pi = Eigen::MatrixXd(n, 3);
  w.pi.col(0).setConstant(0.2);
  w.pi.col(1).setConstant(0.5);
  w.pi.col(2).setConstant(0.3);
  ps::OutcomeParams th;
  th.intercept = {{{1.0, 2.0, 3.0}, {1.5, 4.0, 2.0}}};
  th.theta_c = Eigen::VectorXd::Zero(1);
  const ps::EffectEstimates e = est::principal_effects(d.data, w, th, ps::OutcomeCase::I);
  EXPECT_NEAR(e.delta[0], 0.5, 1e-14);
  EXPECT_NEAR(e.delta[1], 2.0, 1e-14);
  EXPECT_NEAR(e.delta[2], -1.0, 1e-14);
  for (int g = 0; g < 3; ++g) EXPECT_EQ(e.delta[g], e.mu[1][g] - e.mu[0][g]);
  w.pi.col(1).setConstant(1e-7);
  try {
    est::principal_effects(d.data, w, th, ps::OutcomeCase::I);
    FAIL();
  } catch (const ps::EstimationError& err) {
    EXPECT_NE(std::string(err.what()).find("empty stratum"), std::string::npos);
  }
}

TEST(Pipeline, SingleRunNearTruth) {
  const auto d = design_data(5000, 0.2, 141);
  const est::FitResult fit = est::estimate(d.data, est::EstimationConfig{});
  EXPECT_NEAR(fit.effects.delta[kAT], 2.0, 3 * 0.035);
  for (const auto& s : fit.diagnostics.steps) {
    EXPECT_TRUE(s.converged) << s.step;
    EXPECT_LE(s.over_identified ? s.gradient_norm : s.moment_norm, 1e-8) << s.step;
  }
}

TEST(Pipeline, PureFunctionOfInputs) {
  const auto d = design_data(2000, 0.2, 142);
  const est::FitResult a = est::estimate(d.data, est::EstimationConfig{});
  const est::FitResult b = est::estimate(d.data, est::EstimationConfig{});
  EXPECT_EQ(a.effects.delta, b.effects.delta);
  EXPECT_EQ(a.effects.mu, b.effects.mu);
}

TEST(Pipeline, NaiveWeightsSatisfyInvariants) {
  const auto d = design_data(3000, 0.5, 143);
  est::EstimationConfig cfg;
  cfg.strata_method = est::StrataMethod::NaiveProbit;
  const est::FitResult fit = est::estimate(d.data, cfg);
  ASSERT_TRUE(fit.naive_coef.has_value());
  const auto inv = testsupport::weight_invariants(fit.weights);
  EXPECT_LE(inv.omega_sum, 1e-10);
  EXPECT_LE(inv.eta_sum, 1e-10);
  EXPECT_LE(inv.pi_sum, 1e-10);
  EXPECT_EQ(fit.weights.omega[0], fit.weights.omega[1]);
}

// ---------------------------------------------------------------------------
// Bootstrap.

TEST(Quantile, Type7) {
  EXPECT_DOUBLE_EQ(est::quantile_type7({4, 1, 3, 2}, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(est::quantile_type7({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(est::quantile_type7({5}, 0.3), 5.0);
}

TEST(Bootstrap, ZeroRepsGivesPointOnly) {
  const auto d = design_data(1000, 0.2, 150);
  const ps::EffectEstimates e = est::bootstrap(d.data, est::EstimationConfig{});
  EXPECT_FALSE(e.ci_lower.has_value());
  EXPECT_FALSE(e.ci_upper.has_value());
  EXPECT_EQ(e.bootstrap_reps, 0);
}

TEST(Bootstrap, DeterministicAcrossRunsAndThreads) {
  const auto d = design_data(1000, 0.2, 151);
  est::EstimationConfig cfg;
  cfg.bootstrap_reps = 40;
  cfg.seed = 99;
  const ps::EffectEstimates a = est::bootstrap(d.data, cfg);
  const ps::EffectEstimates b = est::bootstrap(d.data, cfg);
  cfg.threads = 3;
  const ps::EffectEstimates c = est::bootstrap(d.data, cfg);
  ASSERT_TRUE(a.ci_lower && a.ci_upper);
  EXPECT_EQ(*a.ci_lower, *b.ci_lower);
  EXPECT_EQ(*a.ci_upper, *b.ci_upper);
  EXPECT_EQ(*a.ci_lower, *c.ci_lower);
  EXPECT_EQ(*a.ci_upper, *c.ci_upper);
  for (int g = 0; g < 3; ++g) {
    EXPECT_LE((*a.ci_lower)[g], a.delta[g]);
    EXPECT_GE((*a.ci_upper)[g], a.delta[g]);
  }
  cfg.seed = 100;
  const ps::EffectEstimates e = est::bootstrap(d.data, cfg);
  EXPECT_NE(*a.ci_lower, *e.ci_lower);
}

TEST(Bootstrap, NormalIntervalIsSymmetricAboutPoint) {
  const auto d = design_data(1000, 0.2, 152);
  est::EstimationConfig cfg;
  cfg.bootstrap_reps = 30;
  cfg.interval = est::IntervalKind::Normal;
  const est::BootstrapRun run = est::run_bootstrap(d.data, cfg);
  for (int g = 0; g < 3; ++g) {
    EXPECT_NEAR(run.effects.delta[g] - (*run.effects.ci_lower)[g],
                (*run.effects.ci_upper)[g] - run.effects.delta[g], 1e-12);
  }
  EXPECT_EQ(run.draws.size(), 30u);
}

TEST(Bootstrap, ExcessiveFailuresAreAnError) {
  // One unit alone in cell (0,1): about a third of resamples lose the cell.
  const ps::Dataset base = noise_data(153, 60, 0.5, 0.5);
  Eigen::VectorXd s = base.s();
  bool kept = false;
  for (Eigen::Index i = 0; i < base.n(); ++i) {
    if (base.zi(i) == 0 && s(i) == 1) {
      if (kept) s(i) = 0;
      kept = true;
    }
  }
  const ps::Dataset d = make_data(base.z(), s, base.y(), base.a(), base.w(), {base.c().col(0)});
  est::EstimationConfig cfg;
  cfg.strata_method = est::StrataMethod::NaiveProbit;
  cfg.bootstrap_reps = 50;
  try {
    est::run_bootstrap(d, cfg);
    FAIL();
  } catch (const ps::EstimationError& e) {
    EXPECT_EQ(e.step(), "bootstrap");
    EXPECT_NE(std::string(e.what()).find("resample="), std::string::npos) << e.what();
  }
}

TEST(EstimationConfig, IntegralParsing) {
  EXPECT_EQ(est::parse_integral("closed").kind, est::IntegralMethod::Kind::ClosedForm);
  const est::IntegralMethod q = est::parse_integral("quad:48");
  EXPECT_EQ(q.kind, est::IntegralMethod::Kind::Quadrature);
  EXPECT_EQ(q.order, 48);
  EXPECT_THROW(est::parse_integral("quad:0"), ps::ConfigError);
  EXPECT_THROW(est::parse_integral("simpson"), ps::ConfigError);
  est::EstimationConfig cfg;
  cfg.outcome_case = ps::OutcomeCase::IV;
  EXPECT_TRUE(cfg.psi_required());
  cfg.outcome_case = ps::OutcomeCase::I;
  EXPECT_FALSE(cfg.psi_required());
}
