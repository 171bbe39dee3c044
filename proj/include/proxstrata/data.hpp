#pragma once

// Observed-data container, principal-stratum vocabulary and the fitted
// parameter bundles shared by every estimator.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "proxstrata/errors.hpp"

namespace proxstrata {

/// Principal strata under monotonicity. Defiers have no representation.
enum class Stratum : int { AlwaysTaker = 0, Complier = 1, NeverTaker = 2 };

inline constexpr std::array<Stratum, 3> kStrata = {
    Stratum::AlwaysTaker, Stratum::Complier, Stratum::NeverTaker};

inline constexpr int index(Stratum g) { return static_cast<int>(g); }

/// Short codes used in every output file: ss, ssbar, sbarsbar.
inline std::string_view to_string(Stratum g) {
  switch (g) {
    case Stratum::AlwaysTaker: return "ss";
    case Stratum::Complier: return "ssbar";
    case Stratum::NeverTaker: return "sbarsbar";
  }
  return "?";
}

/// Raw, unvalidated columns. `c` holds p covariate columns of length n each.
struct RawColumns {
  std::vector<double> z, s, y, a, w;
  std::vector<std::vector<double>> c;
};

/// Validated observed data: binary z and s, finite y, a, w, c, both arms
/// present and all four (z, s) cells nonempty. Immutable once built.
class Dataset {
 public:
  static Dataset validate(const RawColumns& raw);

  Eigen::Index n() const { return y_.size(); }
  Eigen::Index p() const { return c_.cols(); }

  const Eigen::VectorXd& z() const { return z_; }
  const Eigen::VectorXd& s() const { return s_; }
  const Eigen::VectorXd& y() const { return y_; }
  const Eigen::VectorXd& a() const { return a_; }
  const Eigen::VectorXd& w() const { return w_; }
  /// n x p covariate matrix.
  const Eigen::MatrixXd& c() const { return c_; }

  int zi(Eigen::Index i) const { return z_(i) > 0.5 ? 1 : 0; }
  int si(Eigen::Index i) const { return s_(i) > 0.5 ? 1 : 0; }

  /// Units drawn (with repetition) by index; revalidated.
  Dataset resample(const std::vector<Eigen::Index>& rows) const;

  RawColumns to_raw() const;

 private:
  Dataset() = default;
  Eigen::VectorXd z_, s_, y_, a_, w_;
  Eigen::MatrixXd c_;
};

inline Dataset validate_dataset(const RawColumns& raw) {
  return Dataset::validate(raw);
}

inline Dataset Dataset::validate(const RawColumns& raw) {
  std::vector<Violation> violations;
  const std::size_t n = raw.y.size();
  auto check_length = [&](const std::vector<double>& col, const char* name) {
    if (col.size() != n) {
      violations.push_back(
          {std::string("column length mismatch: ") + name + " has " +
               std::to_string(col.size()) + " rows, y has " + std::to_string(n),
           {}});
    }
  };
  check_length(raw.z, "z");
  check_length(raw.s, "s");
  check_length(raw.a, "a");
  check_length(raw.w, "w");
  for (std::size_t j = 0; j < raw.c.size(); ++j) {
    check_length(raw.c[j], ("c" + std::to_string(j + 1)).c_str());
  }
  if (n == 0) violations.push_back({"empty dataset", {}});
  if (!violations.empty()) throw ValidationError(std::move(violations));

  auto binary_rule = [&](const std::vector<double>& col, const char* name) {
    Violation v{std::string("non-binary ") + name, {}};
    for (std::size_t i = 0; i < n; ++i) {
      if (!(col[i] == 0.0 || col[i] == 1.0)) v.rows.push_back(i);
    }
    if (!v.rows.empty()) violations.push_back(std::move(v));
  };
  auto finite_rule = [&](const std::vector<double>& col,
                         const std::string& name) {
    Violation v{"non-finite " + name, {}};
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(col[i])) v.rows.push_back(i);
    }
    if (!v.rows.empty()) violations.push_back(std::move(v));
  };
  binary_rule(raw.z, "z");
  binary_rule(raw.s, "s");
  finite_rule(raw.y, "y");
  finite_rule(raw.a, "a");
  finite_rule(raw.w, "w");
  for (std::size_t j = 0; j < raw.c.size(); ++j) {
    finite_rule(raw.c[j], "c" + std::to_string(j + 1));
  }
  if (!violations.empty()) throw ValidationError(std::move(violations));

  std::array<std::size_t, 4> cells{};
  for (std::size_t i = 0; i < n; ++i) {
    ++cells[static_cast<int>(raw.z[i]) * 2 + static_cast<int>(raw.s[i])];
  }
  const std::size_t treated = cells[2] + cells[3];
  if (treated == 0 || treated == n) {
    violations.push_back({"degenerate treatment arm", {}});
  } else {
    for (int zc = 0; zc < 2; ++zc) {
      for (int sc = 0; sc < 2; ++sc) {
        if (cells[zc * 2 + sc] == 0) {
          violations.push_back({"empty (z,s) cell (" + std::to_string(zc) +
                                    "," + std::to_string(sc) + ")",
                                {}});
        }
      }
    }
  }
  if (!violations.empty()) throw ValidationError(std::move(violations));

  Dataset d;
  const auto ni = static_cast<Eigen::Index>(n);
  d.z_ = Eigen::Map<const Eigen::VectorXd>(raw.z.data(), ni);
  d.s_ = Eigen::Map<const Eigen::VectorXd>(raw.s.data(), ni);
  d.y_ = Eigen::Map<const Eigen::VectorXd>(raw.y.data(), ni);
  d.a_ = Eigen::Map<const Eigen::VectorXd>(raw.a.data(), ni);
  d.w_ = Eigen::Map<const Eigen::VectorXd>(raw.w.data(), ni);
  d.c_.resize(ni, static_cast<Eigen::Index>(raw.c.size()));
  for (std::size_t j = 0; j < raw.c.size(); ++j) {
    d.c_.col(static_cast<Eigen::Index>(j)) =
        Eigen::Map<const Eigen::VectorXd>(raw.c[j].data(), ni);
  }
  return d;
}

inline RawColumns Dataset::to_raw() const {
  RawColumns raw;
  auto copy = [](const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  raw.z = copy(z_);
  raw.s = copy(s_);
  raw.y = copy(y_);
  raw.a = copy(a_);
  raw.w = copy(w_);
  for (Eigen::Index j = 0; j < c_.cols(); ++j) raw.c.push_back(copy(c_.col(j)));
  return raw;
}

inline Dataset Dataset::resample(const std::vector<Eigen::Index>& rows) const {
  RawColumns raw;
  const std::size_t m = rows.size();
  raw.z.resize(m);
  raw.s.resize(m);
  raw.y.resize(m);
  raw.a.resize(m);
  raw.w.resize(m);
  raw.c.assign(static_cast<std::size_t>(p()), std::vector<double>(m));
  for (std::size_t k = 0; k < m; ++k) {
    const Eigen::Index i = rows[k];
    raw.z[k] = z_(i);
    raw.s[k] = s_(i);
    raw.y[k] = y_(i);
    raw.a[k] = a_(i);
    raw.w[k] = w_(i);
    for (Eigen::Index j = 0; j < p(); ++j) {
      raw.c[static_cast<std::size_t>(j)][k] = c_(i, j);
    }
  }
  return validate(raw);
}

// ---------------------------------------------------------------------------
// Parameter bundles. Gap parameters are stored on the log scale so that the
// exp-gap keeps the complier probability nonnegative for every value.

/// Bridge h(z,w,c) = Phi(a0 + exp(log_gap) z + aw w + ac'c + ac2'c^2).
/// `ac2` is empty when the bridge basis has no squared covariate terms.
struct BridgeParams {
  double a0 = 0.0;
  double log_gap = 0.0;
  double aw = 0.0;
  Eigen::VectorXd ac;
  Eigen::VectorXd ac2;

  Eigen::Index size() const { return 3 + ac.size() + ac2.size(); }

  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(size());
    v << a0, log_gap, aw, ac, ac2;
    return v;
  }
  static BridgeParams from_vector(const Eigen::VectorXd& v, Eigen::Index p,
                                  bool squares) {
    BridgeParams b;
    b.a0 = v(0);
    b.log_gap = v(1);
    b.aw = v(2);
    b.ac = v.segment(3, p);
    b.ac2 = squares ? Eigen::VectorXd(v.segment(3 + p, p)) : Eigen::VectorXd();
    return b;
  }
};

/// Treatment probit pr(Z=1|A,C) = Phi(b0 + ba a + bc'c).
struct TreatmentParams {
  double b0 = 0.0;
  double ba = 0.0;
  Eigen::VectorXd bc;

  Eigen::Index size() const { return 2 + bc.size(); }
  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(size());
    v << b0, ba, bc;
    return v;
  }
  static TreatmentParams from_vector(const Eigen::VectorXd& v) {
    TreatmentParams t;
    t.b0 = v(0);
    t.ba = v(1);
    t.bc = v.tail(v.size() - 2);
    return t;
  }
};

/// W | Z,A,C ~ N(g0 + gz z + ga a + gc'c + gc2'c^2, sigma_w^2).
struct WModelParams {
  double g0 = 0.0;
  double gz = 0.0;
  double ga = 0.0;
  Eigen::VectorXd gc;
  Eigen::VectorXd gc2;
  double sigma_w = 1.0;

  Eigen::Index size() const { return 3 + gc.size() + gc2.size(); }
  Eigen::VectorXd coef() const {
    Eigen::VectorXd v(size());
    v << g0, gz, ga, gc, gc2;
    return v;
  }
  static WModelParams from_coef(const Eigen::VectorXd& v, Eigen::Index p,
                                bool squares, double sigma_w) {
    WModelParams g;
    g.g0 = v(0);
    g.gz = v(1);
    g.ga = v(2);
    g.gc = v.segment(3, p);
    g.gc2 = squares ? Eigen::VectorXd(v.segment(3 + p, p)) : Eigen::VectorXd();
    g.sigma_w = sigma_w;
    return g;
  }
};

/// Ordered-probit strata model in the potential-value form:
/// pr(S_t=1|Z,X) = Phi(p0 + exp(log_gap)(t-1) + pz z + pw w + pa a + pc'c).
struct StrataParams {
  double p0 = 0.0;
  double log_gap = 0.0;
  double pz = 0.0;
  double pw = 0.0;
  double pa = 0.0;
  Eigen::VectorXd pc;

  Eigen::Index size() const { return 5 + pc.size(); }
  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(size());
    v << p0, log_gap, pz, pw, pa, pc;
    return v;
  }
  static StrataParams from_vector(const Eigen::VectorXd& v) {
    StrataParams s;
    s.p0 = v(0);
    s.log_gap = v(1);
    s.pz = v(2);
    s.pw = v(3);
    s.pa = v(4);
    s.pc = v.tail(v.size() - 5);
    return s;
  }
};

/// Outcome means mu_{z,g}(X) = intercept[z][g] + theta_c'c + theta_a a +
/// theta_w w. Slopes are shared across (z, g); which slopes are active is
/// decided by the outcome case.
struct OutcomeParams {
  std::array<std::array<double, 3>, 2> intercept{};
  Eigen::VectorXd theta_c;
  double theta_a = 0.0;
  double theta_w = 0.0;

  double& at(int z, Stratum g) { return intercept[z][index(g)]; }
  double at(int z, Stratum g) const { return intercept[z][index(g)]; }
};

struct ParamSet {
  BridgeParams alpha;
  TreatmentParams beta;
  WModelParams gamma;
  std::optional<StrataParams> psi;
  OutcomeParams theta;
};

// ---------------------------------------------------------------------------

enum class Conditioning { AC, X };

inline std::string_view to_string(Conditioning v) {
  return v == Conditioning::AC ? "AC" : "X";
}

/// Per-unit stratum probabilities. `omega[z]` and `eta[z]` are n x 3 with
/// columns indexed by Stratum; `eta[1]` is zero in the never-taker column and
/// `eta[0]` is zero in the always-taker column.
struct StrataWeights {
  Conditioning conditioning = Conditioning::AC;
  std::array<Eigen::MatrixXd, 2> omega;
  std::array<Eigen::MatrixXd, 2> eta;
  Eigen::MatrixXd pi;

  /// Units with at least one omega entry moved by clipping before the eta
  /// ratios were formed.
  std::size_t clipped_units = 0;
  /// Units whose raw weights left [-1e-6, 1 + 1e-6].
  std::size_t out_of_range_units = 0;
  std::vector<std::string> warnings;
};

struct EffectEstimates {
  std::array<double, 3> delta{};
  std::array<std::array<double, 3>, 2> mu{};
  std::optional<std::array<double, 3>> ci_lower;
  std::optional<std::array<double, 3>> ci_upper;
  int bootstrap_reps = 0;
  int bootstrap_failures = 0;

  double delta_of(Stratum g) const { return delta[index(g)]; }
};

}  // namespace proxstrata
