#pragma once

// File formats: the observed-data CSV, the JSON run configuration, the
// estimates JSON and the run manifest.

#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "proxstrata/data.hpp"
#include "proxstrata/errors.hpp"
#include "proxstrata/estimation/config.hpp"
#include "proxstrata/estimation/pipeline.hpp"
#include "proxstrata/simulation.hpp"

#ifndef PROXSTRATA_VERSION
#define PROXSTRATA_VERSION "0.0.0"
#endif

namespace proxstrata::io {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// CSV.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t start = 0;
    while (start < cell.size() && cell[start] == ' ') ++start;
    out.push_back(cell.substr(start));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Parses a CSV with header columns z, s, y, a, w and covariates c1..cp in
/// any order. Missing or malformed columns raise ValidationError.
inline RawColumns parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ValidationError(std::vector<Violation>{{"missing header row", {}}});
  }
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const std::vector<std::string> header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> pos;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (!pos.emplace(header[j], j).second) {
      throw ValidationError(std::vector<Violation>{{"duplicate column '" + header[j] + "'", {}}});
    }
  }
  std::vector<Violation> schema;
  for (const char* name : {"z", "s", "y", "a", "w"}) {
    if (!pos.count(name)) schema.push_back({std::string("missing column '") + name + "'", {}});
  }
  std::size_t p = 0;
  while (pos.count("c" + std::to_string(p + 1))) ++p;
  for (const auto& [name, j] : pos) {
    (void)j;
    if (name.size() > 1 && name[0] == 'c' &&
        name.find_first_not_of("0123456789", 1) == std::string::npos) {
      const auto k = static_cast<std::size_t>(std::stoul(name.substr(1)));
      if (k == 0 || k > p) {
        schema.push_back({"covariate columns must be c1..cp without gaps; found '" + name + "'", {}});
      }
    }
  }
  if (!schema.empty()) throw ValidationError(std::move(schema));

  RawColumns raw;
  raw.c.resize(p);
  std::vector<std::vector<double>*> targets(header.size(), nullptr);
  targets[pos["z"]] = &raw.z;
  targets[pos["s"]] = &raw.s;
  targets[pos["y"]] = &raw.y;
  targets[pos["a"]] = &raw.a;
  targets[pos["w"]] = &raw.w;
  for (std::size_t k = 0; k < p; ++k) targets[pos["c" + std::to_string(k + 1)]] = &raw.c[k];

  std::map<std::string, Violation> bad;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ValidationError(std::vector<Violation>{{"row has " + std::to_string(cells.size()) +
                                  " fields, header has " + std::to_string(header.size()),
                              {row}}});
    }
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (!targets[j]) continue;
      const char* begin = cells[j].c_str();
      char* end = nullptr;
      const double v = std::strtod(begin, &end);
      if (cells[j].empty() || end != begin + cells[j].size()) {
        auto& viol = bad[header[j]];
        viol.rule = "non-numeric value in column '" + header[j] + "'";
        viol.rows.push_back(row);
        targets[j]->push_back(0.0);
      } else {
        targets[j]->push_back(v);
      }
    }
    ++row;
  }
  if (!bad.empty()) {
    std::vector<Violation> v;
    for (auto& [name, viol] : bad) v.push_back(std::move(viol));
    throw ValidationError(std::move(v));
  }
  return raw;
}

inline Dataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return Dataset::validate(parse_csv(in));
}

inline void write_csv(std::ostream& os, const Dataset& data) {
  os << "z,s,y,a,w";
  for (Eigen::Index j = 0; j < data.p(); ++j) os << ",c" << (j + 1);
  os << '\n';
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    os << data.zi(i) << ',' << data.si(i) << ',' << detail::format_double(data.y()(i))
       << ',' << detail::format_double(data.a()(i)) << ','
       << detail::format_double(data.w()(i));
    for (Eigen::Index j = 0; j < data.p(); ++j) {
      os << ',' << detail::format_double(data.c()(i, j));
    }
    os << '\n';
  }
}

/// Writes `content` to `path`, raising IoError on failure.
inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << content;
  out.close();
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Run configuration.

struct StudySettings {
  int reps = 500;
  std::uint64_t seed = 7;
  long oracle_draws = 1000000;
};

/// Defaults for command-line runs. Bootstrap replicates default to 200 here,
/// while the library default is no bootstrap.
struct RunConfig {
  simulation::DgpConfig dgp;
  estimation::EstimationConfig estimation;
  StudySettings study;

  RunConfig() { estimation.bootstrap_reps = 200; }
};

namespace detail {

/// Reads typed fields from one JSON object and rejects unknown keys.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string section) : obj_(obj), section_(std::move(section)) {
    if (!obj_.is_object()) throw ConfigError("config: '" + section_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
        out = v.get<std::string>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_unsigned()) {
            out = static_cast<T>(v.get<std::uint64_t>());
          } else {
            const auto s = v.get<std::int64_t>();
            if (s < 0) throw std::invalid_argument("expected a nonnegative integer");
            out = static_cast<T>(s);
          }
        } else {
          out = static_cast<T>(v.get<std::int64_t>());
        }
      } else {
        out = v.get<T>();
      }
    } catch (const std::exception& e) {
      throw ConfigError("config: field '" + section_ + "." + key + "': " + e.what());
    }
  }

  const json* get(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("config: unknown field '" + section_ + "." + it.key() + "'");
      }
    }
  }

  const std::string& section() const { return section_; }

 private:
  const json& obj_;
  std::string section_;
  std::set<std::string> seen_;
};

inline void read_theta(FieldReader& r, simulation::DgpConfig& d) {
  for (int z = 0; z < 2; ++z) {
    const json* t = r.get(z == 0 ? "theta0" : "theta1");
    if (!t) continue;
    FieldReader tr(*t, r.section() + (z == 0 ? ".theta0" : ".theta1"));
    for (Stratum g : kStrata) {
      tr.read(std::string(to_string(g)).c_str(),
              d.theta[static_cast<std::size_t>(z)][static_cast<std::size_t>(index(g))]);
    }
    tr.finish();
  }
}

}  // namespace detail

inline void apply_config_json(const json& root, RunConfig& cfg) {
  detail::FieldReader top(root, "config");
  if (const json* d = top.get("dgp")) {
    detail::FieldReader r(*d, "dgp");
    auto& g = cfg.dgp;
    r.read("n", g.n);
    r.read("seed", g.seed);
    r.read("delta_a", g.delta_a);
    r.read("delta_c", g.delta_c);
    r.read("sigma_a", g.sigma_a);
    r.read("sigma_c", g.sigma_c);
    r.read("rho1", g.rho1);
    r.read("beta0", g.beta0);
    r.read("beta_a", g.beta_a);
    r.read("beta_c", g.beta_c);
    r.read("iota0", g.iota0);
    r.read("iota_z", g.iota_z);
    r.read("iota_a", g.iota_a);
    r.read("iota_c1", g.iota_c1);
    r.read("iota_c2", g.iota_c2);
    r.read("sigma_u", g.sigma_u);
    r.read("rho2", g.rho2);
    r.read("gamma0", g.gamma0);
    r.read("gamma_c1", g.gamma_c1);
    r.read("sigma_w", g.sigma_w);
    r.read("zeta0", g.zeta0);
    r.read("zeta1", g.zeta1);
    r.read("zeta_w", g.zeta_w);
    r.read("zeta_u", g.zeta_u);
    r.read("zeta_c", g.zeta_c);
    detail::read_theta(r, g);
    r.read("theta_c", g.theta_c);
    r.read("theta_a", g.theta_a);
    r.read("theta_w", g.theta_w);
    r.read("sigma_y", g.sigma_y);
    r.finish();
  }
  if (const json* e = top.get("estimation")) {
    detail::FieldReader r(*e, "estimation");
    auto& c = cfg.estimation;
    std::string text;
    if (r.get("case")) {
      r.read("case", text);
      c.outcome_case = parse_outcome_case(text);
    }
    r.read("bridge_squares", c.bridge_squares);
    r.read("w_squares", c.w_squares);
    if (const json* b = r.get("bridge_instruments")) {
      if (!b->is_array()) throw ConfigError("config: field 'estimation.bridge_instruments': expected an array");
      c.bridge_instruments.clear();
      for (const auto& t : *b) {
        if (!t.is_string()) throw ConfigError("config: field 'estimation.bridge_instruments': expected strings");
        c.bridge_instruments.push_back(estimation::parse_instrument(t.get<std::string>()));
      }
    }
    if (const json* b = r.get("outcome_instruments")) {
      if (!b->is_array()) throw ConfigError("config: field 'estimation.outcome_instruments': expected an array");
      c.outcome_instruments.clear();
      for (const auto& t : *b) {
        if (!t.is_string()) throw ConfigError("config: field 'estimation.outcome_instruments': expected strings");
        c.outcome_instruments.push_back(estimation::parse_outcome_instrument(t.get<std::string>()));
      }
    }
    r.read("use_psi", c.use_psi);
    if (r.get("strata_method")) {
      r.read("strata_method", text);
      if (text == "bridge") c.strata_method = estimation::StrataMethod::Bridge;
      else if (text == "naive") c.strata_method = estimation::StrataMethod::NaiveProbit;
      else throw ConfigError("config: field 'estimation.strata_method': expected 'bridge' or 'naive'");
    }
    if (r.get("integral")) {
      r.read("integral", text);
      c.integral = estimation::parse_integral(text);
    }
    r.read("bootstrap", c.bootstrap_reps);
    if (c.bootstrap_reps < 0) {
      throw ConfigError("config: field 'estimation.bootstrap': expected a nonnegative integer");
    }
    if (r.get("interval")) {
      r.read("interval", text);
      if (text == "percentile") c.interval = estimation::IntervalKind::Percentile;
      else if (text == "normal") c.interval = estimation::IntervalKind::Normal;
      else throw ConfigError("config: field 'estimation.interval': expected 'percentile' or 'normal'");
    }
    r.read("seed", c.seed);
    r.read("threads", c.threads);
    r.read("tolerance", c.solver.tolerance);
    r.read("max_iterations", c.solver.max_iterations);
    r.read("starts", c.solver.starts);
    r.finish();
  }
  if (const json* s = top.get("study")) {
    detail::FieldReader r(*s, "study");
    r.read("reps", cfg.study.reps);
    r.read("seed", cfg.study.seed);
    r.read("oracle_draws", cfg.study.oracle_draws);
    r.finish();
  }
  top.finish();
}

inline RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  json root;
  try {
    root = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config: cannot parse '" + path + "': " + e.what());
  }
  apply_config_json(root, cfg);
  return cfg;
}

/// Every field with its resolved value.
inline json config_to_json(const RunConfig& cfg) {
  const auto& g = cfg.dgp;
  json theta0, theta1;
  for (Stratum s : kStrata) {
    theta0[std::string(to_string(s))] = g.theta[0][static_cast<std::size_t>(index(s))];
    theta1[std::string(to_string(s))] = g.theta[1][static_cast<std::size_t>(index(s))];
  }
  json dgp = {{"n", g.n},           {"seed", g.seed},         {"delta_a", g.delta_a},
              {"delta_c", g.delta_c}, {"sigma_a", g.sigma_a}, {"sigma_c", g.sigma_c},
              {"rho1", g.rho1},     {"beta0", g.beta0},       {"beta_a", g.beta_a},
              {"beta_c", g.beta_c}, {"iota0", g.iota0},       {"iota_z", g.iota_z},
              {"iota_a", g.iota_a}, {"iota_c1", g.iota_c1},   {"iota_c2", g.iota_c2},
              {"sigma_u", g.sigma_u}, {"rho2", g.rho2},       {"gamma0", g.gamma0},
              {"gamma_c1", g.gamma_c1}, {"sigma_w", g.sigma_w}, {"zeta0", g.zeta0},
              {"zeta1", g.zeta1},   {"zeta_w", g.zeta_w},     {"zeta_u", g.zeta_u},
              {"zeta_c", g.zeta_c}, {"theta0", theta0},       {"theta1", theta1},
              {"theta_c", g.theta_c}, {"theta_a", g.theta_a}, {"theta_w", g.theta_w},
              {"sigma_y", g.sigma_y}};
  const auto& c = cfg.estimation;
  json binst = json::array(), oinst = json::array();
  for (auto t : c.bridge_instruments) binst.push_back(std::string(estimation::to_string(t)));
  for (auto t : c.outcome_instruments) oinst.push_back(std::string(estimation::to_string(t)));
  json est = {
      {"case", std::string(to_string(c.outcome_case))},
      {"bridge_squares", c.bridge_squares},
      {"w_squares", c.w_squares},
      {"bridge_instruments", binst},
      {"outcome_instruments", oinst},
      {"use_psi", c.use_psi},
      {"strata_method",
       c.strata_method == estimation::StrataMethod::Bridge ? "bridge" : "naive"},
      {"integral", estimation::to_string(c.integral)},
      {"bootstrap", c.bootstrap_reps},
      {"interval", c.interval == estimation::IntervalKind::Percentile ? "percentile" : "normal"},
      {"seed", c.seed},
      {"threads", c.threads},
      {"tolerance", c.solver.tolerance},
      {"max_iterations", c.solver.max_iterations},
      {"starts", c.solver.starts}};
  json study = {{"reps", cfg.study.reps},
                {"seed", cfg.study.seed},
                {"oracle_draws", cfg.study.oracle_draws}};
  return {{"dgp", dgp}, {"estimation", est}, {"study", study}};
}

// ---------------------------------------------------------------------------
// Estimates.

inline json stratum_map(const std::array<double, 3>& v) {
  json out;
  for (Stratum g : kStrata) out[std::string(to_string(g))] = v[static_cast<std::size_t>(index(g))];
  return out;
}

inline json estimates_to_json(const estimation::BootstrapRun& run) {
  const EffectEstimates& e = run.effects;
  json ci = nullptr;
  if (e.ci_lower && e.ci_upper) {
    ci = json::object();
    for (Stratum g : kStrata) {
      const auto k = static_cast<std::size_t>(index(g));
      ci[std::string(to_string(g))] = {(*e.ci_lower)[k], (*e.ci_upper)[k]};
    }
  }
  json steps = json::array();
  for (const auto& s : run.point.diagnostics.steps) {
    steps.push_back({{"step", s.step},
                     {"converged", s.converged},
                     {"iterations", s.iterations},
                     {"moment_norm", s.moment_norm},
                     {"gradient_norm", s.gradient_norm},
                     {"over_identified", s.over_identified}});
  }
  json failures = json::object();
  for (const auto& [step, count] : run.failures_by_step) failures[step] = count;
  json diagnostics = {{"steps", steps},
                      {"clipped_units", run.point.diagnostics.clipped_units},
                      {"out_of_range_units", run.point.diagnostics.out_of_range_units},
                      {"warnings", run.point.diagnostics.warnings},
                      {"bootstrap_reps", e.bootstrap_reps},
                      {"bootstrap_failures", e.bootstrap_failures},
                      {"bootstrap_failures_by_step", failures}};
  return {{"delta", stratum_map(e.delta)},
          {"ci", ci},
          {"mu", {{"z0", stratum_map(e.mu[0])}, {"z1", stratum_map(e.mu[1])}}},
          {"diagnostics", diagnostics}};
}

// ---------------------------------------------------------------------------
// Manifest.

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::string started, finished;
  std::vector<std::string> outputs;
  std::vector<std::string> argv;

  json to_json() const {
    return {{"command", command},
            {"version", PROXSTRATA_VERSION},
            {"seed", seed},
            {"config", config},
            {"argv", argv},
            {"started", started},
            {"finished", finished},
            {"outputs", outputs}};
  }
};

}  // namespace proxstrata::io
