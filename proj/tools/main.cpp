// Command-line front end: simulate studies, estimate on CSV data, compute
// oracles and export generated datasets.

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "proxstrata/io.hpp"

namespace ps = proxstrata;
namespace est = proxstrata::estimation;
namespace sim = proxstrata::simulation;
using ps::io::json;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kEstimation = 3, kIo = 4 };

/// Flags shared by the subcommands; unset flags leave file values alone.
struct Overrides {
  std::string config_path;
  std::optional<int> n;
  std::optional<double> zeta_u;
  std::optional<std::string> outcome_case;
  std::optional<int> reps;
  std::optional<int> bootstrap;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> integral;
  std::optional<std::string> strata;
  std::optional<std::string> interval;
  std::optional<long> oracle_draws;
  std::string out;
  bool progress = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "JSON configuration file");
  app->add_option("--threads", o.threads, "worker threads");
  app->add_option("--out", o.out, "output path (stdout when omitted)");
}

void add_dgp(CLI::App* app, Overrides& o) {
  app->add_option("--n", o.n, "sample size");
  app->add_option("--zeta-u", o.zeta_u, "latent confounding strength");
}

void add_estimation(CLI::App* app, Overrides& o) {
  app->add_option("--case", o.outcome_case, "outcome case: i, ii, iii or iv");
  app->add_option("--bootstrap", o.bootstrap, "bootstrap replicates");
  app->add_option("--integral", o.integral, "closed or quad:K");
  app->add_option("--strata", o.strata, "strata weights: bridge or naive");
  app->add_option("--interval", o.interval, "percentile or normal");
}

ps::io::RunConfig resolve(const Overrides& o, const std::string& seed_target) {
  ps::io::RunConfig cfg;
  if (!o.config_path.empty()) cfg = ps::io::load_config(o.config_path);
  json patch = json::object();
  if (o.n) patch["dgp"]["n"] = *o.n;
  if (o.zeta_u) patch["dgp"]["zeta_u"] = *o.zeta_u;
  if (o.outcome_case) patch["estimation"]["case"] = *o.outcome_case;
  if (o.bootstrap) patch["estimation"]["bootstrap"] = *o.bootstrap;
  if (o.threads) patch["estimation"]["threads"] = *o.threads;
  if (o.integral) patch["estimation"]["integral"] = *o.integral;
  if (o.strata) patch["estimation"]["strata_method"] = *o.strata;
  if (o.interval) patch["estimation"]["interval"] = *o.interval;
  if (o.reps) patch["study"]["reps"] = *o.reps;
  if (o.oracle_draws) patch["study"]["oracle_draws"] = *o.oracle_draws;
  if (o.seed) {
    if (seed_target == "study") patch["study"]["seed"] = *o.seed;
    else if (seed_target == "dgp") patch["dgp"]["seed"] = *o.seed;
    else patch["estimation"]["seed"] = *o.seed;
  }
  ps::io::apply_config_json(patch, cfg);
  // The outcome model of the generator follows the estimation case.
  cfg.dgp.set_case(cfg.estimation.outcome_case);
  if (cfg.estimation.threads < 1) throw ps::ConfigError("threads must be >= 1");
  if (cfg.estimation.bootstrap_reps < 0) throw ps::ConfigError("bootstrap must be >= 0");
  return cfg;
}

void emit(const Overrides& o, const std::string& command, const std::string& content,
          const ps::io::RunConfig& cfg, std::uint64_t seed, const std::string& started,
          const std::vector<std::string>& argv) {
  if (o.out.empty()) {
    std::cout << content;
    return;
  }
  ps::io::write_file(o.out, content);
  ps::io::RunManifest m;
  m.command = command;
  m.config = ps::io::config_to_json(cfg);
  m.seed = seed;
  m.started = started;
  m.finished = ps::io::utc_timestamp();
  m.outputs = {o.out};
  m.argv = argv;
  ps::io::write_file(o.out + ".manifest.json", m.to_json().dump(2) + "\n");
}

int cmd_simulate(const Overrides& o, const std::vector<std::string>& argv) {
  const std::string started = ps::io::utc_timestamp();
  const ps::io::RunConfig cfg = resolve(o, "study");
  if (cfg.study.reps < 2) throw ps::ConfigError("reps ≥ 2 required");
  sim::StudyOptions opt;
  opt.threads = cfg.estimation.threads;
  opt.oracle_draws = cfg.study.oracle_draws;
  std::atomic<int> done{0};
  if (o.progress) {
    opt.progress = [&done, reps = cfg.study.reps](int) {
      const int k = ++done;
      if (k % 10 == 0 || k == reps) std::fprintf(stderr, "replication %d/%d\n", k, reps);
    };
  }
  const sim::StudySummary summary =
      sim::run_study(cfg.dgp, cfg.estimation, cfg.study.reps, cfg.study.seed, opt);
  std::ostringstream os;
  summary.write_csv(os);
  emit(o, "simulate", os.str(), cfg, cfg.study.seed, started, argv);
  return kOk;
}

int cmd_estimate(const Overrides& o, const std::string& data_path,
                 const std::vector<std::string>& argv) {
  const std::string started = ps::io::utc_timestamp();
  const ps::io::RunConfig cfg = resolve(o, "estimation");
  const ps::Dataset data = ps::io::read_csv(data_path);
  const est::BootstrapRun run = est::run_bootstrap(data, cfg.estimation);
  json out = ps::io::estimates_to_json(run);
  emit(o, "estimate", out.dump(2) + "\n", cfg, cfg.estimation.seed, started, argv);
  return kOk;
}

int cmd_oracle(const Overrides& o, const std::vector<std::string>& argv) {
  const std::string started = ps::io::utc_timestamp();
  const ps::io::RunConfig cfg = resolve(o, "study");
  cfg.dgp.validate();
  const sim::OracleResult truth =
      sim::oracle_true_effects(cfg.dgp, cfg.study.oracle_draws, cfg.study.seed);
  const ps::BridgeParams alpha = sim::derive_true_bridge(cfg.dgp);
  const ps::StrataParams psi = sim::derive_true_psi(cfg.dgp);
  json delta, err;
  for (ps::Stratum g : ps::kStrata) {
    const auto k = static_cast<std::size_t>(ps::index(g));
    delta[std::string(ps::to_string(g))] = truth.delta[k];
    err[std::string(ps::to_string(g))] = truth.mc_error[k];
  }
  json out = {
      {"delta", delta},
      {"mc_error", err},
      {"alpha",
       {{"a0", alpha.a0}, {"log_gap", alpha.log_gap}, {"aw", alpha.aw},
        {"ac1", alpha.ac(0)}, {"ac2", alpha.ac2(0)}}},
      {"alpha_grid_residual", sim::bridge_grid_residual(cfg.dgp, alpha)},
      {"psi",
       {{"p0", psi.p0}, {"log_gap", psi.log_gap}, {"pz", psi.pz}, {"pw", psi.pw},
        {"pa", psi.pa}, {"pc", psi.pc(0)}}}};
  emit(o, "oracle", out.dump(2) + "\n", cfg, cfg.study.seed, started, argv);
  return kOk;
}

int cmd_generate(const Overrides& o, const std::vector<std::string>& argv) {
  const std::string started = ps::io::utc_timestamp();
  const ps::io::RunConfig cfg = resolve(o, "dgp");
  const sim::LatentDataset data = sim::generate(cfg.dgp);
  std::ostringstream os;
  ps::io::write_csv(os, data.data);
  emit(o, "generate", os.str(), cfg, cfg.dgp.seed, started, argv);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Principal causal effects with negative-control proxies"};
  app.set_version_flag("--version", PROXSTRATA_VERSION);
  app.require_subcommand(1);
  std::vector<std::string> args(argv, argv + argc);

  Overrides sim_o, est_o, ora_o, gen_o;
  std::string data_path;

  CLI::App* simulate = app.add_subcommand("simulate", "run a Monte Carlo study");
  add_common(simulate, sim_o);
  add_dgp(simulate, sim_o);
  add_estimation(simulate, sim_o);
  simulate->add_option("--reps", sim_o.reps, "replications (>= 2)");
  simulate->add_option("--seed", sim_o.seed, "master seed");
  simulate->add_option("--oracle-draws", sim_o.oracle_draws, "Monte Carlo draws for the truth");
  simulate->add_flag("--progress", sim_o.progress, "report progress on stderr");

  CLI::App* estimate = app.add_subcommand("estimate", "estimate principal effects from a CSV");
  add_common(estimate, est_o);
  add_estimation(estimate, est_o);
  estimate->add_option("--data", data_path, "input CSV")->required();
  estimate->add_option("--seed", est_o.seed, "bootstrap seed");

  CLI::App* oracle = app.add_subcommand("oracle", "true effects and bridge parameters");
  add_common(oracle, ora_o);
  add_dgp(oracle, ora_o);
  oracle->add_option("--seed", ora_o.seed, "oracle seed");
  oracle->add_option("--oracle-draws", ora_o.oracle_draws, "Monte Carlo draws");

  CLI::App* generate = app.add_subcommand("generate", "export one generated dataset as CSV");
  add_common(generate, gen_o);
  add_dgp(generate, gen_o);
  generate->add_option("--case", gen_o.outcome_case, "outcome case: i, ii, iii or iv");
  generate->add_option("--seed", gen_o.seed, "data seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*simulate) return cmd_simulate(sim_o, args);
    if (*estimate) return cmd_estimate(est_o, data_path, args);
    if (*oracle) return cmd_oracle(ora_o, args);
    if (*generate) return cmd_generate(gen_o, args);
  } catch (const ps::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const ps::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const ps::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const ps::DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const ps::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kEstimation;
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return kConfig;
  }
  return kConfig;
}
