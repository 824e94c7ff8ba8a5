#include <cstddef>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedmsa/experiment.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string algorithm;
  std::size_t threads = 1;
};

CLI::App* add_command(CLI::App& app, const char* name, const char* help, Flags& flags,
                      bool with_algorithm) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->add_option("--config", flags.config, "JSON config file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", flags.out, "output directory (overrides the config)");
  if (with_algorithm)
    sub->add_option("--algorithm", flags.algorithm,
                    "fedmsa, centralized or frozen-indirect (overrides the config)");
  sub->add_option("--threads", flags.threads, "worker threads; never changes results")
      ->check(CLI::PositiveNumber);
  return sub;
}

fedmsa::CommandOptions to_options(const Flags& f) {
  fedmsa::CommandOptions o;
  o.config_path = f.config;
  if (!f.out.empty()) o.out_dir = f.out;
  if (!f.algorithm.empty()) o.algorithm = f.algorithm;
  o.threads = f.threads;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated multi-sequence stochastic approximation experiments"};
  app.require_subcommand(1);
  Flags flags;
  auto* run = add_command(app, "run", "run one algorithm and write metrics.csv / result.json", flags, true);
  auto* compare = add_command(app, "compare", "run several algorithms on one problem", flags, false);
  auto* vn = add_command(app, "verify-neumann", "check Neumann bias and variance bounds on a grid",
                         flags, false);
  auto* vc = add_command(app, "verify-covariance-order",
                         "check the covariance ordering of the two Neumann estimators", flags, false);
  auto* gen = add_command(app, "gen-data", "write a generated instance or dataset to disk", flags, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fedmsa::kExitConfig;
  }

  const auto opt = to_options(flags);
  if (run->parsed()) return fedmsa::cmd_run(opt);
  if (compare->parsed()) return fedmsa::cmd_compare(opt);
  if (vn->parsed()) return fedmsa::cmd_verify_neumann(opt);
  if (vc->parsed()) return fedmsa::cmd_verify_covariance_order(opt);
  if (gen->parsed()) return fedmsa::cmd_gen_data(opt);
  return fedmsa::kExitConfig;
}
