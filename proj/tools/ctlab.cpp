#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "ctlab/config.hpp"
#include "ctlab/errors.hpp"
#include "ctlab/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"numerical laboratory for particle transport and density "
               "evolution"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  CLI::App* run = app.add_subcommand("run", "execute one experiment config");
  run->add_option("config", config_path, "path to the experiment JSON")
      ->required();
  run->add_option("--output-dir", output_dir,
                  "override the config's output directory");

  CLI::App* list =
      app.add_subcommand("list", "list fields, noise kinds, experiments");
  CLI::App* version = app.add_subcommand("version", "print the version");

  CLI11_PARSE(app, argc, argv);

  if (list->parsed()) {
    std::fputs(ctlab::catalog_text().c_str(), stdout);
    return 0;
  }
  if (version->parsed()) {
    std::puts("ctlab 1.0.0");
    return 0;
  }

  try {
    ctlab::ExperimentConfig cfg = ctlab::parse_config_file(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    ctlab::RunOutcome outcome = ctlab::run_experiment(cfg);
    std::printf("%s: %s (%s)\n", cfg.kind.c_str(),
                outcome.pass ? "pass" : "CHECK FAILURE",
                outcome.report_path.c_str());
    return outcome.exit_code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
