#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "loanrisk/errors.hpp"
#include "loanrisk/kernels.hpp"

namespace {

using loanrisk::cli::RunOptions;
using Handler = void (*)(const RunOptions&, const nlohmann::json&);

struct Command {
  const char* name;
  const char* help;
  Handler run;
};

constexpr Command kCommands[] = {
    {"synth", "Generate a synthetic loan panel with known transition probabilities", loanrisk::cli::run_synth},
    {"prepare", "Encode, split, normalize and shard raw loan tables", loanrisk::cli::run_prepare},
    {"train", "Train a transition network, grid or ensemble", loanrisk::cli::run_train},
    {"eval", "Out-of-sample loss, likelihood-ratio tests and AUC", loanrisk::cli::run_eval},
    {"sensitivity", "Average absolute sensitivities and leave-one-out losses", loanrisk::cli::run_sensitivity},
    {"interact", "Rank pairwise and triple interactions", loanrisk::cli::run_interact},
    {"pdp", "Partial dependence curves and surfaces", loanrisk::cli::run_pdp},
    {"simulate", "Pool-level Monte Carlo and closed-form count forecasts", loanrisk::cli::run_simulate},
    {"portfolio", "Model-ranked portfolio construction against a comparison ranking", loanrisk::cli::run_portfolio},
    {"report", "Summarize the manifests in a work directory", loanrisk::cli::run_report},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"loanrisk: deep transition models for mortgage risk"};
  app.require_subcommand(1);
  RunOptions opt;
  std::uint64_t seed = 0;
  for (const Command& c : kCommands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config_path, "JSON config file");
    sub->add_option("--seed", seed, "Override the command's seed");
    sub->add_option("--jobs", opt.jobs, "Worker threads (0 = OpenMP default)")->check(CLI::NonNegativeNumber);
    sub->add_flag("--deterministic", opt.deterministic, "Omit wall-clock fields from outputs");
    sub->add_option("--out", opt.out, "Work directory for outputs and relative input paths");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  const Command* chosen = nullptr;
  for (const Command& c : kCommands)
    if (app.got_subcommand(c.name)) chosen = &c;
  opt.command = chosen->name;
  if (app.get_subcommand(chosen->name)->count("--seed") > 0) opt.seed = seed;

  try {
    loanrisk::kernels::set_worker_threads(opt.jobs);
    std::filesystem::create_directories(opt.out);
    chosen->run(opt, loanrisk::cli::load_config(opt));
  } catch (const loanrisk::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const loanrisk::DivergenceError& e) {
    std::cerr << "training diverged at epoch " << e.epoch() << " (lr " << e.learning_rate() << "): " << e.what()
              << '\n';
    return 3;
  } catch (const loanrisk::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const loanrisk::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
