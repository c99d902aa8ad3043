#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace loanrisk::cli {

struct RunOptions {
  std::string command;
  std::filesystem::path config_path;  // empty: no config file
  std::filesystem::path out = ".";
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  bool deterministic = false;
};

/// Loads the command's JSON config ({} when no path was given).
nlohmann::json load_config(const RunOptions& opt);

void run_synth(const RunOptions& opt, const nlohmann::json& config);
void run_prepare(const RunOptions& opt, const nlohmann::json& config);
void run_train(const RunOptions& opt, const nlohmann::json& config);
void run_eval(const RunOptions& opt, const nlohmann::json& config);
void run_sensitivity(const RunOptions& opt, const nlohmann::json& config);
void run_interact(const RunOptions& opt, const nlohmann::json& config);
void run_pdp(const RunOptions& opt, const nlohmann::json& config);
void run_simulate(const RunOptions& opt, const nlohmann::json& config);
void run_portfolio(const RunOptions& opt, const nlohmann::json& config);
void run_report(const RunOptions& opt, const nlohmann::json& config);

}  // namespace loanrisk::cli
