#pragma once

#include "beard/data.hpp"
#include "beard/trainer.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace beard {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Entry point behind the `beard` binary; args exclude the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// A trained model plus what is needed to use it: configuration, vocabulary
/// and the list of stages that produced it (e.g. ["finetune", "retrain"]).
struct ModelBundle {
  ExperimentConfig config;
  Tokenizer tokenizer;
  ParameterSet params;
  std::vector<std::string> lineage;
};

std::string bundle_config_json(const ModelBundle& b);
void save_bundle(const std::filesystem::path& path, const ModelBundle& b);
ModelBundle load_bundle(const std::filesystem::path& path);

/// run-<UTC timestamp>-<first 8 hex digits of the config hash>, created under `root`.
std::filesystem::path make_run_dir(const std::filesystem::path& root, std::uint64_t hash);

/// Writes table.csv, table.md, snr_bins.csv and loss_curves.csv into `out_dir`.
/// Throws DataError listing every missing eval output.
void write_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir);

}  // namespace beard
