#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "config.hpp"

namespace hts::cli {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // a verification command found a problem
inline constexpr int kExitError = 2;        // configuration, I/O, data or numeric failure

struct CommandResult {
  int status = kExitOk;
  std::vector<std::filesystem::path> outputs;
};

CommandResult cmd_synth(const RunConfig& cfg, std::ostream& out);
CommandResult cmd_preprocess(const RunConfig& cfg, std::ostream& out);
CommandResult cmd_train(const RunConfig& cfg, std::ostream& out);
CommandResult cmd_crossval(const RunConfig& cfg, std::ostream& out);
CommandResult cmd_evaluate(const RunConfig& cfg, std::ostream& out);
CommandResult cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err);

/// Validation ids are the first round(fraction * n) of a seeded shuffle;
/// the rest, in ascending order, are training ids. Shared by train and evaluate.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
Split train_val_split(std::size_t n, double val_fraction, std::uint64_t seed);

/// Parses argv, runs the subcommand and writes out/run_manifest.json.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hts::cli
