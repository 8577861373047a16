#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "etapsi/train.hpp"

namespace etapsi {

/// Fully resolved settings of one CLI invocation.
struct RunConfig {
  std::string command;  // train, eval, dp-solve, goal-search, sweep-alpha
  std::string env;
  ParamMap env_params;
  std::vector<std::uint64_t> seeds{0};
  TrainConfig train;
  std::string out = "runs";
  std::string checkpoint;  // empty: the run directory's checkpoint.bin
  int eval_h = 0;          // 0: train.h
  int eval_n_traj = 1;
  int goal_h = 0;  // 0: the env's episode-length horizon (train.h when it has none)
  int n_goals = 16;
  bool heatmap = true;

  bool operator==(const RunConfig&) const = default;
};

inline constexpr const char* kCommands[] = {"train", "eval", "dp-solve", "goal-search", "sweep-alpha"};
inline constexpr double kSweepAlphas[] = {0.8, 0.9, 0.95, 0.99};

/// Raw "section.key" -> value pairs, e.g. "train.alpha" -> "0.9".
using RawConfig = std::map<std::string, std::string>;

/// Reads an INI-style file with [run], [env] and [train] sections.
RawConfig read_config_file(const std::filesystem::path& path);

/// Resolves raw settings against the per-env defaults. Unknown keys, bad
/// values and a missing env raise ConfigError naming the key.
RunConfig resolve_config(const RawConfig& raw);

/// `file` (may be empty) overlaid by `flags`; flags win.
RunConfig parse_config(const std::filesystem::path& file, const RawConfig& flags);

/// Every key written out, so that reparsing yields an identical RunConfig.
std::string format_config(const RunConfig& cfg);

/// The section of a bare key name ("alpha" -> "train"), or empty when unknown.
std::string section_of(const std::string& key);

/// Output root after applying ETAPSI_OUT: an explicit flag wins, then the
/// variable, then the config value.
std::filesystem::path output_root(const RunConfig& cfg, bool out_from_flag);

/// Directory holding one seed's outputs.
std::filesystem::path run_dir(const std::filesystem::path& root, const RunConfig& cfg, std::uint64_t seed);

/// Executes the command for every seed; returns the process exit code.
int run(const RunConfig& cfg, const std::filesystem::path& root);

/// argv entry point: `etapsi <command> [--config FILE] [--key value ...]`.
int cli_main(int argc, char** argv);

}  // namespace etapsi
