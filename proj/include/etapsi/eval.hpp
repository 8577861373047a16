#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "etapsi/core.hpp"
#include "etapsi/envs.hpp"

namespace etapsi {

struct EvalReport {
  double entropy = 0.0;   // nats, constant 1/h weights
  double coverage = 0.0;  // fraction of states visited
  /// Step index (start = 0) at which the last unvisited state was reached;
  /// equals `completion_horizon` when search_completed is false.
  int search_completion_time = 0;
  bool search_completed = false;
  VisitationVector visits;  // per-state visit counts (averaged over trajectories for evaluate_multi)
  int horizon = 0;
  int completion_horizon = 0;
};

/// Metrics of one trajectory: entropy and coverage over its first h states,
/// completion time over all of it.
EvalReport report_of(const Trajectory& traj, int n_states, int h);

/// Rolls max(h, completion_h) steps; entropy/coverage use the first h states,
/// search completion the whole rollout (completion_h = 0 means h).
EvalReport evaluate(const Policy& policy, const EnvSpec& env, int h, Rng& rng, int completion_h = 0);

/// Averages the visitation distributions of n_traj independent rollouts.
/// Completion time is the first step at which the union of visited states
/// covers the state space.
EvalReport evaluate_multi(const Policy& policy, const EnvSpec& env, int h, int n_traj, Rng& rng);
EvalReport report_of_many(std::span<const Trajectory> trajs, int n_states, int h);

/// Mean first-hitting step over the given goals, one rollout per goal; goals
/// not reached within h count as h.
double goal_search_time(const Policy& policy, const EnvSpec& env, int h, std::span<const StateId> goals, Rng& rng);
/// Same with n_goals goal states drawn uniformly from the state space.
double goal_search_time(const Policy& policy, const EnvSpec& env, int h, Rng& rng, int n_goals = 16);

/// Writes `<stem>.csv` (one row per grid row, '#' for walls) and `<stem>.pgm`
/// (ASCII graymap, 255 at the most visited cell, walls 0).
void heatmap_export(const EvalReport& report, const GridLayout& layout, const std::filesystem::path& stem);

/// Cell values of a heatmap CSV; walls are empty.
std::vector<std::vector<std::optional<double>>> load_heatmap_csv(const std::filesystem::path& path);

}  // namespace etapsi
