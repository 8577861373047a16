#pragma once

#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "etapsi/core.hpp"
#include "etapsi/envs.hpp"
#include "etapsi/traces.hpp"

namespace etapsi {

/// Exact state/action sequence s_1, a_1, s_2, ... used as a table key.
using TrajectoryKey = std::vector<std::int32_t>;

struct TrajectoryKeyHash {
  std::size_t operator()(const TrajectoryKey& key) const noexcept;
};

TrajectoryKey key_of(const Trajectory& traj);

/// Look-up table of successor representations and greedy actions over every
/// trajectory prefix reached by the backward induction.
class TrajectoryTable {
 public:
  struct Entry {
    int action = -1;                   // -1 at the horizon
    std::vector<SRVector> psi;         // per action; empty when the action was never expanded
    std::vector<double> q;             // entropy of combine(eta, psi[a]); NaN when unexpanded
  };

  TrajectoryTable(int horizon, int n_states, int n_actions, double alpha)
      : horizon_(horizon), n_states_(n_states), n_actions_(n_actions), alpha_(alpha) {}

  int horizon() const { return horizon_; }
  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }
  double alpha() const { return alpha_; }
  std::size_t size() const { return entries_.size(); }
  long nodes_expanded() const { return nodes_expanded_; }

  const Entry* find(const Trajectory& traj) const;
  /// Stored greedy action; throws ConsistencyError when the prefix is missing.
  int action(const Trajectory& traj) const;
  /// Stored psi(traj, a); throws ConsistencyError when missing or unexpanded.
  const SRVector& psi(const Trajectory& traj, int a) const;

  const auto& entries() const { return entries_; }

  Entry& insert(const Trajectory& traj, Entry entry);
  void set_nodes_expanded(long n) { nodes_expanded_ = n; }

 private:
  int horizon_;
  int n_states_;
  int n_actions_;
  double alpha_;
  long nodes_expanded_ = 0;
  std::unordered_map<TrajectoryKey, Entry, TrajectoryKeyHash> entries_;
};

struct DpOptions {
  long node_cap = kDefaultNodeCap;
  /// Skip actions whose entropy upper bound is strictly below the best value
  /// already found at that prefix. The stored greedy action is unchanged;
  /// skipped actions simply have no psi in the table.
  bool prune = true;
};

/// Backward induction over all trajectories of length <= h: psi at the horizon
/// is e_{s_h}; at shorter prefixes pi(tau) = argmax_a H(alpha eta + psi(tau, a))
/// and psi(tau_{:t-1}, a) = e_{s_{t-1}} + alpha E[psi(tau_{:t}, pi(tau_{:t}))].
TrajectoryTable dp_solve(const EnvSpec& env, const DiscountSchedule& sched, int h, const DpOptions& options = {});

/// Greedy length-h rollout following the table from the start state.
Trajectory dp_rollout(const TrajectoryTable& table, const EnvSpec& env, Rng& rng);

/// The table viewed as a policy; throws ConsistencyError on unknown prefixes.
TrajectoryPolicy table_policy(const TrajectoryTable& table);

struct BruteForceResult {
  double best_entropy = 0.0;
  /// Open-loop maximizer for deterministic envs; the first action of the best
  /// decision tree for stochastic envs.
  std::vector<int> best_actions;
  long leaves = 0;
};

/// Exhaustive maximum of H(E[xi_gamma]) over open-loop action sequences
/// (deterministic envs) or closed-loop decision trees (stochastic envs, h <= 5).
/// Anchored schedules are viewed from the first step.
BruteForceResult brute_force_best(const EnvSpec& env, const DiscountSchedule& sched, int h,
                                  long leaf_cap = kDefaultNodeCap);

}  // namespace etapsi
