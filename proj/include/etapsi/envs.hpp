#pragma once

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "etapsi/core.hpp"

namespace etapsi {

using Rng = std::mt19937_64;
using ParamMap = std::map<std::string, std::string>;

struct Outcome {
  StateId next;
  double probability = 1.0;
};

/// A 2-D grid with walls. Free cells are numbered row-major as states.
struct GridLayout {
  int rows = 0;
  int cols = 0;
  std::vector<int> state_of_cell;  // -1 marks a wall
  std::vector<std::pair<int, int>> cell_of_state;
  StateId start;

  bool is_wall(int r, int c) const { return state_of_cell[static_cast<std::size_t>(r * cols + c)] < 0; }
  int n_states() const { return static_cast<int>(cell_of_state.size()); }
};

/// Parses '#' (wall), '.' (free) and 'S' (free start cell) rows. Blank lines
/// and trailing whitespace are ignored; exactly one 'S' is required.
GridLayout parse_layout(std::string_view text);
std::string format_layout(const GridLayout& layout);

/// Built-in layout text for "two_rooms" and "four_rooms".
std::string_view builtin_layout(std::string_view name);

enum GridAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
enum ChainAction : int { kChainLeft = 0, kChainRight = 1 };

/// Finite controlled Markov process with tabulated transitions.
class FiniteEnv {
 public:
  FiniteEnv(int n_states, int n_actions, StateId start, std::vector<std::vector<Outcome>> table,
            std::optional<GridLayout> layout = std::nullopt);

  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }
  StateId start() const { return start_; }
  bool deterministic() const { return deterministic_; }
  const std::optional<GridLayout>& layout() const { return layout_; }

  std::span<const Outcome> transitions(StateId s, int a) const;
  /// Samples p(s, a, .). Deterministic environments never touch `rng`.
  StateId step(StateId s, int a, Rng& rng) const;

 private:
  void check(StateId s, int a) const;

  int n_states_;
  int n_actions_;
  StateId start_;
  std::vector<std::vector<Outcome>> table_;  // indexed s * n_actions + a
  std::optional<GridLayout> layout_;
  bool deterministic_ = true;
};

struct PointMassState {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  StateId bin;
};

/// Point mass on [0,1]^2 moved by clipped 2-D velocity commands, observed
/// through a G x G occupancy grid.
class PointMassEnv {
 public:
  PointMassEnv(int grid, double step_size);

  int grid() const { return grid_; }
  double step_size() const { return step_size_; }
  int n_states() const { return grid_ * grid_; }
  int action_dim() const { return 2; }
  double action_low() const { return -1.0; }
  double action_high() const { return 1.0; }
  const GridLayout& layout() const { return layout_; }

  StateId bin_of(const Eigen::Vector2d& position) const;
  PointMassState reset() const;
  PointMassState step(const PointMassState& s, const ContinuousAction& a) const;

 private:
  int grid_;
  double step_size_;
  GridLayout layout_;
};

/// A named environment instance; immutable after construction.
class EnvSpec {
 public:
  EnvSpec(std::string name, FiniteEnv env) : name_(std::move(name)), impl_(std::move(env)) {}
  EnvSpec(std::string name, PointMassEnv env) : name_(std::move(name)), impl_(std::move(env)) {}

  const std::string& name() const { return name_; }
  bool is_finite() const { return std::holds_alternative<FiniteEnv>(impl_); }
  const FiniteEnv& finite() const;
  const PointMassEnv& point_mass() const;

  int n_states() const;
  /// Number of discrete actions; 0 for box action spaces.
  int n_actions() const;
  int action_dim() const;
  StateId start() const;
  const GridLayout* layout() const;

 private:
  std::string name_;
  std::variant<FiniteEnv, PointMassEnv> impl_;
};

/// Names: chain_mdp, river_swim, gridworld, two_rooms, four_rooms, point_mass.
/// Parameter keys: size (chains, square grids), rows/cols (grids), layout
/// (grid file path), G and step_size (point_mass).
EnvSpec make_env(const std::string& name, const ParamMap& params = {});

StateId step(const EnvSpec& env, StateId s, const ActionChoice& a, Rng& rng);
std::vector<Outcome> enumerate_transitions(const EnvSpec& env, StateId s, const ActionChoice& a);

/// Chooses the next action from the trajectory so far. Stochastic policies draw
/// from the supplied generator.
using Policy = std::function<ActionChoice(const Trajectory&, Rng&)>;

/// Length-h trajectory from the start state. Point-mass positions are tracked
/// internally; the trajectory records their bins.
Trajectory rollout(const EnvSpec& env, const Policy& policy, int h, Rng& rng);

}  // namespace etapsi
