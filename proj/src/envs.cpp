#include "etapsi/envs.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "layouts_generated.hpp"

namespace etapsi {

namespace {

int param_int(const ParamMap& params, const std::string& key, int fallback) {
  const auto it = params.find(key);
  if (it == params.end()) return fallback;
  try {
    std::size_t used = 0;
    const int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("env parameter '" + key + "' must be an integer, got '" + it->second + "'");
  }
}

double param_double(const ParamMap& params, const std::string& key, double fallback) {
  const auto it = params.find(key);
  if (it == params.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("env parameter '" + key + "' must be a number, got '" + it->second + "'");
  }
}

void reject_unknown(const ParamMap& params, const std::set<std::string>& allowed,
                    const std::string& env) {
  for (const auto& [key, value] : params) {
    if (!allowed.contains(key)) throw ConfigError("unknown parameter '" + key + "' for env " + env);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read layout file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FiniteEnv grid_env(GridLayout layout) {
  const int n = layout.n_states();
  std::vector<std::vector<Outcome>> table(static_cast<std::size_t>(n) * 4);
  constexpr int dr[4] = {-1, 1, 0, 0};
  constexpr int dc[4] = {0, 0, -1, 1};
  for (int s = 0; s < n; ++s) {
    const auto [r, c] = layout.cell_of_state[static_cast<std::size_t>(s)];
    for (int a = 0; a < 4; ++a) {
      const int nr = r + dr[a];
      const int nc = c + dc[a];
      int next = s;
      if (nr >= 0 && nr < layout.rows && nc >= 0 && nc < layout.cols && !layout.is_wall(nr, nc))
        next = layout.state_of_cell[static_cast<std::size_t>(nr * layout.cols + nc)];
      table[static_cast<std::size_t>(s * 4 + a)] = {{StateId(next), 1.0}};
    }
  }
  const StateId start = layout.start;
  return FiniteEnv(n, 4, start, std::move(table), std::move(layout));
}

GridLayout open_grid(int rows, int cols) {
  if (rows < 1 || cols < 1) throw ConfigError("grid dimensions must be positive");
  std::string text;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) text += (r == 0 && c == 0) ? 'S' : '.';
    text += '\n';
  }
  return parse_layout(text);
}

FiniteEnv chain_env(int n) {
  if (n < 1) throw ConfigError("chain 'size' must be positive");
  std::vector<std::vector<Outcome>> table(static_cast<std::size_t>(n) * 2);
  for (int s = 0; s < n; ++s) {
    table[static_cast<std::size_t>(s * 2 + kChainLeft)] = {{StateId(std::max(s - 1, 0)), 1.0}};
    table[static_cast<std::size_t>(s * 2 + kChainRight)] = {{StateId(std::min(s + 1, n - 1)), 1.0}};
  }
  return FiniteEnv(n, 2, StateId(0), std::move(table));
}

// Swimming right against the current: 0.1 back, 0.6 stay, 0.3 ahead in the
// interior; 0.7 stay at either end. Swimming left always succeeds.
FiniteEnv river_swim_env(int n) {
  if (n < 1) throw ConfigError("river_swim 'size' must be positive");
  std::vector<std::vector<Outcome>> table(static_cast<std::size_t>(n) * 2);
  for (int s = 0; s < n; ++s) {
    table[static_cast<std::size_t>(s * 2 + kChainLeft)] = {{StateId(std::max(s - 1, 0)), 1.0}};
    std::vector<Outcome> right;
    if (n == 1) {
      right = {{StateId(0), 1.0}};
    } else if (s == 0) {
      right = {{StateId(0), 0.7}, {StateId(1), 0.3}};
    } else if (s == n - 1) {
      right = {{StateId(s - 1), 0.3}, {StateId(s), 0.7}};
    } else {
      right = {{StateId(s - 1), 0.1}, {StateId(s), 0.6}, {StateId(s + 1), 0.3}};
    }
    table[static_cast<std::size_t>(s * 2 + kChainRight)] = std::move(right);
  }
  return FiniteEnv(n, 2, StateId(0), std::move(table));
}

}  // namespace

GridLayout parse_layout(std::string_view text) {
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in{std::string(text)};
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.empty()) throw ConfigError("layout: no rows");
  GridLayout g;
  g.rows = static_cast<int>(lines.size());
  g.cols = static_cast<int>(lines.front().size());
  g.state_of_cell.assign(static_cast<std::size_t>(g.rows * g.cols), -1);
  int starts = 0;
  for (int r = 0; r < g.rows; ++r) {
    const auto& row = lines[static_cast<std::size_t>(r)];
    if (static_cast<int>(row.size()) != g.cols) throw ConfigError("layout: ragged rows");
    for (int c = 0; c < g.cols; ++c) {
      const char ch = row[static_cast<std::size_t>(c)];
      if (ch == '#') continue;
      if (ch != '.' && ch != 'S') throw ConfigError(std::string("layout: unexpected character '") + ch + "'");
      const int s = g.n_states();
      g.state_of_cell[static_cast<std::size_t>(r * g.cols + c)] = s;
      g.cell_of_state.emplace_back(r, c);
      if (ch == 'S') {
        g.start = StateId(s);
        ++starts;
      }
    }
  }
  if (starts != 1) throw ConfigError("layout: expected exactly one 'S'");
  return g;
}

std::string format_layout(const GridLayout& layout) {
  std::string out;
  for (int r = 0; r < layout.rows; ++r) {
    for (int c = 0; c < layout.cols; ++c) {
      const int s = layout.state_of_cell[static_cast<std::size_t>(r * layout.cols + c)];
      out += s < 0 ? '#' : (s == layout.start.index ? 'S' : '.');
    }
    out += '\n';
  }
  return out;
}

std::string_view builtin_layout(std::string_view name) {
  if (name == "two_rooms") return layouts::kTwoRooms;
  if (name == "four_rooms") return layouts::kFourRooms;
  throw ConfigError("no built-in layout named '" + std::string(name) + "'");
}

FiniteEnv::FiniteEnv(int n_states, int n_actions, StateId start, std::vector<std::vector<Outcome>> table,
                     std::optional<GridLayout> layout)
    : n_states_(n_states), n_actions_(n_actions), start_(start), table_(std::move(table)),
      layout_(std::move(layout)) {
  if (n_states < 1 || n_actions < 1) throw DomainError("FiniteEnv: empty state or action space");
  if (table_.size() != static_cast<std::size_t>(n_states) * static_cast<std::size_t>(n_actions))
    throw DomainError("FiniteEnv: transition table has the wrong size");
  for (const auto& outs : table_) {
    double total = 0.0;
    for (const auto& o : outs) {
      if (o.next.index < 0 || o.next.index >= n_states) throw DomainError("FiniteEnv: bad successor");
      total += o.probability;
    }
    if (outs.empty() || std::abs(total - 1.0) > 1e-12) throw DomainError("FiniteEnv: probabilities must sum to 1");
    if (outs.size() > 1) deterministic_ = false;
  }
}

void FiniteEnv::check(StateId s, int a) const {
  if (s.index < 0 || s.index >= n_states_) throw DomainError("state " + std::to_string(s.index) + " out of range");
  if (a < 0 || a >= n_actions_) throw DomainError("action " + std::to_string(a) + " out of range");
}

std::span<const Outcome> FiniteEnv::transitions(StateId s, int a) const {
  check(s, a);
  return table_[static_cast<std::size_t>(s.index * n_actions_ + a)];
}

StateId FiniteEnv::step(StateId s, int a, Rng& rng) const {
  const auto outs = transitions(s, a);
  if (outs.size() == 1) return outs.front().next;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (const auto& o : outs) {
    acc += o.probability;
    if (u < acc) return o.next;
  }
  return outs.back().next;
}

PointMassEnv::PointMassEnv(int grid, double step_size) : grid_(grid), step_size_(step_size) {
  if (grid < 1) throw ConfigError("point_mass 'G' must be positive");
  if (!(step_size > 0.0)) throw ConfigError("point_mass 'step_size' must be positive");
  layout_ = open_grid(grid, grid);
}

StateId PointMassEnv::bin_of(const Eigen::Vector2d& position) const {
  const auto cell = [this](double x) {
    return std::clamp(static_cast<int>(std::floor(x * grid_)), 0, grid_ - 1);
  };
  return StateId(cell(position.y()) * grid_ + cell(position.x()));
}

PointMassState PointMassEnv::reset() const {
  PointMassState s;
  s.position = Eigen::Vector2d::Constant(0.5 / grid_);
  s.bin = bin_of(s.position);
  return s;
}

PointMassState PointMassEnv::step(const PointMassState& s, const ContinuousAction& a) const {
  if (a.size() != 2) throw DomainError("point_mass: action must be 2-dimensional");
  if (!a.allFinite()) throw DomainError("point_mass: non-finite action");
  PointMassState next;
  next.position = (s.position + step_size_ * a.cwiseMax(-1.0).cwiseMin(1.0)).cwiseMax(0.0).cwiseMin(1.0);
  next.bin = bin_of(next.position);
  return next;
}

const FiniteEnv& EnvSpec::finite() const {
  if (const auto* f = std::get_if<FiniteEnv>(&impl_)) return *f;
  throw UnsupportedOperation(name_ + " is not a finite-state environment");
}

const PointMassEnv& EnvSpec::point_mass() const {
  if (const auto* p = std::get_if<PointMassEnv>(&impl_)) return *p;
  throw UnsupportedOperation(name_ + " is not a point-mass environment");
}

int EnvSpec::n_states() const {
  return std::visit([](const auto& e) { return e.n_states(); }, impl_);
}

int EnvSpec::n_actions() const { return is_finite() ? finite().n_actions() : 0; }

int EnvSpec::action_dim() const { return is_finite() ? 0 : point_mass().action_dim(); }

StateId EnvSpec::start() const { return is_finite() ? finite().start() : point_mass().reset().bin; }

const GridLayout* EnvSpec::layout() const {
  if (is_finite()) return finite().layout() ? &*finite().layout() : nullptr;
  return &point_mass().layout();
}

EnvSpec make_env(const std::string& name, const ParamMap& params) {
  if (name == "chain_mdp") {
    reject_unknown(params, {"size"}, name);
    return {name, chain_env(param_int(params, "size", 6))};
  }
  if (name == "river_swim") {
    reject_unknown(params, {"size"}, name);
    return {name, river_swim_env(param_int(params, "size", 6))};
  }
  if (name == "gridworld") {
    reject_unknown(params, {"size", "rows", "cols", "layout"}, name);
    if (params.contains("layout")) return {name, grid_env(parse_layout(read_file(params.at("layout"))))};
    const int size = param_int(params, "size", 5);
    return {name, grid_env(open_grid(param_int(params, "rows", size), param_int(params, "cols", size)))};
  }
  if (name == "two_rooms" || name == "four_rooms") {
    reject_unknown(params, {"layout"}, name);
    const std::string text =
        params.contains("layout") ? read_file(params.at("layout")) : std::string(builtin_layout(name));
    return {name, grid_env(parse_layout(text))};
  }
  if (name == "point_mass") {
    reject_unknown(params, {"G", "step_size"}, name);
    return {name, PointMassEnv(param_int(params, "G", 8), param_double(params, "step_size", 0.1))};
  }
  throw ConfigError("unknown env '" + name + "'");
}

StateId step(const EnvSpec& env, StateId s, const ActionChoice& a, Rng& rng) {
  const auto* d = std::get_if<DiscreteAction>(&a);
  if (d == nullptr) throw UnsupportedOperation("step: continuous actions need a PointMassState");
  return env.finite().step(s, *d, rng);
}

std::vector<Outcome> enumerate_transitions(const EnvSpec& env, StateId s, const ActionChoice& a) {
  if (!env.is_finite()) throw UnsupportedOperation("enumerate_transitions: " + env.name() + " is continuous");
  const auto* d = std::get_if<DiscreteAction>(&a);
  if (d == nullptr) throw DomainError("enumerate_transitions: expected a discrete action");
  const auto outs = env.finite().transitions(s, *d);
  return {outs.begin(), outs.end()};
}

Trajectory rollout(const EnvSpec& env, const Policy& policy, int h, Rng& rng) {
  if (h < 1) throw DomainError("rollout: horizon must be positive");
  if (env.is_finite()) {
    Trajectory traj(env.start());
    while (traj.length() < h) {
      const ActionChoice a = policy(traj, rng);
      const auto* d = std::get_if<DiscreteAction>(&a);
      if (d == nullptr) throw DomainError("rollout: finite env needs a discrete action");
      traj.push(*d, env.finite().step(traj.back(), *d, rng));
    }
    return traj;
  }
  const PointMassEnv& pm = env.point_mass();
  PointMassState state = pm.reset();
  Trajectory traj(state.bin);
  while (traj.length() < h) {
    ActionChoice a = policy(traj, rng);
    const auto* c = std::get_if<ContinuousAction>(&a);
    if (c == nullptr) throw DomainError("rollout: point_mass needs a continuous action");
    state = pm.step(state, *c);
    traj.push(std::move(a), state.bin);
  }
  return traj;
}

}  // namespace etapsi
