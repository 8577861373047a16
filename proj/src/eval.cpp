#include "etapsi/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace etapsi {

namespace {

// First index at which every state has appeared across `trajs`, or -1.
int union_completion(std::span<const Trajectory> trajs, int n_states) {
  std::vector<bool> seen(static_cast<std::size_t>(n_states), false);
  int missing = n_states;
  int longest = 0;
  for (const auto& t : trajs) longest = std::max(longest, t.length());
  for (int i = 0; i < longest; ++i) {
    for (const auto& t : trajs) {
      if (i >= t.length()) continue;
      const auto s = static_cast<std::size_t>(t.state(i).index);
      if (!seen[s]) {
        seen[s] = true;
        if (--missing == 0) return i;
      }
    }
  }
  return -1;
}

}  // namespace

EvalReport report_of_many(std::span<const Trajectory> trajs, int n_states, int h) {
  if (trajs.empty()) throw DomainError("report: no trajectories");
  if (h < 1) throw DomainError("report: horizon must be positive");
  EvalReport r;
  r.horizon = h;
  r.visits = VisitationVector::Zero(n_states);
  VisitationVector dist = VisitationVector::Zero(n_states);
  int completion_horizon = 0;
  for (const auto& t : trajs) {
    if (t.length() < h) throw DomainError("report: trajectory shorter than the horizon");
    const Trajectory head = t.prefix(h);
    dist += visitation_distribution(head, DiscountSchedule::constant(h), n_states);
    for (const StateId s : head.states()) r.visits[s.index] += 1.0;
    completion_horizon = std::max(completion_horizon, t.length());
  }
  const double n = static_cast<double>(trajs.size());
  dist /= n;
  r.visits /= n;
  r.entropy = entropy(dist);
  r.coverage = static_cast<double>((dist.array() > 0.0).count()) / n_states;
  r.completion_horizon = completion_horizon;
  const int done = union_completion(trajs, n_states);
  r.search_completed = done >= 0;
  r.search_completion_time = r.search_completed ? done : completion_horizon;
  return r;
}

EvalReport report_of(const Trajectory& traj, int n_states, int h) {
  return report_of_many(std::span<const Trajectory>(&traj, 1), n_states, h);
}

EvalReport evaluate(const Policy& policy, const EnvSpec& env, int h, Rng& rng, int completion_h) {
  const Trajectory t = rollout(env, policy, std::max(h, completion_h), rng);
  return report_of(t, env.n_states(), h);
}

EvalReport evaluate_multi(const Policy& policy, const EnvSpec& env, int h, int n_traj, Rng& rng) {
  if (n_traj < 1) throw DomainError("evaluate_multi: n_traj must be positive");
  std::vector<Trajectory> trajs;
  for (int i = 0; i < n_traj; ++i) trajs.push_back(rollout(env, policy, h, rng));
  return report_of_many(trajs, env.n_states(), h);
}

double goal_search_time(const Policy& policy, const EnvSpec& env, int h, std::span<const StateId> goals, Rng& rng) {
  if (goals.empty()) throw DomainError("goal_search_time: no goals");
  double total = 0.0;
  for (const StateId goal : goals) {
    if (goal.index < 0 || goal.index >= env.n_states()) throw DomainError("goal_search_time: goal out of range");
    const Trajectory t = rollout(env, policy, h, rng);
    int hit = h;
    for (int i = 0; i < t.length(); ++i) {
      if (t.state(i) == goal) {
        hit = i;
        break;
      }
    }
    total += hit;
  }
  return total / static_cast<double>(goals.size());
}

double goal_search_time(const Policy& policy, const EnvSpec& env, int h, Rng& rng, int n_goals) {
  if (n_goals < 1) throw DomainError("goal_search_time: n_goals must be positive");
  std::uniform_int_distribution<int> pick(0, env.n_states() - 1);
  std::vector<StateId> goals;
  for (int i = 0; i < n_goals; ++i) goals.emplace_back(pick(rng));
  return goal_search_time(policy, env, h, goals, rng);
}

void heatmap_export(const EvalReport& report, const GridLayout& layout, const std::filesystem::path& stem) {
  if (report.visits.size() != layout.n_states()) throw DomainError("heatmap_export: layout does not match the report");
  const double peak = report.visits.size() > 0 ? report.visits.maxCoeff() : 0.0;
  std::filesystem::path csv_path = stem;
  csv_path += ".csv";
  std::filesystem::path pgm_path = stem;
  pgm_path += ".pgm";
  std::ofstream csv(csv_path);
  std::ofstream pgm(pgm_path);
  if (!csv || !pgm) throw ResourceError("heatmap_export: cannot write " + stem.string());
  pgm << "P2\n" << layout.cols << ' ' << layout.rows << "\n255\n";
  char buf[32];
  for (int r = 0; r < layout.rows; ++r) {
    for (int c = 0; c < layout.cols; ++c) {
      const int s = layout.state_of_cell[static_cast<std::size_t>(r * layout.cols + c)];
      if (c > 0) {
        csv << ',';
        pgm << ' ';
      }
      if (s < 0) {
        csv << '#';
        pgm << 0;
        continue;
      }
      const double v = report.visits[s];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      csv << buf;
      pgm << (peak > 0.0 ? static_cast<int>(std::lround(255.0 * v / peak)) : 0);
    }
    csv << '\n';
    pgm << '\n';
  }
  if (!csv || !pgm) throw ResourceError("heatmap_export: write failed for " + stem.string());
}

std::vector<std::vector<std::optional<double>>> load_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open heatmap " + path.string());
  std::vector<std::vector<std::optional<double>>> grid;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::optional<double>> row;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      if (cell == "#") {
        row.emplace_back();
      } else {
        try {
          row.emplace_back(std::stod(cell));
        } catch (const std::exception&) {
          throw ConfigError("heatmap: bad cell '" + cell + "' in " + path.string());
        }
      }
    }
    grid.push_back(std::move(row));
  }
  return grid;
}

}  // namespace etapsi
