#include "etapsi/dp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>

namespace etapsi {

std::size_t TrajectoryKeyHash::operator()(const TrajectoryKey& key) const noexcept {
  std::uint64_t h = 1469598103934665603ULL;
  for (const std::int32_t v : key) {
    h ^= static_cast<std::uint32_t>(v);
    h *= 1099511628211ULL;
  }
  return static_cast<std::size_t>(h);
}

TrajectoryKey key_of(const Trajectory& traj) {
  TrajectoryKey key;
  key.reserve(static_cast<std::size_t>(2 * traj.length()));
  for (int i = 0; i < traj.length(); ++i) {
    if (i > 0) key.push_back(traj.discrete_action(i - 1));
    key.push_back(traj.state(i).index);
  }
  return key;
}

const TrajectoryTable::Entry* TrajectoryTable::find(const Trajectory& traj) const {
  const auto it = entries_.find(key_of(traj));
  return it == entries_.end() ? nullptr : &it->second;
}

int TrajectoryTable::action(const Trajectory& traj) const {
  const Entry* e = find(traj);
  if (e == nullptr) throw ConsistencyError("trajectory table has no entry for this prefix");
  if (e->action < 0) throw ConsistencyError("trajectory table: no action stored at the horizon");
  return e->action;
}

const SRVector& TrajectoryTable::psi(const Trajectory& traj, int a) const {
  const Entry* e = find(traj);
  if (e == nullptr) throw ConsistencyError("trajectory table has no entry for this prefix");
  if (a < 0 || a >= static_cast<int>(e->psi.size()) || e->psi[static_cast<std::size_t>(a)].size() == 0)
    throw ConsistencyError("trajectory table: action was never expanded at this prefix");
  return e->psi[static_cast<std::size_t>(a)];
}

TrajectoryTable::Entry& TrajectoryTable::insert(const Trajectory& traj, Entry entry) {
  return entries_.insert_or_assign(key_of(traj), std::move(entry)).first->second;
}

namespace {

// Upper bounds on the entropy any continuation can reach, given the weight
// already committed (`occupied`) and the weights of the steps still to come.
// Each one relaxes a different constraint, so the tightest is their minimum.

// Every remaining step lands on its own fresh state (deterministic envs only:
// expectations over outcomes can spread a step's weight).
double fresh_state_bound(const VisitationVector& occupied, const std::vector<double>& future) {
  VisitationVector atoms(occupied.size() + static_cast<Eigen::Index>(future.size()));
  atoms.head(occupied.size()) = occupied;
  for (std::size_t k = 0; k < future.size(); ++k) atoms[occupied.size() + static_cast<Eigen::Index>(k)] = future[k];
  return entropy(atoms);
}

// The remaining mass may be split arbitrarily over the existing states, which
// is maximized by raising the smallest entries to a common level.
double water_fill_bound(const VisitationVector& occupied, double remaining) {
  std::vector<double> v(occupied.data(), occupied.data() + occupied.size());
  std::sort(v.begin(), v.end());
  double level = v.back() + remaining;
  double filled = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    filled += v[k];
    const double candidate = (filled + remaining) / static_cast<double>(k + 1);
    if (k + 1 == v.size() || candidate <= v[k + 1]) {
      level = candidate;
      break;
    }
  }
  return entropy(occupied.cwiseMax(level));
}

// Unit weights (alpha = 1, deterministic): put each remaining visit on a
// least-visited state.
double unit_fill_bound(VisitationVector occupied, int remaining) {
  for (int k = 0; k < remaining; ++k) {
    Eigen::Index i;
    occupied.minCoeff(&i);
    occupied[i] += 1.0;
  }
  return entropy(occupied);
}

class ContinuationBound {
 public:
  ContinuationBound(const FiniteEnv& env, double alpha, int h)
      : deterministic_(env.deterministic()), unit_(alpha == 1.0), alpha_(alpha), h_(h) {}

  // Bound for a node whose combined vector so far is `occupied` and whose
  // last absorbed step is `step` (1-based).
  double operator()(const VisitationVector& occupied, int step) const {
    std::vector<double> future;
    double w = 1.0;
    for (int t = step + 1; t <= h_; ++t) future.push_back(w *= alpha_);
    const double mass = std::accumulate(future.begin(), future.end(), 0.0);
    double bound = std::min(std::log(static_cast<double>(occupied.size())), water_fill_bound(occupied, mass));
    if (deterministic_) {
      bound = std::min(bound, fresh_state_bound(occupied, future));
      if (unit_) bound = std::min(bound, unit_fill_bound(occupied, h_ - step));
    }
    return bound;
  }

 private:
  bool deterministic_;
  bool unit_;
  double alpha_;
  int h_;
};

double slack_of(double value) { return 1e-12 * std::max(1.0, std::abs(value)); }

}  // namespace

TrajectoryTable dp_solve(const EnvSpec& env, const DiscountSchedule& sched, int h, const DpOptions& options) {
  const FiniteEnv& fenv = env.finite();
  if (h != sched.horizon()) throw DomainError("dp_solve: h must match the schedule horizon");
  const int n = fenv.n_states();
  const int n_actions = fenv.n_actions();
  const double alpha = sched.alpha();
  TrajectoryTable table(h, n, n_actions, alpha);
  detail::NodeBudget budget(options.node_cap);
  const ContinuationBound bound_of(fenv, alpha, h);

  // traces[k] = eta over the first k states of the current DFS path.
  std::vector<VisitationVector> traces{VisitationVector::Zero(n)};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double neg_inf = -std::numeric_limits<double>::infinity();

  std::function<SRVector(Trajectory&)> solve = [&](Trajectory& tau) -> SRVector {
    const int T = tau.length();
    const SRVector terminal = one_hot(tau.back(), n);
    if (T >= h) {
      budget.charge();
      TrajectoryTable::Entry e;
      e.psi.assign(static_cast<std::size_t>(n_actions), terminal);
      e.q.assign(static_cast<std::size_t>(n_actions), nan);
      table.insert(tau, std::move(e));
      return terminal;
    }
    traces.resize(static_cast<std::size_t>(T));
    traces.push_back(alpha * traces[static_cast<std::size_t>(T - 1)] + terminal);
    const VisitationVector past = alpha * traces[static_cast<std::size_t>(T - 1)];

    // Branch and bound over actions: visit the most promising first and skip
    // any whose bound falls strictly below the best value found, which can
    // never change the lowest-index argmax.
    std::vector<double> optimistic(static_cast<std::size_t>(n_actions), neg_inf);
    std::vector<int> order(static_cast<std::size_t>(n_actions));
    std::iota(order.begin(), order.end(), 0);
    if (options.prune) {
      for (int a = 0; a < n_actions; ++a) {
        VisitationVector occupied = past + terminal;
        for (const Outcome& o : fenv.transitions(tau.back(), a)) occupied[o.next.index] += alpha * o.probability;
        optimistic[static_cast<std::size_t>(a)] = bound_of(occupied, T + 1);
      }
      std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return optimistic[static_cast<std::size_t>(x)] > optimistic[static_cast<std::size_t>(y)];
      });
    }

    TrajectoryTable::Entry e;
    e.psi.resize(static_cast<std::size_t>(n_actions));
    e.q.assign(static_cast<std::size_t>(n_actions), nan);
    std::vector<double> ranked(static_cast<std::size_t>(n_actions), neg_inf);
    double best = neg_inf;
    for (const int a : order) {
      if (options.prune && optimistic[static_cast<std::size_t>(a)] < best - 4.0 * slack_of(best)) continue;
      SRVector psi = detail::expand(fenv, tau, a, sched, budget, solve);
      const double q = entropy(past + psi);
      e.psi[static_cast<std::size_t>(a)] = std::move(psi);
      e.q[static_cast<std::size_t>(a)] = q;
      ranked[static_cast<std::size_t>(a)] = q;
      best = std::max(best, q);
    }
    e.action = argmax_lowest(ranked);
    SRVector chosen = e.psi[static_cast<std::size_t>(e.action)];
    table.insert(tau, std::move(e));
    return chosen;
  };

  Trajectory root(fenv.start());
  solve(root);
  table.set_nodes_expanded(budget.used());
  return table;
}

Trajectory dp_rollout(const TrajectoryTable& table, const EnvSpec& env, Rng& rng) {
  const FiniteEnv& fenv = env.finite();
  if (fenv.n_states() != table.n_states() || fenv.n_actions() != table.n_actions())
    throw DomainError("dp_rollout: table was built for a different environment");
  Trajectory tau(fenv.start());
  while (tau.length() < table.horizon()) {
    const int a = table.action(tau);
    tau.push(a, fenv.step(tau.back(), a, rng));
  }
  return tau;
}

TrajectoryPolicy table_policy(const TrajectoryTable& table) {
  return [&table](const Trajectory& tau) { return table.action(tau); };
}

namespace {

BruteForceResult brute_force_deterministic(const FiniteEnv& env, const std::vector<double>& w, int h,
                                           long leaf_cap) {
  BruteForceResult best;
  best.best_entropy = -std::numeric_limits<double>::infinity();
  std::vector<int> actions;
  VisitationVector v = VisitationVector::Zero(env.n_states());
  Rng unused;

  std::function<void(StateId, int)> visit = [&](StateId s, int t) {
    v[s.index] += w[static_cast<std::size_t>(t - 1)];
    if (t == h) {
      if (++best.leaves > leaf_cap)
        throw ResourceError("brute_force_best: more than " + std::to_string(leaf_cap) + " leaves");
      const double value = entropy(v);
      if (value > best.best_entropy + 1e-12 * std::max(1.0, std::abs(value))) {
        best.best_entropy = value;
        best.best_actions = actions;
      }
    } else {
      for (int a = 0; a < env.n_actions(); ++a) {
        actions.push_back(a);
        visit(env.step(s, a, unused), t + 1);
        actions.pop_back();
      }
    }
    v[s.index] -= w[static_cast<std::size_t>(t - 1)];
  };
  visit(env.start(), 1);
  return best;
}

// The future a closed-loop policy can realize from (s, t) depends on the
// history only through the policy's choices, so the set of achievable expected
// tails is a function of (s, t) alone.
BruteForceResult brute_force_stochastic(const FiniteEnv& env, const std::vector<double>& w, int h,
                                        long leaf_cap) {
  const int n = env.n_states();
  std::map<std::pair<int, int>, std::vector<VisitationVector>> memo;
  long produced = 0;
  std::vector<int> root_actions;

  std::function<const std::vector<VisitationVector>&(int, int)> tails =
      [&](int s, int t) -> const std::vector<VisitationVector>& {
    const auto key = std::make_pair(s, t);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const VisitationVector here = w[static_cast<std::size_t>(t - 1)] * one_hot(StateId(s), n);
    std::vector<VisitationVector> out;
    if (t == h) {
      out.push_back(here);
    } else {
      for (int a = 0; a < env.n_actions(); ++a) {
        std::vector<VisitationVector> partial{here};
        for (const Outcome& o : env.transitions(StateId(s), a)) {
          const auto& child = tails(o.next.index, t + 1);
          std::vector<VisitationVector> grown;
          grown.reserve(partial.size() * child.size());
          for (const auto& base : partial) {
            for (const auto& tail : child) {
              if (++produced > leaf_cap)
                throw ResourceError("brute_force_best: more than " + std::to_string(leaf_cap) + " policies");
              grown.push_back(base + o.probability * tail);
            }
          }
          partial = std::move(grown);
        }
        if (t == 1) root_actions.insert(root_actions.end(), partial.size(), a);
        out.insert(out.end(), std::make_move_iterator(partial.begin()), std::make_move_iterator(partial.end()));
      }
    }
    return memo.emplace(key, std::move(out)).first->second;
  };

  const auto& roots = tails(env.start().index, 1);
  BruteForceResult best;
  best.best_entropy = -std::numeric_limits<double>::infinity();
  best.leaves = static_cast<long>(roots.size());
  for (std::size_t i = 0; i < roots.size(); ++i) {
    const double value = entropy(roots[i]);
    if (value > best.best_entropy + 1e-12 * std::max(1.0, std::abs(value))) {
      best.best_entropy = value;
      best.best_actions = h > 1 ? std::vector<int>{root_actions[i]} : std::vector<int>{};
    }
  }
  return best;
}

}  // namespace

BruteForceResult brute_force_best(const EnvSpec& env, const DiscountSchedule& sched, int h, long leaf_cap) {
  const FiniteEnv& fenv = env.finite();
  if (h < 1 || h > sched.horizon()) throw DomainError("brute_force_best: h must lie in [1, horizon]");
  std::vector<double> w;
  for (int t = 1; t <= h; ++t) w.push_back(sched.weight(t, 1));
  if (fenv.deterministic()) return brute_force_deterministic(fenv, w, h, leaf_cap);
  if (h > 5) throw ResourceError("brute_force_best: stochastic enumeration is limited to h <= 5");
  return brute_force_stochastic(fenv, w, h, leaf_cap);
}

}  // namespace etapsi
