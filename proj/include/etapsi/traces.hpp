#pragma once

#include <functional>
#include <span>
#include <vector>

#include "etapsi/core.hpp"
#include "etapsi/envs.hpp"

namespace etapsi {

/// Discounted record of the states visited so far, anchored at the most
/// recently absorbed state: eta = sum_{t<=k} alpha^(k-t) e_{s_t}.
struct PredecessorTrace {
  VisitationVector eta;
  int anchored_len = 0;
  double alpha = 1.0;

  static PredecessorTrace empty(int n_states, double alpha);
};

/// Successor representation anchored at the decision step T:
/// e_{s_T} + alpha e_{s_{T+1}} + ... in expectation.
using SRVector = VisitationVector;

/// Deterministic non-Markovian policy over a finite action set.
using TrajectoryPolicy = std::function<int(const Trajectory&)>;

/// eta' = alpha * eta + e_s.
PredecessorTrace trace_update(PredecessorTrace trace, StateId s);

/// Trace after absorbing the first `k` states of `traj`.
PredecessorTrace trace_of(const Trajectory& traj, int k, int n_states, double alpha);

/// Expected visitation vector over t = 1..h seen from step T: alpha * eta + psi.
VisitationVector combine(const PredecessorTrace& trace, const SRVector& psi, const DiscountSchedule& sched);

struct QExpl {
  std::vector<double> values;
  int argmax = 0;
};

/// Entropy of combine(trace, psi_a) for every action; ties go to the lowest index.
QExpl q_expl(const PredecessorTrace& trace, std::span<const SRVector> psi_per_action,
             const DiscountSchedule& sched);

inline constexpr long kDefaultNodeCap = 10'000'000;

/// Exact psi(traj, a) under `policy`, by depth-first expectation over every
/// stochastic outcome until the schedule horizon.
SRVector exact_sr(const EnvSpec& env, const Trajectory& traj, int a, const TrajectoryPolicy& policy,
                  const DiscountSchedule& sched, long node_cap = kDefaultNodeCap);

namespace detail {

/// Counts expanded nodes of an outcome tree and enforces the cap.
class NodeBudget {
 public:
  explicit NodeBudget(long cap) : cap_(cap) {}
  void charge();
  long used() const { return used_; }

 private:
  long cap_;
  long used_ = 0;
};

/// One level of the anchored recursion shared by exact_sr and dp_solve:
///   psi(tau, a) = e_{s_T} + alpha * sum_{s'} p(s_T, a, s') * next(tau + (a, s'))
/// with psi = e_{s_h} once tau has reached the horizon. `next` receives the
/// extended trajectory and returns psi of the policy's action there.
template <class Continuation>
SRVector expand(const FiniteEnv& env, Trajectory& tau, int a, const DiscountSchedule& sched, NodeBudget& budget,
                Continuation&& next) {
  budget.charge();
  SRVector psi = one_hot(tau.back(), env.n_states());
  if (tau.length() >= sched.horizon()) return psi;
  for (const Outcome& o : env.transitions(tau.back(), a)) {
    tau.push(a, o.next);
    psi.noalias() += (sched.alpha() * o.probability) * next(tau);
    tau.pop();
  }
  return psi;
}

}  // namespace detail

}  // namespace etapsi
