#include "etapsi/traces.hpp"

#include <string>

namespace etapsi {

PredecessorTrace PredecessorTrace::empty(int n_states, double alpha) {
  if (n_states < 1) throw DomainError("PredecessorTrace: need at least one state");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw DomainError("PredecessorTrace: alpha must lie in (0, 1]");
  return {VisitationVector::Zero(n_states), 0, alpha};
}

PredecessorTrace trace_update(PredecessorTrace trace, StateId s) {
  if (s.index < 0 || s.index >= trace.eta.size()) throw DomainError("trace_update: state out of range");
  trace.eta *= trace.alpha;
  trace.eta[s.index] += 1.0;
  ++trace.anchored_len;
  return trace;
}

PredecessorTrace trace_of(const Trajectory& traj, int k, int n_states, double alpha) {
  if (k < 0 || k > traj.length()) throw DomainError("trace_of: k out of range");
  PredecessorTrace trace = PredecessorTrace::empty(n_states, alpha);
  for (int i = 0; i < k; ++i) trace = trace_update(std::move(trace), traj.state(i));
  return trace;
}

VisitationVector combine(const PredecessorTrace& trace, const SRVector& psi, const DiscountSchedule& sched) {
  if (trace.eta.size() != psi.size())
    throw DomainError("combine: trace has " + std::to_string(trace.eta.size()) + " entries, psi has " +
                      std::to_string(psi.size()));
  if (trace.anchored_len > 0 && trace.alpha != sched.alpha())
    throw DomainError("combine: trace and schedule disagree on alpha");
  return sched.alpha() * trace.eta + psi;
}

QExpl q_expl(const PredecessorTrace& trace, std::span<const SRVector> psi_per_action,
             const DiscountSchedule& sched) {
  if (psi_per_action.empty()) throw DomainError("q_expl: no actions");
  QExpl out;
  out.values.reserve(psi_per_action.size());
  for (const auto& psi : psi_per_action) out.values.push_back(entropy(combine(trace, psi, sched)));
  out.argmax = argmax_lowest(out.values);
  return out;
}

namespace detail {

void NodeBudget::charge() {
  if (++used_ > cap_)
    throw ResourceError("outcome-tree enumeration exceeded " + std::to_string(cap_) + " nodes");
}

}  // namespace detail

SRVector exact_sr(const EnvSpec& env, const Trajectory& traj, int a, const TrajectoryPolicy& policy,
                  const DiscountSchedule& sched, long node_cap) {
  const FiniteEnv& fenv = env.finite();
  if (traj.empty()) throw DomainError("exact_sr: empty trajectory");
  if (traj.length() > sched.horizon()) throw DomainError("exact_sr: trajectory exceeds the horizon");
  detail::NodeBudget budget(node_cap);
  Trajectory tau = traj;
  std::function<SRVector(Trajectory&)> follow = [&](Trajectory& t) -> SRVector {
    if (t.length() >= sched.horizon()) {
      budget.charge();
      return one_hot(t.back(), fenv.n_states());
    }
    return detail::expand(fenv, t, policy(t), sched, budget, follow);
  };
  return detail::expand(fenv, tau, a, sched, budget, follow);
}

}  // namespace etapsi
