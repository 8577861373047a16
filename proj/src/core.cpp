#include "etapsi/core.hpp"

#include <algorithm>
#include <string>

namespace etapsi {

Trajectory::Trajectory(std::vector<StateId> states, std::vector<ActionChoice> actions)
    : states_(std::move(states)), actions_(std::move(actions)) {
  if (states_.empty()) throw DomainError("Trajectory: needs at least one state");
  if (actions_.size() + 1 != states_.size())
    throw DomainError("Trajectory: expected len(actions) == len(states) - 1");
}

void Trajectory::push(ActionChoice action, StateId next) {
  if (states_.empty()) throw DomainError("Trajectory::push on empty trajectory");
  actions_.push_back(std::move(action));
  states_.push_back(next);
}

void Trajectory::pop() {
  if (states_.size() < 2) throw DomainError("Trajectory::pop would leave an empty trajectory");
  states_.pop_back();
  actions_.pop_back();
}

Trajectory Trajectory::prefix(int k) const {
  if (k < 1 || k > length()) throw DomainError("Trajectory::prefix: k out of range");
  Trajectory out;
  out.states_.assign(states_.begin(), states_.begin() + k);
  out.actions_.assign(actions_.begin(), actions_.begin() + (k - 1));
  return out;
}

int Trajectory::discrete_action(int i) const {
  const auto& a = actions_.at(static_cast<std::size_t>(i));
  if (const auto* d = std::get_if<DiscreteAction>(&a)) return *d;
  throw DomainError("Trajectory: action " + std::to_string(i) + " is not discrete");
}

DiscountSchedule::DiscountSchedule(double alpha, int horizon, Mode mode)
    : alpha_(alpha), horizon_(horizon), mode_(mode) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw DomainError("DiscountSchedule: alpha must lie in (0, 1]");
  if (horizon < 1) throw DomainError("DiscountSchedule: horizon must be positive");
}

DiscountSchedule DiscountSchedule::anchored(double alpha, int horizon) {
  return {alpha, horizon, Mode::anchored};
}

DiscountSchedule DiscountSchedule::constant(int horizon) { return {1.0, horizon, Mode::constant}; }

double DiscountSchedule::anchored_weight(int t, int T) const {
  if (mode_ == Mode::constant) return 1.0;
  return std::pow(alpha_, std::abs(t - T));
}

double DiscountSchedule::normalizer(int T) const {
  if (mode_ == Mode::constant) return static_cast<double>(horizon_);
  double z = 0.0;
  for (int t = 1; t <= horizon_; ++t) z += anchored_weight(t, T);
  return z;
}

double DiscountSchedule::weight(int t, int T) const {
  if (mode_ == Mode::constant) return 1.0 / horizon_;
  return anchored_weight(t, T) / normalizer(T);
}

VisitationVector one_hot(StateId s, int n_states) {
  if (n_states < 1 || s.index < 0 || s.index >= n_states)
    throw DomainError("one_hot: state " + std::to_string(s.index) + " out of range for " +
                      std::to_string(n_states) + " states");
  VisitationVector v = VisitationVector::Zero(n_states);
  v[s.index] = 1.0;
  return v;
}

VisitationVector visitation_distribution(const Trajectory& traj, const DiscountSchedule& sched,
                                         int n_states, int anchor) {
  if (traj.empty()) throw DomainError("visitation_distribution: empty trajectory");
  if (traj.length() > sched.horizon())
    throw DomainError("visitation_distribution: trajectory longer than the schedule horizon");
  VisitationVector v = VisitationVector::Zero(n_states);
  for (int t = 1; t <= traj.length(); ++t) {
    const StateId s = traj.state(t - 1);
    if (s.index < 0 || s.index >= n_states) throw DomainError("visitation_distribution: bad state");
    v[s.index] += sched.weight(t, anchor);
  }
  return v;
}

int argmax_lowest(std::span<const double> values, double tol) {
  if (values.empty()) throw DomainError("argmax_lowest: no values");
  const double best = *std::max_element(values.begin(), values.end());
  const double slack = tol * std::max(1.0, std::abs(best));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] >= best - slack) return static_cast<int>(i);
  }
  return 0;
}

}  // namespace etapsi
