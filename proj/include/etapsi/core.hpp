#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "etapsi/errors.hpp"

namespace etapsi {

/// Index of a state (an occupancy bin in continuous environments).
struct StateId {
  int index = 0;

  constexpr StateId() = default;
  constexpr explicit StateId(int i) : index(i) {}
  friend constexpr auto operator<=>(StateId, StateId) = default;
};

using DiscreteAction = int;
using ContinuousAction = Eigen::VectorXd;
using ActionChoice = std::variant<DiscreteAction, ContinuousAction>;

/// Non-negative weights over states. Houses visitation marginals, predecessor
/// traces and successor representations alike.
using VisitationVector = Eigen::VectorXd;

/// A state/action history s_1, a_1, ..., a_{T-1}, s_T.
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(StateId start) : states_{start} {}
  Trajectory(std::vector<StateId> states, std::vector<ActionChoice> actions);

  void push(ActionChoice action, StateId next);
  /// Drops the last state and action.
  void pop();

  /// First k states and k-1 actions.
  Trajectory prefix(int k) const;

  int length() const { return static_cast<int>(states_.size()); }
  bool empty() const { return states_.empty(); }

  const std::vector<StateId>& states() const { return states_; }
  const std::vector<ActionChoice>& actions() const { return actions_; }
  StateId state(int i) const { return states_.at(static_cast<std::size_t>(i)); }
  StateId back() const { return states_.back(); }

  /// Discrete action i (0-based); throws DomainError for continuous entries.
  int discrete_action(int i) const;

 private:
  std::vector<StateId> states_;
  std::vector<ActionChoice> actions_;
};

/// Time weighting of a length-h trajectory.
///
/// Constant mode gives every step weight 1/h. Anchored mode centres the weights
/// on a decision step T: alpha^(T-t) for earlier steps, alpha^(t-T) for T and
/// later, with the shared normalizer Z(T) equal to the sum of those weights over
/// t = 1..h. Steps are 1-based throughout.
class DiscountSchedule {
 public:
  enum class Mode { anchored, constant };

  static DiscountSchedule anchored(double alpha, int horizon);
  static DiscountSchedule constant(int horizon);

  double alpha() const { return alpha_; }
  int horizon() const { return horizon_; }
  Mode mode() const { return mode_; }

  /// Unnormalized weight of step t seen from decision step T.
  double anchored_weight(int t, int T) const;
  /// Z(T): sum of anchored weights over t = 1..h.
  double normalizer(int T) const;
  /// Normalized weight; T is ignored in constant mode.
  double weight(int t, int T = 1) const;

 private:
  DiscountSchedule(double alpha, int horizon, Mode mode);

  double alpha_;
  int horizon_;
  Mode mode_;
};

VisitationVector one_hot(StateId s, int n_states);

/// sum_t weight(t) e_{s_t}; anchored schedules are viewed from step `anchor`.
VisitationVector visitation_distribution(const Trajectory& traj, const DiscountSchedule& sched,
                                         int n_states, int anchor = 1);

/// Returns v / sum(v). Throws DomainError if the sum is not positive.
template <class Derived>
VisitationVector normalize(const Eigen::MatrixBase<Derived>& v) {
  const double total = v.sum();
  if (!(total > 0.0)) throw DomainError("normalize: vector sum must be positive");
  return v / total;
}

inline constexpr double kZeroProbability = 1e-12;

/// Shannon entropy in nats of the L1-normalized vector. Entries whose
/// probability falls below 1e-12 contribute nothing.
template <class Derived>
double entropy(const Eigen::MatrixBase<Derived>& v) {
  if (v.size() == 0) throw DomainError("entropy: empty vector");
  if ((v.array() < 0.0).any()) throw DomainError("entropy: negative entry");
  const VisitationVector p = normalize(v);
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] >= kZeroProbability) h -= p[i] * std::log(p[i]);
  }
  return h;
}

/// Index of the first maximal value, treating values within `tol` of the
/// maximum as tied.
int argmax_lowest(std::span<const double> values, double tol = 1e-12);

}  // namespace etapsi
