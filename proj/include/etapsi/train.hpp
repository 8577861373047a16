#pragma once

#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "etapsi/core.hpp"
#include "etapsi/dp.hpp"
#include "etapsi/envs.hpp"
#include "etapsi/seqmodel.hpp"
#include "etapsi/traces.hpp"

namespace etapsi {

/// FIFO store of complete episodes, bounded by the total number of transitions.
class EpisodeBuffer {
 public:
  explicit EpisodeBuffer(long capacity = 200000);

  void add(Trajectory episode);
  std::size_t episodes() const { return store_.size(); }
  long transitions() const { return transitions_; }
  long capacity() const { return capacity_; }
  const Trajectory& episode(std::size_t i) const { return store_.at(i); }

 private:
  long capacity_;
  long transitions_ = 0;
  std::deque<Trajectory> store_;
};

/// Uniform episode, then a prefix length l uniform in {2..min(h, episode length)}.
std::vector<Trajectory> sample_prefix_batch(const EpisodeBuffer& buffer, int batch, int h, Rng& rng);

/// Entropy of the combined vector with negative entries clipped to zero; -inf
/// when nothing positive remains. Learned SR vectors can dip below zero.
double clipped_entropy(const VisitationVector& v);

struct TrainConfig {
  std::string env = "chain_mdp";
  ParamMap env_params;
  int h = 20;
  int episodes = 1000;
  double alpha = 0.95;
  int batch = 32;
  double lr = 3e-4;
  std::uint64_t seed = 0;
  int updates_per_episode = 0;  // 0: h - 1

  int embed = 64;
  int hidden = 64;
  int decoder_hidden = 32;
  int encoder_layers = 1;
  long buffer_capacity = 200000;

  // Finite actions: epsilon-greedy collection, annealed linearly.
  double epsilon_start = 0.1;
  double epsilon_end = 0.01;
  double epsilon_anneal_fraction = 0.5;

  // Continuous actions.
  int actor_hidden = 256;
  double action_noise = 0.1;
  double target_noise = 0.2;
  double noise_clip = 0.5;
  int policy_update = 2;
  double rho = 0.005;
  double grad_clip = 5.0;
  int warmup_episodes = 0;  // uniform random actions before the actor takes over

  // Evaluation during training.
  int eval_every = 1;
  int completion_h = 0;  // 0: the env's episode-length horizon
  bool log_wall_time = false;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Table values for the named environment; unknown names keep the defaults.
TrainConfig default_train_config(const std::string& env);
/// Horizon used for the episode-length (search completion) metric.
int episode_length_horizon(const std::string& env);

struct MetricsRow {
  int episode = 0;
  double loss = 0.0;
  double entropy = 0.0;
  double coverage = 0.0;
  int search_completion_time = 0;
  bool search_completed = false;
  double wall_seconds = 0.0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// ---------------------------------------------------------------------------
// Finite-action TD learning

/// A prediction request: head `action` of the SR at prefix s_1..s_{pos+1} of
/// batch element `seq`.
struct HeadQuery {
  int seq = 0;
  int pos = 0;
  int action = 0;
};

/// GRU SR network with its Adam state.
class GruSrModel {
 public:
  GruSrModel(ModelParams params, AdamConfig adam);

  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  int n_states() const { return params_.shape().n_states; }
  int n_actions() const { return params_.shape().n_actions; }

  using Pass = std::unique_ptr<TrunkPass>;
  Pass pass(const std::vector<Trajectory>& batch) const;
  /// All heads (n_actions * n_states rows) at each (seq, pos).
  Eigen::MatrixXd heads(const Pass& pass, const std::vector<std::pair<int, int>>& at) const;
  /// Mean squared error of the queried heads against `targets` (n_states x queries).
  std::pair<double, GradientBundle> loss_gradient(const Pass& pass, const std::vector<HeadQuery>& queries,
                                                  const Eigen::MatrixXd& targets) const;
  /// One optimizer step on that loss; returns the loss before the step.
  double fit(const Pass& pass, const std::vector<HeadQuery>& queries, const Eigen::MatrixXd& targets);

 private:
  ModelParams params_;
  OptimizerState opt_;
};

/// SR with lookup capacity: one free vector per (prefix, action), trained by
/// plain gradient steps on the same loss.
class TabularSrModel {
 public:
  TabularSrModel(int n_states, int n_actions, double step_size);

  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }
  double step_size() const { return step_size_; }

  using Pass = std::vector<TrajectoryKey>;
  Pass pass(const std::vector<Trajectory>& batch) const;
  Eigen::MatrixXd heads(const Pass& pass, const std::vector<std::pair<int, int>>& at) const;
  double fit(const Pass& pass, const std::vector<HeadQuery>& queries, const Eigen::MatrixXd& targets);

  /// Stored heads for a prefix (zeros if never written).
  Eigen::VectorXd lookup(const Trajectory& prefix) const;
  void store(const Trajectory& prefix, const Eigen::VectorXd& heads);

 private:
  Eigen::VectorXd lookup_key(const TrajectoryKey& key) const;

  int n_states_;
  int n_actions_;
  double step_size_;
  std::unordered_map<TrajectoryKey, Eigen::VectorXd, TrajectoryKeyHash> table_;
};

/// Regression targets for a batch of prefixes tau_{:l}: the query is head
/// a_{l-1} at tau_{:l-1}; the target is e_{s_{l-1}} + alpha * psi(tau_{:l}, a')
/// with a' = argmax_a H(alpha eta(tau_{:l-1}) + psi(tau_{:l}, a)). At l = h the
/// successor is the exact terminal value e_{s_h}.
struct TdTargets {
  std::vector<HeadQuery> queries;
  Eigen::MatrixXd y;
  std::vector<int> next_actions;  // a' per element; -1 at the horizon
};

template <class Model>
TdTargets td_targets_finite(const Model& model, const typename Model::Pass& pass, const std::vector<Trajectory>& batch,
                            const DiscountSchedule& sched) {
  const int n = model.n_states();
  const int h = sched.horizon();
  const double alpha = sched.alpha();
  std::vector<std::pair<int, int>> at;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int l = batch[i].length();
    if (l < 2) throw DomainError("td_update_finite: prefixes need at least two states");
    if (l > h) throw DomainError("td_update_finite: prefix longer than the horizon");
    if (l < h) at.emplace_back(static_cast<int>(i), l - 1);
  }
  const Eigen::MatrixXd next = at.empty() ? Eigen::MatrixXd() : model.heads(pass, at);

  TdTargets out;
  out.y.resize(n, static_cast<Eigen::Index>(batch.size()));
  Eigen::Index col = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& tau = batch[i];
    const int l = tau.length();
    VisitationVector successor;
    int chosen = -1;
    if (l == h) {
      successor = one_hot(tau.back(), n);
    } else {
      const VisitationVector past = alpha * trace_of(tau, l - 1, n, alpha).eta;
      std::vector<double> q;
      for (int a = 0; a < model.n_actions(); ++a) q.push_back(clipped_entropy(past + next.col(col).segment(a * n, n)));
      chosen = argmax_lowest(q);
      successor = next.col(col).segment(chosen * n, n);
      ++col;
    }
    out.y.col(static_cast<Eigen::Index>(i)) = one_hot(tau.state(l - 2), n) + alpha * successor;
    out.queries.push_back({static_cast<int>(i), l - 2, tau.discrete_action(l - 2)});
    out.next_actions.push_back(chosen);
  }
  return out;
}

/// One TD step on a batch of prefixes; returns the mean squared TD error.
/// Targets are plain numbers, so no gradient reaches them.
template <class Model>
double td_update_finite(Model& model, const std::vector<Trajectory>& batch, const DiscountSchedule& sched) {
  if (batch.empty()) throw DomainError("td_update_finite: empty batch");
  const auto pass = model.pass(batch);
  const TdTargets t = td_targets_finite(model, pass, batch, sched);
  return model.fit(pass, t.queries, t.y);
}

/// Greedy (epsilon = 0) or epsilon-greedy policy over Q_expl using the model's
/// heads. The policy carries its own incremental GRU state.
Policy learned_finite_policy(std::shared_ptr<const ModelParams> params, double alpha, double epsilon = 0.0);

struct FiniteTrainResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
};

FiniteTrainResult train_finite(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Continuous-action actor-critic

/// Normalized-entropy objective used for the actor. With p = v / Z it is
/// -sum_i phi(p_i), phi(p) = p log p, continued linearly below p = 1e-6 so that
/// learned vectors with tiny or negative entries stay differentiable.
double actor_objective(const VisitationVector& v, double normalizer);
/// dJ/dv_i = z_i / Z with z_i = -(log max(p_i, 1e-6) + 1).
VisitationVector actor_objective_grad(const VisitationVector& v, double normalizer);

struct ActorGradient {
  double objective = 0.0;  // mean J over the batch elements that have a successor
  GradientBundle grad;     // ascent direction; non-zero only in the actor block
  int used = 0;
};

/// Deterministic policy gradient through critic 0: a = pi(tau_{:l}),
/// v = alpha eta(tau_{:l-1}) + psi(tau_{:l}, a), J averaged over elements with
/// l < h. Actor inputs are detached from the encoder and GRU.
ActorGradient actor_gradient(const ModelParams& model, const std::vector<Trajectory>& batch,
                             const DiscountSchedule& sched);

/// Targets for both critics: a' = clip(pi_targ(tau_{:l}) + clip(sigma * N(0,1), -c, c)),
/// i = argmin_k H(alpha eta + psi_targ_k(tau_{:l}, a')), y = e_{s_{l-1}} + alpha psi_targ_i.
struct CriticTargets {
  Eigen::MatrixXd y;     // n_states x batch
  std::vector<int> pick;  // chosen critic per element; -1 at the horizon
};
CriticTargets continuous_targets(const ModelParams& target, const std::vector<Trajectory>& batch,
                                 const DiscountSchedule& sched, double target_noise, double noise_clip, Rng& rng);

/// Sum over critics of the mean squared error against shared targets.
std::pair<double, GradientBundle> critic_loss_gradient(const ModelParams& online, const std::vector<Trajectory>& batch,
                                                       const Eigen::MatrixXd& y);

/// Deterministic actor, optionally with Gaussian exploration noise, clipped to
/// the action bounds.
Policy actor_policy(std::shared_ptr<const ModelParams> params, double noise_std = 0.0);

struct ContinuousTrainResult {
  ModelParams online;
  ModelParams target;
  std::vector<MetricsRow> metrics;
};

ContinuousTrainResult train_continuous(const TrainConfig& cfg);

}  // namespace etapsi
