#include "etapsi/train.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "etapsi/eval.hpp"

namespace etapsi {

namespace {

Rng sub_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

enum Stream : std::uint64_t { kInit = 1, kCollect = 2, kSample = 3, kEval = 4, kNoise = 5 };

std::vector<int> state_indices(const Trajectory& t) {
  std::vector<int> out;
  out.reserve(t.states().size());
  for (const StateId s : t.states()) out.push_back(s.index);
  return out;
}

std::unique_ptr<TrunkPass> make_trunk(const ModelParams& params, const std::vector<Trajectory>& batch) {
  std::vector<std::vector<int>> seqs;
  seqs.reserve(batch.size());
  for (const auto& t : batch) seqs.push_back(state_indices(t));
  return std::make_unique<TrunkPass>(params, std::move(seqs));
}

// Keeps an SrRunner in step with a growing trajectory; replays on any mismatch.
class RunnerSync {
 public:
  explicit RunnerSync(std::shared_ptr<const ModelParams> params) : params_(std::move(params)), runner_(*params_) {}

  const SrRunner& sync(const Trajectory& traj) {
    const auto& states = traj.states();
    bool extends = seen_.size() <= states.size();
    for (std::size_t i = 0; extends && i < seen_.size(); ++i) extends = seen_[i] == states[i].index;
    if (!extends) {
      runner_.reset();
      seen_.clear();
    }
    for (std::size_t i = seen_.size(); i < states.size(); ++i) {
      runner_.push(states[i]);
      seen_.push_back(states[i].index);
    }
    return runner_;
  }

  const ModelParams& params() const { return *params_; }

 private:
  std::shared_ptr<const ModelParams> params_;
  SrRunner runner_;
  std::vector<int> seen_;
};

double epsilon_at(const TrainConfig& cfg, int episode) {
  const double span = cfg.epsilon_anneal_fraction * cfg.episodes;
  if (span <= 0.0) return cfg.epsilon_end;
  const double frac = std::min(1.0, episode / span);
  return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start);
}

int updates_for(const TrainConfig& cfg) { return cfg.updates_per_episode > 0 ? cfg.updates_per_episode : cfg.h - 1; }

MetricsRow eval_row(const Policy& policy, const EnvSpec& env, const TrainConfig& cfg, int episode, double loss,
                    Rng& rng) {
  const int completion_h = cfg.completion_h > 0 ? cfg.completion_h : episode_length_horizon(cfg.env);
  const EvalReport r = evaluate(policy, env, cfg.h, rng, completion_h);
  MetricsRow row;
  row.episode = episode;
  row.loss = loss;
  row.entropy = r.entropy;
  row.coverage = r.coverage;
  row.search_completion_time = r.search_completion_time;
  row.search_completed = r.search_completed;
  return row;
}

bool should_eval(const TrainConfig& cfg, int episode) {
  return episode + 1 == cfg.episodes || (cfg.eval_every > 0 && (episode + 1) % cfg.eval_every == 0);
}

}  // namespace

// ---------------------------------------------------------------------------

EpisodeBuffer::EpisodeBuffer(long capacity) : capacity_(capacity) {
  if (capacity < 1) throw ConfigError("EpisodeBuffer: capacity must be positive");
}

void EpisodeBuffer::add(Trajectory episode) {
  if (episode.length() < 2) throw DomainError("EpisodeBuffer: episodes need at least two states");
  transitions_ += episode.length() - 1;
  store_.push_back(std::move(episode));
  while (transitions_ > capacity_ && store_.size() > 1) {
    transitions_ -= store_.front().length() - 1;
    store_.pop_front();
  }
}

std::vector<Trajectory> sample_prefix_batch(const EpisodeBuffer& buffer, int batch, int h, Rng& rng) {
  if (buffer.episodes() == 0) throw UsageError("sample_prefix_batch: buffer is empty");
  if (batch < 1 || h < 2) throw DomainError("sample_prefix_batch: batch must be positive and h at least 2");
  std::uniform_int_distribution<std::size_t> pick(0, buffer.episodes() - 1);
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const Trajectory& ep = buffer.episode(pick(rng));
    std::uniform_int_distribution<int> len(2, std::min(h, ep.length()));
    out.push_back(ep.prefix(len(rng)));
  }
  return out;
}

double clipped_entropy(const VisitationVector& v) {
  const VisitationVector c = v.cwiseMax(0.0);
  if (!(c.sum() > 0.0)) return -std::numeric_limits<double>::infinity();
  return entropy(c);
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* key) {
    if (!ok) throw ConfigError(std::string("invalid value for '") + key + "'");
  };
  need(!env.empty(), "env");
  need(h >= 2, "h");
  need(episodes >= 1, "episodes");
  need(alpha > 0.0 && alpha <= 1.0, "alpha");
  need(batch >= 1, "batch");
  need(lr >= 0.0 && std::isfinite(lr), "lr");
  need(updates_per_episode >= 0, "updates_per_episode");
  need(embed >= 1, "embed");
  need(hidden >= 1, "hidden");
  need(decoder_hidden >= 1, "decoder_hidden");
  need(encoder_layers == 1 || encoder_layers == 2, "encoder_layers");
  need(buffer_capacity >= 1, "buffer_capacity");
  need(epsilon_start >= 0.0 && epsilon_start <= 1.0, "epsilon_start");
  need(epsilon_end >= 0.0 && epsilon_end <= 1.0, "epsilon_end");
  need(epsilon_anneal_fraction >= 0.0 && epsilon_anneal_fraction <= 1.0, "epsilon_anneal_fraction");
  need(actor_hidden >= 1, "actor_hidden");
  need(action_noise >= 0.0, "action_noise");
  need(target_noise >= 0.0, "target_noise");
  need(noise_clip >= 0.0, "noise_clip");
  need(policy_update >= 1, "policy_update");
  need(rho >= 0.0 && rho <= 1.0, "rho");
  need(grad_clip >= 0.0, "grad_clip");
  need(warmup_episodes >= 0, "warmup_episodes");
  need(eval_every >= 0, "eval_every");
  need(completion_h >= 0, "completion_h");
}

TrainConfig default_train_config(const std::string& env) {
  TrainConfig c;
  c.env = env;
  auto widths = [&](int width, int dec) {
    c.embed = width;
    c.hidden = width;
    c.decoder_hidden = dec;
  };
  if (env == "chain_mdp") {
    c.h = 20;
    widths(64, 32);
  } else if (env == "river_swim") {
    c.h = 50;
    widths(64, 32);
  } else if (env == "gridworld") {
    c.h = 50;
    widths(128, 64);
  } else if (env == "two_rooms") {
    c.h = 100;
    widths(128, 64);
  } else if (env == "four_rooms") {
    c.h = 200;
    c.episodes = 2500;
    widths(256, 128);
  } else if (env == "point_mass") {
    c.h = 100;
    c.batch = 256;
    widths(256, 256);
    c.encoder_layers = 2;
    c.actor_hidden = 256;
  }
  return c;
}

int episode_length_horizon(const std::string& env) {
  if (env == "chain_mdp") return 100;
  if (env == "river_swim") return 500;
  if (env == "gridworld") return 200;
  if (env == "two_rooms" || env == "four_rooms") return 1000;
  return 0;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write metrics to " + path);
  out << "episode,loss,entropy,coverage,search_completion_time,search_completed,wall_seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%d,%d,%.17g\n", r.episode, r.loss, r.entropy, r.coverage,
                  r.search_completion_time, r.search_completed ? 1 : 0, r.wall_seconds);
    out << buf;
  }
  if (!out) throw ResourceError("write failed for " + path);
}

// ---------------------------------------------------------------------------

GruSrModel::GruSrModel(ModelParams params, AdamConfig adam)
    : params_(std::move(params)), opt_(critic_optimizer(params_, adam)) {
  if (params_.shape().continuous()) throw DomainError("GruSrModel: needs a discrete-action shape");
}

GruSrModel::Pass GruSrModel::pass(const std::vector<Trajectory>& batch) const { return make_trunk(params_, batch); }

Eigen::MatrixXd GruSrModel::heads(const Pass& pass, const std::vector<std::pair<int, int>>& at) const {
  std::vector<SrQuery> q;
  q.reserve(at.size());
  for (const auto& [seq, pos] : at) q.push_back({seq, pos, 0, {}});
  return DecoderPass(*pass, std::move(q)).outputs();
}

std::pair<double, GradientBundle> GruSrModel::loss_gradient(const Pass& pass, const std::vector<HeadQuery>& queries,
                                                            const Eigen::MatrixXd& targets) const {
  const int n = n_states();
  if (targets.rows() != n || targets.cols() != static_cast<Eigen::Index>(queries.size()))
    throw DomainError("GruSrModel: target shape mismatch");
  std::vector<SrQuery> q;
  q.reserve(queries.size());
  for (const auto& hq : queries) q.push_back({hq.seq, hq.pos, 0, {}});
  const DecoderPass dec(*pass, std::move(q));
  const double B = static_cast<double>(queries.size());
  Eigen::MatrixXd out_grad = Eigen::MatrixXd::Zero(dec.outputs().rows(), dec.outputs().cols());
  double loss = 0.0;
  for (std::size_t j = 0; j < queries.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    const Eigen::VectorXd diff = dec.outputs().col(col).segment(queries[j].action * n, n) - targets.col(col);
    loss += diff.squaredNorm();
    out_grad.col(col).segment(queries[j].action * n, n) = (2.0 / B) * diff;
  }
  GradientBundle g(params_);
  TrunkPass::Grad tg = pass->zero_grad();
  dec.backward(out_grad, g, &tg, nullptr);
  pass->backward(tg, g);
  return {loss / B, std::move(g)};
}

double GruSrModel::fit(const Pass& pass, const std::vector<HeadQuery>& queries, const Eigen::MatrixXd& targets) {
  auto [loss, g] = loss_gradient(pass, queries, targets);
  optim_step(params_, opt_, g);
  return loss;
}

// ---------------------------------------------------------------------------

TabularSrModel::TabularSrModel(int n_states, int n_actions, double step_size)
    : n_states_(n_states), n_actions_(n_actions), step_size_(step_size) {
  if (n_states < 1 || n_actions < 1 || !(step_size >= 0.0)) throw DomainError("TabularSrModel: bad sizes");
}

TabularSrModel::Pass TabularSrModel::pass(const std::vector<Trajectory>& batch) const {
  Pass keys;
  keys.reserve(batch.size());
  for (const auto& t : batch) keys.push_back(key_of(t));
  return keys;
}

namespace {

TrajectoryKey prefix_key(const TrajectoryKey& full, int pos) {
  const auto len = static_cast<std::size_t>(2 * pos + 1);
  if (len > full.size()) throw DomainError("TabularSrModel: position beyond the sequence");
  return TrajectoryKey(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(len));
}

}  // namespace

Eigen::VectorXd TabularSrModel::lookup_key(const TrajectoryKey& key) const {
  const auto it = table_.find(key);
  return it == table_.end() ? Eigen::VectorXd::Zero(n_states_ * n_actions_) : it->second;
}

Eigen::MatrixXd TabularSrModel::heads(const Pass& pass, const std::vector<std::pair<int, int>>& at) const {
  Eigen::MatrixXd out(n_states_ * n_actions_, static_cast<Eigen::Index>(at.size()));
  for (std::size_t j = 0; j < at.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = lookup_key(prefix_key(pass.at(static_cast<std::size_t>(at[j].first)), at[j].second));
  return out;
}

double TabularSrModel::fit(const Pass& pass, const std::vector<HeadQuery>& queries, const Eigen::MatrixXd& targets) {
  const int n = n_states_;
  const double B = static_cast<double>(queries.size());
  // Gradients are accumulated against the pre-step table, then applied.
  std::unordered_map<TrajectoryKey, Eigen::VectorXd, TrajectoryKeyHash> grads;
  double loss = 0.0;
  for (std::size_t j = 0; j < queries.size(); ++j) {
    const HeadQuery& q = queries[j];
    const TrajectoryKey key = prefix_key(pass.at(static_cast<std::size_t>(q.seq)), q.pos);
    const Eigen::VectorXd diff = lookup_key(key).segment(q.action * n, n) - targets.col(static_cast<Eigen::Index>(j));
    loss += diff.squaredNorm();
    auto [it, fresh] = grads.try_emplace(key, Eigen::VectorXd::Zero(n * n_actions_));
    it->second.segment(q.action * n, n) += (2.0 / B) * diff;
  }
  for (auto& [key, g] : grads) {
    auto [it, fresh] = table_.try_emplace(key, Eigen::VectorXd::Zero(n * n_actions_));
    it->second -= step_size_ * g;
  }
  return loss / B;
}

Eigen::VectorXd TabularSrModel::lookup(const Trajectory& prefix) const { return lookup_key(key_of(prefix)); }

void TabularSrModel::store(const Trajectory& prefix, const Eigen::VectorXd& heads) {
  if (heads.size() != n_states_ * n_actions_) throw DomainError("TabularSrModel: heads have the wrong length");
  table_[key_of(prefix)] = heads;
}

// ---------------------------------------------------------------------------

Policy learned_finite_policy(std::shared_ptr<const ModelParams> params, double alpha, double epsilon) {
  if (params->shape().continuous()) throw DomainError("learned_finite_policy: needs a discrete-action model");
  auto sync = std::make_shared<RunnerSync>(std::move(params));
  return [sync, alpha, epsilon](const Trajectory& traj, Rng& rng) -> ActionChoice {
    const NetShape& s = sync->params().shape();
    if (epsilon > 0.0) {
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      if (coin(rng) < epsilon) return std::uniform_int_distribution<int>(0, s.n_actions - 1)(rng);
    }
    const Eigen::VectorXd heads = sync->sync(traj).sr();
    const int n = s.n_states;
    const VisitationVector past = alpha * trace_of(traj, traj.length() - 1, n, alpha).eta;
    std::vector<double> q;
    for (int a = 0; a < s.n_actions; ++a) q.push_back(clipped_entropy(past + heads.segment(a * n, n)));
    return argmax_lowest(q);
  };
}

FiniteTrainResult train_finite(const TrainConfig& cfg) {
  cfg.validate();
  const EnvSpec env = make_env(cfg.env, cfg.env_params);
  if (!env.is_finite()) throw ConfigError("train_finite: env '" + cfg.env + "' has continuous actions");
  NetShape shape;
  shape.n_states = env.n_states();
  shape.n_actions = env.n_actions();
  shape.embed = cfg.embed;
  shape.hidden = cfg.hidden;
  shape.decoder_hidden = cfg.decoder_hidden;
  shape.encoder_layers = cfg.encoder_layers;

  Rng init_rng = sub_rng(cfg.seed, kInit);
  Rng collect_rng = sub_rng(cfg.seed, kCollect);
  Rng sample_rng = sub_rng(cfg.seed, kSample);
  Rng eval_rng = sub_rng(cfg.seed, kEval);

  GruSrModel model(ModelParams(shape, init_rng), AdamConfig{.lr = cfg.lr});
  const DiscountSchedule sched = DiscountSchedule::anchored(cfg.alpha, cfg.h);
  EpisodeBuffer buffer(cfg.buffer_capacity);
  FiniteTrainResult result{model.params(), {}};
  const auto t0 = std::chrono::steady_clock::now();

  for (int ep = 0; ep < cfg.episodes; ++ep) {
    auto snapshot = std::make_shared<const ModelParams>(model.params());
    buffer.add(rollout(env, learned_finite_policy(snapshot, cfg.alpha, epsilon_at(cfg, ep)), cfg.h, collect_rng));
    double loss = 0.0;
    const int updates = updates_for(cfg);
    for (int u = 0; u < updates; ++u)
      loss += td_update_finite(model, sample_prefix_batch(buffer, cfg.batch, cfg.h, sample_rng), sched);
    loss /= updates;
    if (!should_eval(cfg, ep)) continue;
    auto greedy = learned_finite_policy(std::make_shared<const ModelParams>(model.params()), cfg.alpha, 0.0);
    MetricsRow row = eval_row(greedy, env, cfg, ep, loss, eval_rng);
    if (cfg.log_wall_time)
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.metrics.push_back(row);
  }
  result.params = model.params();
  return result;
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kPhiFloor = 1e-6;

}  // namespace

double actor_objective(const VisitationVector& v, double normalizer) {
  if (!(normalizer > 0.0)) throw DomainError("actor_objective: normalizer must be positive");
  const double log_floor = std::log(kPhiFloor);
  double j = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double p = v[i] / normalizer;
    // Tangent line of p log p at the floor below it.
    j -= p >= kPhiFloor ? p * std::log(p) : kPhiFloor * log_floor + (log_floor + 1.0) * (p - kPhiFloor);
  }
  return j;
}

VisitationVector actor_objective_grad(const VisitationVector& v, double normalizer) {
  if (!(normalizer > 0.0)) throw DomainError("actor_objective_grad: normalizer must be positive");
  VisitationVector g(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double p = v[i] / normalizer;
    g[i] = -(std::log(std::max(p, kPhiFloor)) + 1.0) / normalizer;
  }
  return g;
}

ActorGradient actor_gradient(const ModelParams& model, const std::vector<Trajectory>& batch,
                             const DiscountSchedule& sched) {
  const NetShape& s = model.shape();
  if (!s.continuous() || !s.has_actor()) throw DomainError("actor_gradient: needs a continuous actor-critic model");
  const int n = s.n_states;
  const int h = sched.horizon();
  const double alpha = sched.alpha();
  std::vector<std::pair<int, int>> at;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int l = batch[i].length();
    if (l < 2 || l > h) throw DomainError("actor_gradient: prefix length must lie in [2, h]");
    if (l < h) at.emplace_back(static_cast<int>(i), l - 1);
  }
  ActorGradient out;
  out.grad = GradientBundle(model);
  if (at.empty()) return out;
  const auto trunk = make_trunk(model, batch);
  const ActorPass actor(*trunk, at);
  std::vector<SrQuery> q;
  for (std::size_t j = 0; j < at.size(); ++j)
    q.push_back({at[j].first, at[j].second, 0, actor.actions().col(static_cast<Eigen::Index>(j))});
  const DecoderPass dec(*trunk, std::move(q));
  const double m = static_cast<double>(at.size());
  Eigen::MatrixXd out_grad(n, dec.outputs().cols());
  for (std::size_t j = 0; j < at.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    const Trajectory& tau = batch[static_cast<std::size_t>(at[j].first)];
    const int l = tau.length();
    const VisitationVector v = alpha * trace_of(tau, l - 1, n, alpha).eta + dec.outputs().col(col);
    if (!(v.array() != 0.0).any()) throw DomainError("actor_gradient: combined vector is zero");
    const double Z = sched.normalizer(l);
    out.objective += actor_objective(v, Z) / m;
    out_grad.col(col) = actor_objective_grad(v, Z) / m;
  }
  // Critic weights are held fixed: their gradient goes to a scratch bundle.
  GradientBundle scratch(model);
  Eigen::MatrixXd da;
  dec.backward(out_grad, scratch, nullptr, &da);
  actor.backward(da, out.grad);
  out.used = static_cast<int>(at.size());
  return out;
}

CriticTargets continuous_targets(const ModelParams& target, const std::vector<Trajectory>& batch,
                                 const DiscountSchedule& sched, double target_noise, double noise_clip, Rng& rng) {
  const NetShape& s = target.shape();
  if (!s.continuous() || !s.has_actor()) throw DomainError("continuous_targets: needs a continuous actor-critic model");
  const int n = s.n_states;
  const int h = sched.horizon();
  const double alpha = sched.alpha();
  std::vector<std::pair<int, int>> at;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int l = batch[i].length();
    if (l < 2 || l > h) throw DomainError("continuous_targets: prefix length must lie in [2, h]");
    if (l < h) at.emplace_back(static_cast<int>(i), l - 1);
  }
  CriticTargets out;
  out.y.resize(n, static_cast<Eigen::Index>(batch.size()));
  out.pick.assign(batch.size(), -1);
  std::unique_ptr<TrunkPass> trunk;
  Eigen::MatrixXd next;
  if (!at.empty()) {
    trunk = make_trunk(target, batch);
    Eigen::MatrixXd a = ActorPass(*trunk, at).actions();
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index d = 0; d < a.rows(); ++d)
        a(d, j) = std::clamp(a(d, j) + std::clamp(target_noise * gauss(rng), -noise_clip, noise_clip), s.action_low,
                             s.action_high);
    std::vector<SrQuery> q;
    for (int k = 0; k < s.critics; ++k)
      for (std::size_t j = 0; j < at.size(); ++j)
        q.push_back({at[j].first, at[j].second, k, a.col(static_cast<Eigen::Index>(j))});
    next = DecoderPass(*trunk, std::move(q)).outputs();
  }
  std::size_t j = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& tau = batch[i];
    const int l = tau.length();
    VisitationVector successor;
    if (l == h) {
      successor = one_hot(tau.back(), n);
    } else {
      const VisitationVector past = alpha * trace_of(tau, l - 1, n, alpha).eta;
      int best = 0;
      double best_h = std::numeric_limits<double>::infinity();
      for (int k = 0; k < s.critics; ++k) {
        const auto col = static_cast<Eigen::Index>(static_cast<std::size_t>(k) * at.size() + j);
        const double hk = clipped_entropy(past + next.col(col));
        if (hk < best_h) {
          best_h = hk;
          best = k;
        }
      }
      successor = next.col(static_cast<Eigen::Index>(static_cast<std::size_t>(best) * at.size() + j));
      out.pick[i] = best;
      ++j;
    }
    out.y.col(static_cast<Eigen::Index>(i)) = one_hot(tau.state(l - 2), n) + alpha * successor;
  }
  return out;
}

std::pair<double, GradientBundle> critic_loss_gradient(const ModelParams& online, const std::vector<Trajectory>& batch,
                                                       const Eigen::MatrixXd& y) {
  const NetShape& s = online.shape();
  if (!s.continuous()) throw DomainError("critic_loss_gradient: needs a continuous-action model");
  const int n = s.n_states;
  const auto B = static_cast<Eigen::Index>(batch.size());
  if (B == 0) throw DomainError("critic_loss_gradient: empty batch");
  if (y.rows() != n || y.cols() != B) throw DomainError("critic_loss_gradient: target shape mismatch");
  const auto trunk = make_trunk(online, batch);
  std::vector<SrQuery> q;
  for (int k = 0; k < s.critics; ++k) {
    for (Eigen::Index i = 0; i < B; ++i) {
      const Trajectory& tau = batch[static_cast<std::size_t>(i)];
      const int l = tau.length();
      if (l < 2) throw DomainError("critic_loss_gradient: prefixes need at least two states");
      const auto* a = std::get_if<ContinuousAction>(&tau.actions()[static_cast<std::size_t>(l - 2)]);
      if (a == nullptr) throw DomainError("critic_loss_gradient: trajectory holds discrete actions");
      q.push_back({static_cast<int>(i), l - 2, k, *a});
    }
  }
  const DecoderPass dec(*trunk, std::move(q));
  Eigen::MatrixXd out_grad(n, dec.outputs().cols());
  double loss = 0.0;
  for (int k = 0; k < s.critics; ++k) {
    const Eigen::MatrixXd diff = dec.outputs().middleCols(k * B, B) - y;
    loss += diff.squaredNorm() / static_cast<double>(B);
    out_grad.middleCols(k * B, B) = (2.0 / static_cast<double>(B)) * diff;
  }
  GradientBundle g(online);
  TrunkPass::Grad tg = trunk->zero_grad();
  dec.backward(out_grad, g, &tg, nullptr);
  trunk->backward(tg, g);
  return {loss, std::move(g)};
}

Policy actor_policy(std::shared_ptr<const ModelParams> params, double noise_std) {
  if (!params->shape().has_actor()) throw DomainError("actor_policy: model has no actor");
  auto sync = std::make_shared<RunnerSync>(std::move(params));
  return [sync, noise_std](const Trajectory& traj, Rng& rng) -> ActionChoice {
    const NetShape& s = sync->params().shape();
    Eigen::VectorXd a = sync->sync(traj).act();
    if (noise_std > 0.0) {
      std::normal_distribution<double> gauss(0.0, noise_std);
      for (Eigen::Index d = 0; d < a.size(); ++d) a[d] = std::clamp(a[d] + gauss(rng), s.action_low, s.action_high);
    }
    return a;
  };
}

namespace {

Policy uniform_action_policy(const NetShape& s) {
  return [s](const Trajectory&, Rng& rng) -> ActionChoice {
    std::uniform_real_distribution<double> u(s.action_low, s.action_high);
    Eigen::VectorXd a(s.action_dim);
    for (Eigen::Index d = 0; d < a.size(); ++d) a[d] = u(rng);
    return a;
  };
}

}  // namespace

ContinuousTrainResult train_continuous(const TrainConfig& cfg) {
  cfg.validate();
  const EnvSpec env = make_env(cfg.env, cfg.env_params);
  if (env.is_finite()) throw ConfigError("train_continuous: env '" + cfg.env + "' has discrete actions");
  const PointMassEnv& pm = env.point_mass();
  NetShape shape;
  shape.n_states = env.n_states();
  shape.action_dim = env.action_dim();
  shape.embed = cfg.embed;
  shape.hidden = cfg.hidden;
  shape.decoder_hidden = cfg.decoder_hidden;
  shape.encoder_layers = cfg.encoder_layers;
  shape.critics = 2;
  shape.actor_hidden = cfg.actor_hidden;
  shape.action_low = pm.action_low();
  shape.action_high = pm.action_high();

  Rng init_rng = sub_rng(cfg.seed, kInit);
  Rng collect_rng = sub_rng(cfg.seed, kCollect);
  Rng sample_rng = sub_rng(cfg.seed, kSample);
  Rng eval_rng = sub_rng(cfg.seed, kEval);
  Rng noise_rng = sub_rng(cfg.seed, kNoise);

  ModelParams online(shape, init_rng);
  ModelParams target = online;
  const AdamConfig adam{.lr = cfg.lr, .clip = cfg.grad_clip};
  OptimizerState critic_opt = critic_optimizer(online, adam);
  OptimizerState actor_opt = actor_optimizer(online, adam);
  const DiscountSchedule sched = DiscountSchedule::anchored(cfg.alpha, cfg.h);
  EpisodeBuffer buffer(cfg.buffer_capacity);
  std::vector<MetricsRow> metrics;
  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;

  for (int ep = 0; ep < cfg.episodes; ++ep) {
    const Policy collect = ep < cfg.warmup_episodes
                               ? uniform_action_policy(shape)
                               : actor_policy(std::make_shared<const ModelParams>(target), cfg.action_noise);
    buffer.add(rollout(env, collect, cfg.h, collect_rng));
    double loss = 0.0;
    const int updates = updates_for(cfg);
    for (int u = 0; u < updates; ++u) {
      const auto batch = sample_prefix_batch(buffer, cfg.batch, cfg.h, sample_rng);
      const CriticTargets t = continuous_targets(target, batch, sched, cfg.target_noise, cfg.noise_clip, noise_rng);
      auto [l, g] = critic_loss_gradient(online, batch, t.y);
      optim_step(online, critic_opt, g);
      loss += l;
      if (++step % cfg.policy_update == 0) {
        ActorGradient ag = actor_gradient(online, batch, sched);
        if (ag.used > 0) {
          ag.grad.values = -ag.grad.values;  // ascent on J
          optim_step(online, actor_opt, ag.grad);
        }
        // cfg.rho is the share of online weights blended into the targets.
        polyak_update(target, online, 1.0 - cfg.rho);
      }
    }
    loss /= updates;
    if (!should_eval(cfg, ep)) continue;
    auto greedy = actor_policy(std::make_shared<const ModelParams>(target), 0.0);
    MetricsRow row = eval_row(greedy, env, cfg, ep, loss, eval_rng);
    if (cfg.log_wall_time)
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.push_back(row);
  }
  return {std::move(online), std::move(target), std::move(metrics)};
}

}  // namespace etapsi
