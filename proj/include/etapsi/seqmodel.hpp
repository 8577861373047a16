#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "etapsi/core.hpp"
#include "etapsi/envs.hpp"

namespace etapsi {

/// Architecture of the SR network: one-hot state encoder, GRU over the
/// encoded prefix, and one or more decoders reading [hidden; encoded state]
/// (plus the action in continuous mode). An optional deterministic actor
/// reads the same features.
struct NetShape {
  int n_states = 0;
  int n_actions = 0;   // discrete heads; 0 in continuous mode
  int action_dim = 0;  // decoder action input; 0 in discrete mode
  int embed = 64;
  int hidden = 64;
  int decoder_hidden = 32;
  int encoder_layers = 1;
  int critics = 1;
  int actor_hidden = 0;  // 0 means no actor
  double action_low = -1.0;
  double action_high = 1.0;

  bool continuous() const { return action_dim > 0; }
  bool has_actor() const { return actor_hidden > 0; }
  /// n_actions * n_states (head a occupies rows [a*n_states, (a+1)*n_states)) or n_states.
  int out_dim() const { return continuous() ? n_states : n_actions * n_states; }
  int feature_dim() const { return hidden + embed; }
  void validate() const;

  bool operator==(const NetShape&) const = default;
};

/// A matrix stored column-major inside the flat parameter vector.
struct Block {
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;
  Eigen::Index size() const { return rows * cols; }
};

struct AffineBlocks {
  Block w1, b1, w2, b2;
};

struct NetLayout {
  explicit NetLayout(const NetShape& shape);

  Block enc_w[2], enc_b[2];
  Block gru_wi, gru_wh, gru_bi, gru_bh;  // gate rows ordered [reset; update; candidate]
  std::vector<AffineBlocks> decoders;
  AffineBlocks actor;
  Eigen::Index critic_end = 0;  // trunk and decoders occupy [0, critic_end)
  Eigen::Index total = 0;
};

using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
using MatMap = Eigen::Map<Eigen::MatrixXd>;

/// All network weights in one flat double vector. Every mutation takes a new
/// generation stamp so tapes recorded against older weights are rejected.
class ModelParams {
 public:
  /// Uniform(+-1/sqrt(fan_in)) weights, zero biases.
  ModelParams(const NetShape& shape, Rng& rng);
  static ModelParams zeros(const NetShape& shape);

  const NetShape& shape() const { return shape_; }
  const NetLayout& layout() const { return layout_; }
  Eigen::Index size() const { return values_.size(); }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& mutable_values();
  std::uint64_t generation() const { return generation_; }

  ConstMatMap block(const Block& b) const { return {values_.data() + b.offset, b.rows, b.cols}; }

 private:
  explicit ModelParams(const NetShape& shape);

  NetShape shape_;
  NetLayout layout_;
  Eigen::VectorXd values_;
  std::uint64_t generation_;
};

/// Gradient with the same flat layout as ModelParams.
struct GradientBundle {
  GradientBundle() = default;
  explicit GradientBundle(const ModelParams& params) : values(Eigen::VectorXd::Zero(params.size())) {}

  MatMap block(const Block& b) { return {values.data() + b.offset, b.rows, b.cols}; }
  bool finite() const { return values.allFinite(); }

  Eigen::VectorXd values;
};

/// Encoder and GRU activations for a batch of state sequences.
class TrunkPass {
 public:
  TrunkPass(const ModelParams& params, std::vector<std::vector<int>> sequences);
  // Decoder and actor passes keep a pointer to their trunk.
  TrunkPass(const TrunkPass&) = delete;
  TrunkPass& operator=(const TrunkPass&) = delete;

  int batch() const { return static_cast<int>(sequences_.size()); }
  int length(int seq) const { return static_cast<int>(sequences_[static_cast<std::size_t>(seq)].size()); }
  /// [hidden after s_1..s_{pos+1}; encoded s_{pos+1}].
  Eigen::VectorXd features(int seq, int pos) const;
  const ModelParams& params() const { return *params_; }
  void check_fresh() const;

  /// Gradient sink for the trunk outputs, one block per time step.
  struct Grad {
    std::vector<Eigen::MatrixXd> hidden;
    std::vector<Eigen::MatrixXd> embed;
  };
  Grad zero_grad() const;
  void add_feature_grad(Grad& g, int seq, int pos, const Eigen::Ref<const Eigen::VectorXd>& d) const;
  /// Accumulates parameter gradients of the trunk into `out`.
  void backward(const Grad& g, GradientBundle& out) const;

 private:
  friend class SrRunner;
  int column(int seq, int pos) const;

  const ModelParams* params_;
  std::uint64_t stamp_;
  std::vector<std::vector<int>> sequences_;
  std::vector<int> rank_;    // sequence -> column, longest first
  std::vector<int> active_;  // active columns at each step
  struct Step {
    std::vector<int> states;
    Eigen::MatrixXd pre1, out1, pre2, embed;
    Eigen::MatrixXd r, z, n, gh_n, h;
  };
  std::vector<Step> steps_;
};

/// One decoder query: the prefix s_1..s_{pos+1} of sequence `seq`.
struct SrQuery {
  int seq = 0;
  int pos = 0;
  int critic = 0;
  Eigen::VectorXd action;  // continuous mode only
};

/// Decoder activations for a set of queries over one trunk pass.
class DecoderPass {
 public:
  DecoderPass(const TrunkPass& trunk, std::vector<SrQuery> queries);

  /// out_dim x queries.
  const Eigen::MatrixXd& outputs() const { return outputs_; }
  /// Gradient of <out_grad, outputs>; decoder gradients go to `out`, feature
  /// gradients to `trunk_grad` (when given) and action gradients to
  /// `action_grad` (action_dim x queries, when given).
  void backward(const Eigen::MatrixXd& out_grad, GradientBundle& out, TrunkPass::Grad* trunk_grad,
                Eigen::MatrixXd* action_grad) const;

 private:
  const TrunkPass* trunk_;
  std::vector<SrQuery> queries_;
  Eigen::MatrixXd inputs_, pre_, outputs_;
};

/// Actor outputs at given (seq, pos); features are treated as constants.
class ActorPass {
 public:
  ActorPass(const TrunkPass& trunk, std::vector<std::pair<int, int>> positions);

  /// action_dim x positions, inside [action_low, action_high].
  const Eigen::MatrixXd& actions() const { return actions_; }
  void backward(const Eigen::MatrixXd& action_grad, GradientBundle& out) const;

 private:
  const TrunkPass* trunk_;
  Eigen::MatrixXd inputs_, pre_, squashed_, actions_;
};

/// Single-prefix forward with a one-shot tape.
class SrTape {
 public:
  SrTape(const ModelParams& params, std::span<const int> prefix, const ActionChoice& action);
  SrTape(const SrTape&) = delete;
  SrTape& operator=(const SrTape&) = delete;
  const Eigen::VectorXd& output() const { return output_; }

 private:
  friend GradientBundle backward(SrTape& tape, const Eigen::VectorXd& out_grad, Eigen::VectorXd* action_grad);
  TrunkPass trunk_;
  DecoderPass decoder_;
  Eigen::VectorXd output_;
  bool used_ = false;
};

/// psi_hat for the prefix: all |A| heads stacked (discrete) or the SR at the
/// given action (continuous, critic 0).
SrTape forward_sr(const ModelParams& params, std::span<const int> prefix, const ActionChoice& action = 0);

/// Gradients of <out_grad, psi_hat>. The tape may be consumed once and only
/// while the parameters are unchanged; otherwise UsageError.
GradientBundle backward(SrTape& tape, const Eigen::VectorXd& out_grad, Eigen::VectorXd* action_grad = nullptr);

/// Step-by-step evaluation for rollouts.
class SrRunner {
 public:
  explicit SrRunner(const ModelParams& params);

  void reset();
  void push(StateId s);
  int steps() const { return steps_; }
  Eigen::VectorXd features() const;
  /// All heads (discrete) or the SR at `action` for `critic` (continuous).
  Eigen::VectorXd sr(const Eigen::VectorXd* action = nullptr, int critic = 0) const;
  Eigen::VectorXd act() const;

 private:
  const ModelParams* params_;
  Eigen::VectorXd h_, e_;
  int steps_ = 0;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 0.0;  // global gradient-norm clip; 0 disables
};

/// Adam moments over the parameter range [begin, end).
struct OptimizerState {
  OptimizerState(AdamConfig config, Eigen::Index begin, Eigen::Index end);

  AdamConfig config;
  Eigen::Index begin;
  Eigen::Index end;
  Eigen::VectorXd m, v;
  long step = 0;
};

OptimizerState critic_optimizer(const ModelParams& params, AdamConfig config);
OptimizerState actor_optimizer(const ModelParams& params, AdamConfig config);
OptimizerState full_optimizer(const ModelParams& params, AdamConfig config);

/// One bias-corrected Adam update over the optimizer's range. Rejects
/// non-finite gradients with DomainError.
void optim_step(ModelParams& params, OptimizerState& opt, const GradientBundle& grads);

/// target <- rho * target + (1 - rho) * online.
void polyak_update(ModelParams& target, const ModelParams& online, double rho);

struct NamedParams {
  std::string name;
  ModelParams params;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& env_name,
                     const std::vector<NamedParams>& models);
struct Checkpoint {
  std::string env_name;
  std::vector<NamedParams> models;
  const ModelParams& get(const std::string& name) const;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace etapsi
