#include "etapsi/seqmodel.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

namespace etapsi {

namespace {

constexpr double kLeak = 0.01;

std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

Eigen::MatrixXd leaky(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return v > 0.0 ? v : kLeak * v; });
}

Eigen::MatrixXd leaky_grad(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& upstream) {
  return upstream.binaryExpr(pre, [](double g, double p) { return p > 0.0 ? g : kLeak * g; });
}

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

struct Encoded {
  Eigen::MatrixXd pre1, out1, pre2, embed;
};

Encoded encode(const ModelParams& p, const std::vector<int>& states) {
  const NetLayout& L = p.layout();
  const auto w1 = p.block(L.enc_w[0]);
  const auto b1 = p.block(L.enc_b[0]);
  Encoded e;
  e.pre1.resize(w1.rows(), static_cast<Eigen::Index>(states.size()));
  for (std::size_t j = 0; j < states.size(); ++j) e.pre1.col(static_cast<Eigen::Index>(j)) = w1.col(states[j]) + b1;
  e.out1 = leaky(e.pre1);
  if (p.shape().encoder_layers == 2) {
    e.pre2 = (p.block(L.enc_w[1]) * e.out1).colwise() + p.block(L.enc_b[1]).col(0);
    e.embed = leaky(e.pre2);
  } else {
    e.embed = e.out1;
  }
  return e;
}

struct GruOut {
  Eigen::MatrixXd r, z, n, gh_n, h;
};

GruOut gru_step(const ModelParams& p, const Eigen::MatrixXd& embed, const Eigen::MatrixXd& hprev) {
  const NetLayout& L = p.layout();
  const Eigen::Index H = p.shape().hidden;
  const Eigen::MatrixXd gi = (p.block(L.gru_wi) * embed).colwise() + p.block(L.gru_bi).col(0);
  const Eigen::MatrixXd gh = (p.block(L.gru_wh) * hprev).colwise() + p.block(L.gru_bh).col(0);
  GruOut g;
  g.r = sigmoid(gi.topRows(H) + gh.topRows(H));
  g.z = sigmoid(gi.middleRows(H, H) + gh.middleRows(H, H));
  g.gh_n = gh.bottomRows(H);
  g.n = (gi.bottomRows(H).array() + g.r.array() * g.gh_n.array()).tanh().matrix();
  g.h = ((1.0 - g.z.array()) * g.n.array() + g.z.array() * hprev.array()).matrix();
  return g;
}

struct MlpOut {
  Eigen::MatrixXd pre, out;
};

MlpOut mlp(const ModelParams& p, const AffineBlocks& b, const Eigen::MatrixXd& x) {
  MlpOut m;
  m.pre = (p.block(b.w1) * x).colwise() + p.block(b.b1).col(0);
  m.out = (p.block(b.w2) * leaky(m.pre)).colwise() + p.block(b.b2).col(0);
  return m;
}

// Accumulates the parameter gradient of <dout, mlp(x)>; returns dx when asked.
Eigen::MatrixXd mlp_backward(const ModelParams& p, const AffineBlocks& b, const Eigen::MatrixXd& x,
                             const Eigen::MatrixXd& pre, const Eigen::MatrixXd& dout, GradientBundle& g,
                             bool want_input) {
  const Eigen::MatrixXd u = leaky(pre);
  g.block(b.w2).noalias() += dout * u.transpose();
  g.block(b.b2).col(0) += dout.rowwise().sum();
  const Eigen::MatrixXd dpre = leaky_grad(pre, p.block(b.w2).transpose() * dout);
  g.block(b.w1).noalias() += dpre * x.transpose();
  g.block(b.b1).col(0) += dpre.rowwise().sum();
  if (!want_input) return {};
  return p.block(b.w1).transpose() * dpre;
}

Eigen::MatrixXd squash(const NetShape& s, const Eigen::MatrixXd& tanh_out) {
  return (s.action_low + 0.5 * (s.action_high - s.action_low) * (tanh_out.array() + 1.0)).matrix();
}

}  // namespace

void NetShape::validate() const {
  if (n_states < 1) throw DomainError("NetShape: n_states must be positive");
  if (continuous()) {
    if (n_actions != 0) throw DomainError("NetShape: continuous mode takes no discrete heads");
  } else {
    if (n_actions < 1) throw DomainError("NetShape: discrete mode needs at least one action");
    if (has_actor()) throw DomainError("NetShape: an actor needs a continuous action space");
  }
  if (embed < 1 || hidden < 1 || decoder_hidden < 1) throw DomainError("NetShape: widths must be positive");
  if (encoder_layers != 1 && encoder_layers != 2) throw DomainError("NetShape: encoder_layers must be 1 or 2");
  if (critics < 1) throw DomainError("NetShape: need at least one decoder");
  if (actor_hidden < 0) throw DomainError("NetShape: actor_hidden must be non-negative");
  if (!(action_low < action_high)) throw DomainError("NetShape: empty action range");
}

NetLayout::NetLayout(const NetShape& s) {
  s.validate();
  Eigen::Index at = 0;
  auto take = [&at](Eigen::Index rows, Eigen::Index cols) {
    const Block b{at, rows, cols};
    at += rows * cols;
    return b;
  };
  enc_w[0] = take(s.embed, s.n_states);
  enc_b[0] = take(s.embed, 1);
  if (s.encoder_layers == 2) {
    enc_w[1] = take(s.embed, s.embed);
    enc_b[1] = take(s.embed, 1);
  }
  gru_wi = take(3 * s.hidden, s.embed);
  gru_wh = take(3 * s.hidden, s.hidden);
  gru_bi = take(3 * s.hidden, 1);
  gru_bh = take(3 * s.hidden, 1);
  for (int k = 0; k < s.critics; ++k) {
    AffineBlocks d;
    d.w1 = take(s.decoder_hidden, s.feature_dim() + s.action_dim);
    d.b1 = take(s.decoder_hidden, 1);
    d.w2 = take(s.out_dim(), s.decoder_hidden);
    d.b2 = take(s.out_dim(), 1);
    decoders.push_back(d);
  }
  critic_end = at;
  if (s.has_actor()) {
    actor.w1 = take(s.actor_hidden, s.feature_dim());
    actor.b1 = take(s.actor_hidden, 1);
    actor.w2 = take(s.action_dim, s.actor_hidden);
    actor.b2 = take(s.action_dim, 1);
  }
  total = at;
}

ModelParams::ModelParams(const NetShape& shape)
    : shape_(shape), layout_(shape), values_(Eigen::VectorXd::Zero(layout_.total)), generation_(next_stamp()) {}

ModelParams ModelParams::zeros(const NetShape& shape) { return ModelParams(shape); }

ModelParams::ModelParams(const NetShape& shape, Rng& rng) : ModelParams(shape) {
  auto fill = [&](const Block& b) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < b.size(); ++i) values_[b.offset + i] = u(rng);
  };
  fill(layout_.enc_w[0]);
  if (shape_.encoder_layers == 2) fill(layout_.enc_w[1]);
  fill(layout_.gru_wi);
  fill(layout_.gru_wh);
  for (const auto& d : layout_.decoders) {
    fill(d.w1);
    fill(d.w2);
  }
  if (shape_.has_actor()) {
    fill(layout_.actor.w1);
    fill(layout_.actor.w2);
  }
}

Eigen::VectorXd& ModelParams::mutable_values() {
  generation_ = next_stamp();
  return values_;
}

// ---------------------------------------------------------------------------

TrunkPass::TrunkPass(const ModelParams& params, std::vector<std::vector<int>> sequences)
    : params_(&params), stamp_(params.generation()), sequences_(std::move(sequences)) {
  const int n = params.shape().n_states;
  if (sequences_.empty()) throw DomainError("TrunkPass: empty batch");
  for (const auto& seq : sequences_) {
    if (seq.empty()) throw DomainError("TrunkPass: empty state sequence");
    for (int s : seq)
      if (s < 0 || s >= n) throw DomainError("TrunkPass: state index out of range");
  }
  std::vector<int> order(sequences_.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [this](int a, int b) { return length(a) > length(b); });
  rank_.resize(order.size());
  for (std::size_t j = 0; j < order.size(); ++j) rank_[static_cast<std::size_t>(order[j])] = static_cast<int>(j);

  const int longest = length(order.front());
  const Eigen::Index H = params.shape().hidden;
  steps_.resize(static_cast<std::size_t>(longest));
  for (int t = 0; t < longest; ++t) {
    int k = 0;
    while (k < batch() && length(order[static_cast<std::size_t>(k)]) > t) ++k;
    active_.push_back(k);
    Step& st = steps_[static_cast<std::size_t>(t)];
    for (int j = 0; j < k; ++j) st.states.push_back(sequences_[static_cast<std::size_t>(order[j])][t]);
    Encoded e = encode(params, st.states);
    const Eigen::MatrixXd hprev =
        t == 0 ? Eigen::MatrixXd::Zero(H, k) : Eigen::MatrixXd(steps_[t - 1].h.leftCols(k));
    GruOut g = gru_step(params, e.embed, hprev);
    st.pre1 = std::move(e.pre1);
    st.out1 = std::move(e.out1);
    st.pre2 = std::move(e.pre2);
    st.embed = std::move(e.embed);
    st.r = std::move(g.r);
    st.z = std::move(g.z);
    st.n = std::move(g.n);
    st.gh_n = std::move(g.gh_n);
    st.h = std::move(g.h);
  }
}

void TrunkPass::check_fresh() const {
  if (params_->generation() != stamp_) throw UsageError("stale tape: parameters changed after the forward pass");
}

int TrunkPass::column(int seq, int pos) const {
  if (seq < 0 || seq >= batch()) throw DomainError("query sequence out of range");
  if (pos < 0 || pos >= length(seq)) throw DomainError("query position out of range");
  return rank_[static_cast<std::size_t>(seq)];
}

Eigen::VectorXd TrunkPass::features(int seq, int pos) const {
  const int c = column(seq, pos);
  const Step& st = steps_[static_cast<std::size_t>(pos)];
  Eigen::VectorXd f(params_->shape().feature_dim());
  f << st.h.col(c), st.embed.col(c);
  return f;
}

TrunkPass::Grad TrunkPass::zero_grad() const {
  Grad g;
  const Eigen::Index H = params_->shape().hidden;
  const Eigen::Index E = params_->shape().embed;
  for (int k : active_) {
    g.hidden.push_back(Eigen::MatrixXd::Zero(H, k));
    g.embed.push_back(Eigen::MatrixXd::Zero(E, k));
  }
  return g;
}

void TrunkPass::add_feature_grad(Grad& g, int seq, int pos, const Eigen::Ref<const Eigen::VectorXd>& d) const {
  const int c = column(seq, pos);
  const Eigen::Index H = params_->shape().hidden;
  g.hidden[static_cast<std::size_t>(pos)].col(c) += d.head(H);
  g.embed[static_cast<std::size_t>(pos)].col(c) += d.segment(H, params_->shape().embed);
}

void TrunkPass::backward(const Grad& g, GradientBundle& out) const {
  check_fresh();
  const ModelParams& p = *params_;
  const NetLayout& L = p.layout();
  const Eigen::Index H = p.shape().hidden;
  const auto wi = p.block(L.gru_wi);
  const auto wh = p.block(L.gru_wh);
  Eigen::MatrixXd carry;
  for (int t = static_cast<int>(steps_.size()) - 1; t >= 0; --t) {
    const Step& st = steps_[static_cast<std::size_t>(t)];
    const int k = active_[static_cast<std::size_t>(t)];
    Eigen::MatrixXd dh = g.hidden[static_cast<std::size_t>(t)];
    if (carry.size() > 0) dh.leftCols(carry.cols()) += carry;

    const Eigen::MatrixXd hprev =
        t == 0 ? Eigen::MatrixXd::Zero(H, k) : Eigen::MatrixXd(steps_[t - 1].h.leftCols(k));
    const Eigen::ArrayXXd z = st.z.array();
    const Eigen::ArrayXXd r = st.r.array();
    const Eigen::ArrayXXd n = st.n.array();
    const Eigen::ArrayXXd dn_pre = dh.array() * (1.0 - z) * (1.0 - n * n);
    const Eigen::ArrayXXd dz_pre = dh.array() * (hprev.array() - n) * z * (1.0 - z);
    const Eigen::ArrayXXd dr_pre = dn_pre * st.gh_n.array() * r * (1.0 - r);
    Eigen::MatrixXd dgi(3 * H, k), dgh(3 * H, k);
    dgi << dr_pre.matrix(), dz_pre.matrix(), dn_pre.matrix();
    dgh << dr_pre.matrix(), dz_pre.matrix(), (dn_pre * r).matrix();

    out.block(L.gru_wi).noalias() += dgi * st.embed.transpose();
    out.block(L.gru_bi).col(0) += dgi.rowwise().sum();
    out.block(L.gru_bh).col(0) += dgh.rowwise().sum();
    if (t > 0) {
      out.block(L.gru_wh).noalias() += dgh * hprev.transpose();
      carry = (dh.array() * z).matrix();
      carry.noalias() += wh.transpose() * dgh;
    } else {
      carry.resize(0, 0);
    }

    Eigen::MatrixXd de = g.embed[static_cast<std::size_t>(t)];
    de.noalias() += wi.transpose() * dgi;
    Eigen::MatrixXd dout1;
    if (p.shape().encoder_layers == 2) {
      const Eigen::MatrixXd dpre2 = leaky_grad(st.pre2, de);
      out.block(L.enc_w[1]).noalias() += dpre2 * st.out1.transpose();
      out.block(L.enc_b[1]).col(0) += dpre2.rowwise().sum();
      dout1 = p.block(L.enc_w[1]).transpose() * dpre2;
    } else {
      dout1 = std::move(de);
    }
    const Eigen::MatrixXd dpre1 = leaky_grad(st.pre1, dout1);
    auto dw1 = out.block(L.enc_w[0]);
    for (int j = 0; j < k; ++j) dw1.col(st.states[static_cast<std::size_t>(j)]) += dpre1.col(j);
    out.block(L.enc_b[0]).col(0) += dpre1.rowwise().sum();
  }
}

// ---------------------------------------------------------------------------

DecoderPass::DecoderPass(const TrunkPass& trunk, std::vector<SrQuery> queries)
    : trunk_(&trunk), queries_(std::move(queries)) {
  trunk.check_fresh();
  const ModelParams& p = trunk.params();
  const NetShape& s = p.shape();
  const Eigen::Index Q = static_cast<Eigen::Index>(queries_.size());
  inputs_.resize(s.feature_dim() + s.action_dim, Q);
  for (Eigen::Index q = 0; q < Q; ++q) {
    const SrQuery& query = queries_[static_cast<std::size_t>(q)];
    if (query.critic < 0 || query.critic >= s.critics) throw DomainError("SrQuery: critic index out of range");
    inputs_.col(q).head(s.feature_dim()) = trunk.features(query.seq, query.pos);
    if (s.continuous()) {
      if (query.action.size() != s.action_dim) throw DomainError("SrQuery: action has the wrong dimension");
      inputs_.col(q).tail(s.action_dim) = query.action;
    } else if (query.action.size() != 0) {
      throw DomainError("SrQuery: discrete mode takes no action input");
    }
  }
  pre_.resize(s.decoder_hidden, Q);
  outputs_.resize(s.out_dim(), Q);
  for (int k = 0; k < s.critics; ++k) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index q = 0; q < Q; ++q)
      if (queries_[static_cast<std::size_t>(q)].critic == k) cols.push_back(q);
    if (cols.empty()) continue;
    const Eigen::MatrixXd x = inputs_(Eigen::all, cols);
    MlpOut m = mlp(p, p.layout().decoders[static_cast<std::size_t>(k)], x);
    pre_(Eigen::all, cols) = m.pre;
    outputs_(Eigen::all, cols) = m.out;
  }
}

void DecoderPass::backward(const Eigen::MatrixXd& out_grad, GradientBundle& out, TrunkPass::Grad* trunk_grad,
                           Eigen::MatrixXd* action_grad) const {
  trunk_->check_fresh();
  const ModelParams& p = trunk_->params();
  const NetShape& s = p.shape();
  if (out_grad.rows() != outputs_.rows() || out_grad.cols() != outputs_.cols())
    throw DomainError("DecoderPass::backward: gradient shape mismatch");
  const bool want_input = trunk_grad != nullptr || action_grad != nullptr;
  if (action_grad != nullptr) *action_grad = Eigen::MatrixXd::Zero(s.action_dim, outputs_.cols());
  for (int k = 0; k < s.critics; ++k) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index q = 0; q < outputs_.cols(); ++q)
      if (queries_[static_cast<std::size_t>(q)].critic == k) cols.push_back(q);
    if (cols.empty()) continue;
    const Eigen::MatrixXd dx = mlp_backward(p, p.layout().decoders[static_cast<std::size_t>(k)], inputs_(Eigen::all, cols),
                                            pre_(Eigen::all, cols), out_grad(Eigen::all, cols), out, want_input);
    if (!want_input) continue;
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const SrQuery& query = queries_[static_cast<std::size_t>(cols[j])];
      const auto col = dx.col(static_cast<Eigen::Index>(j));
      if (trunk_grad != nullptr) trunk_->add_feature_grad(*trunk_grad, query.seq, query.pos, col.head(s.feature_dim()));
      if (action_grad != nullptr && s.continuous()) action_grad->col(cols[j]) = col.tail(s.action_dim);
    }
  }
}

ActorPass::ActorPass(const TrunkPass& trunk, std::vector<std::pair<int, int>> positions) : trunk_(&trunk) {
  trunk.check_fresh();
  const ModelParams& p = trunk.params();
  if (!p.shape().has_actor()) throw DomainError("ActorPass: model has no actor");
  inputs_.resize(p.shape().feature_dim(), static_cast<Eigen::Index>(positions.size()));
  for (std::size_t j = 0; j < positions.size(); ++j)
    inputs_.col(static_cast<Eigen::Index>(j)) = trunk.features(positions[j].first, positions[j].second);
  MlpOut m = mlp(p, p.layout().actor, inputs_);
  pre_ = std::move(m.pre);
  squashed_ = m.out.array().tanh().matrix();
  actions_ = squash(p.shape(), squashed_);
}

void ActorPass::backward(const Eigen::MatrixXd& action_grad, GradientBundle& out) const {
  trunk_->check_fresh();
  const ModelParams& p = trunk_->params();
  if (action_grad.rows() != actions_.rows() || action_grad.cols() != actions_.cols())
    throw DomainError("ActorPass::backward: gradient shape mismatch");
  const double half_range = 0.5 * (p.shape().action_high - p.shape().action_low);
  const Eigen::MatrixXd dout =
      (action_grad.array() * half_range * (1.0 - squashed_.array() * squashed_.array())).matrix();
  mlp_backward(p, p.layout().actor, inputs_, pre_, dout, out, false);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<SrQuery> last_position_query(const ModelParams& params, std::span<const int> prefix,
                                         const ActionChoice& action) {
  SrQuery q;
  q.pos = static_cast<int>(prefix.size()) - 1;
  if (params.shape().continuous()) {
    const auto* a = std::get_if<ContinuousAction>(&action);
    if (a == nullptr) throw DomainError("forward_sr: continuous model needs a continuous action");
    q.action = *a;
  }
  return {q};
}

}  // namespace

SrTape::SrTape(const ModelParams& params, std::span<const int> prefix, const ActionChoice& action)
    : trunk_(params, {std::vector<int>(prefix.begin(), prefix.end())}),
      decoder_(trunk_, last_position_query(params, prefix, action)),
      output_(decoder_.outputs().col(0)) {}

SrTape forward_sr(const ModelParams& params, std::span<const int> prefix, const ActionChoice& action) {
  if (prefix.empty()) throw DomainError("forward_sr: empty prefix");
  return SrTape(params, prefix, action);
}

GradientBundle backward(SrTape& tape, const Eigen::VectorXd& out_grad, Eigen::VectorXd* action_grad) {
  if (tape.used_) throw UsageError("backward: tape already consumed");
  tape.trunk_.check_fresh();
  if (out_grad.size() != tape.output_.size()) throw DomainError("backward: out_grad has the wrong length");
  tape.used_ = true;
  GradientBundle g(tape.trunk_.params());
  TrunkPass::Grad tg = tape.trunk_.zero_grad();
  Eigen::MatrixXd da;
  tape.decoder_.backward(out_grad, g, &tg, action_grad != nullptr ? &da : nullptr);
  tape.trunk_.backward(tg, g);
  if (action_grad != nullptr) *action_grad = da.col(0);
  return g;
}

// ---------------------------------------------------------------------------

SrRunner::SrRunner(const ModelParams& params) : params_(&params) { reset(); }

void SrRunner::reset() {
  h_ = Eigen::VectorXd::Zero(params_->shape().hidden);
  e_.resize(0);
  steps_ = 0;
}

void SrRunner::push(StateId s) {
  if (s.index < 0 || s.index >= params_->shape().n_states) throw DomainError("SrRunner: state out of range");
  const Encoded e = encode(*params_, {s.index});
  const GruOut g = gru_step(*params_, e.embed, h_);
  h_ = g.h.col(0);
  e_ = e.embed.col(0);
  ++steps_;
}

Eigen::VectorXd SrRunner::features() const {
  if (steps_ == 0) throw UsageError("SrRunner: no state pushed yet");
  Eigen::VectorXd f(params_->shape().feature_dim());
  f << h_, e_;
  return f;
}

Eigen::VectorXd SrRunner::sr(const Eigen::VectorXd* action, int critic) const {
  const NetShape& s = params_->shape();
  if (critic < 0 || critic >= s.critics) throw DomainError("SrRunner: critic index out of range");
  Eigen::VectorXd x(s.feature_dim() + s.action_dim);
  x.head(s.feature_dim()) = features();
  if (s.continuous()) {
    if (action == nullptr || action->size() != s.action_dim) throw DomainError("SrRunner: missing action");
    x.tail(s.action_dim) = *action;
  }
  return mlp(*params_, params_->layout().decoders[static_cast<std::size_t>(critic)], x).out.col(0);
}

Eigen::VectorXd SrRunner::act() const {
  const NetShape& s = params_->shape();
  if (!s.has_actor()) throw DomainError("SrRunner: model has no actor");
  const Eigen::MatrixXd out = mlp(*params_, params_->layout().actor, features()).out;
  return squash(s, out.array().tanh().matrix()).col(0);
}

// ---------------------------------------------------------------------------

OptimizerState::OptimizerState(AdamConfig cfg, Eigen::Index b, Eigen::Index e)
    : config(cfg), begin(b), end(e), m(Eigen::VectorXd::Zero(e - b)), v(Eigen::VectorXd::Zero(e - b)) {
  if (b < 0 || e < b) throw DomainError("OptimizerState: bad parameter range");
  if (!(cfg.lr >= 0.0) || !(cfg.eps > 0.0) || cfg.clip < 0.0) throw DomainError("OptimizerState: bad config");
}

OptimizerState critic_optimizer(const ModelParams& params, AdamConfig config) {
  return {config, 0, params.layout().critic_end};
}

OptimizerState actor_optimizer(const ModelParams& params, AdamConfig config) {
  if (!params.shape().has_actor()) throw DomainError("actor_optimizer: model has no actor");
  return {config, params.layout().critic_end, params.layout().total};
}

OptimizerState full_optimizer(const ModelParams& params, AdamConfig config) { return {config, 0, params.size()}; }

void optim_step(ModelParams& params, OptimizerState& opt, const GradientBundle& grads) {
  if (grads.values.size() != params.size()) throw DomainError("optim_step: gradient shape mismatch");
  if (opt.end > params.size()) throw DomainError("optim_step: optimizer range exceeds the model");
  const auto g_raw = grads.values.segment(opt.begin, opt.end - opt.begin);
  if (!g_raw.allFinite()) throw DomainError("optim_step: non-finite gradient");
  double scale = 1.0;
  if (opt.config.clip > 0.0) {
    const double norm = g_raw.norm();
    if (norm > opt.config.clip) scale = opt.config.clip / norm;
  }
  const Eigen::VectorXd g = scale * g_raw;
  const AdamConfig& c = opt.config;
  ++opt.step;
  opt.m = c.beta1 * opt.m + (1.0 - c.beta1) * g;
  opt.v = c.beta2 * opt.v + (1.0 - c.beta2) * g.cwiseAbs2();
  const double m_corr = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double v_corr = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  params.mutable_values().segment(opt.begin, opt.end - opt.begin).array() -=
      c.lr * (opt.m.array() / m_corr) / ((opt.v.array() / v_corr).sqrt() + c.eps);
}

void polyak_update(ModelParams& target, const ModelParams& online, double rho) {
  if (!(target.shape() == online.shape())) throw DomainError("polyak_update: shape mismatch");
  if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("polyak_update: rho must lie in [0, 1]");
  Eigen::VectorXd& t = target.mutable_values();
  t = rho * t + (1.0 - rho) * online.values();
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'E', 'T', 'A', 'P', 'S', 'I', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 4);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw ConfigError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw ConfigError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

std::string get_str(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 20)) throw ConfigError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw ConfigError("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& env_name,
                     const std::vector<NamedParams>& models) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ResourceError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_str(out, env_name);
  put_u32(out, static_cast<std::uint32_t>(models.size()));
  for (const NamedParams& m : models) {
    const NetShape& s = m.params.shape();
    put_str(out, m.name);
    for (int v : {s.n_states, s.n_actions, s.action_dim, s.embed, s.hidden, s.decoder_hidden, s.encoder_layers,
                  s.critics, s.actor_hidden})
      put_u32(out, static_cast<std::uint32_t>(v));
    put_f64(out, s.action_low);
    put_f64(out, s.action_high);
    put_u64(out, static_cast<std::uint64_t>(m.params.size()));
    for (Eigen::Index i = 0; i < m.params.size(); ++i) put_f64(out, m.params.values()[i]);
  }
  if (!out) throw ResourceError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) throw ConfigError("checkpoint: bad magic");
  if (get_u32(in) != kVersion) throw ConfigError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.env_name = get_str(in);
  const std::uint32_t count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_str(in);
    NetShape s;
    int* fields[] = {&s.n_states, &s.n_actions,      &s.action_dim, &s.embed,       &s.hidden,
                     &s.decoder_hidden, &s.encoder_layers, &s.critics, &s.actor_hidden};
    for (int* f : fields) *f = static_cast<int>(get_u32(in));
    s.action_low = get_f64(in);
    s.action_high = get_f64(in);
    ModelParams params = ModelParams::zeros(s);
    if (get_u64(in) != static_cast<std::uint64_t>(params.size()))
      throw ConfigError("checkpoint: parameter count does not match the recorded shape");
    Eigen::VectorXd& v = params.mutable_values();
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = get_f64(in);
    ck.models.push_back({std::move(name), std::move(params)});
  }
  return ck;
}

const ModelParams& Checkpoint::get(const std::string& name) const {
  for (const NamedParams& m : models)
    if (m.name == name) return m.params;
  throw ConfigError("checkpoint has no model named '" + name + "'");
}

}  // namespace etapsi
