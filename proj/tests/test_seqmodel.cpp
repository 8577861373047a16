#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "etapsi/seqmodel.hpp"

using namespace etapsi;

namespace {

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

NetShape tiny_discrete(int n_states = 3, int n_actions = 2) {
  NetShape s;
  s.n_states = n_states;
  s.n_actions = n_actions;
  s.embed = 4;
  s.hidden = 4;
  s.decoder_hidden = 4;
  return s;
}

NetShape tiny_continuous(int n_states = 3) {
  NetShape s;
  s.n_states = n_states;
  s.action_dim = 2;
  s.embed = 3;
  s.hidden = 4;
  s.decoder_hidden = 5;
  s.encoder_layers = 2;
  s.critics = 2;
  s.actor_hidden = 3;
  return s;
}

std::vector<int> random_prefix(int n_states, int len, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, n_states - 1);
  std::vector<int> p;
  for (int i = 0; i < len; ++i) p.push_back(pick(rng));
  return p;
}

// Perturbs biases too, so zero-initialized entries are exercised.
void jitter(ModelParams& p, Rng& rng) {
  std::normal_distribution<double> n(0.0, 0.3);
  Eigen::VectorXd& v = p.mutable_values();
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += n(rng);
}

double max_fd_error(ModelParams& p, const std::vector<int>& prefix, const ActionChoice& a,
                    const Eigen::VectorXd& w) {
  auto tape = forward_sr(p, prefix, a);
  const GradientBundle g = backward(tape, w);
  double worst = 0.0;
  const double step = 1e-5;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double keep = p.values()[i];
    p.mutable_values()[i] = keep + step;
    const double up = w.dot(forward_sr(p, prefix, a).output());
    p.mutable_values()[i] = keep - step;
    const double down = w.dot(forward_sr(p, prefix, a).output());
    p.mutable_values()[i] = keep;
    worst = std::max(worst, rel_error(g.values[i], (up - down) / (2 * step)));
  }
  return worst;
}

}  // namespace

TEST_CASE("layout and shape validation") {
  const NetShape s = tiny_continuous();
  const NetLayout L(s);
  CHECK(L.critic_end < L.total);
  CHECK(L.decoders.size() == 2);
  CHECK(L.decoders[0].w1.cols == s.feature_dim() + 2);
  CHECK(L.decoders[0].w2.rows == 3);
  CHECK(NetLayout(tiny_discrete()).decoders[0].w2.rows == 6);
  NetShape bad = tiny_discrete();
  bad.actor_hidden = 3;
  CHECK_THROWS_AS(NetLayout{bad}, DomainError);
  bad = tiny_discrete();
  bad.encoder_layers = 3;
  CHECK_THROWS_AS(NetLayout{bad}, DomainError);
}

TEST_CASE("initialization") {
  Rng rng(1);
  const ModelParams p(tiny_discrete(), rng);
  const NetLayout& L = p.layout();
  CHECK(p.block(L.enc_b[0]).isZero());
  CHECK(p.block(L.gru_bi).isZero());
  CHECK(p.block(L.gru_bh).isZero());
  CHECK(p.block(L.decoders[0].b2).isZero());
  CHECK(p.block(L.gru_wh).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(4.0));
  CHECK(p.block(L.enc_w[0]).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(3.0));
  CHECK_FALSE(p.block(L.gru_wi).isZero());

  const ModelParams zero = ModelParams::zeros(tiny_discrete());
  const std::vector<int> prefix{0, 2, 1};
  auto tape = forward_sr(zero, prefix);
  CHECK(tape.output().isZero());

  Rng a(9), b(9);
  const ModelParams pa(tiny_discrete(), a), pb(tiny_discrete(), b);
  CHECK(forward_sr(pa, prefix).output() == forward_sr(pb, prefix).output());
}

TEST_CASE("discrete gradients match finite differences") {
  Rng rng(2);
  ModelParams p(tiny_discrete(), rng);
  jitter(p, rng);
  const std::vector<int> prefix{0, 1, 1, 2, 0};
  const int out = p.shape().out_dim();
  for (int i = 0; i < out; ++i) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(out);
    e[i] = 1.0;
    CHECK(max_fd_error(p, prefix, 0, e) < 1e-4);
  }
}

TEST_CASE("gradient check over 100 random configurations") {
  Rng rng(3);
  std::uniform_int_distribution<int> small(1, 4);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    NetShape s = trial % 2 ? tiny_continuous(small(rng) + 1) : tiny_discrete(small(rng) + 1, small(rng));
    s.embed = small(rng);
    s.hidden = small(rng);
    s.decoder_hidden = small(rng);
    s.encoder_layers = 1 + trial % 3 / 2;
    ModelParams p(s, rng);
    jitter(p, rng);
    const auto prefix = random_prefix(s.n_states, small(rng) + 1, rng);
    ActionChoice a = 0;
    if (s.continuous()) a = Eigen::VectorXd(Eigen::Vector2d(normal(rng), normal(rng)));
    Eigen::VectorXd w(s.out_dim());
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = normal(rng);
    worst = std::max(worst, max_fd_error(p, prefix, a, w));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("action gradient matches finite differences") {
  Rng rng(4);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p(tiny_continuous(4), rng);
    jitter(p, rng);
    const auto prefix = random_prefix(4, 3, rng);
    Eigen::VectorXd a(2);
    a << normal(rng), normal(rng);
    Eigen::VectorXd w(4);
    for (int i = 0; i < 4; ++i) w[i] = normal(rng);
    auto tape = forward_sr(p, prefix, a);
    Eigen::VectorXd da;
    backward(tape, w, &da);
    for (int k = 0; k < 2; ++k) {
      Eigen::VectorXd up = a, down = a;
      up[k] += 1e-5;
      down[k] -= 1e-5;
      const double fd = (w.dot(forward_sr(p, prefix, up).output()) - w.dot(forward_sr(p, prefix, down).output())) / 2e-5;
      CHECK(rel_error(da[k], fd) < 1e-4);
    }
  }
}

TEST_CASE("backward is linear in out_grad") {
  Rng rng(5);
  ModelParams p(tiny_discrete(), rng);
  const std::vector<int> prefix{2, 0, 1};
  const int out = p.shape().out_dim();
  Eigen::VectorXd g1 = Eigen::VectorXd::LinSpaced(out, -1.0, 2.0);
  Eigen::VectorXd g2 = Eigen::VectorXd::LinSpaced(out, 0.5, -0.7);
  auto t0 = forward_sr(p, prefix);
  CHECK(backward(t0, Eigen::VectorXd::Zero(out)).values.isZero());
  auto t1 = forward_sr(p, prefix);
  auto t2 = forward_sr(p, prefix);
  auto t12 = forward_sr(p, prefix);
  const Eigen::VectorXd sum = backward(t1, g1).values + backward(t2, g2).values;
  CHECK((sum - backward(t12, g1 + g2).values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tapes are single-use and go stale") {
  Rng rng(6);
  ModelParams p(tiny_discrete(), rng);
  const std::vector<int> prefix{0, 1};
  const Eigen::VectorXd g = Eigen::VectorXd::Ones(p.shape().out_dim());
  auto tape = forward_sr(p, prefix);
  backward(tape, g);
  CHECK_THROWS_AS(backward(tape, g), UsageError);
  auto stale = forward_sr(p, prefix);
  p.mutable_values()[0] += 1.0;
  CHECK_THROWS_AS(backward(stale, g), UsageError);
  auto wrong = forward_sr(p, prefix);
  CHECK_THROWS_AS(backward(wrong, Eigen::VectorXd::Ones(2)), DomainError);
  const std::vector<int> empty;
  CHECK_THROWS_AS(forward_sr(p, empty), DomainError);
  const std::vector<int> out_of_range{5};
  CHECK_THROWS_AS(forward_sr(p, out_of_range), DomainError);
}

TEST_CASE("batched passes agree with single prefixes and the incremental runner") {
  Rng rng(7);
  ModelParams p(tiny_continuous(5), rng);
  jitter(p, rng);
  std::vector<std::vector<int>> seqs{random_prefix(5, 3, rng), random_prefix(5, 7, rng), random_prefix(5, 1, rng),
                                     random_prefix(5, 7, rng)};
  const TrunkPass trunk(p, seqs);
  SrRunner runner(p);
  for (int b = 0; b < 4; ++b) {
    runner.reset();
    for (int pos = 0; pos < static_cast<int>(seqs[static_cast<std::size_t>(b)].size()); ++pos) {
      runner.push(StateId(seqs[static_cast<std::size_t>(b)][static_cast<std::size_t>(pos)]));
      CHECK((runner.features() - trunk.features(b, pos)).cwiseAbs().maxCoeff() < 1e-12);
      const Eigen::VectorXd a = Eigen::Vector2d(0.3, -0.2);
      const std::span<const int> prefix(seqs[static_cast<std::size_t>(b)].data(), static_cast<std::size_t>(pos + 1));
      CHECK((runner.sr(&a) - forward_sr(p, prefix, a).output()).cwiseAbs().maxCoeff() < 1e-12);
      const ActorPass actor(trunk, {{b, pos}});
      CHECK((runner.act() - actor.actions().col(0)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(runner.act().cwiseAbs().maxCoeff() <= 1.0);
    }
  }
}

TEST_CASE("batched gradients equal the sum of single-prefix gradients") {
  Rng rng(8);
  ModelParams p(tiny_discrete(4, 3), rng);
  jitter(p, rng);
  std::vector<std::vector<int>> seqs{random_prefix(4, 5, rng), random_prefix(4, 2, rng), random_prefix(4, 6, rng)};
  std::vector<SrQuery> queries{{0, 4, 0, {}}, {1, 1, 0, {}}, {2, 3, 0, {}}, {0, 2, 0, {}}};
  const TrunkPass trunk(p, seqs);
  const DecoderPass dec(trunk, queries);
  Eigen::MatrixXd w = Eigen::MatrixXd::Random(12, 4);
  GradientBundle batched(p);
  auto tg = trunk.zero_grad();
  dec.backward(w, batched, &tg, nullptr);
  trunk.backward(tg, batched);

  Eigen::VectorXd summed = Eigen::VectorXd::Zero(p.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& seq = seqs[static_cast<std::size_t>(queries[q].seq)];
    const std::span<const int> prefix(seq.data(), static_cast<std::size_t>(queries[q].pos + 1));
    auto tape = forward_sr(p, prefix);
    CHECK((tape.output() - dec.outputs().col(static_cast<Eigen::Index>(q))).cwiseAbs().maxCoeff() < 1e-12);
    summed += backward(tape, w.col(static_cast<Eigen::Index>(q))).values;
  }
  CHECK((summed - batched.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("actor gradient matches finite differences") {
  Rng rng(10);
  ModelParams p(tiny_continuous(4), rng);
  jitter(p, rng);
  std::vector<std::vector<int>> seqs{random_prefix(4, 4, rng)};
  Eigen::MatrixXd w(2, 1);
  w << 0.7, -1.3;
  GradientBundle g(p);
  {
    const TrunkPass trunk(p, seqs);
    const ActorPass actor(trunk, {{0, 3}});
    actor.backward(w, g);
  }
  CHECK(g.values.head(p.layout().critic_end).isZero());
  for (Eigen::Index i = p.layout().critic_end; i < p.size(); ++i) {
    const double keep = p.values()[i];
    auto eval = [&](double v) {
      p.mutable_values()[i] = v;
      const TrunkPass trunk(p, seqs);
      return (w.transpose() * ActorPass(trunk, {{0, 3}}).actions())(0, 0);
    };
    const double fd = (eval(keep + 1e-5) - eval(keep - 1e-5)) / 2e-5;
    p.mutable_values()[i] = keep;
    CHECK(rel_error(g.values[i], fd) < 1e-4);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradients leave params unchanged") {
    Rng rng(11);
    ModelParams p(tiny_discrete(), rng);
    const Eigen::VectorXd before = p.values();
    auto opt = full_optimizer(p, {});
    for (int i = 0; i < 5; ++i) optim_step(p, opt, GradientBundle(p));
    CHECK(p.values() == before);
    CHECK(opt.step == 5);
  }
  SUBCASE("constant gradient moves by the learning rate") {
    NetShape s = tiny_discrete(1, 1);
    ModelParams p = ModelParams::zeros(s);
    auto opt = full_optimizer(p, {.lr = 1e-3});
    GradientBundle g(p);
    g.values.setOnes();
    for (int i = 0; i < 2000; ++i) {
      const Eigen::VectorXd before = p.values();
      optim_step(p, opt, g);
      const double moved = (before - p.values())[0];
      CHECK(moved == doctest::Approx(1e-3).epsilon(1e-4));
    }
  }
  SUBCASE("clipping rescales to the clip norm") {
    Rng rng(12);
    ModelParams a(tiny_discrete(), rng);
    ModelParams b = a;
    GradientBundle g(a);
    std::normal_distribution<double> n;
    for (Eigen::Index i = 0; i < g.values.size(); ++i) g.values[i] = n(rng);
    g.values *= 50.0 / g.values.norm();
    GradientBundle scaled = g;
    scaled.values *= 0.1;
    auto clipped = full_optimizer(a, {.clip = 5.0});
    auto plain = full_optimizer(b, {});
    optim_step(a, clipped, g);
    optim_step(b, plain, scaled);
    CHECK((a.values() - b.values()).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("non-finite gradients are rejected") {
    Rng rng(13);
    ModelParams p(tiny_discrete(), rng);
    auto opt = full_optimizer(p, {});
    GradientBundle g(p);
    g.values[3] = std::nan("");
    CHECK_THROWS_AS(optim_step(p, opt, g), DomainError);
    g.values[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(optim_step(p, opt, g), DomainError);
  }
  SUBCASE("ranges") {
    Rng rng(14);
    ModelParams p(tiny_continuous(), rng);
    const Eigen::VectorXd before = p.values();
    auto actor = actor_optimizer(p, {});
    GradientBundle g(p);
    g.values.setOnes();
    optim_step(p, actor, g);
    const Eigen::Index split = p.layout().critic_end;
    CHECK(p.values().head(split) == before.head(split));
    CHECK(p.values().tail(p.size() - split) != before.tail(p.size() - split));
  }
}

TEST_CASE("polyak") {
  NetShape s = tiny_discrete(1, 1);
  ModelParams target = ModelParams::zeros(s);
  ModelParams online = ModelParams::zeros(s);
  target.mutable_values().setOnes();
  ModelParams t = target;
  polyak_update(t, online, 0.0);
  CHECK(t.values() == online.values());
  t = target;
  polyak_update(t, online, 1.0);
  CHECK(t.values() == target.values());
  t = target;
  polyak_update(t, online, 0.005);
  CHECK(t.values()[0] == doctest::Approx(0.005).epsilon(1e-15));
  CHECK_THROWS_AS(polyak_update(t, online, 1.5), DomainError);
  ModelParams other = ModelParams::zeros(tiny_discrete());
  CHECK_THROWS_AS(polyak_update(t, other, 0.5), DomainError);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(15);
  ModelParams a(tiny_continuous(), rng);
  jitter(a, rng);
  ModelParams b(tiny_discrete(), rng);
  const auto path = std::filesystem::temp_directory_path() / "etapsi_seqmodel_test.ckpt";
  save_checkpoint(path, "point_mass", {{"online", a}, {"other", b}});
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.env_name == "point_mass");
  REQUIRE(ck.models.size() == 2);
  CHECK(ck.get("online").shape() == a.shape());
  CHECK(ck.get("online").values() == a.values());
  CHECK(ck.get("other").values() == b.values());
  const std::vector<int> prefix{0, 2, 2, 1};
  const Eigen::VectorXd act = Eigen::Vector2d(0.1, 0.9);
  CHECK(forward_sr(ck.get("online"), prefix, act).output() == forward_sr(a, prefix, act).output());
  CHECK_THROWS_AS(ck.get("missing"), ConfigError);

  {
    std::ofstream corrupt(path, std::ios::binary | std::ios::trunc);
    corrupt << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), ResourceError);
}
