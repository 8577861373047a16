#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "etapsi/eval.hpp"

using namespace etapsi;

namespace {

// Boustrophedon over an open grid: along even rows rightwards, odd rows leftwards.
Policy sweep_policy(const GridLayout& layout) {
  return [layout](const Trajectory& traj, Rng&) -> ActionChoice {
    const auto [r, c] = layout.cell_of_state[static_cast<std::size_t>(traj.back().index)];
    if (r % 2 == 0) return c + 1 < layout.cols ? kRight : kDown;
    return c > 0 ? kLeft : kDown;
  };
}

Policy constant_policy(int a) {
  return [a](const Trajectory&, Rng&) -> ActionChoice { return a; };
}

std::filesystem::path scratch_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "etapsi_test_eval";
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("evaluate on the 4x4 sweep") {
  const EnvSpec grid = make_env("gridworld", {{"size", "4"}});
  Rng rng(1);
  const EvalReport r = evaluate(sweep_policy(*grid.layout()), grid, 16, rng);
  CHECK(r.entropy == doctest::Approx(std::log(16.0)).epsilon(1e-12));
  CHECK(r.coverage == 1.0);
  CHECK(r.search_completed);
  CHECK(r.search_completion_time == 15);
  CHECK(r.horizon == 16);
  CHECK(r.visits.sum() == 16.0);
  CHECK(r.visits.minCoeff() == 1.0);
}

TEST_CASE("stand-still policy") {
  const EnvSpec grid = make_env("gridworld", {{"size", "4"}});
  Rng rng(1);
  // Moving up from the top-left start bumps into the wall forever.
  const EvalReport r = evaluate(constant_policy(kUp), grid, 16, rng, 40);
  CHECK(r.entropy == 0.0);
  CHECK(r.coverage == doctest::Approx(1.0 / 16.0));
  CHECK_FALSE(r.search_completed);
  CHECK(r.search_completion_time == 40);
  CHECK(r.completion_horizon == 40);
}

TEST_CASE("always-right on the chain") {
  const EnvSpec chain = make_env("chain_mdp");
  Rng rng(1);
  const EvalReport r = evaluate(constant_policy(kChainRight), chain, 20, rng);
  CHECK(r.coverage == 1.0);
  CHECK(r.search_completed);
  CHECK(r.search_completion_time == 5);
}

TEST_CASE("completion beyond the entropy horizon") {
  const EnvSpec grid = make_env("gridworld", {{"size", "4"}});
  Rng rng(1);
  const EvalReport r = evaluate(sweep_policy(*grid.layout()), grid, 8, rng, 30);
  CHECK(r.coverage == doctest::Approx(0.5));
  CHECK(r.entropy == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  CHECK(r.search_completed);
  CHECK(r.search_completion_time == 15);
}

TEST_CASE("report invariants") {
  const EnvSpec river = make_env("river_swim");
  Rng rng(3);
  std::uniform_int_distribution<int> coin(0, 1);
  const Policy random = [&coin](const Trajectory&, Rng& g) -> ActionChoice { return coin(g); };
  for (int trial = 0; trial < 50; ++trial) {
    const EvalReport r = evaluate(random, river, 30, rng);
    CHECK(r.entropy <= std::log(6.0) + 1e-12);
    CHECK(r.coverage == doctest::Approx(static_cast<double>((r.visits.array() > 0).count()) / 6.0));
    if (r.search_completed) {
      CHECK(r.search_completion_time <= 30);
      CHECK(r.search_completion_time >= 5);
    }
  }
}

TEST_CASE("evaluate_multi") {
  const EnvSpec grid = make_env("gridworld", {{"size", "4"}});
  SUBCASE("one trajectory matches evaluate") {
    Rng a(9), b(9);
    const EvalReport single = evaluate(sweep_policy(*grid.layout()), grid, 12, a);
    const EvalReport multi = evaluate_multi(sweep_policy(*grid.layout()), grid, 12, 1, b);
    CHECK(single.entropy == multi.entropy);
    CHECK(single.coverage == multi.coverage);
    CHECK(single.search_completion_time == multi.search_completion_time);
    CHECK(single.visits == multi.visits);
  }
  SUBCASE("deterministic policy and env: any count equals one") {
    Rng a(9), b(9);
    const EvalReport one = evaluate_multi(sweep_policy(*grid.layout()), grid, 12, 1, a);
    const EvalReport many = evaluate_multi(sweep_policy(*grid.layout()), grid, 12, 7, b);
    CHECK(many.entropy == doctest::Approx(one.entropy).epsilon(1e-12));
    CHECK(many.coverage == one.coverage);
    CHECK(many.visits.isApprox(one.visits, 1e-12));
  }
  SUBCASE("copies of one trajectory") {
    Rng rng(2);
    const Trajectory t = rollout(grid, sweep_policy(*grid.layout()), 10, rng);
    const std::vector<Trajectory> copies(5, t);
    const EvalReport one = report_of(t, 16, 10);
    const EvalReport many = report_of_many(copies, 16, 10);
    CHECK(many.entropy == doctest::Approx(one.entropy).epsilon(1e-12));
    CHECK(many.coverage == one.coverage);
  }
  SUBCASE("complementary halves cover everything") {
    const EnvSpec chain = make_env("chain_mdp", {{"size", "4"}});
    Trajectory left(StateId(0));
    left.push(kChainLeft, StateId(0));
    left.push(kChainRight, StateId(1));
    left.push(kChainLeft, StateId(0));
    Trajectory right(StateId(2));
    right.push(kChainRight, StateId(3));
    right.push(kChainLeft, StateId(2));
    right.push(kChainRight, StateId(3));
    const std::vector<Trajectory> pair{left, right};
    const EvalReport r = report_of_many(pair, 4, 4);
    CHECK(report_of(left, 4, 4).coverage == 0.5);
    CHECK(r.coverage == 1.0);
    CHECK(r.search_completed);
    CHECK(r.search_completion_time == 2);
  }
  CHECK_THROWS_AS(evaluate_multi(sweep_policy(*grid.layout()), grid, 12, 0, *std::make_unique<Rng>(1)), DomainError);
}

TEST_CASE("goal search") {
  const EnvSpec grid = make_env("gridworld", {{"size", "4"}});
  const Policy sweep = sweep_policy(*grid.layout());
  Rng rng(4);
  SUBCASE("goal at the start") {
    const std::vector<StateId> goals{grid.start()};
    CHECK(goal_search_time(sweep, grid, 16, goals, rng) == 0.0);
  }
  SUBCASE("every goal along the sweep") {
    std::vector<StateId> goals;
    for (int s = 0; s < 16; ++s) goals.emplace_back(s);
    CHECK(goal_search_time(sweep, grid, 200, goals, rng) == doctest::Approx(7.5));
  }
  SUBCASE("sampled goals stay within range") {
    const double t = goal_search_time(sweep, grid, 200, rng);
    CHECK(t >= 0.0);
    CHECK(t <= 15.0);
  }
  SUBCASE("unreachable goal") {
    const auto path = scratch_dir() / "walled.txt";
    std::ofstream(path) << "#####\n#S.##\n#..#.\n#####\n";
    const EnvSpec walled = make_env("gridworld", {{"layout", path.string()}});
    const StateId island(walled.n_states() - 1);
    const std::vector<StateId> goals{island};
    const Policy right = [](const Trajectory&, Rng&) -> ActionChoice { return kRight; };
    CHECK(goal_search_time(right, walled, 25, goals, rng) == 25.0);
  }
  CHECK_THROWS_AS(goal_search_time(sweep, grid, 16, std::vector<StateId>{}, rng), DomainError);
}

TEST_CASE("heatmap export") {
  const auto dir = scratch_dir();
  SUBCASE("uniform counts give a constant image") {
    const EnvSpec grid = make_env("gridworld", {{"size", "4"}});
    Rng rng(1);
    const EvalReport r = evaluate(sweep_policy(*grid.layout()), grid, 16, rng);
    heatmap_export(r, *grid.layout(), dir / "uniform");
    std::istringstream pgm(slurp(dir / "uniform.pgm"));
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    pgm >> magic >> w >> h >> maxval;
    CHECK(magic == "P2");
    CHECK(w == 4);
    CHECK(h == 4);
    CHECK(maxval == 255);
    int v = 0, count = 0;
    while (pgm >> v) {
      CHECK(v == 255);
      ++count;
    }
    CHECK(count == 16);
  }
  SUBCASE("walls, zero rows and exact reload") {
    const EnvSpec rooms = make_env("two_rooms");
    Rng rng(1);
    const EvalReport r = evaluate(constant_policy(kRight), rooms, 13, rng);
    heatmap_export(r, *rooms.layout(), dir / "rooms");
    const auto cells = load_heatmap_csv(dir / "rooms.csv");
    const GridLayout& L = *rooms.layout();
    REQUIRE(static_cast<int>(cells.size()) == L.rows);
    int zero_rows = 0;
    for (int row = 0; row < L.rows; ++row) {
      REQUIRE(static_cast<int>(cells[static_cast<std::size_t>(row)].size()) == L.cols);
      bool all_zero = true;
      for (int c = 0; c < L.cols; ++c) {
        const auto& cell = cells[static_cast<std::size_t>(row)][static_cast<std::size_t>(c)];
        const int s = L.state_of_cell[static_cast<std::size_t>(row * L.cols + c)];
        CHECK(cell.has_value() == (s >= 0));
        if (s >= 0) {
          CHECK(*cell == r.visits[s]);
          all_zero = all_zero && *cell == 0.0;
        }
      }
      if (all_zero) ++zero_rows;
    }
    CHECK(zero_rows > 0);
  }
  SUBCASE("fractional counts reload exactly") {
    const EnvSpec grid = make_env("gridworld", {{"size", "3"}});
    EvalReport r;
    r.visits = VisitationVector::LinSpaced(9, 0.1, 1.0 / 3.0);
    heatmap_export(r, *grid.layout(), dir / "frac");
    const auto cells = load_heatmap_csv(dir / "frac.csv");
    for (int s = 0; s < 9; ++s) CHECK(*cells[static_cast<std::size_t>(s / 3)][static_cast<std::size_t>(s % 3)] == r.visits[s]);
  }
  SUBCASE("errors") {
    const EnvSpec grid = make_env("gridworld", {{"size", "3"}});
    EvalReport r;
    r.visits = VisitationVector::Ones(4);
    CHECK_THROWS_AS(heatmap_export(r, *grid.layout(), dir / "bad"), DomainError);
    r.visits = VisitationVector::Ones(9);
    CHECK_THROWS_AS(heatmap_export(r, *grid.layout(), dir / "missing_dir" / "x"), ResourceError);
    CHECK_THROWS_AS(load_heatmap_csv(dir / "nope.csv"), ResourceError);
  }
}
