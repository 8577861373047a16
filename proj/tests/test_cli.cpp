#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "etapsi/cli.hpp"

using namespace etapsi;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "etapsi_test_cli" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Second line, column `col` of a small CSV.
std::string csv_field(const std::filesystem::path& p, int col) {
  std::istringstream in(slurp(p));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  std::istringstream cells(row);
  std::string cell;
  for (int i = 0; i <= col; ++i) std::getline(cells, cell, ',');
  return cell;
}

RawConfig tiny_chain(const std::string& command) {
  return {{"run.command", command}, {"run.env", "chain_mdp"}, {"env.size", "4"},     {"train.h", "6"},
          {"train.episodes", "4"},  {"train.batch", "4"},      {"train.embed", "6"}, {"train.hidden", "6"},
          {"train.decoder_hidden", "5"}};
}

int invoke(std::vector<std::string> args) {
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("config precedence and errors") {
  const auto dir = fresh_dir("parse");
  const auto file = dir / "run.ini";
  std::ofstream(file) << "# comment\n[run]\ncommand = train\nenv = chain_mdp\n\n[train]\nalpha = 0.95\nepisodes = 12\n";

  SUBCASE("flags override the file") {
    const RunConfig cfg = parse_config(file, {{"train.alpha", "0.9"}});
    CHECK(cfg.train.alpha == 0.9);
    CHECK(cfg.train.episodes == 12);
    CHECK(cfg.train.h == 20);  // chain default
    CHECK(cfg.command == "train");
  }
  SUBCASE("missing env names the key") {
    std::ofstream(dir / "noenv.ini") << "[run]\ncommand = train\n";
    try {
      parse_config(dir / "noenv.ini", {});
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("env") != std::string::npos);
    }
  }
  SUBCASE("unknown key") {
    std::ofstream(dir / "unknown.ini") << "[train]\nalpah = 0.9\n";
    CHECK_THROWS_WITH_AS(read_config_file(dir / "unknown.ini"), doctest::Contains("train.alpah"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(file, {{"train.size", "3"}}), doctest::Contains("train.size"), ConfigError);
  }
  SUBCASE("type mismatch") {
    CHECK_THROWS_WITH_AS(parse_config(file, {{"train.h", "ten"}}), doctest::Contains("'h'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(file, {{"train.alpha", "0.9x"}}), doctest::Contains("'alpha'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(file, {{"run.heatmap", "maybe"}}), doctest::Contains("'heatmap'"), ConfigError);
  }
  SUBCASE("invalid values") {
    CHECK_THROWS_AS(parse_config(file, {{"train.alpha", "1.5"}}), ConfigError);
    CHECK_THROWS_AS(parse_config(file, {{"run.command", "fly"}}), ConfigError);
    CHECK_THROWS_AS(parse_config(file, {{"env.G", "4"}}), ConfigError);
    CHECK_THROWS_AS(parse_config(file, {{"run.env", "moon"}}), ConfigError);
    std::ofstream(dir / "section.ini") << "[mystery]\nx = 1\n";
    CHECK_THROWS_AS(read_config_file(dir / "section.ini"), ConfigError);
    CHECK_THROWS_AS(read_config_file(dir / "absent.ini"), ConfigError);
  }
  SUBCASE("seed lists") {
    CHECK(parse_config(file, {{"run.seeds", "0..4"}}).seeds == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
    CHECK(parse_config(file, {{"run.seeds", "3,9"}}).seeds == std::vector<std::uint64_t>{3, 9});
    CHECK_THROWS_AS(parse_config(file, {{"run.seeds", "4..1"}}), ConfigError);
  }
  SUBCASE("resolved config round-trips") {
    const RunConfig cfg = parse_config(file, {{"train.alpha", "0.9"}, {"env.size", "5"}, {"train.lr", "0.1"}});
    std::ofstream(dir / "echo.ini") << format_config(cfg);
    const RunConfig again = parse_config(dir / "echo.ini", {});
    CHECK(again == cfg);
    CHECK(format_config(again) == format_config(cfg));
  }
  SUBCASE("key sections") {
    CHECK(section_of("alpha") == "train");
    CHECK(section_of("size") == "env");
    CHECK(section_of("seeds") == "run");
    CHECK(section_of("nope").empty());
  }
}

TEST_CASE("output root") {
  RunConfig cfg;
  cfg.out = "from_config";
  ::setenv("ETAPSI_OUT", "/tmp/from_env", 1);
  CHECK(output_root(cfg, false) == "/tmp/from_env");
  CHECK(output_root(cfg, true) == "from_config");
  ::unsetenv("ETAPSI_OUT");
  CHECK(output_root(cfg, false) == "from_config");
}

TEST_CASE("dp-solve on the 3x3 grid") {
  const auto root = fresh_dir("dp");
  const RunConfig cfg = resolve_config(
      {{"run.command", "dp-solve"}, {"run.env", "gridworld"}, {"env.size", "3"}, {"train.h", "9"}});
  REQUIRE(run(cfg, root) == 0);
  const auto dir = run_dir(root, cfg, 0);
  CHECK(std::abs(std::stod(csv_field(dir / "dp.csv", 3)) - std::log(9.0)) < 1e-12);
  CHECK(std::filesystem::exists(dir / "config.ini"));
}

TEST_CASE("train, eval and goal search") {
  const auto root = fresh_dir("train");
  const RunConfig cfg = resolve_config(tiny_chain("train"));
  REQUIRE(run(cfg, root) == 0);
  const auto dir = run_dir(root, cfg, 0);
  for (const char* f : {"metrics.csv", "checkpoint.bin", "eval.csv", "config.ini"})
    CHECK(std::filesystem::exists(dir / f));
  const std::string first = slurp(dir / "metrics.csv");

  SUBCASE("rerun is byte-identical") {
    REQUIRE(run(cfg, root) == 0);
    CHECK(slurp(dir / "metrics.csv") == first);
  }
  SUBCASE("eval from the run directory alone") {
    const RunConfig eval_cfg = parse_config(dir / "config.ini", {{"run.command", "eval"}});
    REQUIRE(run(eval_cfg, root) == 0);
    const auto eval_dir = run_dir(root, eval_cfg, 0);
    CHECK(csv_field(eval_dir / "eval.csv", 2) == csv_field(dir / "eval.csv", 2));
    CHECK(std::filesystem::exists(eval_dir / "config.ini"));
  }
  SUBCASE("goal search uses the trained checkpoint") {
    RawConfig raw = tiny_chain("goal-search");
    const RunConfig goal_cfg = resolve_config(raw);
    REQUIRE(run(goal_cfg, root) == 0);
    const double mean = std::stod(csv_field(run_dir(root, goal_cfg, 0) / "goal_search.csv", 3));
    CHECK(mean >= 0.0);
    CHECK(mean <= 100.0);
  }
  SUBCASE("missing checkpoint fails cleanly") {
    RawConfig raw = tiny_chain("eval");
    raw["run.checkpoint"] = (root / "nothing.bin").string();
    CHECK(run(resolve_config(raw), root) != 0);
  }
  SUBCASE("checkpoint from another env is rejected") {
    RawConfig raw = tiny_chain("eval");
    raw["run.env"] = "river_swim";
    raw["run.checkpoint"] = (dir / "checkpoint.bin").string();
    CHECK(run(resolve_config(raw), root) == 2);
  }
}

TEST_CASE("sweep-alpha runs one training per alpha") {
  const auto root = fresh_dir("sweep");
  RawConfig raw = tiny_chain("sweep-alpha");
  raw["train.episodes"] = "2";
  const RunConfig cfg = resolve_config(raw);
  REQUIRE(run(cfg, root) == 0);
  const auto base = run_dir(root, cfg, 0).parent_path();
  for (const char* a : {"alpha-0.8", "alpha-0.9", "alpha-0.95", "alpha-0.99"})
    CHECK(std::filesystem::exists(base / a / "seed-0" / "metrics.csv"));
  std::istringstream csv(slurp(base / "sweep.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 4);
}

TEST_CASE("command line") {
  const auto root = fresh_dir("argv");
  CHECK(invoke({"etapsi", "dp-solve", "--env", "chain_mdp", "--size", "3", "--h", "4", "--out", root.string(),
                "--seeds", "0..1"}) == 0);
  CHECK(std::filesystem::exists(root / "chain_mdp-dp-solve" / "seed-1" / "dp.csv"));
  CHECK(invoke({"etapsi", "train", "--h", "4"}) == 2);
  CHECK(invoke({"etapsi", "train", "--env", "chain_mdp", "--bogus", "1"}) != 0);
  CHECK(invoke({"etapsi", "dp-solve", "--env", "point_mass", "--out", root.string()}) == 1);
}
