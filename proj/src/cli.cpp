#include "etapsi/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "etapsi/dp.hpp"
#include "etapsi/eval.hpp"

namespace etapsi {

namespace {

// ---------------------------------------------------------------------------
// Key registry

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& what, const std::string& value) {
  throw ConfigError("'" + key + "' expects " + what + ", got '" + value + "'");
}

template <class T>
T parse_integer(const std::string& key, const std::string& s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) bad_value(key, "an integer", s);
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) bad_value(key, "a number", s);
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  bad_value(key, "true or false", s);
}

std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& s) {
  std::vector<std::uint64_t> out;
  if (const auto dots = s.find(".."); dots != std::string::npos) {
    const auto lo = parse_integer<std::uint64_t>(key, s.substr(0, dots));
    const auto hi = parse_integer<std::uint64_t>(key, s.substr(dots + 2));
    if (hi < lo) bad_value(key, "an increasing range", s);
    for (std::uint64_t v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_integer<std::uint64_t>(key, item));
  if (out.empty()) bad_value(key, "a seed list", s);
  return out;
}

std::string format_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? "," : "") + std::to_string(seeds[i]);
  return out;
}

struct Key {
  std::string section;
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::optional<std::string>(const RunConfig&)> get;
  std::string full() const { return section + "." + name; }
};

Key train_int(const char* name, int TrainConfig::*field) {
  return {"train", name, [=](RunConfig& c, const std::string& v) { c.train.*field = parse_integer<int>(name, v); },
          [=](const RunConfig& c) { return std::optional(std::to_string(c.train.*field)); }};
}

Key train_double(const char* name, double TrainConfig::*field) {
  return {"train", name, [=](RunConfig& c, const std::string& v) { c.train.*field = parse_double(name, v); },
          [=](const RunConfig& c) { return std::optional(fmt_double(c.train.*field)); }};
}

Key run_int(const char* name, int RunConfig::*field) {
  return {"run", name, [=](RunConfig& c, const std::string& v) { c.*field = parse_integer<int>(name, v); },
          [=](const RunConfig& c) { return std::optional(std::to_string(c.*field)); }};
}

Key run_string(const char* name, std::string RunConfig::*field) {
  return {"run", name, [=](RunConfig& c, const std::string& v) { c.*field = v; },
          [=](const RunConfig& c) { return std::optional(c.*field); }};
}

Key env_key(const char* name) {
  return {"env", name, [=](RunConfig& c, const std::string& v) { c.env_params[name] = v; },
          [=](const RunConfig& c) -> std::optional<std::string> {
            const auto it = c.env_params.find(name);
            if (it == c.env_params.end()) return std::nullopt;
            return it->second;
          }};
}

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back(run_string("command", &RunConfig::command));
    k.push_back(run_string("env", &RunConfig::env));
    k.push_back({"run", "seeds", [](RunConfig& c, const std::string& v) { c.seeds = parse_seeds("seeds", v); },
                 [](const RunConfig& c) { return std::optional(format_seeds(c.seeds)); }});
    k.push_back(run_string("out", &RunConfig::out));
    k.push_back(run_string("checkpoint", &RunConfig::checkpoint));
    k.push_back(run_int("eval_h", &RunConfig::eval_h));
    k.push_back(run_int("eval_n_traj", &RunConfig::eval_n_traj));
    k.push_back(run_int("goal_h", &RunConfig::goal_h));
    k.push_back(run_int("n_goals", &RunConfig::n_goals));
    k.push_back({"run", "heatmap", [](RunConfig& c, const std::string& v) { c.heatmap = parse_bool("heatmap", v); },
                 [](const RunConfig& c) { return std::optional(std::string(c.heatmap ? "true" : "false")); }});
    for (const char* name : {"size", "rows", "cols", "layout", "G", "step_size"}) k.push_back(env_key(name));
    k.push_back(train_int("h", &TrainConfig::h));
    k.push_back(train_int("episodes", &TrainConfig::episodes));
    k.push_back(train_double("alpha", &TrainConfig::alpha));
    k.push_back(train_int("batch", &TrainConfig::batch));
    k.push_back(train_double("lr", &TrainConfig::lr));
    k.push_back(train_int("updates_per_episode", &TrainConfig::updates_per_episode));
    k.push_back(train_int("embed", &TrainConfig::embed));
    k.push_back(train_int("hidden", &TrainConfig::hidden));
    k.push_back(train_int("decoder_hidden", &TrainConfig::decoder_hidden));
    k.push_back(train_int("encoder_layers", &TrainConfig::encoder_layers));
    k.push_back({"train", "buffer_capacity",
                 [](RunConfig& c, const std::string& v) {
                   c.train.buffer_capacity = parse_integer<long>("buffer_capacity", v);
                 },
                 [](const RunConfig& c) { return std::optional(std::to_string(c.train.buffer_capacity)); }});
    k.push_back(train_double("epsilon_start", &TrainConfig::epsilon_start));
    k.push_back(train_double("epsilon_end", &TrainConfig::epsilon_end));
    k.push_back(train_double("epsilon_anneal_fraction", &TrainConfig::epsilon_anneal_fraction));
    k.push_back(train_int("actor_hidden", &TrainConfig::actor_hidden));
    k.push_back(train_double("action_noise", &TrainConfig::action_noise));
    k.push_back(train_double("target_noise", &TrainConfig::target_noise));
    k.push_back(train_double("noise_clip", &TrainConfig::noise_clip));
    k.push_back(train_int("policy_update", &TrainConfig::policy_update));
    k.push_back(train_double("rho", &TrainConfig::rho));
    k.push_back(train_double("grad_clip", &TrainConfig::grad_clip));
    k.push_back(train_int("warmup_episodes", &TrainConfig::warmup_episodes));
    k.push_back(train_int("eval_every", &TrainConfig::eval_every));
    k.push_back(train_int("completion_h", &TrainConfig::completion_h));
    k.push_back({"train", "log_wall_time",
                 [](RunConfig& c, const std::string& v) { c.train.log_wall_time = parse_bool("log_wall_time", v); },
                 [](const RunConfig& c) { return std::optional(std::string(c.train.log_wall_time ? "true" : "false")); }});
    return k;
  }();
  return keys;
}

const Key* find_key(const std::string& full) {
  for (const Key& k : registry())
    if (k.full() == full) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// ---------------------------------------------------------------------------
// Commands

Rng eval_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xE7A1u};
  return Rng(seq);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw ResourceError("cannot write " + path.string());
}

RunConfig per_seed(const RunConfig& cfg, std::uint64_t seed) {
  RunConfig c = cfg;
  c.seeds = {seed};
  c.train.seed = seed;
  return c;
}

int eval_horizon(const RunConfig& cfg) { return cfg.eval_h > 0 ? cfg.eval_h : cfg.train.h; }

int completion_horizon(const RunConfig& cfg) {
  if (cfg.train.completion_h > 0) return cfg.train.completion_h;
  return std::max(eval_horizon(cfg), episode_length_horizon(cfg.env));
}

Policy policy_from(const RunConfig& cfg, const Checkpoint& ck) {
  if (ck.env_name != cfg.env)
    throw ConfigError("checkpoint was trained on '" + ck.env_name + "', config names '" + cfg.env + "'");
  const ModelParams& p = ck.get(ck.models.size() == 1 ? "sr" : "target");
  auto shared = std::make_shared<const ModelParams>(p);
  return p.shape().continuous() ? actor_policy(shared) : learned_finite_policy(shared, cfg.train.alpha);
}

struct EvalSummary {
  EvalReport single;
  EvalReport multi;
};

EvalSummary evaluate_to(const RunConfig& cfg, const EnvSpec& env, const Policy& policy, std::uint64_t seed,
                        const std::filesystem::path& dir) {
  Rng rng = eval_rng(seed);
  EvalSummary s{evaluate(policy, env, eval_horizon(cfg), rng, completion_horizon(cfg)),
                evaluate_multi(policy, env, eval_horizon(cfg), cfg.eval_n_traj, rng)};
  std::ostringstream csv;
  csv << "seed,horizon,entropy,coverage,search_completion_time,search_completed,completion_horizon,n_traj,"
         "multi_entropy,multi_coverage\n"
      << seed << ',' << s.single.horizon << ',' << fmt_double(s.single.entropy) << ',' << fmt_double(s.single.coverage)
      << ',' << s.single.search_completion_time << ',' << (s.single.search_completed ? 1 : 0) << ','
      << s.single.completion_horizon << ',' << cfg.eval_n_traj << ',' << fmt_double(s.multi.entropy) << ','
      << fmt_double(s.multi.coverage) << '\n';
  write_text(dir / "eval.csv", csv.str());
  if (cfg.heatmap && env.layout() != nullptr) heatmap_export(s.multi, *env.layout(), dir / "heatmap");
  return s;
}

EvalSummary train_one(const RunConfig& cfg, const EnvSpec& env, std::uint64_t seed, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  RunConfig c = per_seed(cfg, seed);
  c.checkpoint = (dir / "checkpoint.bin").string();
  write_text(dir / "config.ini", format_config(c));
  Policy policy;
  if (env.is_finite()) {
    FiniteTrainResult r = train_finite(c.train);
    write_metrics_csv((dir / "metrics.csv").string(), r.metrics);
    save_checkpoint(dir / "checkpoint.bin", c.env, {{"sr", r.params}});
    policy = learned_finite_policy(std::make_shared<const ModelParams>(std::move(r.params)), c.train.alpha);
  } else {
    ContinuousTrainResult r = train_continuous(c.train);
    write_metrics_csv((dir / "metrics.csv").string(), r.metrics);
    save_checkpoint(dir / "checkpoint.bin", c.env, {{"online", r.online}, {"target", r.target}});
    policy = actor_policy(std::make_shared<const ModelParams>(std::move(r.target)));
  }
  return evaluate_to(c, env, policy, seed, dir);
}

std::filesystem::path checkpoint_for(const RunConfig& cfg, const std::filesystem::path& root, std::uint64_t seed) {
  if (!cfg.checkpoint.empty()) return cfg.checkpoint;
  RunConfig trained = cfg;
  trained.command = "train";
  return run_dir(root, trained, seed) / "checkpoint.bin";
}

void report(const std::string& what, std::uint64_t seed, const EvalReport& r) {
  std::cout << what << " seed " << seed << ": entropy " << fmt_double(r.entropy) << " coverage "
            << fmt_double(r.coverage) << " completion "
            << (r.search_completed ? std::to_string(r.search_completion_time) : std::string("none")) << '\n';
}

void run_dp(const RunConfig& cfg, const EnvSpec& env, std::uint64_t seed, const std::filesystem::path& dir) {
  const int h = cfg.train.h;
  const DiscountSchedule sched = DiscountSchedule::anchored(cfg.train.alpha, h);
  const TrajectoryTable table = dp_solve(env, sched, h);
  Rng rng = eval_rng(seed);
  const Trajectory t = dp_rollout(table, env, rng);
  const EvalReport r = report_of(t, env.n_states(), h);
  std::ostringstream actions;
  for (int i = 0; i + 1 < t.length(); ++i) actions << (i ? " " : "") << t.discrete_action(i);
  std::ostringstream csv;
  csv << "env,h,alpha,entropy,coverage,search_completion_time,search_completed,table_entries,nodes_expanded,actions\n"
      << cfg.env << ',' << h << ',' << fmt_double(cfg.train.alpha) << ',' << fmt_double(r.entropy) << ','
      << fmt_double(r.coverage) << ',' << r.search_completion_time << ',' << (r.search_completed ? 1 : 0) << ','
      << table.size() << ',' << table.nodes_expanded() << ',' << actions.str() << '\n';
  write_text(dir / "dp.csv", csv.str());
  report("dp-solve", seed, r);
}

void run_sweep(const RunConfig& cfg, const EnvSpec& env, const std::filesystem::path& root) {
  RunConfig sweep = cfg;
  const std::filesystem::path base = run_dir(root, cfg, 0).parent_path();
  std::filesystem::create_directories(base);
  std::ostringstream csv;
  csv << "alpha,seed,entropy,coverage,search_completion_time,search_completed\n";
  for (const double alpha : kSweepAlphas) {
    sweep.train.alpha = alpha;
    char name[32];
    std::snprintf(name, sizeof name, "alpha-%g", alpha);
    for (const std::uint64_t seed : cfg.seeds) {
      const EvalSummary s = train_one(sweep, env, seed, base / name / ("seed-" + std::to_string(seed)));
      report(std::string("sweep-alpha ") + name, seed, s.single);
      csv << fmt_double(alpha) << ',' << seed << ',' << fmt_double(s.single.entropy) << ','
          << fmt_double(s.single.coverage) << ',' << s.single.search_completion_time << ','
          << (s.single.search_completed ? 1 : 0) << '\n';
    }
  }
  write_text(base / "sweep.csv", csv.str());
}

}  // namespace

// ---------------------------------------------------------------------------

std::string section_of(const std::string& key) {
  for (const Key& k : registry())
    if (k.name == key) return k.section;
  return "";
}

RawConfig read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  RawConfig raw;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line.substr(0, line.find_first_of("#;")));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section != "run" && section != "env" && section != "train")
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown section '" + section + "'");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": key outside a section");
    const std::string key = section + "." + trim(t.substr(0, eq));
    if (find_key(key) == nullptr) throw ConfigError("unknown key '" + key + "'");
    raw[key] = trim(t.substr(eq + 1));
  }
  return raw;
}

RunConfig resolve_config(const RawConfig& raw) {
  for (const auto& [key, value] : raw)
    if (find_key(key) == nullptr) throw ConfigError("unknown key '" + key + "'");
  const auto env_it = raw.find("run.env");
  if (env_it == raw.end() || env_it->second.empty()) throw ConfigError("missing required key 'env'");
  RunConfig cfg;
  cfg.train = default_train_config(env_it->second);
  for (const Key& k : registry()) {
    const auto it = raw.find(k.full());
    if (it != raw.end()) k.set(cfg, it->second);
  }
  if (cfg.command.empty()) throw ConfigError("missing required key 'command'");
  if (std::find(std::begin(kCommands), std::end(kCommands), cfg.command) == std::end(kCommands))
    throw ConfigError("'command' must be one of train, eval, dp-solve, goal-search, sweep-alpha; got '" + cfg.command + "'");
  cfg.train.env = cfg.env;
  cfg.train.env_params = cfg.env_params;
  cfg.train.seed = cfg.seeds.front();
  make_env(cfg.env, cfg.env_params);  // rejects unknown envs and env keys
  cfg.train.validate();
  if (cfg.eval_h < 0) throw ConfigError("invalid value for 'eval_h'");
  if (cfg.eval_n_traj < 1) throw ConfigError("invalid value for 'eval_n_traj'");
  if (cfg.goal_h < 0) throw ConfigError("invalid value for 'goal_h'");
  if (cfg.n_goals < 1) throw ConfigError("invalid value for 'n_goals'");
  if (cfg.out.empty()) throw ConfigError("invalid value for 'out'");
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& file, const RawConfig& flags) {
  RawConfig raw = file.empty() ? RawConfig{} : read_config_file(file);
  for (const auto& [k, v] : flags) raw[k] = v;
  return resolve_config(raw);
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const Key& k : registry()) {
    const auto v = k.get(cfg);
    if (!v) continue;
    if (k.section != section) {
      out += (section.empty() ? "[" : "\n[") + k.section + "]\n";
      section = k.section;
    }
    out += k.name + " = " + *v + "\n";
  }
  return out;
}

std::filesystem::path output_root(const RunConfig& cfg, bool out_from_flag) {
  if (!out_from_flag) {
    if (const char* env = std::getenv("ETAPSI_OUT"); env != nullptr && *env != '\0') return env;
  }
  return cfg.out;
}

std::filesystem::path run_dir(const std::filesystem::path& root, const RunConfig& cfg, std::uint64_t seed) {
  return root / (cfg.env + "-" + cfg.command) / ("seed-" + std::to_string(seed));
}

int run(const RunConfig& cfg, const std::filesystem::path& root) {
  try {
    const EnvSpec env = make_env(cfg.env, cfg.env_params);
    RunConfig resolved = cfg;
    resolved.out = root.string();
    if (cfg.command == "sweep-alpha") {
      run_sweep(resolved, env, root);
      return 0;
    }
    for (const std::uint64_t seed : cfg.seeds) {
      const std::filesystem::path dir = run_dir(root, resolved, seed);
      std::filesystem::create_directories(dir);
      if (cfg.command == "train") {
        report("train", seed, train_one(resolved, env, seed, dir).single);
        continue;
      }
      RunConfig c = per_seed(resolved, seed);
      if (cfg.command == "dp-solve") {
        if (!env.is_finite()) throw UnsupportedOperation("dp-solve needs a finite-action env");
        write_text(dir / "config.ini", format_config(c));
        run_dp(c, env, seed, dir);
        continue;
      }
      c.checkpoint = checkpoint_for(resolved, root, seed).string();
      write_text(dir / "config.ini", format_config(c));
      const Policy policy = policy_from(c, load_checkpoint(c.checkpoint));
      if (cfg.command == "eval") {
        report("eval", seed, evaluate_to(c, env, policy, seed, dir).single);
      } else {
        const int h = c.goal_h > 0 ? c.goal_h : std::max(c.train.h, episode_length_horizon(c.env));
        Rng rng = eval_rng(seed);
        const double mean = goal_search_time(policy, env, h, rng, c.n_goals);
        write_text(dir / "goal_search.csv", "seed,horizon,n_goals,mean_steps\n" + std::to_string(seed) + "," +
                                                std::to_string(h) + "," + std::to_string(c.n_goals) + "," +
                                                fmt_double(mean) + "\n");
        std::cout << "goal-search seed " << seed << ": mean steps " << fmt_double(mean) << '\n';
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Trajectory-conditioned maximum-entropy exploration"};
  app.set_help_flag("--help", "Print this help message and exit");
  std::string command, config, seed;
  app.add_option("command", command, "train | eval | dp-solve | goal-search | sweep-alpha")->required();
  app.add_option("--config", config, "INI file with [run], [env] and [train] sections");
  app.add_option("--seed", seed, "Single seed (same as --seeds N)");
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> opts;
  for (const Key& k : registry()) {
    if (k.full() == "run.command") continue;
    opts.emplace_back(k.full(), app.add_option("--" + k.name, values[k.full()], k.full()));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  RawConfig flags{{"run.command", command}};
  bool out_from_flag = false;
  for (const auto& [key, opt] : opts) {
    if (opt->count() == 0) continue;
    flags[key] = values[key];
    if (key == "run.out") out_from_flag = true;
  }
  if (!seed.empty()) flags["run.seeds"] = seed;
  RunConfig cfg;
  try {
    cfg = parse_config(config, flags);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  return run(cfg, output_root(cfg, out_from_flag));
}

}  // namespace etapsi
