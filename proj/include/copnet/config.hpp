#pragma once

// Run configuration: plain-text `key = value` files with [section] headers,
// merged with command-line overrides (defaults < file < flags), resolved
// against a scenario, and echoed byte-completely before any training step.

#include "copnet/env.hpp"
#include "copnet/qmix.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace copnet {

struct RunConfig {
  // [run]
  std::string scenario = "recon"; // builtin name or .scn path
  std::string laydown = "train";  // train|test1|test2|test3
  uint64_t seed = 1;
  std::string out_dir = "runs/out";
  int64_t total_env_steps = 200000;
  int64_t eval_every = 5000;
  int eval_episodes = 32;
  int64_t checkpoint_every = 50000;
  int workers = 1;
  // [model]
  bool comm = true;
  int rounds = 3;
  bool use_s0 = false;
  bool use_dobs = false;
  // [train]
  TrainConfig train;
  // [degradation] — applied on top of the scenario's own values
  std::optional<double> sight_scale;
  std::optional<std::string> gps;
  std::optional<double> comm_drop;
  std::optional<double> comm_range;

  void set(const std::string& key, const std::string& raw);
  std::string echo() const;

  // Scenario with laydown variant and degradation overrides applied.
  ScenarioSpec resolve_scenario() const {
    std::string name = scenario;
    if (laydown != "train") {
      if (laydown != "test1" && laydown != "test2" && laydown != "test3")
        throw std::invalid_argument("config: laydown must be train|test1|test2|test3");
      name += "." + laydown;
    }
    ScenarioSpec spec = load_scenario(name);
    if (sight_scale) spec.degradation.sight_scale = *sight_scale;
    if (comm_drop) spec.degradation.comm_drop = *comm_drop;
    if (comm_range) spec.degradation.comm_range = *comm_range;
    if (gps) {
      if (*gps == "all") spec.degradation.gps_mode = GpsMode::kAll;
      else if (*gps == "partial") spec.degradation.gps_mode = GpsMode::kPartial;
      else if (*gps == "none") spec.degradation.gps_mode = GpsMode::kNone;
      else throw std::invalid_argument("config: gps must be all|partial|none");
    }
    spec.validate();
    return spec;
  }

  ModelConfig model_config(const ScenarioSpec& spec) const {
    ModelConfig cfg;
    cfg.n_agents = spec.blue_count();
    cfg.n_actions = spec.n_actions();
    cfg.comm_enabled = comm;
    cfg.rounds = rounds;
    cfg.use_s0 = use_s0;
    cfg.use_dobs = use_dobs;
    cfg.check();
    return cfg;
  }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad bool for " + key + ": '" + v + "'");
}

inline double parse_num(const std::string& v, const std::string& key) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
}

inline std::string fmt_num(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v); // shortest round-trip form
  if (ec != std::errc()) throw std::logic_error("config: number formatting failed");
  return std::string(buf, end);
}

} // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  using detail::parse_bool;
  using detail::parse_num;
  auto as_int = [&](int64_t lo) {
    double d = parse_num(raw, key);
    int64_t i = static_cast<int64_t>(d);
    if (d != static_cast<double>(i) || i < lo)
      throw std::invalid_argument("config: bad integer for " + key + ": '" + raw + "'");
    return i;
  };
  if (key == "run.scenario") scenario = raw;
  else if (key == "run.laydown") laydown = raw;
  else if (key == "run.seed") seed = static_cast<uint64_t>(as_int(0));
  else if (key == "run.out_dir") out_dir = raw;
  else if (key == "run.total_env_steps") total_env_steps = as_int(1);
  else if (key == "run.eval_every") eval_every = as_int(1);
  else if (key == "run.eval_episodes") eval_episodes = static_cast<int>(as_int(1));
  else if (key == "run.checkpoint_every") checkpoint_every = as_int(1);
  else if (key == "run.workers") workers = static_cast<int>(as_int(1));
  else if (key == "model.comm") comm = parse_bool(raw, key);
  else if (key == "model.rounds") rounds = static_cast<int>(as_int(1));
  else if (key == "model.use_s0") use_s0 = parse_bool(raw, key);
  else if (key == "model.use_dobs") use_dobs = parse_bool(raw, key);
  else if (key == "train.gamma") train.gamma = parse_num(raw, key);
  else if (key == "train.lambda_td") train.lambda_td = parse_num(raw, key);
  else if (key == "train.eps_start") train.eps_start = parse_num(raw, key);
  else if (key == "train.eps_end") train.eps_end = parse_num(raw, key);
  else if (key == "train.eps_anneal_steps") train.eps_anneal_steps = as_int(1);
  else if (key == "train.batch_episodes") train.batch_episodes = static_cast<int>(as_int(1));
  else if (key == "train.update_every") train.update_every = static_cast<int>(as_int(1));
  else if (key == "train.target_sync_interval")
    train.target_sync_interval = static_cast<int>(as_int(1));
  else if (key == "train.buffer_capacity") train.buffer_capacity = static_cast<int>(as_int(1));
  else if (key == "train.lambda_h") train.lambda_h = parse_num(raw, key);
  else if (key == "train.grad_clip") train.grad_clip = parse_num(raw, key);
  else if (key == "train.lr") train.lr = parse_num(raw, key);
  else if (key == "degradation.sight_scale") sight_scale = parse_num(raw, key);
  else if (key == "degradation.gps") gps = raw;
  else if (key == "degradation.comm_drop") comm_drop = parse_num(raw, key);
  else if (key == "degradation.comm_range") comm_range = parse_num(raw, key);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

// Every effective value, defaults included, in a fixed order. Parsing the
// echo back reproduces the configuration exactly.
inline std::string RunConfig::echo() const {
  using detail::fmt_num;
  std::ostringstream os;
  os << "[run]\n";
  os << "scenario = " << scenario << '\n';
  os << "laydown = " << laydown << '\n';
  os << "seed = " << seed << '\n';
  os << "out_dir = " << out_dir << '\n';
  os << "total_env_steps = " << total_env_steps << '\n';
  os << "eval_every = " << eval_every << '\n';
  os << "eval_episodes = " << eval_episodes << '\n';
  os << "checkpoint_every = " << checkpoint_every << '\n';
  os << "workers = " << workers << '\n';
  os << "\n[model]\n";
  os << "comm = " << (comm ? "true" : "false") << '\n';
  os << "rounds = " << rounds << '\n';
  os << "use_s0 = " << (use_s0 ? "true" : "false") << '\n';
  os << "use_dobs = " << (use_dobs ? "true" : "false") << '\n';
  os << "\n[train]\n";
  os << "gamma = " << fmt_num(train.gamma) << '\n';
  os << "lambda_td = " << fmt_num(train.lambda_td) << '\n';
  os << "eps_start = " << fmt_num(train.eps_start) << '\n';
  os << "eps_end = " << fmt_num(train.eps_end) << '\n';
  os << "eps_anneal_steps = " << train.eps_anneal_steps << '\n';
  os << "batch_episodes = " << train.batch_episodes << '\n';
  os << "update_every = " << train.update_every << '\n';
  os << "target_sync_interval = " << train.target_sync_interval << '\n';
  os << "buffer_capacity = " << train.buffer_capacity << '\n';
  os << "lambda_h = " << fmt_num(train.lambda_h) << '\n';
  os << "grad_clip = " << fmt_num(train.grad_clip) << '\n';
  os << "lr = " << fmt_num(train.lr) << '\n';
  if (sight_scale || gps || comm_drop || comm_range) {
    os << "\n[degradation]\n";
    if (sight_scale) os << "sight_scale = " << fmt_num(*sight_scale) << '\n';
    if (gps) os << "gps = " << *gps << '\n';
    if (comm_drop) os << "comm_drop = " << fmt_num(*comm_drop) << '\n';
    if (comm_range) os << "comm_range = " << fmt_num(*comm_range) << '\n';
  }
  return os.str();
}

// Parses `key = value` lines under [section] headers into an existing config
// (so several sources can be layered). '#' starts a comment.
inline void parse_run_config(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
    auto notspace = [](unsigned char c) { return !std::isspace(c); };
    line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad section");
      section = line.substr(1, line.size() - 2);
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
    val.erase(val.begin(), std::find_if(val.begin(), val.end(), notspace));
    if (section.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": key before section");
    try {
      cfg.set(section + "." + key, val);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  parse_run_config(cfg, ss.str());
  return cfg;
}

} // namespace copnet
