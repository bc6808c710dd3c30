#pragma once

// Gridworld combat simulator: scenario schema + parser, deterministic reset,
// fixed-layout observations, simultaneous movement with index-priority
// collision resolution, shield-first damage, scripted red force, and the
// communication mask. All randomness flows through explicit Rng streams.

#include "copnet/tensor.hpp"

#include <array>
#include <fstream>
#include <limits>
#include <optional>
#include <set>

namespace copnet {

constexpr int kMaxUnits = 12;          // fixed slot count in every layout
constexpr int kObsPerUnit = 11;        // [vis, dist, relx, rely, hp, sh, type x4, in_range]
constexpr int kObsSelf = 6 + 2 + kMaxUnits; // [hp, sh, type x4, gps x2, id one-hot]
constexpr int kObsDim = kMaxUnits * kObsPerUnit + kObsSelf; // 152
constexpr int kEgoPerUnit = 9;         // [relx, rely, hp, sh, alive, type x4]
constexpr int kEgoDim = kMaxUnits * kEgoPerUnit; // 108
constexpr int kStatePerUnit = 10;      // [x, y, hp, sh, cooldown, alive, type x4]
constexpr int kStateDim = kMaxUnits * kStatePerUnit + 1; // 121
constexpr int kMoveActions = 5;        // noop, N, S, E, W

enum class UnitType : uint8_t { kAerialScout, kGroundRanged, kGroundMelee, kEnemyHeavy };
enum class Team : uint8_t { kBlue, kRed };
enum class WinCondition : uint8_t { kKillTargetBeforeTimer, kKillAllRed, kKill80PctRed };
enum class GpsMode : uint8_t { kAll, kPartial, kNone };
enum class IdlePolicy : uint8_t { kHold, kWander };

inline const char* unit_type_name(UnitType t) {
  switch (t) {
    case UnitType::kAerialScout: return "aerial-scout";
    case UnitType::kGroundRanged: return "ground-ranged";
    case UnitType::kGroundMelee: return "ground-melee";
    case UnitType::kEnemyHeavy: return "enemy-heavy";
  }
  return "?";
}

struct UnitCapabilities {
  UnitType type = UnitType::kGroundRanged;
  double sight_range = 0;
  double shoot_range = 0;
  int move_speed = 0;
  bool gps_enabled = false;
  double attack_damage = 0;
  double max_health = 1;
  double max_shield = 0;
  int cooldown_steps = 0;
  IdlePolicy idle = IdlePolicy::kHold; // fallback when no blue is visible (red only)
};

struct Rect {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1; // inclusive; empty when x1 < x0
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool empty() const { return x1 < x0 || y1 < y0; }
};

struct Degradation {
  double sight_scale = 1.0;
  GpsMode gps_mode = GpsMode::kAll;
  double comm_drop = 0.0;
  double comm_range = std::numeric_limits<double>::infinity();
};

struct ScenarioSpec {
  std::string name;
  int width = 0, height = 0;
  int max_steps = 0;
  std::vector<uint8_t> walls; // width*height, row-major y*width+x
  std::vector<std::pair<UnitCapabilities, Team>> roster; // blue units first
  // laydown[0] = training laydown, [1..3] = test1..test3 (fall back to [0])
  std::array<Rect, 4> blue_spawn{}, red_spawn{};
  int active_laydown = 0;
  WinCondition win = WinCondition::kKillAllRed;
  Degradation degradation;

  bool wall_at(int x, int y) const { return walls[static_cast<size_t>(y) * width + x] != 0; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
  double diagonal() const { return std::sqrt(double(width) * width + double(height) * height); }

  int blue_count() const {
    int n = 0;
    for (const auto& [c, t] : roster) n += (t == Team::kBlue);
    return n;
  }
  int red_count() const { return static_cast<int>(roster.size()) - blue_count(); }
  int n_actions() const { return kMoveActions + red_count(); }
  // roster index of the j-th red unit
  int red_roster_index(int j) const { return blue_count() + j; }

  const Rect& spawn(Team t) const {
    const auto& arr = t == Team::kBlue ? blue_spawn : red_spawn;
    const Rect& r = arr[static_cast<size_t>(active_laydown)];
    return r.empty() ? arr[0] : r;
  }

  // Max achievable positive reward mass: all red effective hp + kill and win bonuses.
  double reward_scale() const {
    double total = 20.0;
    for (const auto& [c, t] : roster)
      if (t == Team::kRed) total += c.max_health + c.max_shield + 5.0;
    return total;
  }

  void validate() const;
};

struct Unit {
  int x = 0, y = 0;
  double health = 0, shield = 0;
  int cooldown = 0;
  Team team = Team::kBlue;
  bool alive = false;
};

struct WorldState {
  int timestep = 0;
  std::vector<Unit> units; // parallel to spec.roster
  bool done = false, win = false;
  int red_dead = 0;
  int64_t illegal_actions = 0; // diagnostics: blue actions replaced by no-op
  int partial_gps_unit = -1;   // blue index keeping GPS under partial denial (no-scout rosters)
  Rng red_rng{0};              // stream for scripted-red wander decisions
};

struct StepOutcome {
  double reward = 0;
  bool done = false, win = false;
};

inline double unit_distance(const Unit& a, const Unit& b) {
  double dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

inline void ScenarioSpec::validate() const {
  if (width < 2 || height < 2)
    throw std::invalid_argument("scenario " + name + ": grid must be at least 2x2");
  if (max_steps < 1) throw std::invalid_argument("scenario " + name + ": max_steps must be >= 1");
  if (roster.empty() || static_cast<int>(roster.size()) > kMaxUnits)
    throw std::invalid_argument("scenario " + name + ": roster size must be 1.." +
                                std::to_string(kMaxUnits));
  if (blue_count() == 0 || red_count() == 0)
    throw std::invalid_argument("scenario " + name + ": both teams must be present");
  for (size_t i = 1; i < roster.size(); ++i)
    if (roster[i - 1].second == Team::kRed && roster[i].second == Team::kBlue)
      throw std::invalid_argument("scenario " + name + ": roster must list blue units first");
  for (const auto& [c, t] : roster) {
    if (c.sight_range < c.shoot_range || c.shoot_range < 0)
      throw std::invalid_argument("scenario " + name +
                                  ": capabilities need sight >= shoot >= 0");
    if (c.move_speed < 0) throw std::invalid_argument("scenario " + name + ": negative speed");
    if (c.max_health <= 0) throw std::invalid_argument("scenario " + name + ": max_health <= 0");
  }
  for (int v = 0; v < 4; ++v) {
    for (Team team : {Team::kBlue, Team::kRed}) {
      Rect r = (team == Team::kBlue ? blue_spawn : red_spawn)[static_cast<size_t>(v)];
      if (r.empty()) {
        if (v == 0)
          throw std::invalid_argument("scenario " + name + ": missing training laydown");
        continue;
      }
      if (r.x0 < 0 || r.y0 < 0 || r.x1 >= width || r.y1 >= height)
        throw std::invalid_argument("scenario " + name + ": spawn region outside grid");
      int free = 0;
      int need = team == Team::kBlue ? blue_count() : red_count();
      for (int y = r.y0; y <= r.y1; ++y)
        for (int x = r.x0; x <= r.x1; ++x)
          free += wall_at(x, y) ? 0 : 1;
      if (free < need)
        throw std::invalid_argument("scenario " + name + ": spawn region too small for " +
                                    std::to_string(need) + " units");
    }
  }
  double drop = degradation.comm_drop;
  if (drop < 0 || drop > 1)
    throw std::invalid_argument("scenario " + name + ": comm_drop outside [0,1]");
}

// --- scenario text format ---------------------------------------------------
//
// Plain-text sections; '#' starts a comment. Sections:
//   [grid]        width, height, max_steps
//   [walls]       rect = x0,y0,x1,y1 (inclusive) | cell = x,y | gap = x0,y0,x1,y1
//                 (gap carves previously placed walls)
//   [unit]        repeatable; team, type, count, sight, shoot, speed, hp,
//                 shield, damage, cooldown, gps, idle
//   [laydown]     blue/red = x0,y0,x1,y1; optional blue.test1.. red.test3
//   [win]         condition = kill-target-before-timer|kill-all-red|kill-80pct-red
//   [degradation] sight_scale, gps = all|partial|none, comm_drop, comm_range (inf ok)

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_ints(const std::string& v, size_t n, int line) {
  std::vector<int> out;
  std::string cur;
  for (char ch : v + ",") {
    if (ch == ',') {
      cur = trim(cur);
      size_t pos = 0;
      try {
        out.push_back(std::stoi(cur, &pos));
      } catch (const std::exception&) {
        pos = std::string::npos;
      }
      if (pos != cur.size())
        throw std::invalid_argument("scenario parse error at line " + std::to_string(line) +
                                    ": bad integer '" + cur + "'");
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (out.size() != n)
    throw std::invalid_argument("scenario parse error at line " + std::to_string(line) +
                                ": expected " + std::to_string(n) + " integers");
  return out;
}

} // namespace detail

inline ScenarioSpec parse_scenario(const std::string& text, const std::string& name_hint = "") {
  ScenarioSpec spec;
  spec.name = name_hint;
  std::string section;
  std::optional<UnitCapabilities> unit;
  Team unit_team = Team::kBlue;
  int unit_count = 1;
  struct WallOp { bool carve; Rect r; };
  std::vector<WallOp> wall_ops;

  auto flush_unit = [&](int line) {
    if (!unit) return;
    if (unit->max_health <= 0)
      throw std::invalid_argument("scenario parse error at line " + std::to_string(line) +
                                  ": unit block missing hp");
    for (int i = 0; i < unit_count; ++i) spec.roster.emplace_back(*unit, unit_team);
    unit.reset();
    unit_team = Team::kBlue;
    unit_count = 1;
  };

  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = raw;
    size_t hash = s.find('#');
    if (hash != std::string::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw std::invalid_argument("scenario parse error at line " + std::to_string(line) +
                                    ": unterminated section header");
      flush_unit(line);
      section = s.substr(1, s.size() - 2);
      if (section == "unit") unit = UnitCapabilities{};
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("scenario parse error at line " + std::to_string(line) +
                                  ": expected key = value");
    std::string key = detail::trim(s.substr(0, eq));
    std::string val = detail::trim(s.substr(eq + 1));
    auto bad = [&](const std::string& why) {
      return std::invalid_argument("scenario parse error at line " + std::to_string(line) +
                                   ": " + why);
    };
    auto as_double = [&](const std::string& v) {
      if (v == "inf") return std::numeric_limits<double>::infinity();
      size_t pos = 0;
      double d = 0;
      try {
        d = std::stod(v, &pos);
      } catch (const std::exception&) {
        pos = std::string::npos;
      }
      if (pos != v.size()) throw bad("bad number '" + v + "'");
      return d;
    };
    auto as_int = [&](const std::string& v) {
      size_t pos = 0;
      int i = 0;
      try {
        i = std::stoi(v, &pos);
      } catch (const std::exception&) {
        pos = std::string::npos;
      }
      if (pos != v.size()) throw bad("bad integer '" + v + "'");
      return i;
    };
    auto as_bool = [&](const std::string& v) {
      if (v == "true") return true;
      if (v == "false") return false;
      throw bad("bad boolean '" + v + "'");
    };

    if (section == "grid") {
      if (key == "width") spec.width = as_int(val);
      else if (key == "height") spec.height = as_int(val);
      else if (key == "max_steps") spec.max_steps = as_int(val);
      else if (key == "name") spec.name = val;
      else throw bad("unknown grid key '" + key + "'");
    } else if (section == "walls") {
      auto v4 = key == "cell" ? std::vector<int>{} : detail::parse_ints(val, 4, line);
      if (key == "rect") wall_ops.push_back({false, Rect{v4[0], v4[1], v4[2], v4[3]}});
      else if (key == "gap") wall_ops.push_back({true, Rect{v4[0], v4[1], v4[2], v4[3]}});
      else if (key == "cell") {
        auto v2 = detail::parse_ints(val, 2, line);
        wall_ops.push_back({false, Rect{v2[0], v2[1], v2[0], v2[1]}});
      } else throw bad("unknown walls key '" + key + "'");
    } else if (section == "unit") {
      if (!unit) throw bad("unit key outside [unit] section");
      if (key == "team") {
        if (val == "blue") unit_team = Team::kBlue;
        else if (val == "red") unit_team = Team::kRed;
        else throw bad("bad team '" + val + "'");
      } else if (key == "type") {
        if (val == "aerial-scout") unit->type = UnitType::kAerialScout;
        else if (val == "ground-ranged") unit->type = UnitType::kGroundRanged;
        else if (val == "ground-melee") unit->type = UnitType::kGroundMelee;
        else if (val == "enemy-heavy") unit->type = UnitType::kEnemyHeavy;
        else throw bad("bad unit type '" + val + "'");
      } else if (key == "count") unit_count = as_int(val);
      else if (key == "sight") unit->sight_range = as_double(val);
      else if (key == "shoot") unit->shoot_range = as_double(val);
      else if (key == "speed") unit->move_speed = as_int(val);
      else if (key == "hp") unit->max_health = as_double(val);
      else if (key == "shield") unit->max_shield = as_double(val);
      else if (key == "damage") unit->attack_damage = as_double(val);
      else if (key == "cooldown") unit->cooldown_steps = as_int(val);
      else if (key == "gps") unit->gps_enabled = as_bool(val);
      else if (key == "idle") {
        if (val == "hold") unit->idle = IdlePolicy::kHold;
        else if (val == "wander") unit->idle = IdlePolicy::kWander;
        else throw bad("bad idle policy '" + val + "'");
      } else throw bad("unknown unit key '" + key + "'");
    } else if (section == "laydown") {
      auto v4 = detail::parse_ints(val, 4, line);
      Rect r{v4[0], v4[1], v4[2], v4[3]};
      auto slot = [&](const std::string& k, const char* team) -> std::optional<int> {
        if (k == team) return 0;
        for (int i = 1; i <= 3; ++i)
          if (k == std::string(team) + ".test" + std::to_string(i)) return i;
        return std::nullopt;
      };
      if (auto i = slot(key, "blue")) spec.blue_spawn[static_cast<size_t>(*i)] = r;
      else if (auto i = slot(key, "red")) spec.red_spawn[static_cast<size_t>(*i)] = r;
      else throw bad("unknown laydown key '" + key + "'");
    } else if (section == "win") {
      if (key != "condition") throw bad("unknown win key '" + key + "'");
      if (val == "kill-target-before-timer") spec.win = WinCondition::kKillTargetBeforeTimer;
      else if (val == "kill-all-red") spec.win = WinCondition::kKillAllRed;
      else if (val == "kill-80pct-red") spec.win = WinCondition::kKill80PctRed;
      else throw bad("bad win condition '" + val + "'");
    } else if (section == "degradation") {
      if (key == "sight_scale") spec.degradation.sight_scale = as_double(val);
      else if (key == "gps") {
        if (val == "all") spec.degradation.gps_mode = GpsMode::kAll;
        else if (val == "partial") spec.degradation.gps_mode = GpsMode::kPartial;
        else if (val == "none") spec.degradation.gps_mode = GpsMode::kNone;
        else throw bad("bad gps mode '" + val + "'");
      } else if (key == "comm_drop") spec.degradation.comm_drop = as_double(val);
      else if (key == "comm_range") spec.degradation.comm_range = as_double(val);
      else throw bad("unknown degradation key '" + key + "'");
    } else if (section.empty()) {
      throw bad("key before any section header");
    } else {
      throw bad("unknown section [" + section + "]");
    }
  }
  flush_unit(line);

  // blue units first, preserving relative order within each team
  std::stable_sort(spec.roster.begin(), spec.roster.end(),
                   [](const auto& a, const auto& b) { return a.second < b.second; });

  spec.walls.assign(static_cast<size_t>(spec.width) * spec.height, 0);
  for (const auto& op : wall_ops) {
    if (op.r.x0 < 0 || op.r.y0 < 0 || op.r.x1 >= spec.width || op.r.y1 >= spec.height)
      throw std::invalid_argument("scenario " + spec.name + ": wall outside grid");
    for (int y = op.r.y0; y <= op.r.y1; ++y)
      for (int x = op.r.x0; x <= op.r.x1; ++x)
        spec.walls[static_cast<size_t>(y) * spec.width + x] = op.carve ? 0 : 1;
  }

  spec.validate();
  return spec;
}

// --- builtins ---------------------------------------------------------------

inline std::string builtin_scenario_text(const std::string& name) {
  if (name == "recon")
    return R"(# Air-ground reconnaissance: one fast scout must find the wandering heavy
# enemy and the ground force must converge on it before the timer runs out.
[grid]
name = recon
width = 16
height = 16
max_steps = 45

[unit]
team = blue
type = aerial-scout
count = 1
sight = 12
shoot = 0
speed = 2
hp = 30
shield = 0
damage = 0
gps = true

[unit]
team = blue
type = ground-ranged
count = 4
sight = 2
shoot = 2
speed = 1
hp = 40
shield = 0
damage = 10
gps = true

[unit]
team = red
type = enemy-heavy
count = 1
sight = 3
shoot = 1
speed = 1
hp = 200
shield = 0
damage = 10
gps = false
idle = wander

[laydown]
blue = 1,11,14,14
red = 1,1,14,4
blue.test1 = 1,11,6,14
red.test2 = 9,1,14,4
blue.test3 = 9,9,14,12
red.test3 = 9,1,14,3

[win]
condition = kill-target-before-timer

[degradation]
sight_scale = 1.0
gps = all
comm_drop = 0.0
comm_range = 10
)";
  if (name == "kite")
    return R"(# Kiting drill: three fast ranged units against five slow melee attackers;
# win by destroying all red without being caught.
[grid]
name = kite
width = 12
height = 12
max_steps = 60

[unit]
team = blue
type = ground-ranged
count = 3
sight = 6
shoot = 3
speed = 2
hp = 35
shield = 15
damage = 12
gps = true

[unit]
team = red
type = ground-melee
count = 5
sight = 5
shoot = 1
speed = 1
hp = 45
shield = 0
damage = 14
gps = false
idle = hold

[laydown]
blue = 1,8,10,10
red = 1,1,10,3
blue.test1 = 7,8,10,10
red.test2 = 6,1,10,3
blue.test3 = 8,8,10,10
red.test3 = 8,1,10,3

[win]
condition = kill-all-red

[degradation]
sight_scale = 1.0
gps = all
comm_drop = 0.0
comm_range = inf
)";
  if (name == "crossing")
    return R"(# River crossing assault: a wall band with three gaps separates the forces;
# blue must push through and destroy 80% of the defending red force.
[grid]
name = crossing
width = 24
height = 16
max_steps = 80

[walls]
rect = 0,7,23,8
gap = 4,7,4,8
gap = 12,7,12,8
gap = 20,7,20,8

[unit]
team = blue
type = aerial-scout
count = 1
sight = 10
shoot = 0
speed = 2
hp = 30
shield = 0
damage = 0
gps = true

[unit]
team = blue
type = ground-ranged
count = 4
sight = 6
shoot = 3
speed = 1
hp = 50
shield = 10
damage = 12
gps = true

[unit]
team = red
type = enemy-heavy
count = 6
sight = 4
shoot = 2
speed = 1
hp = 55
shield = 0
damage = 10
gps = false
idle = hold

[laydown]
blue = 2,11,21,14
red = 2,2,21,5
blue.test1 = 2,11,9,14
red.test2 = 13,2,21,5
blue.test3 = 14,11,21,14
red.test3 = 14,2,21,4

[win]
condition = kill-80pct-red

[degradation]
sight_scale = 1.0
gps = all
comm_drop = 0.0
comm_range = inf
)";
  throw std::invalid_argument("unknown builtin scenario '" + name + "'");
}

// Accepts builtin names ("recon", "kite", "crossing"), builtin.variant names
// ("recon.test2"), or a path to a scenario file (optionally with .testN suffix
// applied via the [laydown] variant keys).
inline ScenarioSpec load_scenario(const std::string& name_or_path) {
  std::string base = name_or_path;
  int variant = 0;
  for (int i = 1; i <= 3; ++i) {
    std::string suffix = ".test" + std::to_string(i);
    if (base.size() > suffix.size() &&
        base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
      variant = i;
      base = base.substr(0, base.size() - suffix.size());
      break;
    }
  }
  ScenarioSpec spec;
  if (base == "recon" || base == "kite" || base == "crossing") {
    spec = parse_scenario(builtin_scenario_text(base), base);
  } else {
    std::ifstream f(base);
    if (!f) throw std::invalid_argument("cannot open scenario file '" + base + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    spec = parse_scenario(ss.str(), base);
  }
  spec.active_laydown = variant;
  if (variant) spec.name += ".test" + std::to_string(variant);
  return spec;
}

// --- dynamics ---------------------------------------------------------------

inline WorldState reset(const ScenarioSpec& spec, uint64_t seed) {
  WorldState st;
  Rng rng(seed);
  st.units.resize(spec.roster.size());
  std::vector<std::pair<int, int>> taken;
  for (size_t i = 0; i < spec.roster.size(); ++i) {
    const auto& [caps, team] = spec.roster[i];
    Rect r = spec.spawn(team);
    std::vector<std::pair<int, int>> free;
    for (int y = r.y0; y <= r.y1; ++y)
      for (int x = r.x0; x <= r.x1; ++x) {
        if (spec.wall_at(x, y)) continue;
        bool used = false;
        for (auto [tx, ty] : taken) used = used || (tx == x && ty == y);
        if (!used) free.emplace_back(x, y);
      }
    if (free.empty())
      throw std::runtime_error("scenario " + spec.name + ": spawn region too small");
    auto [x, y] = free[static_cast<size_t>(rng.uniform_int(static_cast<int>(free.size())))];
    taken.emplace_back(x, y);
    st.units[i] = Unit{x, y, caps.max_health, caps.max_shield, 0, team, true};
  }
  st.red_rng = rng.fork(0x7ed);
  if (spec.degradation.gps_mode == GpsMode::kPartial) {
    bool has_scout = false;
    for (const auto& [c, t] : spec.roster)
      has_scout = has_scout || (t == Team::kBlue && c.type == UnitType::kAerialScout);
    if (!has_scout) st.partial_gps_unit = rng.fork(0x695).uniform_int(spec.blue_count());
  }
  return st;
}

// Partial GPS denial keeps GPS on aerial scouts when the roster has any,
// otherwise on one per-episode random blue unit.
inline bool gps_active(const WorldState& st, const ScenarioSpec& spec, int agent) {
  const UnitCapabilities& caps = spec.roster[static_cast<size_t>(agent)].first;
  if (!caps.gps_enabled) return false;
  switch (spec.degradation.gps_mode) {
    case GpsMode::kAll: return true;
    case GpsMode::kNone: return false;
    case GpsMode::kPartial:
      if (st.partial_gps_unit >= 0) return agent == st.partial_gps_unit;
      return caps.type == UnitType::kAerialScout;
  }
  return false;
}

inline void write_type_onehot(double* dst, UnitType t) {
  dst[static_cast<int>(t)] = 1.0;
}

inline Tensor observe(const WorldState& st, const ScenarioSpec& spec, int agent) {
  if (agent < 0 || agent >= spec.blue_count())
    throw std::out_of_range("observe: agent " + std::to_string(agent) + " is not a blue unit");
  Tensor obs({kObsDim});
  const Unit& self = st.units[static_cast<size_t>(agent)];
  if (!self.alive) return obs; // dead observer: all zeros
  const UnitCapabilities& caps = spec.roster[static_cast<size_t>(agent)].first;
  double diag = spec.diagonal();
  double sight = caps.sight_range * spec.degradation.sight_scale;
  for (size_t j = 0; j < st.units.size(); ++j) {
    if (static_cast<int>(j) == agent) continue; // self is covered by the self block
    const Unit& u = st.units[j];
    if (!u.alive) continue;
    double d = unit_distance(self, u);
    if (d > sight) continue;
    const UnitCapabilities& uc = spec.roster[j].first;
    double* slot = &obs.data[j * kObsPerUnit];
    slot[0] = 1.0;
    slot[1] = d / diag;
    slot[2] = (u.x - self.x) / diag;
    slot[3] = (u.y - self.y) / diag;
    slot[4] = u.health / uc.max_health;
    slot[5] = uc.max_shield > 0 ? u.shield / uc.max_shield : 0.0;
    write_type_onehot(slot + 6, uc.type);
    slot[10] = d <= caps.shoot_range ? 1.0 : 0.0;
  }
  double* self_block = &obs.data[static_cast<size_t>(kMaxUnits) * kObsPerUnit];
  self_block[0] = self.health / caps.max_health;
  self_block[1] = caps.max_shield > 0 ? self.shield / caps.max_shield : 0.0;
  write_type_onehot(self_block + 2, caps.type);
  if (gps_active(st, spec, agent)) {
    self_block[6] = static_cast<double>(self.x) / (spec.width - 1);
    self_block[7] = static_cast<double>(self.y) / (spec.height - 1);
  }
  self_block[8 + agent] = 1.0;
  return obs;
}

// Path legality for a move of `steps` cells in one of N/S/E/W from (x, y):
// every intermediate cell must be inside the grid and off walls.
inline bool move_path_clear(const ScenarioSpec& spec, int x, int y, int dir, int steps) {
  static constexpr int dx[] = {0, 0, 0, 1, -1};
  static constexpr int dy[] = {0, -1, 1, 0, 0};
  for (int s = 1; s <= steps; ++s) {
    int nx = x + dx[dir] * s, ny = y + dy[dir] * s;
    if (!spec.in_bounds(nx, ny) || spec.wall_at(nx, ny)) return false;
  }
  return true;
}

inline std::vector<uint8_t> action_mask(const WorldState& st, const ScenarioSpec& spec,
                                        int agent) {
  std::vector<uint8_t> mask(static_cast<size_t>(spec.n_actions()), 0);
  mask[0] = 1; // no-op always legal
  const Unit& self = st.units[static_cast<size_t>(agent)];
  if (!self.alive) return mask;
  const UnitCapabilities& caps = spec.roster[static_cast<size_t>(agent)].first;
  for (int dir = 1; dir <= 4; ++dir)
    if (caps.move_speed > 0 && move_path_clear(spec, self.x, self.y, dir, caps.move_speed))
      mask[static_cast<size_t>(dir)] = 1;
  for (int j = 0; j < spec.red_count(); ++j) {
    const Unit& target = st.units[static_cast<size_t>(spec.red_roster_index(j))];
    if (target.alive && caps.shoot_range > 0 &&
        unit_distance(self, target) <= caps.shoot_range)
      mask[static_cast<size_t>(kMoveActions + j)] = 1;
  }
  return mask;
}

struct RedDecision {
  enum Kind : uint8_t { kHold, kMove, kAttack } kind = kHold;
  int dir = 0;    // 1..4 for kMove
  int target = -1; // roster index of the blue target for kAttack
};

// Scripted red policy from the pre-step state: attack the nearest visible
// blue in shoot range (ties to the lower blue index), else step one cell
// toward the nearest visible blue (N,S,E,W preference on ties, holding when
// no legal step reduces distance), else the unit's idle policy (hold or
// seeded wander with a hold bias). Consumes wander draws from `wander_rng`
// in red roster order.
inline std::vector<RedDecision> scripted_red(const WorldState& st, const ScenarioSpec& spec,
                                             Rng& wander_rng) {
  std::vector<RedDecision> out;
  int nb = spec.blue_count();
  for (int j = 0; j < spec.red_count(); ++j) {
    int ri = spec.red_roster_index(j);
    const Unit& red = st.units[static_cast<size_t>(ri)];
    RedDecision d;
    if (!red.alive) {
      out.push_back(d);
      continue;
    }
    const UnitCapabilities& caps = spec.roster[static_cast<size_t>(ri)].first;
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int b = 0; b < nb; ++b) {
      const Unit& blue = st.units[static_cast<size_t>(b)];
      if (!blue.alive) continue;
      double dist = unit_distance(red, blue);
      if (dist <= caps.sight_range && dist < best_dist) {
        best_dist = dist;
        best = b;
      }
    }
    if (best >= 0 && best_dist <= caps.shoot_range && caps.shoot_range > 0) {
      d.kind = RedDecision::kAttack;
      d.target = best;
    } else if (best >= 0) {
      const Unit& target = st.units[static_cast<size_t>(best)];
      static constexpr int dx[] = {0, 0, 0, 1, -1};
      static constexpr int dy[] = {0, -1, 1, 0, 0};
      int bdir = 0;
      double bd = best_dist;
      for (int dir = 1; dir <= 4; ++dir) {
        if (!move_path_clear(spec, red.x, red.y, dir, 1)) continue;
        double ddx = red.x + dx[dir] - target.x, ddy = red.y + dy[dir] - target.y;
        double nd = std::sqrt(ddx * ddx + ddy * ddy);
        if (nd < bd - 1e-12) {
          bd = nd;
          bdir = dir;
        }
      }
      if (bdir > 0) {
        d.kind = RedDecision::kMove;
        d.dir = bdir;
      }
    } else if (caps.idle == IdlePolicy::kWander) {
      if (!wander_rng.bernoulli(0.6)) {
        std::vector<int> legal;
        for (int dir = 1; dir <= 4; ++dir)
          if (move_path_clear(spec, red.x, red.y, dir, 1)) legal.push_back(dir);
        if (!legal.empty()) {
          d.kind = RedDecision::kMove;
          d.dir = legal[static_cast<size_t>(wander_rng.uniform_int(static_cast<int>(legal.size())))];
        }
      }
    }
    out.push_back(d);
  }
  return out;
}

// Entry (i*n_blue + j) true iff j's message reaches i this round: both alive,
// within comm range, and surviving the per-round drop lottery. Self-delivery
// (i == j) never rolls the lottery.
inline std::vector<uint8_t> comm_mask(const WorldState& st, const ScenarioSpec& spec,
                                      uint64_t round_seed) {
  int nb = spec.blue_count();
  std::vector<uint8_t> mask(static_cast<size_t>(nb) * nb, 0);
  Rng rng(round_seed);
  double drop = spec.degradation.comm_drop;
  for (int i = 0; i < nb; ++i) {
    for (int j = 0; j < nb; ++j) {
      bool ok = st.units[static_cast<size_t>(i)].alive && st.units[static_cast<size_t>(j)].alive;
      if (ok && i != j) {
        ok = unit_distance(st.units[static_cast<size_t>(i)], st.units[static_cast<size_t>(j)]) <=
             spec.degradation.comm_range;
        if (drop > 0) {
          bool delivered = rng.bernoulli(1.0 - drop);
          ok = ok && delivered;
        }
      }
      mask[static_cast<size_t>(i) * nb + j] = ok ? 1 : 0;
    }
  }
  return mask;
}

// Egocentric ground-truth target: every roster unit relative to the agent,
// positions normalized by the grid diagonal, dead units frozen at their
// death cell with zero health and alive flag.
inline Tensor egocentric_state(const WorldState& st, const ScenarioSpec& spec, int agent) {
  const Unit& self = st.units[static_cast<size_t>(agent)];
  if (!self.alive)
    throw std::logic_error("egocentric_state: agent " + std::to_string(agent) + " is dead");
  Tensor out({kEgoDim});
  double diag = spec.diagonal();
  for (size_t j = 0; j < st.units.size(); ++j) {
    const Unit& u = st.units[j];
    const UnitCapabilities& uc = spec.roster[j].first;
    double* blk = &out.data[j * kEgoPerUnit];
    blk[0] = (u.x - self.x) / diag;
    blk[1] = (u.y - self.y) / diag;
    blk[2] = u.health / uc.max_health;
    blk[3] = uc.max_shield > 0 ? u.shield / uc.max_shield : 0.0;
    blk[4] = u.alive ? 1.0 : 0.0;
    write_type_onehot(blk + 5, uc.type);
  }
  return out;
}

// Global mixer state: absolute per-unit attributes plus normalized time.
inline Tensor global_state(const WorldState& st, const ScenarioSpec& spec) {
  Tensor out({kStateDim});
  for (size_t j = 0; j < st.units.size(); ++j) {
    const Unit& u = st.units[j];
    const UnitCapabilities& uc = spec.roster[j].first;
    double* blk = &out.data[j * kStatePerUnit];
    blk[0] = static_cast<double>(u.x) / (spec.width - 1);
    blk[1] = static_cast<double>(u.y) / (spec.height - 1);
    blk[2] = u.health / uc.max_health;
    blk[3] = uc.max_shield > 0 ? u.shield / uc.max_shield : 0.0;
    blk[4] = 0.1 * u.cooldown;
    blk[5] = u.alive ? 1.0 : 0.0;
    write_type_onehot(blk + 6, uc.type);
  }
  out.data[static_cast<size_t>(kMaxUnits) * kStatePerUnit] =
      static_cast<double>(st.timestep) / spec.max_steps;
  return out;
}

// One simultaneous step. Resolution order: scripted red decisions from the
// pre-step state, movement with index-priority collision resolution, attacks
// (post-move range check, shield-first damage), deaths, win/reward, clock.
// Illegal blue actions demote to no-op and are counted, not thrown.
inline StepOutcome step(WorldState& st, const ScenarioSpec& spec, std::vector<int> blue_actions) {
  if (st.done) throw std::logic_error("step: episode is already done");
  int nb = spec.blue_count();
  if (static_cast<int>(blue_actions.size()) != nb)
    throw std::invalid_argument("step: expected " + std::to_string(nb) + " blue actions, got " +
                                std::to_string(blue_actions.size()));
  std::vector<RedDecision> red = scripted_red(st, spec, st.red_rng);

  for (int b = 0; b < nb; ++b) {
    int a = blue_actions[static_cast<size_t>(b)];
    auto mask = action_mask(st, spec, b);
    if (a < 0 || a >= static_cast<int>(mask.size()) || !mask[static_cast<size_t>(a)]) {
      blue_actions[static_cast<size_t>(b)] = 0;
      ++st.illegal_actions;
    }
  }

  // --- movement ---
  static constexpr int dx[] = {0, 0, 0, 1, -1};
  static constexpr int dy[] = {0, -1, 1, 0, 0};
  int n = static_cast<int>(st.units.size());
  std::vector<std::pair<int, int>> desired(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) desired[static_cast<size_t>(i)] = {st.units[static_cast<size_t>(i)].x,
                                                                 st.units[static_cast<size_t>(i)].y};
  for (int b = 0; b < nb; ++b) {
    const Unit& u = st.units[static_cast<size_t>(b)];
    int a = blue_actions[static_cast<size_t>(b)];
    if (!u.alive || a < 1 || a > 4) continue;
    int sp = spec.roster[static_cast<size_t>(b)].first.move_speed;
    desired[static_cast<size_t>(b)] = {u.x + dx[a] * sp, u.y + dy[a] * sp};
  }
  for (int j = 0; j < spec.red_count(); ++j) {
    int ri = spec.red_roster_index(j);
    const Unit& u = st.units[static_cast<size_t>(ri)];
    if (!u.alive || red[static_cast<size_t>(j)].kind != RedDecision::kMove) continue;
    int dir = red[static_cast<size_t>(j)].dir;
    desired[static_cast<size_t>(ri)] = {u.x + dx[dir], u.y + dy[dir]};
  }
  // Collision fixpoint: lowest index claims a contested cell, losers stay;
  // swap pairs (units exchanging cells) both stay. Corpses do not block.
  bool changed = true;
  while (changed) {
    changed = false;
    for (int i = 0; i < n && !changed; ++i) {
      const Unit& ui = st.units[static_cast<size_t>(i)];
      if (!ui.alive) continue;
      for (int j = i + 1; j < n; ++j) {
        const Unit& uj = st.units[static_cast<size_t>(j)];
        if (!uj.alive) continue;
        auto& di = desired[static_cast<size_t>(i)];
        auto& dj = desired[static_cast<size_t>(j)];
        bool moved_i = di != std::make_pair(ui.x, ui.y);
        bool moved_j = dj != std::make_pair(uj.x, uj.y);
        if (di == dj) {
          // A unit keeping its cell always holds it; between two movers the
          // lower index wins the contested cell.
          if (!moved_i && moved_j) {
            dj = {uj.x, uj.y};
            changed = true;
          } else if (moved_i && !moved_j) {
            di = {ui.x, ui.y};
            changed = true;
          } else if (moved_i && moved_j) {
            dj = {uj.x, uj.y};
            changed = true;
          }
        } else if (moved_i && moved_j && di == std::make_pair(uj.x, uj.y) &&
                   dj == std::make_pair(ui.x, ui.y)) {
          di = {ui.x, ui.y};
          dj = {uj.x, uj.y};
          changed = true;
        }
        if (changed) break;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!st.units[static_cast<size_t>(i)].alive) continue;
    st.units[static_cast<size_t>(i)].x = desired[static_cast<size_t>(i)].first;
    st.units[static_cast<size_t>(i)].y = desired[static_cast<size_t>(i)].second;
  }

  // --- attacks (simultaneous; targets alive at phase start absorb all hits) ---
  double damage_to_red = 0, damage_taken = 0;
  std::vector<uint8_t> alive_at_phase(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) alive_at_phase[static_cast<size_t>(i)] = st.units[static_cast<size_t>(i)].alive;
  std::vector<uint8_t> fired(static_cast<size_t>(n), 0);
  auto resolve_attack = [&](int attacker, int target) {
    Unit& a = st.units[static_cast<size_t>(attacker)];
    Unit& t = st.units[static_cast<size_t>(target)];
    const UnitCapabilities& ac = spec.roster[static_cast<size_t>(attacker)].first;
    if (!a.alive || a.cooldown > 0 || !alive_at_phase[static_cast<size_t>(target)]) return;
    if (unit_distance(a, t) > ac.shoot_range) return; // target escaped after movement
    fired[static_cast<size_t>(attacker)] = 1;
    a.cooldown = ac.cooldown_steps;
    double dmg = ac.attack_damage;
    double to_shield = std::min(dmg, t.shield);
    t.shield -= to_shield;
    double to_health = std::min(dmg - to_shield, std::max(t.health, 0.0));
    t.health -= to_health;
    double dealt = to_shield + to_health;
    if (t.team == Team::kRed) damage_to_red += dealt;
    else damage_taken += dealt;
  };
  for (int b = 0; b < nb; ++b) {
    int a = blue_actions[static_cast<size_t>(b)];
    if (a >= kMoveActions) resolve_attack(b, spec.red_roster_index(a - kMoveActions));
  }
  for (int j = 0; j < spec.red_count(); ++j)
    if (red[static_cast<size_t>(j)].kind == RedDecision::kAttack)
      resolve_attack(spec.red_roster_index(j), red[static_cast<size_t>(j)].target);

  // --- deaths ---
  int red_kills = 0;
  for (int i = 0; i < n; ++i) {
    Unit& u = st.units[static_cast<size_t>(i)];
    if (u.alive && u.health <= 0) {
      u.alive = false;
      u.health = 0;
      u.shield = 0;
      if (u.team == Team::kRed) {
        ++red_kills;
        ++st.red_dead;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    Unit& u = st.units[static_cast<size_t>(i)];
    if (u.alive && !fired[static_cast<size_t>(i)] && u.cooldown > 0) --u.cooldown;
  }

  // --- win / done / reward ---
  bool win_now = false;
  switch (spec.win) {
    case WinCondition::kKillTargetBeforeTimer:
      win_now = !st.units[static_cast<size_t>(spec.red_roster_index(0))].alive;
      break;
    case WinCondition::kKillAllRed:
      win_now = st.red_dead == spec.red_count();
      break;
    case WinCondition::kKill80PctRed:
      win_now = st.red_dead >= (spec.red_count() * 8 + 9) / 10; // ceil(0.8 n)
      break;
  }
  int blue_alive = 0;
  for (int b = 0; b < nb; ++b) blue_alive += st.units[static_cast<size_t>(b)].alive;
  st.timestep += 1;
  st.win = win_now;
  st.done = win_now || blue_alive == 0 || st.timestep >= spec.max_steps;

  double rmax = spec.reward_scale();
  double reward = (damage_to_red + 5.0 * red_kills + (win_now ? 20.0 : 0.0)) / rmax -
                  0.5 * damage_taken / rmax;
  StepOutcome out;
  out.reward = std::clamp(reward, -1.0, 1.0);
  out.done = st.done;
  out.win = st.win;
  return out;
}

} // namespace copnet
