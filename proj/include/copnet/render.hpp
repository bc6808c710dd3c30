#pragma once

// Episode visualization: one SVG frame per decision step (ground truth,
// sight discs, delivered message links, and per-unit consensus ellipses
// whose semi-axes equal the cross-agent position spread), plus a CSV of
// predicted-vs-true unit states.

#include "copnet/trainer.hpp"

#include <filesystem>
#include <fstream>

namespace copnet {

struct RenderResult {
  int frames = 0;
  std::string csv_path;
};

namespace detail {

constexpr double kCell = 48.0; // pixels per grid cell
constexpr double kBand = 26.0; // caption band height

inline double px(double cell_coord) { return (cell_coord + 0.5) * kCell; }
inline double py(double cell_coord) { return (cell_coord + 0.5) * kCell + kBand; }

inline const char* team_color(Team t, UnitType ut) {
  if (t == Team::kRed) return ut == UnitType::kEnemyHeavy ? "#b91c1c" : "#ef4444";
  return ut == UnitType::kAerialScout ? "#7cc4ff" : "#3b82f6";
}

inline void svg_unit(std::ostream& out, const ScenarioSpec& spec, const Unit& u, int idx) {
  const auto& [caps, team] = spec.roster[static_cast<size_t>(idx)];
  double cx = px(u.x), cy = py(u.y), r = kCell * 0.32;
  const char* color = team_color(team, caps.type);
  double opacity = u.alive ? 1.0 : 0.25;
  out << "<g opacity='" << opacity << "'>";
  if (team == Team::kBlue)
    out << "<circle cx='" << cx << "' cy='" << cy << "' r='" << r << "' fill='" << color << "'/>";
  else
    out << "<rect x='" << cx - r << "' y='" << cy - r << "' width='" << 2 * r << "' height='"
        << 2 * r << "' fill='" << color << "'/>";
  out << "<text x='" << cx << "' y='" << cy + 4 << "' text-anchor='middle' font-size='12' "
      << "fill='#ffffff' font-family='monospace'>" << idx << "</text>";
  if (u.alive) {
    double frac = std::clamp(u.health / caps.max_health, 0.0, 1.0);
    double bw = kCell * 0.7;
    out << "<rect x='" << cx - bw / 2 << "' y='" << cy - r - 8 << "' width='" << bw
        << "' height='4' fill='#374151'/>"
        << "<rect x='" << cx - bw / 2 << "' y='" << cy - r - 8 << "' width='" << bw * frac
        << "' height='4' fill='#22c55e'/>";
  } else {
    // distinct marker for dead units: an X over the faded glyph
    out << "<path d='M" << cx - r << ' ' << cy - r << " L" << cx + r << ' ' << cy + r << " M"
        << cx + r << ' ' << cy - r << " L" << cx - r << ' ' << cy + r
        << "' stroke='#9ca3af' stroke-width='3'/>";
  }
  out << "</g>";
}

inline void svg_frame(const std::string& path, const ScenarioSpec& spec, const WorldState& st,
                      const std::vector<UnitConsensus>* consensus,
                      const std::vector<uint8_t>* links, const std::string& caption) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("render: cannot open " + path);
  out << std::setprecision(12);
  double w = spec.width * kCell, h = spec.height * kCell + kBand;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
      << "' viewBox='0 0 " << w << ' ' << h << "'>";
  out << "<rect width='" << w << "' height='" << h << "' fill='#101418'/>";
  out << "<text x='8' y='18' font-size='13' fill='#d1d5db' font-family='monospace'>" << caption
      << "</text>";
  for (int gx = 0; gx <= spec.width; ++gx)
    out << "<line x1='" << gx * kCell << "' y1='" << kBand << "' x2='" << gx * kCell << "' y2='"
        << h << "' stroke='#1f242b' stroke-width='1'/>";
  for (int gy = 0; gy <= spec.height; ++gy)
    out << "<line x1='0' y1='" << gy * kCell + kBand << "' x2='" << w << "' y2='"
        << gy * kCell + kBand << "' stroke='#1f242b' stroke-width='1'/>";
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      if (spec.wall_at(x, y))
        out << "<rect x='" << x * kCell << "' y='" << y * kCell + kBand << "' width='" << kCell
            << "' height='" << kCell << "' fill='#3f4854'/>";

  // sight discs under everything else
  for (size_t i = 0; i < st.units.size(); ++i) {
    const Unit& u = st.units[i];
    const auto& [caps, team] = spec.roster[i];
    if (!u.alive || team != Team::kBlue) continue;
    double sr = caps.sight_range * spec.degradation.sight_scale * kCell;
    out << "<circle cx='" << px(u.x) << "' cy='" << py(u.y) << "' r='" << sr
        << "' fill='#3b82f6' fill-opacity='0.05' stroke='#3b82f6' stroke-opacity='0.35' "
        << "stroke-dasharray='5,5'/>";
  }

  // delivered message links (ordered pairs collapse to one segment)
  if (links) {
    int nb = spec.blue_count();
    for (int i = 0; i < nb; ++i)
      for (int j = i + 1; j < nb; ++j) {
        bool any = (*links)[static_cast<size_t>(i) * nb + j] ||
                   (*links)[static_cast<size_t>(j) * nb + i];
        if (!any) continue;
        const Unit &a = st.units[static_cast<size_t>(i)], &b = st.units[static_cast<size_t>(j)];
        out << "<line x1='" << px(a.x) << "' y1='" << py(a.y) << "' x2='" << px(b.x) << "' y2='"
            << py(b.y) << "' stroke='#34d399' stroke-width='1.5' stroke-opacity='0.7'/>";
      }
  }

  for (size_t i = 0; i < st.units.size(); ++i)
    svg_unit(out, spec, st.units[static_cast<size_t>(i)], static_cast<int>(i));

  // consensus overlay: ellipse semi-axes are exactly the sigma values (in cells)
  if (consensus) {
    for (size_t u = 0; u < consensus->size(); ++u) {
      const UnitConsensus& c = (*consensus)[u];
      const char* stroke = c.mean_alive >= 0.5 ? "#fbbf24" : "#f97316";
      out << "<ellipse cx='" << px(c.mean_x) << "' cy='" << py(c.mean_y) << "' rx='"
          << c.sigma_x * kCell << "' ry='" << c.sigma_y * kCell << "' fill='#fbbf24' "
          << "fill-opacity='0.08' stroke='" << stroke << "' stroke-width='1.5'";
      if (c.mean_alive < 0.5) out << " stroke-dasharray='3,3'";
      out << "/>";
      double mx = px(c.mean_x), my = py(c.mean_y), s = 5;
      out << "<path d='M" << mx - s << ' ' << my << " L" << mx + s << ' ' << my << " M" << mx
          << ' ' << my - s << " L" << mx << ' ' << my + s << "' stroke='" << stroke
          << "' stroke-width='1.5'/>"
          << "<text x='" << mx + 7 << "' y='" << my - 6 << "' font-size='10' fill='" << stroke
          << "' font-family='monospace'>" << u << "</text>";
    }
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("render: write failed for " + path);
}

} // namespace detail

// Rolls one greedy episode, then replays it against the environment to write
// frame_%04d.svg files and cop.csv under out_dir. Returns the frame count.
inline RenderResult render_episode(const ParamStore& ps, const ScenarioSpec& spec,
                                   const ModelConfig& cfg, uint64_t seed,
                                   const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  Episode ep = collect_episode(ps, spec, cfg, /*eps=*/0.0, seed, /*record_traces=*/true);
  int T = ep.length(), n_units = static_cast<int>(spec.roster.size());
  bool have_preds = cfg.comm_enabled && !ep.trace_cop.empty();

  std::string csv_path = out_dir + "/cop.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("render: cannot open " + csv_path);
  csv << "step,unit,true_x,true_y,true_health,true_alive,pred_x,pred_y,sigma_x,sigma_y,"
         "pred_health,pred_alive\n";
  csv << std::setprecision(10);

  WorldState st = reset(spec, seed);
  double cum_reward = 0;
  char name[32];
  for (int t = 0; t < T; ++t) {
    std::vector<UnitConsensus> consensus;
    if (have_preds) {
      std::vector<Tensor> preds;
      std::vector<std::pair<double, double>> pos;
      for (int a = 0; a < cfg.n_agents; ++a) {
        if (!ep.alive[static_cast<size_t>(t)][static_cast<size_t>(a)]) continue;
        Tensor row({cfg.cop_dim});
        const double* src = &ep.trace_cop[static_cast<size_t>(t)]
                                 .data[static_cast<size_t>(a) * cfg.cop_dim];
        std::copy(src, src + cfg.cop_dim, row.data.begin());
        preds.push_back(std::move(row));
        const Unit& u = st.units[static_cast<size_t>(a)];
        pos.emplace_back(u.x, u.y);
      }
      if (!preds.empty()) consensus = consensus_stats(preds, pos, spec.diagonal(), n_units);
    }

    for (int u = 0; u < n_units; ++u) {
      const Unit& tu = st.units[static_cast<size_t>(u)];
      const UnitCapabilities& caps = spec.roster[static_cast<size_t>(u)].first;
      csv << t << ',' << u << ',' << tu.x << ',' << tu.y << ',' << tu.health / caps.max_health
          << ',' << (tu.alive ? 1 : 0) << ',';
      if (!consensus.empty()) {
        const UnitConsensus& c = consensus[static_cast<size_t>(u)];
        csv << c.mean_x << ',' << c.mean_y << ',' << c.sigma_x << ',' << c.sigma_y << ','
            << c.mean_health << ',' << c.mean_alive << '\n';
      } else {
        csv << "nan,nan,nan,nan,nan,nan\n";
      }
    }

    std::snprintf(name, sizeof name, "frame_%04d.svg", t);
    std::ostringstream cap;
    cap << spec.name << " seed=" << seed << " t=" << t << '/' << T << " R=" << std::setprecision(4)
        << cum_reward;
    const std::vector<uint8_t>* links =
        cfg.comm_enabled && !ep.comm.empty() ? &ep.comm[static_cast<size_t>(t)][0] : nullptr;
    detail::svg_frame(out_dir + "/" + name, spec, st,
                      consensus.empty() ? nullptr : &consensus, links, cap.str());

    StepOutcome outc = step(st, spec, ep.actions[static_cast<size_t>(t)]);
    cum_reward += outc.reward;
  }
  std::snprintf(name, sizeof name, "frame_%04d.svg", T);
  std::ostringstream cap;
  cap << spec.name << " seed=" << seed << " final " << (ep.win ? "WIN" : "LOSS")
      << " R=" << std::setprecision(4) << cum_reward;
  detail::svg_frame(out_dir + "/" + name, spec, st, nullptr, nullptr, cap.str());
  return {T + 1, csv_path};
}

} // namespace copnet
