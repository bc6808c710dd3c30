// Command-line front end: train / eval / render / gradcheck.

#include "copnet/checkpoint.hpp"
#include "copnet/config.hpp"
#include "copnet/render.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

namespace {

using namespace copnet;

// Flag values are collected as (config key, raw text) pairs and applied on
// top of the config file through the same setter, so precedence is uniform:
// defaults < file < flags.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> kv;

  void opt(CLI::App* cmd, const std::string& flag, const std::string& key,
           const std::string& desc) {
    cmd->add_option_function<std::string>(
        flag, [this, key](const std::string& v) { kv.emplace_back(key, v); }, desc);
  }

  void apply(RunConfig& rc) const {
    for (const auto& [key, value] : kv) rc.set(key, value);
  }
};

void add_degradation_flags(CLI::App* cmd, Overrides& ov) {
  ov.opt(cmd, "--sight-scale", "degradation.sight_scale", "sensor range multiplier");
  ov.opt(cmd, "--gps", "degradation.gps", "GPS mode: all|partial|none");
  ov.opt(cmd, "--comm-drop", "degradation.comm_drop", "probability a message is lost");
  ov.opt(cmd, "--comm-range", "degradation.comm_range", "max link distance in cells (inf ok)");
}

int resolve_workers(int requested) {
  if (const char* env = std::getenv("COPNET_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) return std::min(requested, cap);
  }
  return requested;
}

void check_compat(const ParamStore& online, const ModelConfig& mc, const std::string& scenario) {
  const Tensor& emb = online.at("agent.embed.w");
  if (emb.shape[1] != mc.in_dim())
    throw std::runtime_error("checkpoint/scenario mismatch: encoder input width " +
                             std::to_string(emb.shape[1]) + " vs " + scenario + " needing " +
                             std::to_string(mc.in_dim()));
  const Tensor& qw = online.at("agent.q.w2");
  if (qw.shape[0] != mc.n_actions)
    throw std::runtime_error("checkpoint/scenario mismatch: " + std::to_string(qw.shape[0]) +
                             " actions vs " + scenario + " needing " +
                             std::to_string(mc.n_actions));
  const Tensor& mix = online.at("mixer.hw.w");
  if (mix.shape[0] != mc.n_agents)
    throw std::runtime_error("checkpoint/scenario mismatch: " + std::to_string(mix.shape[0]) +
                             " agents vs " + scenario + " needing " +
                             std::to_string(mc.n_agents));
}

struct LoadedModel {
  RunConfig rc;
  int64_t step = 0;
  ParamStore online, target;
};

LoadedModel load_model(const std::string& ckpt_path, const Overrides& ov) {
  LoadedModel lm;
  Checkpoint ck = load_checkpoint(ckpt_path);
  parse_run_config(lm.rc, ck.config_echo);
  ov.apply(lm.rc);
  restore_stores(ck, lm.online, lm.target, nullptr);
  lm.step = ck.step;
  return lm;
}

// --- train -------------------------------------------------------------------

int cmd_train(const std::string& config_path, const Overrides& ov) {
  RunConfig rc = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  ov.apply(rc);
  rc.train.check();
  ScenarioSpec spec = rc.resolve_scenario();
  ModelConfig mc = rc.model_config(spec);

  std::filesystem::create_directories(rc.out_dir);
  {
    std::ofstream echo(rc.out_dir + "/config.echo", std::ios::trunc);
    echo << rc.echo();
    if (!echo) throw std::runtime_error("cannot write " + rc.out_dir + "/config.echo");
  }
  std::ofstream metrics(rc.out_dir + "/metrics.csv", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + rc.out_dir + "/metrics.csv");

  TrainSetup setup;
  setup.spec = spec;
  setup.model = mc;
  setup.train = rc.train;
  setup.total_env_steps = rc.total_env_steps;
  setup.eval_every = rc.eval_every;
  setup.eval_episodes = rc.eval_episodes;
  setup.seed = rc.seed;
  setup.workers = resolve_workers(rc.workers);
  setup.metrics = &metrics;

  std::string echo_text = rc.echo();
  int64_t next_ckpt = rc.checkpoint_every;
  setup.checkpoint_hook = [&](const ParamStore& online, const ParamStore& target,
                              const AdamState& adam, int64_t step, bool final) {
    if (final) {
      save_checkpoint(rc.out_dir + "/ckpt_final.bin", online, target, &adam, echo_text, step);
    } else if (step >= next_ckpt) {
      save_checkpoint(rc.out_dir + "/ckpt_" + std::to_string(step) + ".bin", online, target,
                      &adam, echo_text, step);
      while (next_ckpt <= step) next_ckpt += rc.checkpoint_every;
    }
  };

  try {
    TrainResult res = train(setup);
    std::cout << "trained " << res.env_steps << " env steps / " << res.episodes << " episodes / "
              << res.train_steps << " updates -> " << rc.out_dir << "\n"
              << kMetricsHeader << '\n';
    write_metrics_row(std::cout, res.final_eval, rc.seed);
    return 0;
  } catch (const std::exception& e) {
    // leave a diagnostic file next to the partial artifacts
    std::ofstream err(rc.out_dir + "/error.txt", std::ios::trunc);
    err << e.what() << '\n';
    std::cerr << "error: " << e.what() << "\n(diagnostic written to " << rc.out_dir
              << "/error.txt)\n";
    return 1;
  }
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const Overrides& ov, int episodes, uint64_t seed_base,
             const std::string& csv_path) {
  LoadedModel lm = load_model(ckpt_path, ov);
  ScenarioSpec spec = lm.rc.resolve_scenario();
  ModelConfig mc = lm.rc.model_config(spec);
  check_compat(lm.online, mc, spec.name);

  Metrics m = evaluate(lm.online, spec, mc, episodes, seed_base);
  m.env_steps = lm.step;
  m.epsilon = 0;
  std::cout << kMetricsHeader << '\n';
  write_metrics_row(std::cout, m, lm.rc.seed);
  if (!csv_path.empty()) {
    bool fresh = !std::filesystem::exists(csv_path) || std::filesystem::file_size(csv_path) == 0;
    std::ofstream csv(csv_path, std::ios::app);
    if (!csv) throw std::runtime_error("cannot open " + csv_path);
    if (fresh) csv << kMetricsHeader << '\n';
    write_metrics_row(csv, m, lm.rc.seed);
  }
  return 0;
}

// --- render ------------------------------------------------------------------

int cmd_render(const std::string& ckpt_path, const Overrides& ov, uint64_t seed,
               const std::string& out_dir) {
  LoadedModel lm = load_model(ckpt_path, ov);
  ScenarioSpec spec = lm.rc.resolve_scenario();
  ModelConfig mc = lm.rc.model_config(spec);
  check_compat(lm.online, mc, spec.name);
  RenderResult rr = render_episode(lm.online, spec, mc, seed, out_dir);
  std::cout << "wrote " << rr.frames << " frames and " << rr.csv_path << " under " << out_dir
            << '\n';
  return 0;
}

// --- gradcheck -----------------------------------------------------------------

struct OpCheck {
  std::string name;
  ParamStore ps;
  std::function<Graph::Id(Graph&, ParamStore&)> build;
};

Tensor rnd(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Random-weight readout so every output element influences the scalar loss.
Graph::Id wsum(Graph& g, Graph::Id x, uint64_t seed) {
  Rng rng(seed);
  auto w = std::make_shared<Tensor>(g.val(x).shape);
  for (auto& v : w->data) v = rng.uniform(-1.0, 1.0);
  return g.weighted_sum(x, w);
}

std::vector<OpCheck> build_op_checks() {
  std::vector<OpCheck> checks;
  auto add = [&](const std::string& name, std::function<void(ParamStore&, Rng&)> init,
                 std::function<Graph::Id(Graph&, ParamStore&)> build) {
    OpCheck c;
    c.name = name;
    Rng rng(hash_combine(0x9c0ffee0, std::hash<std::string>{}(name)));
    init(c.ps, rng);
    c.build = std::move(build);
    checks.push_back(std::move(c));
  };

  add("matmul",
      [](ParamStore& ps, Rng& r) {
        ps.add("a", rnd({3, 4}, r));
        ps.add("b", rnd({4, 2}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.matmul(ps.bind(g, "a"), ps.bind(g, "b")), 11);
      });
  add("linear",
      [](ParamStore& ps, Rng& r) {
        ps.add("x", rnd({3, 5}, r));
        ps.add("w", rnd({2, 5}, r));
        ps.add("b", rnd({2}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.linear(ps.bind(g, "x"), ps.bind(g, "w"), ps.bind(g, "b")), 12);
      });
  add("linear_nobias",
      [](ParamStore& ps, Rng& r) {
        ps.add("x", rnd({3, 5}, r));
        ps.add("w", rnd({4, 5}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.linear(ps.bind(g, "x"), ps.bind(g, "w")), 13);
      });
  add("tanh", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.tanh_act(ps.bind(g, "x")), 14); });
  add("sigmoid", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.sigmoid(ps.bind(g, "x")), 15); });
  add("add",
      [](ParamStore& ps, Rng& r) {
        ps.add("a", rnd({3, 4}, r));
        ps.add("b", rnd({3, 4}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.add(ps.bind(g, "a"), ps.bind(g, "b")), 16);
      });
  add("sub",
      [](ParamStore& ps, Rng& r) {
        ps.add("a", rnd({3, 4}, r));
        ps.add("b", rnd({3, 4}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.sub(ps.bind(g, "a"), ps.bind(g, "b")), 17);
      });
  add("mul",
      [](ParamStore& ps, Rng& r) {
        ps.add("a", rnd({3, 4}, r));
        ps.add("b", rnd({3, 4}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.mul(ps.bind(g, "a"), ps.bind(g, "b")), 18);
      });
  add("affine", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.affine(ps.bind(g, "x"), 1.7, -0.3), 19); });
  add("square", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.square(ps.bind(g, "x")), 20); });
  add("abs",
      [](ParamStore& ps, Rng& r) {
        // keep magnitudes away from the kink at zero
        Tensor t = rnd({3, 4}, r, 0.3, 1.0);
        Rng signs(5);
        for (auto& v : t.data)
          if (signs.uniform(0.0, 1.0) < 0.5) v = -v;
        ps.add("x", std::move(t));
      },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.abs_act(ps.bind(g, "x")), 21); });
  add("concat_cols",
      [](ParamStore& ps, Rng& r) {
        ps.add("a", rnd({3, 2}, r));
        ps.add("b", rnd({3, 3}, r));
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.concat_cols(ps.bind(g, "a"), ps.bind(g, "b")), 22);
      });
  add("slice_cols", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 6}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.slice_cols(ps.bind(g, "x"), 1, 3), 23); });
  add("select_cols", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 6}, r)); },
      [](Graph& g, ParamStore& ps) {
        auto cols = std::make_shared<const std::vector<int>>(std::vector<int>{0, 2, 5});
        return wsum(g, g.select_cols(ps.bind(g, "x"), cols), 24);
      });
  add("softmax_rows", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 5}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.softmax_rows(ps.bind(g, "x")), 25); });
  add("attend",
      [](ParamStore& ps, Rng& r) {
        ps.add("q", rnd({8, 4}, r));
        ps.add("k", rnd({8, 4}, r));
        ps.add("v", rnd({8, 4}, r));
      },
      [](Graph& g, ParamStore& ps) {
        auto mask = std::make_shared<std::vector<uint8_t>>(8 * 4, 0);
        Rng mr(31);
        for (int row = 0; row < 8; ++row) {
          (*mask)[static_cast<size_t>(row) * 4 + row % 4] = 1; // self always delivered
          for (int s = 0; s < 4; ++s)
            if (mr.uniform(0.0, 1.0) < 0.5) (*mask)[static_cast<size_t>(row) * 4 + s] = 1;
        }
        return wsum(g,
                    g.attend(ps.bind(g, "q"), ps.bind(g, "k"), ps.bind(g, "v"), mask,
                             /*group=*/4, /*slots=*/12),
                    26);
      });
  add("gather_cols", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({4, 5}, r)); },
      [](Graph& g, ParamStore& ps) {
        auto idx = std::make_shared<const std::vector<int>>(std::vector<int>{1, 0, 3, 2});
        return wsum(g, g.gather_cols(ps.bind(g, "x"), idx), 27);
      });
  add("row_sum", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, g.row_sum(ps.bind(g, "x")), 28); });
  add("sum_all", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return g.sum_all(ps.bind(g, "x")); });
  add("weighted_sum", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) { return wsum(g, ps.bind(g, "x"), 29); });
  add("sigmoid_cols", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({2, 6}, r)); },
      [](Graph& g, ParamStore& ps) {
        auto colmask = std::make_shared<const std::vector<uint8_t>>(
            std::vector<uint8_t>{1, 0, 1, 1, 0, 0});
        return wsum(g, g.sigmoid_cols(ps.bind(g, "x"), colmask), 30);
      });
  add("reshape", [](ParamStore& ps, Rng& r) { ps.add("x", rnd({3, 4}, r)); },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, g.reshape(ps.bind(g, "x"), {2, 6}), 31);
      });
  add("gru_cell",
      [](ParamStore& ps, Rng& r) {
        ps.add("x", rnd({2, 3}, r));
        ps.add("h", rnd({2, 4}, r));
        ps.add_gru("g0", 3, 4, r);
      },
      [](Graph& g, ParamStore& ps) {
        return wsum(g, gru_cell(g, ps.bind(g, "x"), ps.bind(g, "h"), ps.bind_gru(g, "g0")), 32);
      });
  return checks;
}

constexpr const char* kToyScenario = R"(
[grid]
width = 8
height = 8
max_steps = 12

[unit]
team = blue
count = 2
type = ground-ranged
sight = 5
shoot = 2
hp = 30
damage = 10
gps = true

[unit]
team = red
count = 1
type = enemy-heavy
sight = 4
shoot = 1
hp = 40
damage = 8
idle = hold

[laydown]
blue = 1,1,3,3
red = 6,6,7,7

[win]
condition = kill-all-red
)";

GradCheckReport run_component(const std::string& name, ParamStore& ps,
                              const std::function<Graph::Id(Graph&, ParamStore&)>& build,
                              const std::string& fault, int max_checks, uint64_t seed) {
  GradMap analytic;
  {
    Graph g;
    Graph::Id loss = build(g, ps);
    g.backward(loss);
    analytic = g.param_grads();
  }
  if (fault == name && !analytic.empty())
    for (double& v : analytic.begin()->second.data) v += 0.25;
  auto fn = [&]() {
    Graph g;
    return g.val(build(g, ps))[0];
  };
  return grad_check(ps, fn, analytic, 1e-5, max_checks, seed);
}

int cmd_gradcheck(const std::string& fault) {
  constexpr double kTol = 1e-4;
  bool ok = true;
  auto report = [&](const std::string& name, const GradCheckReport& rep) {
    bool pass = rep.max_rel_err < kTol;
    ok &= pass;
    std::printf("%-14s rel_err %.3e  (%4d checked, worst %-24s) %s\n", name.c_str(),
                rep.max_rel_err, rep.checked, rep.worst.empty() ? "-" : rep.worst.c_str(),
                pass ? "PASS" : "FAIL");
    if (!pass) std::printf("gradcheck FAILED at component '%s'\n", name.c_str());
  };

  for (OpCheck& c : build_op_checks())
    report(c.name, run_component(c.name, c.ps, c.build, fault, 0, 77));

  // Full joint objective on a seeded toy problem: TD + picture + both
  // reconstruction terms + hallucination penalty on one graph.
  {
    ScenarioSpec spec = parse_scenario(kToyScenario, "toy");
    ModelConfig mc;
    mc.n_agents = spec.blue_count();
    mc.n_actions = spec.n_actions();
    mc.comm_dim = 8;
    mc.n_heads = 2;
    mc.hidden = 8;
    mc.enc_hidden = 10;
    mc.rounds = 2;
    mc.use_s0 = true;
    mc.use_dobs = true;
    mc.check();
    ParamStore online;
    init_params(online, mc, 404);
    ParamStore target = online.clone();
    TrainConfig tc;
    tc.lambda_h = 3.0;
    std::vector<Episode> batch;
    for (uint64_t s = 5; s < 7; ++s)
      batch.push_back(collect_episode(online, spec, mc, 0.7, s));
    std::vector<const Episode*> bp;
    for (const Episode& e : batch) bp.push_back(&e);
    int n_units = static_cast<int>(spec.roster.size());
    auto build = [&](Graph& g, ParamStore& ps) {
      return joint_loss(g, ps, target, mc, tc, bp, n_units).total;
    };
    report("joint_loss", run_component("joint_loss", online, build, fault, 4, 99));
  }

  if (ok) std::printf("gradcheck OK\n");
  return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-driven common operational picture: training and analysis tools"};
  app.require_subcommand(1);

  auto* t = app.add_subcommand("train", "train a model and emit metrics + checkpoints");
  std::string train_config;
  t->add_option("--config", train_config, "config file (key = value with [section] headers)");
  Overrides tov;
  tov.opt(t, "--scenario", "run.scenario", "builtin name (recon|kite|crossing) or .scn path");
  tov.opt(t, "--laydown", "run.laydown", "spawn variant: train|test1|test2|test3");
  tov.opt(t, "--seed", "run.seed", "master seed");
  tov.opt(t, "--out", "run.out_dir", "output directory");
  tov.opt(t, "--total-steps", "run.total_env_steps", "environment steps to train for");
  tov.opt(t, "--eval-every", "run.eval_every", "env steps between evaluations");
  tov.opt(t, "--eval-episodes", "run.eval_episodes", "episodes per evaluation");
  tov.opt(t, "--checkpoint-every", "run.checkpoint_every", "env steps between checkpoints");
  tov.opt(t, "--workers", "run.workers", "parallel episode collectors");
  tov.opt(t, "--comm", "model.comm", "learned message exchange on/off (true|false)");
  tov.opt(t, "--rounds", "model.rounds", "message exchange rounds per step");
  tov.opt(t, "--use-s0", "model.use_s0", "initialize shared memory from initial global state");
  tov.opt(t, "--use-dobs", "model.use_dobs", "train the observation reconstruction head");
  tov.opt(t, "--gamma", "train.gamma", "discount");
  tov.opt(t, "--lambda-td", "train.lambda_td", "TD(lambda) mixing weight");
  tov.opt(t, "--eps-start", "train.eps_start", "initial exploration rate");
  tov.opt(t, "--eps-end", "train.eps_end", "final exploration rate");
  tov.opt(t, "--eps-anneal", "train.eps_anneal_steps", "env steps to anneal exploration over");
  tov.opt(t, "--batch-episodes", "train.batch_episodes", "episodes per gradient step");
  tov.opt(t, "--update-every", "train.update_every", "episodes collected per gradient step");
  tov.opt(t, "--target-sync", "train.target_sync_interval", "updates between target syncs");
  tov.opt(t, "--buffer", "train.buffer_capacity", "replay capacity in episodes");
  tov.opt(t, "--lambda-h", "train.lambda_h", "hallucination penalty weight (0 disables)");
  tov.opt(t, "--grad-clip", "train.grad_clip", "global gradient norm cap");
  tov.opt(t, "--lr", "train.lr", "learning rate");
  add_degradation_flags(t, tov);

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint and print one metrics row");
  std::string eval_ckpt, eval_csv;
  int eval_episodes = 32;
  uint64_t eval_seed_base = 9000;
  e->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  e->add_option("--episodes", eval_episodes, "evaluation episodes");
  e->add_option("--seed-base", eval_seed_base, "first episode seed");
  e->add_option("--csv", eval_csv, "append the row to this CSV file");
  Overrides eov;
  eov.opt(e, "--scenario", "run.scenario", "override the scenario trained on");
  eov.opt(e, "--laydown", "run.laydown", "spawn variant: train|test1|test2|test3");
  eov.opt(e, "--rounds", "model.rounds", "message exchange rounds at evaluation time");
  add_degradation_flags(e, eov);

  auto* r = app.add_subcommand("render", "roll one greedy episode into SVG frames + CSV");
  std::string render_ckpt, render_out = "render_out";
  uint64_t render_seed = 1;
  r->add_option("--ckpt", render_ckpt, "checkpoint file")->required();
  r->add_option("--seed", render_seed, "episode seed");
  r->add_option("--out", render_out, "output directory");
  Overrides rov;
  rov.opt(r, "--scenario", "run.scenario", "override the scenario trained on");
  rov.opt(r, "--laydown", "run.laydown", "spawn variant: train|test1|test2|test3");
  rov.opt(r, "--rounds", "model.rounds", "message exchange rounds at render time");
  add_degradation_flags(r, rov);

  auto* gc = app.add_subcommand("gradcheck",
                                "compare every operation and the joint loss against "
                                "central finite differences");
  std::string fault;
  gc->add_option("--inject-fault", fault, "corrupt one component's gradient (negative control)")
      ->group(""); // hidden

  CLI11_PARSE(app, argc, argv);

  try {
    if (t->parsed()) return cmd_train(train_config, tov);
    if (e->parsed()) return cmd_eval(eval_ckpt, eov, eval_episodes, eval_seed_base, eval_csv);
    if (r->parsed()) return cmd_render(render_ckpt, rov, render_seed, render_out);
    if (gc->parsed()) return cmd_gradcheck(fault);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}
