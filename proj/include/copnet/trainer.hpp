#pragma once

// Joint training: rollout collection, the combined TD + picture objective,
// the optimization loop with target syncs and metrics logging, and greedy
// evaluation (optionally under sensor/communication degradations).

#include "copnet/env.hpp"
#include "copnet/qmix.hpp"

#include <future>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace copnet {

// --- metrics -------------------------------------------------------------------

struct Metrics {
  double win_rate = 0;
  double cop_mse_xy = 0, cop_mse_health = 0, fov_mse = 0, hallucination = 0;
  double loss_td = 0, loss_cop = 0, loss_obs_recon = 0, loss_act_recon = 0, loss_halluc = 0;
  double epsilon = 0;
  int64_t env_steps = 0;
  int episodes = 0;
};

inline constexpr const char* kMetricsHeader =
    "step,episodes,win_rate,cop_mse_xy,cop_mse_health,fov_mse,hallucination,"
    "loss_td,loss_cop,loss_recon,loss_halluc,epsilon,seed";

inline void write_metrics_row(std::ostream& os, const Metrics& m, uint64_t seed) {
  os << m.env_steps << ',' << m.episodes << ',' << std::setprecision(10) << m.win_rate << ','
     << m.cop_mse_xy << ',' << m.cop_mse_health << ',' << m.fov_mse << ',' << m.hallucination
     << ',' << m.loss_td << ',' << m.loss_cop << ',' << m.loss_obs_recon + m.loss_act_recon << ','
     << m.loss_halluc << ',' << m.epsilon << ',' << seed << '\n';
}

// MSE after scaling every feature into [0, 1] by its known range.
inline double normalized_mse(const Tensor& pred, const Tensor& truth,
                             const std::vector<double>& ranges) {
  if (!pred.same_shape(truth))
    throw std::invalid_argument("normalized_mse: layouts differ " + pred.str() + " vs " +
                                truth.str());
  if (pred.numel() == 0) return 0;
  if (static_cast<int64_t>(ranges.size()) != pred.numel())
    throw std::invalid_argument("normalized_mse: need one range per feature");
  double acc = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (ranges[static_cast<size_t>(i)] <= 0)
      throw std::invalid_argument("normalized_mse: ranges must be positive");
    double d = (pred[i] - truth[i]) / ranges[static_cast<size_t>(i)];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.numel());
}

// --- hallucination penalty ---------------------------------------------------------

// Plain-number form: sum over entries of lambda_h * (1 - H) * (H - H_cop)^2.
// The caller owns the averaging over agents and batch.
inline double hallucination_penalty(const std::vector<double>& truth_health,
                                    const std::vector<double>& predicted_health,
                                    double lambda_h) {
  if (truth_health.size() != predicted_health.size())
    throw std::invalid_argument("hallucination penalty: size mismatch");
  double acc = 0;
  for (size_t i = 0; i < truth_health.size(); ++i) {
    double h = truth_health[i];
    if (h < 0 || h > 1)
      throw std::invalid_argument("hallucination penalty: health outside [0,1]");
    double d = h - predicted_health[i];
    acc += lambda_h * (1.0 - h) * d * d;
  }
  return acc;
}

// --- loss assembly -------------------------------------------------------------------

struct LossBreakdown {
  Graph::Id total = -1;
  double td = 0, cop = 0, obs_recon = 0, act_recon = 0, halluc = 0;
  double value() const { return td + cop + obs_recon + act_recon + halluc; }
};

namespace detail {

// Columns of the egocentric layout holding per-unit health fractions.
inline std::shared_ptr<const std::vector<int>> health_columns(int n_units) {
  auto cols = std::make_shared<std::vector<int>>();
  for (int u = 0; u < n_units; ++u) cols->push_back(u * kEgoPerUnit + 2);
  return cols;
}

// Stacks per-step {B*A, C} node outputs minus per-step constant targets into
// one weighted sum-of-squares scalar node.
inline Graph::Id weighted_sq_term(Graph& g, const std::vector<Graph::Id>& preds,
                                  const std::vector<Tensor>& targets,
                                  const std::vector<Tensor>& weights) {
  Graph::Id acc = -1;
  for (size_t t = 0; t < preds.size(); ++t) {
    Graph::Id err = g.square(g.sub(preds[t], g.constant(targets[t])));
    Graph::Id term = g.weighted_sum(err, std::make_shared<Tensor>(weights[t]));
    acc = (acc < 0) ? term : g.add(acc, term);
  }
  return acc;
}

} // namespace detail

// Mean squared picture error against egocentric targets, averaged over alive
// agent frames (dead agents have no egocentric frame) and all layout entries.
// Returns -1 when the batch holds no alive frame.
inline Graph::Id cop_loss_term(Graph& g, const std::vector<Graph::Id>& cop_preds,
                               const std::vector<const Episode*>& batch, const ModelConfig& cfg) {
  int B = static_cast<int>(batch.size()), A = cfg.n_agents;
  int T = static_cast<int>(cop_preds.size());
  int64_t frames = 0;
  for (const Episode* ep : batch) for (int t = 0; t < ep->length(); ++t)
    for (int a = 0; a < A; ++a) frames += ep->alive[static_cast<size_t>(t)][static_cast<size_t>(a)];
  if (frames == 0) return -1;
  double w0 = 1.0 / (static_cast<double>(frames) * cfg.cop_dim);
  std::vector<Tensor> targets, weights;
  for (int t = 0; t < T; ++t) {
    Tensor tgt({B * A, cfg.cop_dim}), w({B * A, cfg.cop_dim});
    for (int b = 0; b < B; ++b) {
      const Episode& ep = *batch[static_cast<size_t>(b)];
      if (t >= ep.length()) continue;
      for (int a = 0; a < A; ++a) {
        if (!ep.alive[static_cast<size_t>(t)][static_cast<size_t>(a)]) continue;
        size_t row = static_cast<size_t>(b) * A + static_cast<size_t>(a);
        std::copy(&ep.ego[static_cast<size_t>(t)].data[static_cast<size_t>(a) * cfg.cop_dim],
                  &ep.ego[static_cast<size_t>(t)].data[static_cast<size_t>(a) * cfg.cop_dim] +
                      cfg.cop_dim,
                  &tgt.data[row * cfg.cop_dim]);
        std::fill(&w.data[row * cfg.cop_dim], &w.data[row * cfg.cop_dim] + cfg.cop_dim, w0);
      }
    }
    targets.push_back(std::move(tgt));
    weights.push_back(std::move(w));
  }
  return detail::weighted_sq_term(g, cop_preds, targets, weights);
}

// Reconstruction of the encoder input (observation ++ previous action) from z.
// Split into the observation part and the action part; both share the
// all-entries denominator so they sum to the single mean squared error.
inline std::pair<Graph::Id, Graph::Id> recon_loss_terms(Graph& g,
                                                        const std::vector<Graph::Id>& rec_preds,
                                                        const std::vector<const Episode*>& batch,
                                                        const ModelConfig& cfg) {
  int B = static_cast<int>(batch.size()), A = cfg.n_agents;
  int T = static_cast<int>(rec_preds.size());
  int64_t frames = 0;
  for (const Episode* ep : batch) for (int t = 0; t < ep->length(); ++t)
    for (int a = 0; a < A; ++a) frames += ep->alive[static_cast<size_t>(t)][static_cast<size_t>(a)];
  if (frames == 0) return {-1, -1};
  double w0 = 1.0 / (static_cast<double>(frames) * cfg.in_dim());
  std::vector<Tensor> targets, w_obs, w_act;
  for (int t = 0; t < T; ++t) {
    Tensor tgt = batch_inputs(batch, cfg, t);
    Tensor wo({B * A, cfg.in_dim()}), wa({B * A, cfg.in_dim()});
    for (int b = 0; b < B; ++b) {
      const Episode& ep = *batch[static_cast<size_t>(b)];
      if (t >= ep.length()) continue;
      for (int a = 0; a < A; ++a) {
        if (!ep.alive[static_cast<size_t>(t)][static_cast<size_t>(a)]) continue;
        size_t row = static_cast<size_t>(b) * A + static_cast<size_t>(a);
        for (int c = 0; c < cfg.obs_dim; ++c) wo.data[row * cfg.in_dim() + c] = w0;
        for (int c = cfg.obs_dim; c < cfg.in_dim(); ++c) wa.data[row * cfg.in_dim() + c] = w0;
      }
    }
    targets.push_back(std::move(tgt));
    w_obs.push_back(std::move(wo));
    w_act.push_back(std::move(wa));
  }
  Graph::Id obs_term = detail::weighted_sq_term(g, rec_preds, targets, w_obs);
  Graph::Id act_term = detail::weighted_sq_term(g, rec_preds, targets, w_act);
  return {obs_term, act_term};
}

// Hallucination penalty over real roster units: sum over units and steps of
// lambda_h (1 - H)(H - H_cop)^2, averaged over agents and batch episodes.
// Dead observers contribute nothing. Returns -1 when lambda_h == 0.
inline Graph::Id halluc_loss_term(Graph& g, const std::vector<Graph::Id>& cop_preds,
                                  const std::vector<const Episode*>& batch, const ModelConfig& cfg,
                                  int n_units, double lambda_h) {
  if (lambda_h == 0) return -1;
  int B = static_cast<int>(batch.size()), A = cfg.n_agents;
  int T = static_cast<int>(cop_preds.size());
  auto cols = detail::health_columns(n_units);
  double denom = static_cast<double>(B) * A;
  std::vector<Graph::Id> preds;
  std::vector<Tensor> targets, weights;
  for (int t = 0; t < T; ++t) {
    preds.push_back(g.select_cols(cop_preds[static_cast<size_t>(t)], cols));
    Tensor tgt({B * A, n_units}), w({B * A, n_units});
    for (int b = 0; b < B; ++b) {
      const Episode& ep = *batch[static_cast<size_t>(b)];
      if (t >= ep.length()) continue;
      for (int a = 0; a < A; ++a) {
        if (!ep.alive[static_cast<size_t>(t)][static_cast<size_t>(a)]) continue;
        size_t row = static_cast<size_t>(b) * A + static_cast<size_t>(a);
        for (int u = 0; u < n_units; ++u) {
          double h = ep.ego[static_cast<size_t>(t)][static_cast<size_t>(a) * cfg.cop_dim +
                                                    u * kEgoPerUnit + 2];
          tgt.data[row * n_units + u] = h;
          w.data[row * n_units + u] = lambda_h * (1.0 - h) / denom;
        }
      }
    }
    targets.push_back(std::move(tgt));
    weights.push_back(std::move(w));
  }
  return detail::weighted_sq_term(g, preds, targets, weights);
}

// Eq.-style joint objective: TD term + picture MSE + optional reconstruction
// + weighted hallucination penalty, all on one graph so a single backward
// pass trains everything end to end.
inline LossBreakdown joint_loss(Graph& g, const ParamStore& online, const ParamStore& target,
                                const ModelConfig& cfg, const TrainConfig& tc,
                                const std::vector<const Episode*>& batch, int n_units) {
  if (batch.empty()) throw std::invalid_argument("joint loss: empty batch");
  BatchForward fwd = forward_batch(g, online, cfg, batch);
  LossBreakdown out;
  Graph::Id total = qmix_loss(g, online, target, cfg, tc, batch, &fwd);
  out.td = g.val(total)[0];
  if (cfg.comm_enabled) {
    Graph::Id cop = cop_loss_term(g, fwd.cop, batch, cfg);
    if (cop >= 0) {
      out.cop = g.val(cop)[0];
      total = g.add(total, cop);
    }
    if (cfg.use_dobs) {
      auto [obs_term, act_term] = recon_loss_terms(g, fwd.rec, batch, cfg);
      if (obs_term >= 0) {
        out.obs_recon = g.val(obs_term)[0];
        out.act_recon = g.val(act_term)[0];
        total = g.add(g.add(total, obs_term), act_term);
      }
    }
    Graph::Id hal = halluc_loss_term(g, fwd.cop, batch, cfg, n_units, tc.lambda_h);
    if (hal >= 0) {
      out.halluc = g.val(hal)[0];
      total = g.add(total, hal);
    }
  }
  out.total = total;
  return out;
}

// --- rollout --------------------------------------------------------------------------

inline uint64_t round_seed(uint64_t episode_seed, int t, int r) {
  uint64_t s = hash_combine(episode_seed, 0x636f6d6dULL);
  s = hash_combine(s, static_cast<uint64_t>(t));
  return hash_combine(s, static_cast<uint64_t>(r));
}

// Rolls one episode with the current parameters. Per timestep: observe all
// agents, exchange R masked message rounds, advance both recurrences, select
// epsilon-greedy actions, and step the environment. Records everything
// needed to replay the forward pass exactly; `record_traces` additionally
// stores the computed z_s / q / picture outputs.
inline Episode collect_episode(const ParamStore& ps, const ScenarioSpec& spec,
                               const ModelConfig& cfg, double eps, uint64_t seed,
                               bool record_traces = false) {
  int A = spec.blue_count();
  if (A != cfg.n_agents)
    throw std::invalid_argument("collect: scenario has " + std::to_string(A) +
                                " agents, model expects " + std::to_string(cfg.n_agents));
  Episode ep;
  ep.n_agents = A;
  WorldState st = reset(spec, seed);
  Rng act_rng(hash_combine(seed, 0xac7109f5ULL));

  Tensor h_s({A, cfg.hidden}), h_pi({A, cfg.hidden}), z_s_prev({A, cfg.comm_dim});
  if (cfg.comm_enabled && cfg.use_s0) {
    Graph g;
    Tensor s0 = global_state(st, spec);
    Tensor s0_rows({A, cfg.state_dim});
    for (int a = 0; a < A; ++a)
      std::copy(s0.data.begin(), s0.data.end(), &s0_rows.data[static_cast<size_t>(a) * cfg.state_dim]);
    h_s = g.val(init_hidden(g, ps, cfg, &s0_rows, A));
  }

  while (!st.done) {
    int t = st.timestep;
    ep.state.push_back(global_state(st, spec));
    Tensor obs({A, cfg.obs_dim});
    Tensor ego({A, cfg.cop_dim});
    std::vector<uint8_t> alive(static_cast<size_t>(A));
    std::vector<uint8_t> legal(static_cast<size_t>(A) * cfg.n_actions);
    for (int a = 0; a < A; ++a) {
      Tensor o = observe(st, spec, a);
      std::copy(o.data.begin(), o.data.end(), &obs.data[static_cast<size_t>(a) * cfg.obs_dim]);
      alive[static_cast<size_t>(a)] = st.units[static_cast<size_t>(a)].alive ? 1 : 0;
      if (alive[static_cast<size_t>(a)]) {
        Tensor e = egocentric_state(st, spec, a);
        std::copy(e.data.begin(), e.data.end(), &ego.data[static_cast<size_t>(a) * cfg.cop_dim]);
      }
      std::vector<uint8_t> m = action_mask(st, spec, a);
      std::copy(m.begin(), m.end(), legal.begin() + static_cast<size_t>(a) * cfg.n_actions);
    }

    // Input rows: observation ++ one-hot of the previous action (zeros at t=0).
    Tensor x({A, cfg.in_dim()});
    for (int a = 0; a < A; ++a) {
      std::copy(&obs.data[static_cast<size_t>(a) * cfg.obs_dim],
                &obs.data[static_cast<size_t>(a) * cfg.obs_dim] + cfg.obs_dim,
                &x.data[static_cast<size_t>(a) * cfg.in_dim()]);
      if (t > 0)
        x.data[static_cast<size_t>(a) * cfg.in_dim() + cfg.obs_dim +
               ep.actions.back()[static_cast<size_t>(a)]] = 1.0;
    }

    std::vector<std::vector<uint8_t>> rounds;
    Graph g;
    Graph::Id h_s_id = g.constant(h_s);
    if (cfg.comm_enabled) {
      Graph::Id z = encode_obs(g, ps, g.constant(x));
      std::vector<std::shared_ptr<const std::vector<uint8_t>>> masks;
      for (int r = 0; r < cfg.rounds; ++r) {
        rounds.push_back(comm_mask(st, spec, round_seed(seed, t, r)));
        masks.push_back(std::make_shared<std::vector<uint8_t>>(rounds.back()));
      }
      Graph::Id zs = run_rounds(g, ps, cfg, z, g.constant(z_s_prev), masks);
      h_s_id = update_hidden(g, ps, zs, h_s_id);
      z_s_prev = g.val(zs);
      h_s = g.val(h_s_id);
      if (record_traces) {
        ep.trace_zs.push_back(z_s_prev);
        ep.trace_cop.push_back(g.val(decode_cop(g, ps, h_s_id)));
        if (cfg.use_dobs) ep.trace_rec.push_back(g.val(decode_obs(g, ps, z)));
      }
    }
    AgentStep astep = agent_q(g, ps, g.constant(x), h_s_id, g.constant(h_pi));
    h_pi = g.val(astep.h_pi);
    const Tensor& q = g.val(astep.q);
    if (record_traces) ep.trace_q.push_back(q);

    std::vector<int> acts(static_cast<size_t>(A));
    for (int a = 0; a < A; ++a) {
      Tensor row({cfg.n_actions});
      std::copy(&q.data[static_cast<size_t>(a) * cfg.n_actions],
                &q.data[static_cast<size_t>(a) * cfg.n_actions] + cfg.n_actions, row.data.begin());
      std::vector<uint8_t> m(legal.begin() + static_cast<size_t>(a) * cfg.n_actions,
                             legal.begin() + static_cast<size_t>(a + 1) * cfg.n_actions);
      acts[static_cast<size_t>(a)] = select_action(row, m, eps, act_rng);
    }

    StepOutcome oc = step(st, spec, acts);
    ep.obs.push_back(std::move(obs));
    ep.ego.push_back(std::move(ego));
    ep.alive.push_back(std::move(alive));
    ep.legal.push_back(std::move(legal));
    ep.comm.push_back(std::move(rounds));
    ep.actions.push_back(std::move(acts));
    ep.rewards.push_back(oc.reward);
    ep.win = oc.win;
  }
  ep.state.push_back(global_state(st, spec));
  return ep;
}

// --- evaluation metrics over recorded traces ----------------------------------------------

// Accumulates the picture metrics of one traced episode into sums; the
// caller divides by the returned counts. Absent roster slots are excluded.
struct MetricSums {
  double xy = 0, health = 0, fov = 0, halluc = 0;
  int64_t n_xy = 0, n_health = 0, n_fov = 0, n_halluc = 0;
};

inline void accumulate_cop_metrics(MetricSums& s, const Episode& ep, const ModelConfig& cfg,
                                   int n_units) {
  for (int t = 0; t < ep.length(); ++t) {
    const Tensor& pred = ep.trace_cop[static_cast<size_t>(t)];
    const Tensor& truth = ep.ego[static_cast<size_t>(t)];
    for (int a = 0; a < ep.n_agents; ++a) {
      if (!ep.alive[static_cast<size_t>(t)][static_cast<size_t>(a)]) continue;
      for (int u = 0; u < n_units; ++u) {
        size_t base = static_cast<size_t>(a) * cfg.cop_dim + static_cast<size_t>(u) * kEgoPerUnit;
        double dx = pred.data[base] - truth.data[base];
        double dy = pred.data[base + 1] - truth.data[base + 1];
        s.xy += (dx * dx + dy * dy) / 2;
        s.n_xy += 1;
        double dh = pred.data[base + 2] - truth.data[base + 2];
        s.health += dh * dh;
        s.n_health += 1;
        if (truth.data[base + 2] == 0.0 && truth.data[base + 4] == 0.0) {
          s.halluc += pred.data[base + 2];
          s.n_halluc += 1;
        }
        // Field-of-view restriction: units this agent currently sees.
        bool visible =
            ep.obs[static_cast<size_t>(t)][static_cast<size_t>(a) * cfg.obs_dim +
                                           static_cast<size_t>(u) * kObsPerUnit] > 0.5;
        if (visible) {
          for (int k = 0; k < 5; ++k) {
            double d = pred.data[base + static_cast<size_t>(k)] -
                       truth.data[base + static_cast<size_t>(k)];
            s.fov += d * d;
          }
          s.n_fov += 5;
        }
      }
    }
  }
}

// Greedy evaluation: E deterministic episodes seeded seed_base + index.
// Fills the win rate and, when the picture stack is enabled, the picture
// accuracy metrics. Loss fields are left zero (they belong to training).
inline Metrics evaluate(const ParamStore& ps, const ScenarioSpec& spec, const ModelConfig& cfg,
                        int episodes, uint64_t seed_base) {
  if (episodes < 1) throw std::invalid_argument("evaluate: needs at least one episode");
  Metrics m;
  m.episodes = episodes;
  MetricSums s;
  int n_units = static_cast<int>(spec.roster.size());
  int wins = 0;
  for (int e = 0; e < episodes; ++e) {
    Episode ep = collect_episode(ps, spec, cfg, 0.0, seed_base + static_cast<uint64_t>(e),
                                 /*record_traces=*/cfg.comm_enabled);
    wins += ep.win ? 1 : 0;
    if (cfg.comm_enabled) accumulate_cop_metrics(s, ep, cfg, n_units);
  }
  m.win_rate = static_cast<double>(wins) / episodes;
  if (s.n_xy > 0) m.cop_mse_xy = s.xy / static_cast<double>(s.n_xy);
  if (s.n_health > 0) m.cop_mse_health = s.health / static_cast<double>(s.n_health);
  if (s.n_fov > 0) m.fov_mse = s.fov / static_cast<double>(s.n_fov);
  if (s.n_halluc > 0) m.hallucination = s.halluc / static_cast<double>(s.n_halluc);
  return m;
}

// Hallucination metric alone (contract form): mean predicted health over all
// (unit, step, agent) triples whose ground-truth health is zero; 0 when no
// unit ever died.
inline double hallucination_metric(const std::vector<Episode>& episodes, const ModelConfig& cfg,
                                   int n_units) {
  MetricSums s;
  for (const Episode& ep : episodes) accumulate_cop_metrics(s, ep, cfg, n_units);
  return s.n_halluc > 0 ? s.halluc / static_cast<double>(s.n_halluc) : 0.0;
}

// --- training loop --------------------------------------------------------------------------

struct TrainSetup {
  ScenarioSpec spec;
  ModelConfig model;
  TrainConfig train;
  int64_t total_env_steps = 200000;
  int64_t eval_every = 5000;   // environment steps between evaluations
  int eval_episodes = 32;      // per intermediate evaluation
  uint64_t seed = 1;
  int workers = 1;             // parallel episode collection fan-out
  std::ostream* metrics = nullptr;
  // (online params, target params, optimizer state, env steps, final?)
  std::function<void(const ParamStore&, const ParamStore&, const AdamState&, int64_t, bool)>
      checkpoint_hook;
};

struct TrainResult {
  ParamStore params;
  Metrics final_eval;
  int64_t env_steps = 0;
  int episodes = 0;
  int train_steps = 0;
};

inline TrainResult train(const TrainSetup& setup) {
  setup.spec.validate();
  setup.model.check();
  setup.train.check();
  const ModelConfig& cfg = setup.model;
  const TrainConfig& tc = setup.train;
  int n_units = static_cast<int>(setup.spec.roster.size());

  ParamStore online;
  init_params(online, cfg, setup.seed);
  ParamStore target = online.clone();
  AdamState adam;
  adam.lr = tc.lr;
  ReplayBuffer buffer(tc.buffer_capacity);
  Rng sample_rng(hash_combine(setup.seed, 0x5a3f91c2ULL));

  TrainResult out;
  Metrics last_losses;
  int64_t next_eval = 0;
  auto run_eval = [&](int episodes) {
    Metrics m = evaluate(online, setup.spec, cfg, episodes,
                         hash_combine(hash_combine(setup.seed, 0xe7a1ULL),
                                      static_cast<uint64_t>(out.env_steps)));
    m.env_steps = out.env_steps;
    m.epsilon = tc.epsilon_at(out.env_steps);
    m.loss_td = last_losses.loss_td;
    m.loss_cop = last_losses.loss_cop;
    m.loss_obs_recon = last_losses.loss_obs_recon;
    m.loss_act_recon = last_losses.loss_act_recon;
    m.loss_halluc = last_losses.loss_halluc;
    if (setup.metrics) {
      write_metrics_row(*setup.metrics, m, setup.seed);
      setup.metrics->flush(); // keep the file tailable during long runs
    }
    return m;
  };
  if (setup.metrics) *setup.metrics << kMetricsHeader << '\n';

  while (out.env_steps < setup.total_env_steps) {
    if (out.env_steps >= next_eval) {
      run_eval(setup.eval_episodes);
      if (setup.checkpoint_hook)
        setup.checkpoint_hook(online, target, adam, out.env_steps, false);
      next_eval += setup.eval_every;
    }

    // Collect a block of episodes; seeds are assigned up front so any
    // fan-out width produces the same buffer contents in the same order.
    double eps = tc.epsilon_at(out.env_steps);
    int block = tc.update_every;
    std::vector<Episode> fresh(static_cast<size_t>(block));
    if (setup.workers > 1) {
      std::vector<std::future<Episode>> futs;
      for (int k = 0; k < block; ++k) {
        uint64_t es = hash_combine(setup.seed,
                                   static_cast<uint64_t>(out.episodes + k + 1));
        futs.push_back(std::async(std::launch::async, [&, es] {
          return collect_episode(online, setup.spec, cfg, eps, es);
        }));
      }
      for (int k = 0; k < block; ++k) fresh[static_cast<size_t>(k)] = futs[static_cast<size_t>(k)].get();
    } else {
      for (int k = 0; k < block; ++k) {
        uint64_t es = hash_combine(setup.seed,
                                   static_cast<uint64_t>(out.episodes + k + 1));
        fresh[static_cast<size_t>(k)] = collect_episode(online, setup.spec, cfg, eps, es);
      }
    }
    for (Episode& ep : fresh) {
      out.env_steps += ep.length();
      out.episodes += 1;
      buffer.add(std::move(ep));
    }

    if (buffer.size() < tc.batch_episodes) continue;
    std::vector<const Episode*> batch = buffer.sample(tc.batch_episodes, sample_rng);
    Graph g;
    LossBreakdown loss = joint_loss(g, online, target, cfg, tc, batch, n_units);
    double lv = g.val(loss.total)[0];
    if (!std::isfinite(lv)) {
      std::ostringstream diag;
      diag << "non-finite loss at env step " << out.env_steps << " (train step "
           << out.train_steps << "): total=" << lv << " td=" << loss.td << " cop=" << loss.cop
           << " recon=" << loss.obs_recon + loss.act_recon << " halluc=" << loss.halluc
           << "; batch lengths";
      for (const Episode* ep : batch) diag << ' ' << ep->length();
      throw std::runtime_error(diag.str());
    }
    g.backward(loss.total);
    GradMap grads = g.param_grads();
    clip_global_norm(grads, tc.grad_clip);
    adam_step(online, grads, adam);
    out.train_steps += 1;
    if (out.train_steps % tc.target_sync_interval == 0) sync_target(target, online);

    last_losses.loss_td = loss.td;
    last_losses.loss_cop = loss.cop;
    last_losses.loss_obs_recon = loss.obs_recon;
    last_losses.loss_act_recon = loss.act_recon;
    last_losses.loss_halluc = loss.halluc;
  }

  out.final_eval = run_eval(setup.eval_episodes);
  if (setup.checkpoint_hook) setup.checkpoint_hook(online, target, adam, out.env_steps, true);
  out.params = std::move(online);
  return out;
}

} // namespace copnet
