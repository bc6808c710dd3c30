#pragma once

// Decentralized recurrent Q-networks with epsilon-greedy selection, monotonic
// state-conditioned linear mixing, TD(lambda) targets with a double-Q
// bootstrap, an episode replay buffer, and the batched time-unrolled forward
// pass shared by the TD and picture losses.

#include "copnet/model.hpp"

namespace copnet {

struct TrainConfig {
  double gamma = 0.99;
  double lambda_td = 0.3;
  double eps_start = 1.0, eps_end = 0.05;
  int64_t eps_anneal_steps = 100000; // environment steps to reach eps_end
  int batch_episodes = 32;
  int target_sync_interval = 200;    // training steps between hard target copies
  int buffer_capacity = 2000;        // episodes
  double lambda_h = 0.0;             // hallucination penalty weight
  double grad_clip = 20.0;
  double lr = 1e-3;
  int update_every = 4;              // episodes collected per training step

  void check() const {
    if (gamma < 0 || gamma > 1) throw std::invalid_argument("train config: gamma outside [0,1]");
    if (lambda_td < 0 || lambda_td > 1)
      throw std::invalid_argument("train config: lambda_td outside [0,1]");
    if (eps_start < eps_end || eps_end < 0 || eps_start > 1)
      throw std::invalid_argument("train config: bad epsilon schedule");
    if (batch_episodes < 1 || buffer_capacity < 1 || target_sync_interval < 1)
      throw std::invalid_argument("train config: bad sizes");
  }
  double epsilon_at(int64_t env_steps) const {
    if (env_steps >= eps_anneal_steps) return eps_end;
    double f = static_cast<double>(env_steps) / static_cast<double>(eps_anneal_steps);
    return eps_start + f * (eps_end - eps_start);
  }
};

// One complete episode as replayed: everything needed to rebuild the forward
// pass from the episode start bit-exactly (recurrent states are never stored).
struct Episode {
  int n_agents = 0;
  std::vector<Tensor> obs;                    // T x {A, obs_dim}, pre-step
  std::vector<std::vector<int>> actions;      // T x A
  std::vector<std::vector<uint8_t>> legal;    // T x (A * n_actions), selection-time masks
  std::vector<std::vector<std::vector<uint8_t>>> comm; // T x R x (A*A) delivery masks
  std::vector<double> rewards;                // T
  std::vector<Tensor> state;                  // T+1 x {state_dim} (pre-step + terminal)
  std::vector<Tensor> ego;                    // T x {A, cop_dim}, pre-step truth (dead rows zero)
  std::vector<std::vector<uint8_t>> alive;    // T x A, pre-step
  bool win = false;
  // Rollout traces, recorded only on request (replay-exactness checks,
  // evaluation metrics, rendering); never needed to rebuild the forward pass.
  std::vector<Tensor> trace_zs;  // T x {A, comm_dim}
  std::vector<Tensor> trace_q;   // T x {A, n_actions}
  std::vector<Tensor> trace_cop; // T x {A, cop_dim}
  std::vector<Tensor> trace_rec; // T x {A, in_dim}
  int length() const { return static_cast<int>(rewards.size()); }
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity) : cap_(capacity) {
    if (capacity < 1) throw std::invalid_argument("replay buffer: capacity must be >= 1");
  }
  void add(Episode ep) {
    if (ep.length() == 0) throw std::invalid_argument("replay buffer: empty episode");
    if (static_cast<int>(eps_.size()) < cap_) {
      eps_.push_back(std::move(ep));
    } else {
      eps_[static_cast<size_t>(next_)] = std::move(ep);
    }
    next_ = (next_ + 1) % cap_;
  }
  int size() const { return static_cast<int>(eps_.size()); }
  const Episode& at(int i) const { return eps_[static_cast<size_t>(i)]; }
  std::vector<const Episode*> sample(int n, Rng& rng) const {
    if (eps_.empty()) throw std::logic_error("replay buffer: sampling from empty buffer");
    std::vector<const Episode*> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      out.push_back(&eps_[static_cast<size_t>(rng.uniform_int(size()))]);
    return out;
  }

 private:
  std::vector<Episode> eps_;
  int cap_, next_ = 0;
};

// --- agent network -------------------------------------------------------------

struct AgentStep {
  Graph::Id q = -1;    // {rows, n_actions}
  Graph::Id h_pi = -1; // {rows, hidden}
};

// Embed (o ++ a_prev), advance the policy GRU, and read the Q head over the
// concatenated [h_s, h_pi]. The no-picture baseline passes zeros for h_s.
inline AgentStep agent_q(Graph& g, const ParamStore& ps, Graph::Id obs_and_prev, Graph::Id h_s,
                         Graph::Id h_pi_prev) {
  Graph::Id emb = g.tanh_act(
      g.linear(obs_and_prev, ps.bind(g, "agent.embed.w"), ps.bind(g, "agent.embed.b")));
  Graph::Id h_pi = gru_cell(g, emb, h_pi_prev, ps.bind_gru(g, "agent.gru"));
  Graph::Id joint = g.concat_cols(h_s, h_pi);
  Graph::Id hid = g.tanh_act(g.linear(joint, ps.bind(g, "agent.q.w1"), ps.bind(g, "agent.q.b1")));
  return {g.linear(hid, ps.bind(g, "agent.q.w2"), ps.bind(g, "agent.q.b2")), h_pi};
}

// --- action selection ------------------------------------------------------------

inline int greedy_action(const double* q, const uint8_t* mask, int n) {
  int best = -1;
  for (int a = 0; a < n; ++a) {
    if (!mask[a]) continue;
    if (best < 0 || q[a] > q[best]) best = a; // strict: ties keep the lowest index
  }
  if (best < 0) throw std::invalid_argument("action selection: no legal action");
  return best;
}

inline int select_action(const Tensor& qvals, const std::vector<uint8_t>& mask, double eps,
                         Rng& rng) {
  int n = static_cast<int>(qvals.numel());
  if (static_cast<int>(mask.size()) != n)
    throw std::invalid_argument("action selection: mask length " + std::to_string(mask.size()) +
                                " != " + std::to_string(n) + " actions");
  bool explore = rng.bernoulli(eps); // always one draw: keeps streams aligned across eps
  if (explore) {
    int legal = 0;
    for (uint8_t m : mask) legal += m;
    if (legal == 0) throw std::invalid_argument("action selection: no legal action");
    int pick = rng.uniform_int(legal);
    for (int a = 0; a < n; ++a) {
      if (!mask[static_cast<size_t>(a)]) continue;
      if (pick-- == 0) return a;
    }
  }
  return greedy_action(qvals.data.data(), mask.data(), n);
}

// --- monotonic mixing --------------------------------------------------------------

// Q^mix = sum_i |w_i(s)| q_i + b(s), one hypernetwork linear layer per output.
// The absolute value enforces nonnegative mixing coefficients (monotonicity).
inline Graph::Id mix(Graph& g, const ParamStore& ps, Graph::Id q_taken, Graph::Id state) {
  if (g.val(q_taken).rows() != g.val(state).rows())
    throw std::invalid_argument("mix: batch mismatch " + g.val(q_taken).str() + " vs " +
                                g.val(state).str());
  Graph::Id w = g.abs_act(g.linear(state, ps.bind(g, "mixer.hw.w"), ps.bind(g, "mixer.hw.b")));
  Graph::Id b = g.linear(state, ps.bind(g, "mixer.hb.w"), ps.bind(g, "mixer.hb.b"));
  return g.add(g.row_sum(g.mul(w, q_taken)), b);
}

// --- lambda returns -----------------------------------------------------------------

// G_t = r_t + gamma[(1-lambda) Qhat_{t+1} + lambda G_{t+1}]; terminal steps
// (done[t]) take G_t = r_t. qhat_next[t] is the bootstrap value for step t+1
// (double-Q: greedy action from the online net, value from the target net);
// its entry at a terminal step is ignored.
inline std::vector<double> td_lambda_targets(const std::vector<double>& rewards,
                                             const std::vector<double>& qhat_next,
                                             const std::vector<uint8_t>& done, double gamma,
                                             double lambda) {
  size_t T = rewards.size();
  if (qhat_next.size() != T || done.size() != T)
    throw std::invalid_argument("td targets: sequence lengths differ");
  if (T == 0) return {};
  if (!done.back()) throw std::invalid_argument("td targets: episode must end terminal");
  std::vector<double> g(T);
  for (size_t i = T; i-- > 0;) {
    if (done[i]) {
      g[i] = rewards[i];
    } else {
      g[i] = rewards[i] + gamma * ((1.0 - lambda) * qhat_next[i] + lambda * g[i + 1]);
    }
  }
  return g;
}

// --- batched time-unrolled forward ---------------------------------------------------

struct BatchForward {
  int B = 0, A = 0, T_max = 0;
  std::vector<Graph::Id> q;    // per t: {B*A, n_actions}
  std::vector<Graph::Id> z_s;  // per t: {B*A, comm_dim} (empty when comm disabled)
  std::vector<Graph::Id> cop;  // per t: {B*A, cop_dim} (empty when comm disabled or heads off)
  std::vector<Graph::Id> rec;  // per t: {B*A, in_dim} (empty unless use_dobs and heads on)
};

inline Tensor batch_inputs(const std::vector<const Episode*>& batch, const ModelConfig& cfg,
                           int t) {
  int B = static_cast<int>(batch.size()), A = cfg.n_agents;
  Tensor x({B * A, cfg.in_dim()});
  for (int b = 0; b < B; ++b) {
    const Episode& ep = *batch[static_cast<size_t>(b)];
    if (t >= ep.length()) continue; // padded step: zeros
    for (int a = 0; a < A; ++a) {
      double* row = &x.data[(static_cast<size_t>(b) * A + a) * cfg.in_dim()];
      const Tensor& o = ep.obs[static_cast<size_t>(t)];
      std::copy(&o.data[static_cast<size_t>(a) * cfg.obs_dim],
                &o.data[static_cast<size_t>(a) * cfg.obs_dim] + cfg.obs_dim, row);
      if (t > 0) {
        int prev = ep.actions[static_cast<size_t>(t) - 1][static_cast<size_t>(a)];
        row[cfg.obs_dim + prev] = 1.0;
      }
    }
  }
  return x;
}

// Builds the full unrolled forward for a batch of episodes on graph `g` with
// parameters `ps`. Episodes shorter than the longest get zero inputs and
// all-zero communication masks; their outputs must be excluded by loss
// weights. The recurrent states always start from the episode beginning.
// `heads` = false skips the picture decoders (enough for bootstrap values).
inline BatchForward forward_batch(Graph& g, const ParamStore& ps, const ModelConfig& cfg,
                                  const std::vector<const Episode*>& batch, bool heads = true) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  BatchForward out;
  out.B = static_cast<int>(batch.size());
  out.A = cfg.n_agents;
  for (const Episode* ep : batch) out.T_max = std::max(out.T_max, ep->length());
  int rows = out.B * out.A;

  Graph::Id h_s;
  if (cfg.comm_enabled && cfg.use_s0) {
    Tensor s0({out.B, cfg.state_dim});
    for (int b = 0; b < out.B; ++b)
      std::copy(batch[static_cast<size_t>(b)]->state[0].data.begin(),
                batch[static_cast<size_t>(b)]->state[0].data.end(),
                &s0.data[static_cast<size_t>(b) * cfg.state_dim]);
    Tensor s0_rows = replicate_rows(s0, out.A);
    h_s = init_hidden(g, ps, cfg, &s0_rows, rows);
  } else {
    h_s = g.constant(Tensor({rows, cfg.hidden}));
  }
  Graph::Id h_pi = g.constant(Tensor({rows, cfg.hidden}));
  Graph::Id z_s = g.constant(Tensor({rows, cfg.comm_dim}));

  int rounds = cfg.comm_enabled ? cfg.rounds : 0;
  for (int t = 0; t < out.T_max; ++t) {
    Graph::Id x = g.constant(batch_inputs(batch, cfg, t));
    if (cfg.comm_enabled) {
      Graph::Id z = encode_obs(g, ps, x);
      std::vector<std::shared_ptr<const std::vector<uint8_t>>> masks(
          static_cast<size_t>(rounds));
      for (int r = 0; r < rounds; ++r) {
        auto m = std::make_shared<std::vector<uint8_t>>(
            static_cast<size_t>(rows) * out.A, 0);
        for (int b = 0; b < out.B; ++b) {
          const Episode& ep = *batch[static_cast<size_t>(b)];
          if (t >= ep.length()) continue;
          if (static_cast<int>(ep.comm[static_cast<size_t>(t)].size()) != rounds)
            throw std::invalid_argument("forward: episode stores " +
                                        std::to_string(ep.comm[static_cast<size_t>(t)].size()) +
                                        " mask rounds, model wants " + std::to_string(rounds));
          const auto& em = ep.comm[static_cast<size_t>(t)][static_cast<size_t>(r)];
          std::copy(em.begin(), em.end(),
                    m->begin() + static_cast<size_t>(b) * out.A * out.A);
        }
        masks[static_cast<size_t>(r)] = std::move(m);
      }
      z_s = run_rounds(g, ps, cfg, z, z_s, masks);
      h_s = update_hidden(g, ps, z_s, h_s);
      out.z_s.push_back(z_s);
      if (heads) {
        out.cop.push_back(decode_cop(g, ps, h_s));
        if (cfg.use_dobs) out.rec.push_back(decode_obs(g, ps, z));
      }
    }
    AgentStep step = agent_q(g, ps, x, h_s, h_pi);
    h_pi = step.h_pi;
    out.q.push_back(step.q);
  }
  return out;
}

// --- TD loss over a batch ---------------------------------------------------------------

// Greedy per-(episode, agent) actions at step t from raw online q-values,
// used for the double-Q bootstrap. Dead or padded rows return action 0.
inline std::vector<int> batch_greedy(const Tensor& q, const std::vector<const Episode*>& batch,
                                     const ModelConfig& cfg, int t) {
  std::vector<int> out(static_cast<size_t>(q.rows()), 0);
  for (int b = 0; b < static_cast<int>(batch.size()); ++b) {
    const Episode& ep = *batch[static_cast<size_t>(b)];
    if (t >= ep.length()) continue;
    for (int a = 0; a < cfg.n_agents; ++a) {
      int row = b * cfg.n_agents + a;
      const uint8_t* mask = &ep.legal[static_cast<size_t>(t)][static_cast<size_t>(a) * cfg.n_actions];
      out[static_cast<size_t>(row)] =
          greedy_action(&q.data[static_cast<size_t>(row) * cfg.n_actions], mask, cfg.n_actions);
    }
  }
  return out;
}

// Mixes per-agent q-values taken at `actions` into Q^mix per (episode, step),
// zeroing dead agents' contributions.
inline Graph::Id mix_taken(Graph& g, const ParamStore& ps, const ModelConfig& cfg,
                           const std::vector<const Episode*>& batch, Graph::Id q_t,
                           const std::vector<int>& actions, int t) {
  int B = static_cast<int>(batch.size()), A = cfg.n_agents;
  auto idx = std::make_shared<std::vector<int>>(actions.begin(), actions.end());
  Graph::Id taken = g.gather_cols(q_t, idx); // {B*A, 1}
  Tensor alive({B * A, 1});
  Tensor state({B, cfg.state_dim});
  for (int b = 0; b < B; ++b) {
    const Episode& ep = *batch[static_cast<size_t>(b)];
    if (t >= ep.length()) continue;
    for (int a = 0; a < A; ++a)
      alive.data[static_cast<size_t>(b) * A + a] = ep.alive[static_cast<size_t>(t)][static_cast<size_t>(a)];
    std::copy(ep.state[static_cast<size_t>(t)].data.begin(),
              ep.state[static_cast<size_t>(t)].data.end(),
              &state.data[static_cast<size_t>(b) * cfg.state_dim]);
  }
  Graph::Id masked = g.mul(taken, g.constant(alive));
  Graph::Id per_agent = g.reshape(masked, {B, A});
  return mix(g, ps, per_agent, g.constant(state));
}

// Mean squared TD error over all real (non-padded) steps of the batch. The
// target network contributes only frozen values (computed on its own graph).
inline Graph::Id qmix_loss(Graph& g, const ParamStore& online, const ParamStore& target,
                           const ModelConfig& cfg, const TrainConfig& tc,
                           const std::vector<const Episode*>& batch,
                           const BatchForward* prebuilt = nullptr) {
  if (batch.empty()) throw std::invalid_argument("td loss: empty batch");
  BatchForward local;
  const BatchForward& fwd = prebuilt ? *prebuilt : (local = forward_batch(g, online, cfg, batch));
  Graph tg;
  BatchForward tfwd = forward_batch(tg, target, cfg, batch, /*heads=*/false);
  int B = fwd.B, T = fwd.T_max;

  // Double-Q bootstrap values per (episode, step): greedy actions from the
  // online net, values and mixing from the target net.
  std::vector<std::vector<double>> qhat(static_cast<size_t>(B),
                                        std::vector<double>(static_cast<size_t>(T), 0.0));
  for (int t = 1; t < T; ++t) {
    std::vector<int> greedy = batch_greedy(g.val(fwd.q[static_cast<size_t>(t)]), batch, cfg, t);
    Graph::Id qm = mix_taken(tg, target, cfg, batch, tfwd.q[static_cast<size_t>(t)], greedy, t);
    const Tensor& v = tg.val(qm);
    for (int b = 0; b < B; ++b) qhat[static_cast<size_t>(b)][static_cast<size_t>(t) - 1] = v[b];
  }

  int valid = 0;
  for (const Episode* ep : batch) valid += ep->length();
  Tensor targets({B * T, 1}), weights({B * T, 1});
  for (int b = 0; b < B; ++b) {
    const Episode& ep = *batch[static_cast<size_t>(b)];
    std::vector<uint8_t> done(static_cast<size_t>(ep.length()), 0);
    done.back() = 1;
    std::vector<double> qn(qhat[static_cast<size_t>(b)].begin(),
                           qhat[static_cast<size_t>(b)].begin() + ep.length());
    std::vector<double> G = td_lambda_targets(ep.rewards, qn, done, tc.gamma, tc.lambda_td);
    for (int t = 0; t < ep.length(); ++t) {
      targets.data[static_cast<size_t>(b) * T + t] = G[static_cast<size_t>(t)];
      weights.data[static_cast<size_t>(b) * T + t] = 1.0 / valid;
    }
  }

  // Online Q^mix of the actions actually taken, stacked over time.
  std::vector<Graph::Id> qmix_rows;
  for (int t = 0; t < T; ++t) {
    std::vector<int> taken(static_cast<size_t>(B * cfg.n_agents), 0);
    for (int b = 0; b < B; ++b) {
      const Episode& ep = *batch[static_cast<size_t>(b)];
      if (t >= ep.length()) continue;
      for (int a = 0; a < cfg.n_agents; ++a)
        taken[static_cast<size_t>(b) * cfg.n_agents + a] =
            ep.actions[static_cast<size_t>(t)][static_cast<size_t>(a)];
    }
    qmix_rows.push_back(mix_taken(g, online, cfg, batch, fwd.q[static_cast<size_t>(t)], taken, t));
  }
  // stack {B,1} nodes over time into {B*T, 1} via concat on columns then reshape
  Graph::Id stacked = qmix_rows[0];
  for (size_t i = 1; i < qmix_rows.size(); ++i)
    stacked = g.concat_cols(stacked, qmix_rows[i]); // {B, T}
  Graph::Id flat = g.reshape(stacked, {B * T, 1});
  Graph::Id err = g.square(g.sub(flat, g.constant(targets)));
  return g.weighted_sum(err, std::make_shared<Tensor>(weights));
}

// Hard copy of online parameters into the target store.
inline void sync_target(ParamStore& target, const ParamStore& online) { target.copy_from(online); }

} // namespace copnet
