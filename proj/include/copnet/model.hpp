#pragma once

// Learned communication stack: observation encoder, masked cross-attention
// integration, multi-round exchange, recurrent shared-picture state, picture
// decoder, optional observation decoder, and initial-state injection. All
// forward functions build onto a caller-owned Graph and operate on batched
// row-major matrices of shape {batch * n_agents, features} (agent-minor).

#include "copnet/env.hpp"
#include "copnet/graph.hpp"
#include "copnet/optim.hpp"

namespace copnet {

struct ModelConfig {
  int n_agents = 0;
  int n_actions = 0;
  int obs_dim = kObsDim;
  int state_dim = kStateDim;
  int cop_dim = kEgoDim;
  int comm_dim = 32;   // C: message embedding width
  int n_heads = 4;
  int hidden = 64;     // width of both recurrent states
  int enc_hidden = 128;
  int rounds = 3;      // R: message exchange rounds per timestep
  bool comm_enabled = true; // false: no exchange, Q head sees zeros for h_s
  bool use_s0 = false;      // initialize h_s from the initial global state
  bool use_dobs = false;    // train the explicit observation decoder

  int in_dim() const { return obs_dim + n_actions; }
  int head_dim() const { return comm_dim / n_heads; }
  void check() const {
    if (n_agents < 1 || n_agents > kMaxUnits)
      throw std::invalid_argument("model config: n_agents out of range");
    if (n_actions < 1) throw std::invalid_argument("model config: n_actions out of range");
    if (comm_dim % n_heads != 0)
      throw std::invalid_argument("model config: comm_dim must divide by n_heads");
    if (rounds < 1) throw std::invalid_argument("model config: rounds must be >= 1");
  }
};

// Creates every model tensor in a fixed order (checkpoint layout contract).
// Linear weights are uniform +-sqrt(1/fan_in), biases zero.
inline void init_params(ParamStore& ps, const ModelConfig& cfg, uint64_t seed) {
  cfg.check();
  Rng rng(seed);
  ps.add_linear("E_obs.w1", cfg.enc_hidden, cfg.in_dim(), rng);
  ps.add_bias("E_obs.b1", cfg.enc_hidden);
  ps.add_linear("E_obs.w2", cfg.comm_dim, cfg.enc_hidden, rng);
  ps.add_bias("E_obs.b2", cfg.comm_dim);
  for (int h = 0; h < cfg.n_heads; ++h) {
    std::string p = "attn.head" + std::to_string(h);
    ps.add_linear(p + ".wq", cfg.head_dim(), cfg.comm_dim, rng);
    ps.add_linear(p + ".wk", cfg.head_dim(), cfg.comm_dim, rng);
    ps.add_linear(p + ".wv", cfg.head_dim(), cfg.comm_dim, rng);
  }
  ps.add_linear("attn.proj.w", cfg.comm_dim, cfg.comm_dim, rng);
  // Small random bias instead of zeros: with zero history the first-round
  // keys/values are all zero and a zero bias would freeze z_s (and every
  // attention gradient) at exactly zero. A nonzero bias seeds the recurrence.
  ps.add_bias("attn.proj.b", cfg.comm_dim);
  for (auto& v : ps.at("attn.proj.b").data) v = rng.uniform(-0.1, 0.1);
  ps.add_gru("gru", cfg.comm_dim, cfg.hidden, rng);
  ps.add_linear("W_init", cfg.hidden, cfg.state_dim, rng);
  ps.add_linear("D_cop.w1", cfg.enc_hidden, cfg.hidden, rng);
  ps.add_bias("D_cop.b1", cfg.enc_hidden);
  ps.add_linear("D_cop.w2", cfg.cop_dim, cfg.enc_hidden, rng);
  ps.add_bias("D_cop.b2", cfg.cop_dim);
  if (cfg.use_dobs) {
    ps.add_linear("D_obs.w1", cfg.enc_hidden, cfg.comm_dim, rng);
    ps.add_bias("D_obs.b1", cfg.enc_hidden);
    ps.add_linear("D_obs.w2", cfg.in_dim(), cfg.enc_hidden, rng);
    ps.add_bias("D_obs.b2", cfg.in_dim());
  }
  ps.add_linear("agent.embed.w", cfg.hidden, cfg.in_dim(), rng);
  ps.add_bias("agent.embed.b", cfg.hidden);
  ps.add_gru("agent.gru", cfg.hidden, cfg.hidden, rng);
  ps.add_linear("agent.q.w1", cfg.hidden, 2 * cfg.hidden, rng);
  ps.add_bias("agent.q.b1", cfg.hidden);
  ps.add_linear("agent.q.w2", cfg.n_actions, cfg.hidden, rng);
  ps.add_bias("agent.q.b2", cfg.n_actions);
  ps.add_linear("mixer.hw.w", cfg.n_agents, cfg.state_dim, rng);
  ps.add_bias("mixer.hw.b", cfg.n_agents);
  ps.add_linear("mixer.hb.w", 1, cfg.state_dim, rng);
  ps.add_bias("mixer.hb.b", 1);
}

// Transmitted payload: both embeddings, tagged with the sender. The exchange
// path keeps messages implicit (zeroed senders are handled inside the fused
// attention op); this explicit form serves inspection and serialization.
struct Message {
  Tensor z, z_s;
  int sender = -1;
  Tensor payload() const {
    Tensor p({static_cast<int>(z.numel() + z_s.numel())});
    std::copy(z.data.begin(), z.data.end(), p.data.begin());
    std::copy(z_s.data.begin(), z_s.data.end(), p.data.begin() + z.numel());
    return p;
  }
};

inline Message compose_message(const Tensor& z, const Tensor& z_s, int sender) {
  if (z.numel() != z_s.numel())
    throw std::invalid_argument("compose_message: embedding lengths differ");
  return Message{z, z_s, sender};
}

inline std::pair<Tensor, Tensor> split_payload(const Tensor& payload) {
  int c = payload.numel() / 2;
  Tensor z({c}), z_s({c});
  std::copy(payload.data.begin(), payload.data.begin() + c, z.data.begin());
  std::copy(payload.data.begin() + c, payload.data.end(), z_s.data.begin());
  return {z, z_s};
}

// z = tanh(MLP(o ++ a_prev)): bounded message embedding, shared across agents.
inline Graph::Id encode_obs(Graph& g, const ParamStore& ps, Graph::Id obs_and_prev) {
  Graph::Id h = g.tanh_act(g.linear(obs_and_prev, ps.bind(g, "E_obs.w1"), ps.bind(g, "E_obs.b1")));
  return g.tanh_act(g.linear(h, ps.bind(g, "E_obs.w2"), ps.bind(g, "E_obs.b2")));
}

// One cross-attention integration: the receiver's own embedding forms the
// query; received integrated embeddings form keys and values. Undelivered
// senders are exact zero messages (zero key -> logit 0, zero value), and the
// sequence is padded to kMaxUnits slots that always hold zero messages.
// Output is the attended row projected through one linear layer (unbounded).
inline Graph::Id integrate(Graph& g, const ParamStore& ps, const ModelConfig& cfg,
                           Graph::Id z_query, Graph::Id z_s_kv,
                           std::shared_ptr<const std::vector<uint8_t>> mask) {
  std::vector<Graph::Id> heads;
  for (int h = 0; h < cfg.n_heads; ++h) {
    std::string p = "attn.head" + std::to_string(h);
    Graph::Id q = g.linear(z_query, ps.bind(g, p + ".wq"));
    Graph::Id k = g.linear(z_s_kv, ps.bind(g, p + ".wk"));
    Graph::Id v = g.linear(z_s_kv, ps.bind(g, p + ".wv"));
    heads.push_back(g.attend(q, k, v, mask, cfg.n_agents, kMaxUnits));
  }
  Graph::Id cat = g.concat_cols(heads);
  return g.linear(cat, ps.bind(g, "attn.proj.w"), ps.bind(g, "attn.proj.b"));
}

// R rounds of exchange. Round 0 integrates against the previous timestep's
// integrated embeddings; each later round re-integrates against the fresh
// ones. The per-round masks come from the caller (resampled per round only
// when the channel drops messages). z is encoded once and reused.
inline Graph::Id run_rounds(Graph& g, const ParamStore& ps, const ModelConfig& cfg, Graph::Id z,
                            Graph::Id z_s_prev,
                            const std::vector<std::shared_ptr<const std::vector<uint8_t>>>& masks) {
  if (masks.empty()) throw std::invalid_argument("run_rounds: needs at least one round");
  Graph::Id z_s = z_s_prev;
  for (const auto& mask : masks) z_s = integrate(g, ps, cfg, z, z_s, mask);
  return z_s;
}

// h_s <- GRU(z_s, h_prev); exactly one call per environment timestep.
inline Graph::Id update_hidden(Graph& g, const ParamStore& ps, Graph::Id z_s, Graph::Id h_prev) {
  return gru_cell(g, z_s, h_prev, ps.bind_gru(g, "gru"));
}

// h_0 = W_init * s0 when the initial global state is injected, zeros otherwise.
// `s0_rows` must already be replicated to one row per (batch, agent) pair.
inline Graph::Id init_hidden(Graph& g, const ParamStore& ps, const ModelConfig& cfg,
                             const Tensor* s0_rows, int rows) {
  if (!cfg.use_s0 || s0_rows == nullptr) return g.constant(Tensor({rows, cfg.hidden}));
  if (s0_rows->rows() != rows || s0_rows->cols() != cfg.state_dim)
    throw std::invalid_argument("init_hidden: s0 shape " + s0_rows->str() + " does not match");
  return g.linear(g.constant(*s0_rows), ps.bind(g, "W_init"));
}

// Column mask marking the squashed entries of the egocentric layout
// (health, shield, alive per unit block); positions and type scores stay raw.
inline std::shared_ptr<const std::vector<uint8_t>> cop_squash_columns() {
  auto m = std::make_shared<std::vector<uint8_t>>(kEgoDim, 0);
  for (int u = 0; u < kMaxUnits; ++u)
    for (int k = 2; k <= 4; ++k) (*m)[static_cast<size_t>(u) * kEgoPerUnit + k] = 1;
  return m;
}

inline Graph::Id decode_cop(Graph& g, const ParamStore& ps, Graph::Id h_s) {
  static const auto squash = cop_squash_columns();
  Graph::Id h = g.tanh_act(g.linear(h_s, ps.bind(g, "D_cop.w1"), ps.bind(g, "D_cop.b1")));
  Graph::Id raw = g.linear(h, ps.bind(g, "D_cop.w2"), ps.bind(g, "D_cop.b2"));
  return g.sigmoid_cols(raw, squash);
}

// Explicit reconstruction of the encoder input (observation ++ previous
// action scores) from z; enabled by config.
inline Graph::Id decode_obs(Graph& g, const ParamStore& ps, Graph::Id z) {
  Graph::Id h = g.tanh_act(g.linear(z, ps.bind(g, "D_obs.w1"), ps.bind(g, "D_obs.b1")));
  return g.linear(h, ps.bind(g, "D_obs.w2"), ps.bind(g, "D_obs.b2"));
}

// Replicate each row of `t` `times` consecutive times (broadcast helper for
// per-batch rows feeding per-agent rows).
inline Tensor replicate_rows(const Tensor& t, int times) {
  Tensor out({t.rows() * times, t.cols()});
  for (int r = 0; r < t.rows(); ++r)
    for (int k = 0; k < times; ++k)
      std::copy(&t.data[static_cast<size_t>(r) * t.cols()],
                &t.data[static_cast<size_t>(r) * t.cols()] + t.cols(),
                &out.data[(static_cast<size_t>(r) * times + k) * t.cols()]);
  return out;
}

// --- consensus rendering statistics ------------------------------------------

struct UnitConsensus {
  double mean_x = 0, mean_y = 0;   // grid cells, global frame
  double sigma_x = 0, sigma_y = 0; // population std-dev across agents
  double mean_health = 0, mean_alive = 0;
};

// Translates each alive agent's egocentric prediction into the global frame
// using that agent's ground-truth position, then aggregates per unit.
inline std::vector<UnitConsensus> consensus_stats(
    const std::vector<Tensor>& cop_preds, const std::vector<std::pair<double, double>>& agent_pos,
    double diagonal, int n_units) {
  if (cop_preds.empty()) throw std::invalid_argument("consensus_stats: zero alive agents");
  if (cop_preds.size() != agent_pos.size())
    throw std::invalid_argument("consensus_stats: predictions/positions size mismatch");
  std::vector<UnitConsensus> out(static_cast<size_t>(n_units));
  size_t n = cop_preds.size();
  for (int u = 0; u < n_units; ++u) {
    std::vector<double> xs(n), ys(n);
    UnitConsensus& c = out[static_cast<size_t>(u)];
    for (size_t a = 0; a < n; ++a) {
      const double* blk = &cop_preds[a].data[static_cast<size_t>(u) * kEgoPerUnit];
      xs[a] = blk[0] * diagonal + agent_pos[a].first;
      ys[a] = blk[1] * diagonal + agent_pos[a].second;
      c.mean_x += xs[a];
      c.mean_y += ys[a];
      c.mean_health += blk[2];
      c.mean_alive += blk[4];
    }
    c.mean_x /= n;
    c.mean_y /= n;
    c.mean_health /= n;
    c.mean_alive /= n;
    for (size_t a = 0; a < n; ++a) {
      c.sigma_x += (xs[a] - c.mean_x) * (xs[a] - c.mean_x);
      c.sigma_y += (ys[a] - c.mean_y) * (ys[a] - c.mean_y);
    }
    c.sigma_x = std::sqrt(c.sigma_x / n);
    c.sigma_y = std::sqrt(c.sigma_y / n);
  }
  return out;
}

// Builds the attend-layout mask (receiver-major, {rows*n_agents}) for a batch
// of per-episode communication masks, replicated across all agents of a batch
// row block. `env_masks[b]` is the n_agents^2 mask from comm_mask().
inline std::shared_ptr<const std::vector<uint8_t>> attend_mask(
    const std::vector<std::vector<uint8_t>>& env_masks, int n_agents) {
  auto m = std::make_shared<std::vector<uint8_t>>();
  m->reserve(env_masks.size() * static_cast<size_t>(n_agents) * n_agents);
  for (const auto& em : env_masks) {
    if (static_cast<int>(em.size()) != n_agents * n_agents)
      throw std::invalid_argument("attend_mask: bad env mask size");
    m->insert(m->end(), em.begin(), em.end());
  }
  return m;
}

} // namespace copnet
