#include "copnet/model.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace copnet;

namespace {

ModelConfig toy_config(int agents = 3, bool s0 = true, bool dobs = true) {
  ModelConfig cfg;
  cfg.n_agents = agents;
  cfg.n_actions = 6;
  cfg.obs_dim = 20; // toy layouts keep the graph small
  cfg.state_dim = 15;
  cfg.cop_dim = kEgoDim;
  cfg.rounds = 2;
  cfg.use_s0 = s0;
  cfg.use_dobs = dobs;
  return cfg;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-scale, scale);
  return t;
}

std::shared_ptr<std::vector<uint8_t>> random_mask(int n, Rng& rng, double p_drop) {
  auto m = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n) * n, 1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && rng.bernoulli(p_drop)) (*m)[static_cast<size_t>(i) * n + j] = 0;
  return m;
}

// Independent dense reference for one integration: builds the full zero-padded
// kMaxUnits-slot sequences (received z for queries, received z_s for keys and
// values), runs textbook scaled dot-product attention per head, takes the
// receiver's own row, concatenates heads, applies the output projection.
// Agrees with the fused path whenever the mask diagonal is true.
Tensor integrate_reference(const ParamStore& ps, const ModelConfig& cfg, const Tensor& z,
                           const Tensor& z_s, const std::vector<uint8_t>& mask) {
  int A = cfg.n_agents, C = cfg.comm_dim, D = cfg.head_dim();
  auto matvec = [](const Tensor& w, const std::vector<double>& x) {
    std::vector<double> y(static_cast<size_t>(w.rows()), 0.0);
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) y[static_cast<size_t>(r)] += w.at(r, c) * x[static_cast<size_t>(c)];
    return y;
  };
  Tensor out({A, C});
  for (int i = 0; i < A; ++i) {
    std::vector<double> concat;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Tensor& wq = ps.at("attn.head" + std::to_string(h) + ".wq");
      const Tensor& wk = ps.at("attn.head" + std::to_string(h) + ".wk");
      const Tensor& wv = ps.at("attn.head" + std::to_string(h) + ".wv");
      // full query sequence from received z's; only row i is consumed
      std::vector<std::vector<double>> c_rows(kMaxUnits, std::vector<double>(static_cast<size_t>(C), 0.0));
      std::vector<std::vector<double>> cs_rows(kMaxUnits, std::vector<double>(static_cast<size_t>(C), 0.0));
      for (int j = 0; j < A; ++j) {
        if (!mask[static_cast<size_t>(i) * A + j]) continue;
        for (int c = 0; c < C; ++c) {
          c_rows[static_cast<size_t>(j)][static_cast<size_t>(c)] = z.at(j, c);
          cs_rows[static_cast<size_t>(j)][static_cast<size_t>(c)] = z_s.at(j, c);
        }
      }
      std::vector<double> q = matvec(wq, c_rows[static_cast<size_t>(i)]);
      std::vector<double> logits(kMaxUnits), weights(kMaxUnits);
      for (int j = 0; j < kMaxUnits; ++j) {
        std::vector<double> k = matvec(wk, cs_rows[static_cast<size_t>(j)]);
        double dot = 0;
        for (int d = 0; d < D; ++d) dot += q[static_cast<size_t>(d)] * k[static_cast<size_t>(d)];
        logits[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(D));
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double s = 0;
      for (int j = 0; j < kMaxUnits; ++j) {
        weights[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
        s += weights[static_cast<size_t>(j)];
      }
      for (auto& w : weights) w /= s;
      std::vector<double> head(static_cast<size_t>(D), 0.0);
      for (int j = 0; j < kMaxUnits; ++j) {
        std::vector<double> v = matvec(wv, cs_rows[static_cast<size_t>(j)]);
        for (int d = 0; d < D; ++d) head[static_cast<size_t>(d)] += weights[static_cast<size_t>(j)] * v[static_cast<size_t>(d)];
      }
      concat.insert(concat.end(), head.begin(), head.end());
    }
    const Tensor& pw = ps.at("attn.proj.w");
    const Tensor& pb = ps.at("attn.proj.b");
    std::vector<double> y = matvec(pw, concat);
    for (int c = 0; c < C; ++c) out.at(i, c) = y[static_cast<size_t>(c)] + pb[c];
  }
  return out;
}

} // namespace

// --- parameter store layout ---------------------------------------------------

TEST(Params, FixedLayoutAndDeterministicInit) {
  ModelConfig cfg = toy_config();
  ParamStore a, b, c;
  init_params(a, cfg, 7);
  init_params(b, cfg, 7);
  init_params(c, cfg, 8);
  EXPECT_EQ(a.size(), b.size());
  bool any_diff = false;
  for (const auto& [name, e] : a.entries()) {
    ASSERT_TRUE(b.has(name));
    EXPECT_EQ(std::memcmp(e.value.data.data(), b.at(name).data.data(),
                          e.value.data.size() * sizeof(double)), 0) << name;
    any_diff = any_diff || max_abs_diff(e.value, c.at(name)) > 0;
  }
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(a.at("E_obs.w2").rows(), 32);
  EXPECT_EQ(a.at("attn.head0.wq").rows(), 8);
  EXPECT_EQ(a.at("attn.head3.wv").cols(), 32);
  EXPECT_EQ(a.at("gru.wr").cols(), 32);
  EXPECT_EQ(a.at("gru.ur").rows(), 64);
  EXPECT_EQ(a.at("W_init").rows(), 64);
  EXPECT_EQ(a.at("W_init").cols(), cfg.state_dim);
  EXPECT_EQ(a.at("D_cop.w2").rows(), kEgoDim);
  EXPECT_EQ(a.at("agent.q.w1").cols(), 128);
  EXPECT_EQ(a.at("mixer.hw.w").rows(), cfg.n_agents);
  // biases start at zero
  for (double v : a.at("E_obs.b1").data) EXPECT_DOUBLE_EQ(v, 0.0);
}

// --- encoder ---------------------------------------------------------------------

TEST(EncodeObs, BoundedSharedAndSized) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 11);
  Rng rng(3);
  Graph g;
  Tensor x = random_tensor({4, cfg.in_dim()}, rng, 3.0);
  // rows 2 and 3 are identical inputs from "different agents"
  for (int c = 0; c < cfg.in_dim(); ++c) x.at(3, c) = x.at(2, c);
  Graph::Id z = encode_obs(g, ps, g.constant(x));
  const Tensor& Z = g.val(z);
  ASSERT_EQ(Z.rows(), 4);
  ASSERT_EQ(Z.cols(), 32);
  for (double v : Z.data) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  for (int c = 0; c < 32; ++c) EXPECT_DOUBLE_EQ(Z.at(2, c), Z.at(3, c));
  EXPECT_THROW(encode_obs(g, ps, g.constant(Tensor({2, cfg.in_dim() + 1}))),
               std::invalid_argument);
}

// --- message type -----------------------------------------------------------------

TEST(ComposeMessage, PayloadAndRoundTrip) {
  Rng rng(5);
  Tensor z = random_tensor({32}, rng), z_s = random_tensor({32}, rng);
  Message m = compose_message(z, z_s, 2);
  EXPECT_EQ(m.sender, 2);
  Tensor p = m.payload();
  ASSERT_EQ(p.numel(), 64);
  auto [z2, zs2] = split_payload(p);
  EXPECT_DOUBLE_EQ(max_abs_diff(z, z2), 0.0);
  EXPECT_DOUBLE_EQ(max_abs_diff(z_s, zs2), 0.0);
  EXPECT_THROW(compose_message(Tensor({8}), Tensor({4}), 0), std::invalid_argument);
}

// --- integration vs dense oracle ----------------------------------------------------

TEST(Integrate, MatchesBruteForceOracleOnRandomInputs) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 21);
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor z = random_tensor({cfg.n_agents, cfg.comm_dim}, rng);
    Tensor z_s = random_tensor({cfg.n_agents, cfg.comm_dim}, rng, 2.0);
    auto mask = random_mask(cfg.n_agents, rng, 0.4);
    Graph g;
    Graph::Id out = integrate(g, ps, cfg, g.constant(z), g.constant(z_s), mask);
    Tensor ref = integrate_reference(ps, cfg, z, z_s, *mask);
    EXPECT_LT(max_abs_diff(g.val(out), ref), 1e-10) << "trial " << trial;
  }
}

TEST(Integrate, SingleNonzeroSenderMatchesOracle) {
  ModelConfig cfg = toy_config(4);
  ParamStore ps;
  init_params(ps, cfg, 23);
  Rng rng(37);
  Tensor z({cfg.n_agents, cfg.comm_dim});
  Tensor z_s({cfg.n_agents, cfg.comm_dim});
  for (int c = 0; c < cfg.comm_dim; ++c) {
    z.at(0, c) = rng.uniform(-1, 1); // only agent 0 transmits anything nonzero
    z_s.at(0, c) = rng.uniform(-1, 1);
  }
  auto mask = std::make_shared<std::vector<uint8_t>>(16, 1);
  Graph g;
  Graph::Id out = integrate(g, ps, cfg, g.constant(z), g.constant(z_s), mask);
  Tensor ref = integrate_reference(ps, cfg, z, z_s, *mask);
  EXPECT_LT(max_abs_diff(g.val(out), ref), 1e-10);
}

TEST(Integrate, ZeroInputsAndZeroBiasesGiveZero) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 29);
  ps.at("attn.proj.b").fill(0.0); // the one bias that is deliberately nonzero at init
  auto mask = std::make_shared<std::vector<uint8_t>>(9, 1);
  Graph g;
  Graph::Id out = integrate(g, ps, cfg, g.constant(Tensor({3, 32})),
                            g.constant(Tensor({3, 32})), mask);
  EXPECT_DOUBLE_EQ(max_abs_diff(g.val(out), Tensor({3, 32})), 0.0);
}

TEST(Integrate, AttentionRowsSumToOneOverManyInputs) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 31);
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor z = random_tensor({cfg.n_agents, cfg.comm_dim}, rng, 4.0);
    Tensor z_s = random_tensor({cfg.n_agents, cfg.comm_dim}, rng, 4.0);
    auto mask = random_mask(cfg.n_agents, rng, 0.3);
    Graph g;
    Graph::Id q = g.linear(g.constant(z), ps.bind(g, "attn.head0.wq"));
    Graph::Id k = g.linear(g.constant(z_s), ps.bind(g, "attn.head0.wk"));
    Graph::Id v = g.linear(g.constant(z_s), ps.bind(g, "attn.head0.wv"));
    Graph::Id att = g.attend(q, k, v, mask, cfg.n_agents, kMaxUnits);
    const Tensor& w = g.aux(att);
    ASSERT_EQ(w.cols(), kMaxUnits);
    for (int r = 0; r < w.rows(); ++r) {
      double s = 0;
      for (int c = 0; c < w.cols(); ++c) s += w.at(r, c);
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
  }
}

// --- rounds ---------------------------------------------------------------------------

TEST(RunRounds, SingleRoundEqualsOneIntegrate) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 43);
  Rng rng(47);
  Tensor z = random_tensor({3, 32}, rng);
  Tensor zs = random_tensor({3, 32}, rng);
  auto mask = random_mask(3, rng, 0.3);
  Graph g;
  Graph::Id a = run_rounds(g, ps, cfg, g.constant(z), g.constant(zs), {mask});
  Graph::Id b = integrate(g, ps, cfg, g.constant(z), g.constant(zs), mask);
  EXPECT_DOUBLE_EQ(max_abs_diff(g.val(a), g.val(b)), 0.0);
  EXPECT_THROW(run_rounds(g, ps, cfg, g.constant(z), g.constant(zs), {}),
               std::invalid_argument);
}

TEST(RunRounds, FullyJammedAgentIsBitIdenticalUnderOthersPerturbation) {
  // agent 0 receives only its own messages; perturbing other agents'
  // observations must not change agent 0's integrated embedding at all.
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 53);
  Rng rng(59);
  Tensor obs = random_tensor({3, cfg.in_dim()}, rng);
  Tensor zs_prev = random_tensor({3, 32}, rng);
  auto diag_mask = std::make_shared<std::vector<uint8_t>>(9, 0);
  for (int i = 0; i < 3; ++i) (*diag_mask)[static_cast<size_t>(i) * 3 + i] = 1;
  auto run = [&](const Tensor& o) {
    Graph g;
    Graph::Id z = encode_obs(g, ps, g.constant(o));
    Graph::Id zs = run_rounds(g, ps, cfg, z, g.constant(zs_prev),
                              {diag_mask, diag_mask, diag_mask});
    Tensor out({1, 32});
    for (int c = 0; c < 32; ++c) out.at(0, c) = g.val(zs).at(0, c);
    return out;
  };
  Tensor base = run(obs);
  Tensor perturbed_obs = obs;
  for (int c = 0; c < cfg.in_dim(); ++c) {
    perturbed_obs.at(1, c) += rng.uniform(-2, 2);
    perturbed_obs.at(2, c) += rng.uniform(-2, 2);
  }
  Tensor after = run(perturbed_obs);
  EXPECT_EQ(std::memcmp(base.data.data(), after.data.data(), sizeof(double) * 32), 0);
}

TEST(RunRounds, MoreRoundsPropagateBeyondDirectNeighbors) {
  // Chain topology 0<-1<-2 (plus self loops). A fresh observation enters an
  // agent's own transmitted embedding in the round where it acts as the
  // query, so it travels one hop per extra round: agent 2's observation can
  // reach agent 0 with three rounds but not with two.
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 61);
  Rng rng(67);
  Tensor obs = random_tensor({3, cfg.in_dim()}, rng);
  Tensor zs_prev = random_tensor({3, 32}, rng); // generic mid-episode history
  auto chain = std::make_shared<std::vector<uint8_t>>(9, 0);
  auto link = [&](int i, int j) { (*chain)[static_cast<size_t>(i) * 3 + j] = 1; };
  link(0, 0); link(1, 1); link(2, 2); link(0, 1); link(1, 2);
  auto run = [&](const Tensor& o, int rounds) {
    Graph g;
    Graph::Id z = encode_obs(g, ps, g.constant(o));
    std::vector<std::shared_ptr<const std::vector<uint8_t>>> masks(
        static_cast<size_t>(rounds), chain);
    Graph::Id zs = run_rounds(g, ps, cfg, z, g.constant(zs_prev), masks);
    Tensor out({1, 32});
    for (int c = 0; c < 32; ++c) out.at(0, c) = g.val(zs).at(0, c);
    return out;
  };
  Tensor perturbed = obs;
  for (int c = 0; c < cfg.in_dim(); ++c) perturbed.at(2, c) += 1.0;
  EXPECT_DOUBLE_EQ(max_abs_diff(run(obs, 2), run(perturbed, 2)), 0.0);
  EXPECT_GT(max_abs_diff(run(obs, 3), run(perturbed, 3)), 1e-9);
  // agent 1 (direct neighbor of 2) is already affected with two rounds
  auto run_agent1 = [&](const Tensor& o) {
    Graph g;
    Graph::Id z = encode_obs(g, ps, g.constant(o));
    Graph::Id zs = run_rounds(g, ps, cfg, z, g.constant(zs_prev), {chain, chain});
    Tensor out({1, 32});
    for (int c = 0; c < 32; ++c) out.at(0, c) = g.val(zs).at(1, c);
    return out;
  };
  EXPECT_GT(max_abs_diff(run_agent1(obs), run_agent1(perturbed)), 1e-9);
}

// --- recurrent state ---------------------------------------------------------------------

TEST(UpdateHidden, ZeroParametersHalvePreviousState) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 71);
  for (const char* g : {"r", "u", "c"}) {
    ps.at(std::string("gru.w") + g).fill(0.0);
    ps.at(std::string("gru.u") + g).fill(0.0);
    ps.at(std::string("gru.b") + g).fill(0.0);
  }
  Rng rng(73);
  Tensor h = random_tensor({3, 64}, rng);
  Tensor zs = random_tensor({3, 32}, rng);
  Graph g;
  Graph::Id h2 = update_hidden(g, ps, g.constant(zs), g.constant(h));
  Tensor expect = h;
  for (auto& v : expect.data) v *= 0.5;
  EXPECT_LT(max_abs_diff(g.val(h2), expect), 1e-15);
}

TEST(InitHidden, AbsentAndZeroWeightCases) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 79);
  Graph g;
  // config without s0: always zeros
  ModelConfig no_s0 = cfg;
  no_s0.use_s0 = false;
  Graph::Id h0 = init_hidden(g, ps, no_s0, nullptr, 6);
  EXPECT_DOUBLE_EQ(max_abs_diff(g.val(h0), Tensor({6, 64})), 0.0);
  // s0 present but W_init zero: still zeros
  Rng rng(83);
  Tensor s0 = random_tensor({6, cfg.state_dim}, rng);
  ps.at("W_init").fill(0.0);
  Graph::Id hz = init_hidden(g, ps, cfg, &s0, 6);
  EXPECT_DOUBLE_EQ(max_abs_diff(g.val(hz), Tensor({6, 64})), 0.0);
  // layout mismatch
  Tensor bad({6, cfg.state_dim + 1});
  EXPECT_THROW(init_hidden(g, ps, cfg, &bad, 6), std::invalid_argument);
  // nonzero W_init with s0 present produces nonzero state
  init_params(ps = ParamStore(), cfg, 89);
  Graph g2;
  Graph::Id hn = init_hidden(g2, ps, cfg, &s0, 6);
  EXPECT_GT(max_abs_diff(g2.val(hn), Tensor({6, 64})), 0.0);
}

// --- decoders ------------------------------------------------------------------------------

TEST(DecodeCop, LayoutAndSquashing) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 97);
  Rng rng(101);
  Graph g;
  Tensor h = random_tensor({5, 64}, rng, 10.0);
  Graph::Id pred = decode_cop(g, ps, g.constant(h));
  const Tensor& P = g.val(pred);
  ASSERT_EQ(P.rows(), 5);
  ASSERT_EQ(P.cols(), kEgoDim);
  for (int r = 0; r < P.rows(); ++r) {
    for (int u = 0; u < kMaxUnits; ++u) {
      for (int k = 2; k <= 4; ++k) {
        double v = P.at(r, u * kEgoPerUnit + k);
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
    for (int c = 0; c < P.cols(); ++c) EXPECT_TRUE(std::isfinite(P.at(r, c)));
  }
}

TEST(DecodeObs, ZeroCaseAndSenderIndependence) {
  ModelConfig cfg = toy_config();
  ParamStore ps;
  init_params(ps, cfg, 103);
  Graph g;
  // zero z with zero biases reconstructs zero
  ParamStore zeroed = ps.clone();
  zeroed.at("D_obs.b1").fill(0.0);
  zeroed.at("D_obs.b2").fill(0.0);
  Graph::Id rec0 = decode_obs(g, zeroed, g.constant(Tensor({2, 32})));
  EXPECT_DOUBLE_EQ(max_abs_diff(g.val(rec0), Tensor({2, cfg.in_dim()})), 0.0);
  // any receiver holding the shared store decodes identically
  Rng rng(107);
  Tensor z = random_tensor({1, 32}, rng);
  Graph ga, gb;
  ParamStore receiver_copy = ps.clone();
  Graph::Id ra = decode_obs(ga, ps, ga.constant(z));
  Graph::Id rb = decode_obs(gb, receiver_copy, gb.constant(z));
  EXPECT_EQ(std::memcmp(ga.val(ra).data.data(), gb.val(rb).data.data(),
                        sizeof(double) * static_cast<size_t>(cfg.in_dim())), 0);
}

// --- gradient flow ---------------------------------------------------------------------------

TEST(Gradients, EveryCommParameterReceivesGradientOnToyEpisode) {
  ModelConfig cfg = toy_config(3, true, true);
  ParamStore ps;
  init_params(ps, cfg, 109);
  Rng rng(113);
  Graph g;
  int rows = cfg.n_agents;
  Tensor s0 = replicate_rows(random_tensor({1, cfg.state_dim}, rng), cfg.n_agents);
  Graph::Id h_s = init_hidden(g, ps, cfg, &s0, rows);
  Graph::Id z_s_prev = g.constant(Tensor({rows, cfg.comm_dim}));
  auto mask = random_mask(cfg.n_agents, rng, 0.2);
  Graph::Id loss = -1;
  for (int t = 0; t < 2; ++t) {
    Tensor x = random_tensor({rows, cfg.in_dim()}, rng);
    Graph::Id z = encode_obs(g, ps, g.constant(x));
    Graph::Id z_s = run_rounds(g, ps, cfg, z, z_s_prev, {mask, mask});
    h_s = update_hidden(g, ps, z_s, h_s);
    Graph::Id pred = decode_cop(g, ps, h_s);
    Graph::Id rec = decode_obs(g, ps, z);
    Tensor target = random_tensor({rows, cfg.cop_dim}, rng, 0.5);
    Graph::Id err = g.sum_all(g.square(g.sub(pred, g.constant(target))));
    Graph::Id rerr = g.sum_all(g.square(g.sub(rec, g.constant(x))));
    Graph::Id both = g.add(err, rerr);
    loss = loss < 0 ? both : g.add(loss, both);
    z_s_prev = z_s;
  }
  g.backward(loss);
  GradMap grads = g.param_grads();
  for (const auto& [name, e] : ps.entries()) {
    bool comm_param = name.rfind("agent.", 0) != 0 && name.rfind("mixer.", 0) != 0;
    if (!comm_param) continue;
    double mx = 0;
    for (double v : grads.at(name).data) mx = std::max(mx, std::abs(v));
    EXPECT_GT(mx, 0.0) << "dead parameter: " << name;
  }
}

TEST(Gradients, FullCommStackMatchesFiniteDifferences) {
  ModelConfig cfg;
  cfg.n_agents = 2;
  cfg.n_actions = 3;
  cfg.obs_dim = 7;
  cfg.state_dim = 6;
  cfg.cop_dim = kEgoDim;
  cfg.comm_dim = 8;
  cfg.n_heads = 2;
  cfg.hidden = 8;
  cfg.enc_hidden = 10;
  cfg.rounds = 2;
  cfg.use_s0 = true;
  cfg.use_dobs = true;
  ParamStore ps;
  init_params(ps, cfg, 127);
  Rng rng(131);
  Tensor x0 = random_tensor({2, cfg.in_dim()}, rng);
  Tensor x1 = random_tensor({2, cfg.in_dim()}, rng);
  Tensor s0 = replicate_rows(random_tensor({1, cfg.state_dim}, rng), 2);
  Tensor target = random_tensor({2, cfg.cop_dim}, rng, 0.5);
  auto mask = random_mask(2, rng, 0.3);
  auto build = [&](Graph& g) -> Graph::Id {
    Graph::Id h_s = init_hidden(g, ps, cfg, &s0, 2);
    Graph::Id z_s_prev = g.constant(Tensor({2, cfg.comm_dim}));
    Graph::Id loss = -1;
    for (const Tensor* x : {&x0, &x1}) {
      Graph::Id z = encode_obs(g, ps, g.constant(*x));
      Graph::Id z_s = run_rounds(g, ps, cfg, z, z_s_prev, {mask, mask});
      h_s = update_hidden(g, ps, z_s, h_s);
      Graph::Id pred = decode_cop(g, ps, h_s);
      Graph::Id rec = decode_obs(g, ps, z);
      Graph::Id err = g.add(g.sum_all(g.square(g.sub(pred, g.constant(target)))),
                            g.sum_all(g.square(g.sub(rec, g.constant(*x)))));
      loss = loss < 0 ? err : g.add(loss, err);
      z_s_prev = z_s;
    }
    return loss;
  };
  GradCheckReport rep = grad_check(ps, build, 1e-4, 6, 137);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "worst: " << rep.worst;
}

// --- consensus statistics -------------------------------------------------------------------

TEST(Consensus, HandComputedSpreadAndDegenerateCases) {
  double diag = 10.0;
  // two agents at x = 0 and x = 2 predicting unit 0 at absolute x = 4 and 6
  Tensor p1({kEgoDim}), p2({kEgoDim});
  p1.data[0] = 4.0 / diag;       // agent 1 at origin
  p2.data[0] = 4.0 / diag;       // agent 2 at x=2 predicts 2 + 4 = 6
  p1.data[2] = 0.5;
  p2.data[2] = 0.7;
  auto stats = consensus_stats({p1, p2}, {{0, 0}, {2, 0}}, diag, 1);
  ASSERT_EQ(stats.size(), 1u);
  EXPECT_DOUBLE_EQ(stats[0].mean_x, 5.0);
  EXPECT_DOUBLE_EQ(stats[0].sigma_x, 1.0); // population std-dev
  EXPECT_DOUBLE_EQ(stats[0].sigma_y, 0.0);
  EXPECT_NEAR(stats[0].mean_health, 0.6, 1e-15);
  // single agent: zero spread
  auto solo = consensus_stats({p1}, {{0, 0}}, diag, 1);
  EXPECT_DOUBLE_EQ(solo[0].sigma_x, 0.0);
  // identical predictions from identical positions: zero spread
  auto same = consensus_stats({p1, p1}, {{1, 1}, {1, 1}}, diag, 1);
  EXPECT_DOUBLE_EQ(same[0].sigma_x, 0.0);
  EXPECT_DOUBLE_EQ(same[0].sigma_y, 0.0);
  EXPECT_THROW(consensus_stats({}, {}, diag, 1), std::invalid_argument);
}

TEST(Consensus, AgreesAcrossAgentsWhenPredictionsAreConsistent) {
  // all agents predict the true unit position from their own frames: sigma = 0
  double diag = 22.0;
  std::vector<std::pair<double, double>> pos = {{1, 2}, {5, 9}, {7, 3}};
  double ux = 4, uy = 6;
  std::vector<Tensor> preds;
  for (auto& [ax, ay] : pos) {
    Tensor p({kEgoDim});
    p.data[0] = (ux - ax) / diag;
    p.data[1] = (uy - ay) / diag;
    preds.push_back(p);
  }
  auto stats = consensus_stats(preds, pos, diag, 1);
  EXPECT_NEAR(stats[0].mean_x, ux, 1e-12);
  EXPECT_NEAR(stats[0].mean_y, uy, 1e-12);
  EXPECT_NEAR(stats[0].sigma_x, 0.0, 1e-12);
  EXPECT_NEAR(stats[0].sigma_y, 0.0, 1e-12);
}
