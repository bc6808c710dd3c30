#pragma once

// Named parameter storage, Adam, global-norm clipping, and the
// finite-difference gradient checker used by tests and the gradcheck CLI.

#include "copnet/graph.hpp"

#include <functional>
#include <map>

namespace copnet {

class ParamStore {
 public:
  struct Entry {
    Tensor value;
    bool trainable = true;
  };

  Tensor& add(const std::string& name, Tensor value, bool trainable = true) {
    auto [it, fresh] = entries_.emplace(name, Entry{std::move(value), trainable});
    if (!fresh) throw std::invalid_argument("param store: duplicate name " + name);
    return it->second.value;
  }

  // Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init for linear maps.
  Tensor& add_linear(const std::string& name, int out, int in, Rng& rng) {
    Tensor t({out, in});
    double bound = std::sqrt(1.0 / in);
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return add(name, std::move(t));
  }

  Tensor& add_bias(const std::string& name, int n) { return add(name, Tensor({n})); }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("param store: no parameter " + name);
    return it->second.value;
  }
  const Tensor& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  bool trainable(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("param store: no parameter " + name);
    return it->second.trainable;
  }

  Graph::Id bind(Graph& g, const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("param store: no parameter " + name);
    return g.param(name, it->second.value, it->second.trainable);
  }

  GruParams bind_gru(Graph& g, const std::string& prefix) const {
    return GruParams{bind(g, prefix + ".wr"), bind(g, prefix + ".ur"), bind(g, prefix + ".br"),
                     bind(g, prefix + ".wu"), bind(g, prefix + ".uu"), bind(g, prefix + ".bu"),
                     bind(g, prefix + ".wc"), bind(g, prefix + ".uc"), bind(g, prefix + ".bc")};
  }

  void add_gru(const std::string& prefix, int x_dim, int h_dim, Rng& rng) {
    for (const char* gate : {"r", "u", "c"}) {
      add_linear(prefix + ".w" + gate, h_dim, x_dim, rng);
      add_linear(prefix + ".u" + gate, h_dim, h_dim, rng);
      add_bias(prefix + ".b" + gate, h_dim);
    }
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }

  ParamStore clone() const { return *this; }

  // Hard copy of every entry in `src` whose name exists here with the same shape.
  void copy_from(const ParamStore& src) {
    for (auto& [name, e] : entries_) {
      auto it = src.entries_.find(name);
      if (it == src.entries_.end())
        throw std::out_of_range("param store: copy_from missing " + name);
      if (!e.value.same_shape(it->second.value))
        throw std::invalid_argument("param store: copy_from shape mismatch on " + name);
      e.value.data = it->second.value.data;
    }
  }

 private:
  std::map<std::string, Entry> entries_;
};

using GradMap = std::map<std::string, Tensor>;

inline void accumulate_grads(GradMap& into, const GradMap& from) {
  for (const auto& [name, g] : from) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g);
    } else {
      if (!it->second.same_shape(g))
        throw std::invalid_argument("grad accumulate: shape mismatch on " + name);
      for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
    }
  }
}

// Scales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns the pre-clip norm.
inline double clip_global_norm(GradMap& grads, double max_norm) {
  if (max_norm <= 0) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (double v : g.data) sq += v * v;
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (auto& [name, g] : grads)
      for (auto& v : g.data) v *= s;
  }
  return norm;
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::map<std::string, Tensor> m, v;
};

// One Adam update with bias correction over every trainable parameter that
// has a gradient entry.
inline void adam_step(ParamStore& params, const GradMap& grads, AdamState& st) {
  st.step += 1;
  double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, entry] : params.entries()) {
    if (!entry.trainable) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (!g.same_shape(entry.value))
      throw std::invalid_argument("adam_step: grad shape " + g.str() + " vs param " +
                                  entry.value.str() + " for " + name);
    Tensor& m = st.m.try_emplace(name, zeros_like(entry.value)).first->second;
    Tensor& v = st.v.try_emplace(name, zeros_like(entry.value)).first->second;
    for (size_t i = 0; i < g.data.size(); ++i) {
      m.data[i] = st.beta1 * m.data[i] + (1.0 - st.beta1) * g.data[i];
      v.data[i] = st.beta2 * v.data[i] + (1.0 - st.beta2) * g.data[i] * g.data[i];
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      entry.value.data[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

// --- gradient checking ----------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst; // "name[i]" of the worst element
  int checked = 0;
};

// fn builds a scalar loss over the store's current values and returns its
// value (typically Graph g(...); ...; return g.val(loss)[0]). Analytic
// gradients come from fn_grad, which must populate a GradMap for the same
// loss. Central differences with step eps; relative error
// |a-f| / max(|a|+|f|, 1e-6). Checks every element unless
// max_checks_per_param caps it (then a seeded subset per tensor).
inline GradCheckReport grad_check(
    ParamStore& params,
    const std::function<double()>& fn,
    const GradMap& analytic,
    double eps = 1e-5,
    int max_checks_per_param = 0,
    uint64_t sample_seed = 17) {
  GradCheckReport rep;
  for (auto& [name, entry] : params.entries()) {
    if (!entry.trainable) continue;
    auto git = analytic.find(name);
    const Tensor* ga = git == analytic.end() ? nullptr : &git->second;
    int64_t n = entry.value.numel();
    std::vector<int64_t> idx;
    if (max_checks_per_param > 0 && n > max_checks_per_param) {
      Rng r(hash_combine(sample_seed, std::hash<std::string>{}(name)));
      for (int i = 0; i < max_checks_per_param; ++i)
        idx.push_back(r.uniform_int(static_cast<int>(n)));
    } else {
      idx.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    }
    for (int64_t i : idx) {
      double saved = entry.value.data[static_cast<size_t>(i)];
      entry.value.data[static_cast<size_t>(i)] = saved + eps;
      double fp = fn();
      entry.value.data[static_cast<size_t>(i)] = saved - eps;
      double fm = fn();
      entry.value.data[static_cast<size_t>(i)] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite function value at " + name +
                                 "[" + std::to_string(i) + "]");
      double fd = (fp - fm) / (2.0 * eps);
      double an = ga ? ga->data[static_cast<size_t>(i)] : 0.0;
      double rel = std::fabs(an - fd) / std::max(std::fabs(an) + std::fabs(fd), 1e-6);
      rep.checked += 1;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

// Convenience wrapper: builds the graph once for analytic gradients, then
// re-evaluates through the same builder for finite differences.
inline GradCheckReport grad_check(
    ParamStore& params,
    const std::function<Graph::Id(Graph&)>& build,
    double eps = 1e-5,
    int max_checks_per_param = 0,
    uint64_t sample_seed = 17) {
  Graph g;
  Graph::Id loss = build(g);
  if (g.val(loss).numel() != 1)
    throw std::invalid_argument("grad_check: loss must be scalar");
  g.backward(loss);
  GradMap analytic = g.param_grads();
  auto fn = [&]() {
    Graph h;
    return h.val(build(h))[0];
  };
  return grad_check(params, fn, analytic, eps, max_checks_per_param, sample_seed);
}

} // namespace copnet
