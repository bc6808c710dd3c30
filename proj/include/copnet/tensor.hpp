#pragma once

// Dense row-major tensors (rank 1 or 2) over double, plus the deterministic
// RNG used everywhere. All randomness in the project flows through Rng so
// that a fixed seed reproduces runs bit-for-bit.

#include <cstdint>
#include <cstring>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <algorithm>
#include <vector>

namespace copnet {

struct Tensor {
  std::vector<int> shape;   // rank 1 or 2, all dims > 0 (empty = unset)
  std::vector<double> data; // row-major

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  static int64_t numel_of(const std::vector<int>& s) {
    if (s.empty() || s.size() > 2)
      throw std::invalid_argument("tensor: rank must be 1 or 2, got " + shape_str(s));
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive dim in " + shape_str(s));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream o;
    o << "{";
    for (size_t i = 0; i < s.size(); ++i) o << (i ? "," : "") << s[i];
    o << "}";
    return o.str();
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  // rows/cols view: rank-1 {n} reads as a single row of n columns.
  int rows() const { return rank() == 2 ? shape[0] : 1; }
  int cols() const { return rank() == 2 ? shape[1] : shape[0]; }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  std::string str() const { return shape_str(shape); }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

// Largest |a-b| over all elements; shapes must match.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("max_abs_diff: shape mismatch " + a.str() + " vs " + b.str());
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

// --- deterministic RNG ---------------------------------------------------
// splitmix64 for seeding/stream derivation, xoshiro-free: we keep a single
// splitmix64 core as the generator itself. It is tiny, fast, and its output
// is fully specified (unlike std::uniform_* distributions, which are
// implementation-defined and would break cross-build determinism).

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x6a09e667f3bcc908ULL) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    // rejection sampling to avoid modulo bias
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do { v = next_u64(); } while (v >= limit);
    return static_cast<int>(v % un);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal via Box-Muller (deterministic, stateless pairs)
  double normal() {
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Derive an independent substream. fork(tag) on equal states with equal
  // tags yields equal streams; different tags decorrelate.
  Rng fork(uint64_t tag) const {
    uint64_t s = state_;
    uint64_t a = splitmix64(s);
    s ^= tag * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL;
    uint64_t b = splitmix64(s);
    return Rng(a ^ (b << 1) ^ tag);
  }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

// Stable 64-bit hash combiner for seeding substreams from structured keys.
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(x);
}

} // namespace copnet
