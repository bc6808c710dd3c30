#pragma once

// Binary checkpoints: online parameters, target-network copies under a
// "target." prefix, and optional optimizer accumulators under "adam.".
// Layout (little-endian): magic "COPCKPT1", u32 config-echo length + bytes,
// i64 step counter, u8 optimizer flag, u32 tensor count, then per tensor
// u32 name length + name + u32 rank + u32 dims + float32 payload.

#include "copnet/optim.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace copnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format requires a little-endian host");

struct Checkpoint {
  std::string config_echo;
  int64_t step = 0;
  bool has_adam = false;
  std::map<std::string, Tensor> tensors;
};

namespace detail {

constexpr char kCkptMagic[8] = {'C', 'O', 'P', 'C', 'K', 'P', 'T', '1'};

inline void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_i64(std::ostream& out, int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline uint32_t read_u32(std::istream& in, const char* what) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error(std::string("checkpoint: truncated reading ") + what);
  return v;
}
inline int64_t read_i64(std::istream& in, const char* what) {
  int64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error(std::string("checkpoint: truncated reading ") + what);
  return v;
}

inline void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  write_u32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, static_cast<uint32_t>(t.shape.size()));
  for (int d : t.shape) write_u32(out, static_cast<uint32_t>(d));
  std::vector<float> buf(t.data.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline std::pair<std::string, Tensor> read_tensor(std::istream& in) {
  uint32_t name_len = read_u32(in, "tensor name length");
  if (name_len == 0 || name_len > 4096)
    throw std::runtime_error("checkpoint: implausible tensor name length");
  std::string name(name_len, '\0');
  if (!in.read(name.data(), name_len))
    throw std::runtime_error("checkpoint: truncated reading tensor name");
  uint32_t rank = read_u32(in, "tensor rank");
  if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + name);
  std::vector<int> shape(rank);
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = read_u32(in, "tensor dim");
    if (d == 0 || d > (1u << 24))
      throw std::runtime_error("checkpoint: implausible dim for " + name);
    shape[i] = static_cast<int>(d);
    numel *= d;
  }
  if (numel > (1 << 28)) throw std::runtime_error("checkpoint: implausible size for " + name);
  std::vector<float> buf(static_cast<size_t>(numel));
  if (!in.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw std::runtime_error("checkpoint: truncated reading payload of " + name);
  Tensor t(shape);
  for (size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<double>(buf[i]);
  return {std::move(name), std::move(t)};
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore& online,
                            const ParamStore& target, const AdamState* adam,
                            const std::string& config_echo, int64_t step) {
  std::map<std::string, const Tensor*> out_tensors;
  for (const auto& [name, entry] : online.entries()) out_tensors.emplace(name, &entry.value);
  for (const auto& [name, entry] : target.entries())
    out_tensors.emplace("target." + name, &entry.value);
  Tensor adam_scalars({5});
  if (adam) {
    for (const auto& [name, t] : adam->m) out_tensors.emplace("adam.m." + name, &t);
    for (const auto& [name, t] : adam->v) out_tensors.emplace("adam.v." + name, &t);
    adam_scalars.data = {static_cast<double>(adam->step), adam->lr, adam->beta1, adam->beta2,
                         adam->eps};
    out_tensors.emplace("adam.scalars", &adam_scalars);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(detail::kCkptMagic, sizeof detail::kCkptMagic);
  detail::write_u32(out, static_cast<uint32_t>(config_echo.size()));
  out.write(config_echo.data(), static_cast<std::streamsize>(config_echo.size()));
  detail::write_i64(out, step);
  char flag = adam ? 1 : 0;
  out.write(&flag, 1);
  detail::write_u32(out, static_cast<uint32_t>(out_tensors.size()));
  for (const auto& [name, t] : out_tensors) detail::write_tensor(out, name, *t);
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint ck;
  uint32_t echo_len = detail::read_u32(in, "config echo length");
  if (echo_len > (1u << 20)) throw std::runtime_error("checkpoint: implausible config echo");
  ck.config_echo.resize(echo_len);
  if (echo_len && !in.read(ck.config_echo.data(), echo_len))
    throw std::runtime_error("checkpoint: truncated reading config echo");
  ck.step = detail::read_i64(in, "step counter");
  char flag = 0;
  if (!in.read(&flag, 1)) throw std::runtime_error("checkpoint: truncated reading flags");
  ck.has_adam = flag != 0;
  uint32_t n = detail::read_u32(in, "tensor count");
  for (uint32_t i = 0; i < n; ++i) {
    auto [name, t] = detail::read_tensor(in);
    if (!ck.tensors.emplace(std::move(name), std::move(t)).second)
      throw std::runtime_error("checkpoint: duplicate tensor in " + path);
  }
  return ck;
}

// Splits a loaded checkpoint back into parameter stores. `adam` may be null
// when the optimizer state is not needed (plain evaluation).
inline void restore_stores(const Checkpoint& ck, ParamStore& online, ParamStore& target,
                           AdamState* adam) {
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("target.", 0) == 0) {
      target.add(name.substr(7), t);
    } else if (name.rfind("adam.m.", 0) == 0) {
      if (adam) adam->m.emplace(name.substr(7), t);
    } else if (name.rfind("adam.v.", 0) == 0) {
      if (adam) adam->v.emplace(name.substr(7), t);
    } else if (name == "adam.scalars") {
      if (adam) {
        if (t.data.size() != 5) throw std::runtime_error("checkpoint: bad optimizer scalars");
        adam->step = static_cast<int64_t>(t.data[0]);
        adam->lr = t.data[1];
        adam->beta1 = t.data[2];
        adam->beta2 = t.data[3];
        adam->eps = t.data[4];
      }
    } else {
      online.add(name, t);
    }
  }
  if (online.entries().empty()) throw std::runtime_error("checkpoint: no model parameters");
  if (target.entries().empty())
    for (const auto& [name, entry] : online.entries()) target.add(name, entry.value);
}

} // namespace copnet
