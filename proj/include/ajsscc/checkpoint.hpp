#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "ajsscc/nn.hpp"
#include "ajsscc/rng.hpp"

namespace ajsscc {

// Binary checkpoint: magic, format version, config fingerprint, run counters,
// then every named parameter (and optionally its Adam moments) in
// registration order. Little-endian doubles, written and compared raw, so
// identical runs produce identical files.
inline constexpr char kCkptMagic[8] = {'A', 'J', 'S', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

struct CheckpointMeta {
  std::string fingerprint;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  std::uint64_t adam_t = 0;
  double best_val = -1.0;
  bool has_optimizer = false;
};

namespace detail {

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void put_str(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

inline void put_tensor_data(std::ostream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

inline void get_tensor_data(std::istream& in, Tensor& t) {
  if (!in.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double))))
    throw std::runtime_error("checkpoint: truncated tensor payload");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic));
  detail::put(out, kCkptVersion);
  detail::put_str(out, meta.fingerprint);
  detail::put(out, meta.epoch);
  detail::put(out, meta.step);
  detail::put(out, meta.adam_t);
  detail::put(out, meta.best_val);
  detail::put<std::uint8_t>(out, meta.has_optimizer ? 1 : 0);
  detail::put<std::uint64_t>(out, store.items.size());
  for (const auto& param : store.items) {
    detail::put_str(out, param.name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(param.value.shape.size()));
    for (auto d : param.value.shape) detail::put<std::int64_t>(out, d);
    detail::put_tensor_data(out, param.value);
    if (meta.has_optimizer) {
      detail::put_tensor_data(out, param.m);
      detail::put_tensor_data(out, param.v);
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline CheckpointMeta peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  CheckpointMeta meta;
  meta.fingerprint = detail::get_str(in);
  meta.epoch = detail::get<std::uint64_t>(in);
  meta.step = detail::get<std::uint64_t>(in);
  meta.adam_t = detail::get<std::uint64_t>(in);
  meta.best_val = detail::get<double>(in);
  meta.has_optimizer = detail::get<std::uint8_t>(in) != 0;
  return meta;
}

// Loads parameters (and Adam state when present) into an already-built store.
// Refuses fingerprint or shape mismatches outright.
inline CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store,
                                      const std::string& expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  CheckpointMeta meta;
  meta.fingerprint = detail::get_str(in);
  if (!expected_fingerprint.empty() && meta.fingerprint != expected_fingerprint)
    throw std::runtime_error("checkpoint: fingerprint mismatch for " + path + " (file " +
                             meta.fingerprint + ", expected " + expected_fingerprint + ")");
  meta.epoch = detail::get<std::uint64_t>(in);
  meta.step = detail::get<std::uint64_t>(in);
  meta.adam_t = detail::get<std::uint64_t>(in);
  meta.best_val = detail::get<double>(in);
  meta.has_optimizer = detail::get<std::uint8_t>(in) != 0;
  const auto count = detail::get<std::uint64_t>(in);
  if (count != store.items.size())
    throw std::runtime_error("checkpoint: parameter count mismatch in " + path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::get_str(in);
    const int idx = store.find(name);
    if (idx < 0) throw std::runtime_error("checkpoint: unknown parameter " + name);
    Param& param = store.at(idx);
    const auto ndim = detail::get<std::uint32_t>(in);
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) d = detail::get<std::int64_t>(in);
    if (shape != param.value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    detail::get_tensor_data(in, param.value);
    if (meta.has_optimizer) {
      detail::get_tensor_data(in, param.m);
      detail::get_tensor_data(in, param.v);
    }
  }
  return meta;
}

inline double file_size_mb(const std::string& path) {
  return static_cast<double>(std::filesystem::file_size(path)) / (1024.0 * 1024.0);
}

}  // namespace ajsscc
