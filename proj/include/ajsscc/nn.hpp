#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ajsscc/autograd.hpp"
#include "ajsscc/rng.hpp"
#include "ajsscc/tensor.hpp"

namespace ajsscc {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  // Adam state
  Tensor m, v;
};

// Named trainable tensors in registration order. Registration order is
// deterministic (model construction is), which keeps checkpoints and
// optimizer sweeps reproducible.
struct ParamStore {
  std::vector<Param> items;
  std::unordered_map<std::string, int> by_name;

  int add(const std::string& name, Tensor init) {
    if (by_name.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Param p;
    p.name = name;
    p.grad = Tensor::zeros(init.shape);
    p.m = Tensor::zeros(init.shape);
    p.v = Tensor::zeros(init.shape);
    p.value = std::move(init);
    items.push_back(std::move(p));
    by_name[name] = static_cast<int>(items.size()) - 1;
    return static_cast<int>(items.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = by_name.find(name);
    return it == by_name.end() ? -1 : it->second;
  }

  Param& at(int i) { return items.at(static_cast<std::size_t>(i)); }
  const Param& at(int i) const { return items.at(static_cast<std::size_t>(i)); }

  void zero_grad() {
    for (auto& p : items) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
  }

  std::int64_t total_count() const {
    std::int64_t n = 0;
    for (const auto& p : items) n += p.value.numel();
    return n;
  }
};

inline void param_store_accum_grad(ParamStore& store, int index, const Tensor& grad) {
  Tensor& g = store.at(index).grad;
  for (std::int64_t i = 0; i < grad.numel(); ++i) g[i] += grad[i];
}

// Per-forward-pass context: hands each parameter to the tape exactly once.
// Trainable contexts bind leaves so backward() flushes gradients into the
// store; frozen contexts create plain constants, which keeps evaluation
// passes read-only and safe to run concurrently.
struct ParamUser {
  Tape& tape;
  const ParamStore& store;
  ParamStore* mut_store;  // null when frozen
  std::unordered_map<int, Var> cache;

  ParamUser(Tape& t, ParamStore& s) : tape(t), store(s), mut_store(&s) {}
  ParamUser(Tape& t, const ParamStore& s) : tape(t), store(s), mut_store(nullptr) {}

  bool trainable() const { return mut_store != nullptr; }

  Var use(int index) {
    auto it = cache.find(index);
    if (it != cache.end()) return it->second;
    Var v = mut_store ? tape.param_leaf(*mut_store, index, store.at(index).value)
                      : tape.constant(store.at(index).value);
    cache.emplace(index, v);
    return v;
  }
};

inline Rng param_rng(std::uint64_t seed, const std::string& name) {
  return Rng(derive_seed(seed, "param_init", hash_str(name)));
}

struct Linear {
  int w = -1, b = -1;
  std::int64_t in = 0, out = 0;

  static Linear create(ParamStore& store, const std::string& name, std::int64_t in,
                       std::int64_t out, std::uint64_t seed) {
    Linear l;
    l.in = in;
    l.out = out;
    Rng rng = param_rng(seed, name + ".w");
    const double std = std::sqrt(2.0 / static_cast<double>(in));
    l.w = store.add(name + ".w", Tensor::randn({out, in}, rng, std));
    l.b = store.add(name + ".b", Tensor::zeros({out}));
    return l;
  }

  // x: (m, in) -> (m, out)
  Var forward(ParamUser& ctx, Var x) const {
    Var y = ctx.tape.matmul(x, ctx.use(w), false, true);
    return ctx.tape.add_rowvec(y, ctx.use(b));
  }
};

struct Conv2d {
  int w = -1, b = -1;
  std::int64_t ci = 0, co = 0, k = 0, stride = 1, pad = 0;

  static Conv2d create(ParamStore& store, const std::string& name, std::int64_t ci,
                       std::int64_t co, std::int64_t k, std::int64_t stride, std::int64_t pad,
                       std::uint64_t seed) {
    Conv2d c;
    c.ci = ci;
    c.co = co;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    Rng rng = param_rng(seed, name + ".w");
    const double std = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    c.w = store.add(name + ".w", Tensor::randn({co, ci, k, k}, rng, std));
    c.b = store.add(name + ".b", Tensor::zeros({co}));
    return c;
  }

  Var forward(ParamUser& ctx, Var x) const {
    return ctx.tape.conv2d(x, ctx.use(w), ctx.use(b), stride, pad);
  }
};

struct ConvTranspose2d {
  int w = -1, b = -1;
  std::int64_t ci = 0, co = 0, k = 0, stride = 1, pad = 0;

  static ConvTranspose2d create(ParamStore& store, const std::string& name, std::int64_t ci,
                                std::int64_t co, std::int64_t k, std::int64_t stride,
                                std::int64_t pad, std::uint64_t seed) {
    ConvTranspose2d c;
    c.ci = ci;
    c.co = co;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    Rng rng = param_rng(seed, name + ".w");
    const double std = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    c.w = store.add(name + ".w", Tensor::randn({ci, co, k, k}, rng, std));
    c.b = store.add(name + ".b", Tensor::zeros({co}));
    return c;
  }

  Var forward(ParamUser& ctx, Var x) const {
    return ctx.tape.conv_transpose2d(x, ctx.use(w), ctx.use(b), stride, pad);
  }
};

// One learned slope shared across the whole activation.
struct PRelu {
  int slope = -1;

  static PRelu create(ParamStore& store, const std::string& name) {
    PRelu p;
    p.slope = store.add(name + ".slope", Tensor({1}, {0.25}));
    return p;
  }

  Var forward(ParamUser& ctx, Var x) const { return ctx.tape.prelu(x, ctx.use(slope)); }
};

}  // namespace ajsscc
