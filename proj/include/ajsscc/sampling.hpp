#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ajsscc/acam.hpp"
#include "ajsscc/autograd.hpp"
#include "ajsscc/imaging.hpp"
#include "ajsscc/nn.hpp"
#include "ajsscc/rng.hpp"

namespace ajsscc {

// N x N base matrix with orthonormal rows ordered by descending singular
// value of the generating Gaussian draw. Leading-row submatrices are then
// nested measurement matrices: A_q = first q rows.
inline Tensor init_base_matrix(std::int64_t N, std::uint64_t seed) {
  if (N < 1) throw std::invalid_argument("init_base_matrix: N must be >= 1");
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed + attempt, "base_matrix"));
    RowMat g(N, N);
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t j = 0; j < N; ++j) g(i, j) = rng.normal();
    Eigen::BDCSVD<RowMat> svd(g, Eigen::ComputeFullV);
    RowMat a = svd.matrixV().transpose();
    const double err = (a * a.transpose() - RowMat::Identity(N, N)).cwiseAbs().maxCoeff();
    if (std::isfinite(err) && err < 1e-8) {
      Tensor t({N, N});
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < N; ++j) t.at2(i, j) = a(i, j);
      return t;
    }
    // decomposition failed numerically; redraw with the next seed
  }
}

// Per-image sampling plan: q rows per block, individual ratios, shared map.
struct SamplingPlan {
  std::vector<std::int64_t> q;
  std::vector<double> r_i;     // q_i / N, exact
  Tensor R;                    // (gh, gw) grid of r_i
  double r = 0.0;              // overall ratio
  std::int64_t N = 0;
  std::int64_t gh = 0, gw = 0;

  std::int64_t total_rows() const {
    std::int64_t s = 0;
    for (auto v : q) s += v;
    return s;
  }
};

inline std::int64_t allocation_budget(double r, std::int64_t N, std::int64_t l) {
  return std::llround(r * static_cast<double>(N) * static_cast<double>(l));
}

// Proportional allocation with exact, deterministic repair of the budget
// Q = round(r*N*l). Every block keeps at least one row and at most N.
inline SamplingPlan allocate(const std::vector<double>& M, double r, std::int64_t N,
                             std::int64_t gh, std::int64_t gw) {
  const std::int64_t l = gh * gw;
  if (static_cast<std::int64_t>(M.size()) != l)
    throw std::invalid_argument("allocate: saliency size != block count");
  if (r < 1.0 / static_cast<double>(N * l) || r > 1.0)
    throw std::invalid_argument("allocate: ratio " + std::to_string(r) +
                                " outside [1/(N*l), 1]");
  const std::int64_t Q = allocation_budget(r, N, l);
  if (Q < l)
    throw std::invalid_argument("allocate: budget " + std::to_string(Q) +
                                " below one row per block (l=" + std::to_string(l) + ")");
  SamplingPlan plan;
  plan.N = N;
  plan.r = r;
  plan.gh = gh;
  plan.gw = gw;
  plan.q.resize(static_cast<std::size_t>(l));
  for (std::int64_t i = 0; i < l; ++i) {
    std::int64_t qi = std::llround(M[static_cast<std::size_t>(i)] * static_cast<double>(Q));
    qi = std::max<std::int64_t>(1, std::min<std::int64_t>(N, qi));
    plan.q[static_cast<std::size_t>(i)] = qi;
  }
  auto total = [&] {
    std::int64_t s = 0;
    for (auto v : plan.q) s += v;
    return s;
  };
  std::int64_t sum = total();
  while (sum > Q) {
    std::int64_t best = -1;
    double best_key = -1.0;
    for (std::int64_t i = 0; i < l; ++i) {
      if (plan.q[static_cast<std::size_t>(i)] <= 1) continue;
      const double key = static_cast<double>(plan.q[static_cast<std::size_t>(i)]) *
                         (1.0 - M[static_cast<std::size_t>(i)]);
      if (key > best_key) {
        best_key = key;
        best = i;
      }
    }
    --plan.q[static_cast<std::size_t>(best)];
    --sum;
  }
  while (sum < Q) {
    std::int64_t best = -1;
    double best_key = -1.0;
    for (std::int64_t i = 0; i < l; ++i) {
      if (plan.q[static_cast<std::size_t>(i)] >= N) continue;
      const double key = M[static_cast<std::size_t>(i)] *
                         static_cast<double>(N - plan.q[static_cast<std::size_t>(i)]);
      if (key > best_key) {
        best_key = key;
        best = i;
      }
    }
    ++plan.q[static_cast<std::size_t>(best)];
    ++sum;
  }
  plan.r_i.resize(static_cast<std::size_t>(l));
  plan.R = Tensor({gh, gw});
  for (std::int64_t i = 0; i < l; ++i) {
    plan.r_i[static_cast<std::size_t>(i)] =
        static_cast<double>(plan.q[static_cast<std::size_t>(i)]) / static_cast<double>(N);
    plan.R[i] = plan.r_i[static_cast<std::size_t>(i)];
  }
  return plan;
}

// Saliency-independent allocation for the uniform-sampling ablations.
inline SamplingPlan allocate_uniform(double r, std::int64_t N, std::int64_t gh,
                                     std::int64_t gw) {
  const std::int64_t l = gh * gw;
  std::vector<double> M(static_cast<std::size_t>(l), 1.0 / static_cast<double>(l));
  return allocate(M, r, N, gh, gw);
}

// Text grid with header "gh gw N" then q_i rows. Integers round-trip
// bit-exactly and r_i = q_i/N is reconstructed by the same division.
inline void save_ratio_map(const SamplingPlan& plan, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_ratio_map: cannot write " + path);
  out << plan.gh << " " << plan.gw << " " << plan.N << "\n";
  for (std::int64_t y = 0; y < plan.gh; ++y) {
    for (std::int64_t x = 0; x < plan.gw; ++x)
      out << (x ? " " : "") << plan.q[static_cast<std::size_t>(y * plan.gw + x)];
    out << "\n";
  }
}

inline SamplingPlan load_ratio_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_ratio_map: cannot read " + path);
  SamplingPlan plan;
  if (!(in >> plan.gh >> plan.gw >> plan.N))
    throw std::runtime_error("load_ratio_map: bad header in " + path);
  const std::int64_t l = plan.gh * plan.gw;
  plan.q.resize(static_cast<std::size_t>(l));
  plan.r_i.resize(static_cast<std::size_t>(l));
  plan.R = Tensor({plan.gh, plan.gw});
  std::int64_t total = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    if (!(in >> plan.q[static_cast<std::size_t>(i)]))
      throw std::runtime_error("load_ratio_map: truncated grid in " + path);
    plan.r_i[static_cast<std::size_t>(i)] =
        static_cast<double>(plan.q[static_cast<std::size_t>(i)]) /
        static_cast<double>(plan.N);
    plan.R[i] = plan.r_i[static_cast<std::size_t>(i)];
    total += plan.q[static_cast<std::size_t>(i)];
  }
  plan.r = static_cast<double>(total) / static_cast<double>(plan.N * l);
  return plan;
}

// Pure (tape-free) measurement helpers used by oracle-style checks.
inline Tensor measure_block_plain(const Tensor& A, const Tensor& s, std::int64_t q) {
  CMatMap Am(A.data.data(), A.shape[0], A.shape[1]);
  CMatMap S(s.data.data(), s.shape[0], s.shape[1]);
  Tensor out({s.shape[0], q});
  MatMap Y(out.data.data(), s.shape[0], q);
  Y.noalias() = S * Am.topRows(q).transpose();
  return out;
}

inline Tensor align_block_plain(const Tensor& A, const Tensor& y, std::int64_t q) {
  CMatMap Am(A.data.data(), A.shape[0], A.shape[1]);
  CMatMap Y(y.data.data(), y.shape[0], y.shape[1]);
  Tensor out({y.shape[0], A.shape[1]});
  MatMap X(out.data.data(), y.shape[0], A.shape[1]);
  X.noalias() = Y * Am.topRows(q);
  return out;
}

// Sampling + aligning of one block on the tape: y = A_q s, x = A_q^T y.
inline std::pair<Var, Var> sample_block(Tape& t, Var a, Var s_block, std::int64_t q) {
  Var y = t.measure_rows(s_block, a, q);
  Var x = t.align_rows(y, a, q);
  return {y, x};
}

// Channel-environment-adaptive scanning network. The trunk runs on each
// block region independently (shared weights), so identical blocks score
// identically; per-block spatial pooling and a normalization over blocks
// turn the trunk output into a distribution.
struct ScanNet {
  Conv2d conv1, conv2;
  PRelu act;
  Acam acam;
  std::int64_t width = 0;

  static ScanNet create(ParamStore& store, const std::string& name, std::int64_t in_channels,
                        std::int64_t width, std::uint64_t seed, bool acam_enabled) {
    ScanNet s;
    s.width = width;
    s.conv1 = Conv2d::create(store, name + ".conv1", in_channels, width, 3, 1, 1, seed);
    s.act = PRelu::create(store, name + ".act");
    s.acam = Acam::create(store, name + ".acam", width, seed, acam_enabled);
    s.conv2 = Conv2d::create(store, name + ".conv2", width, 1, 3, 1, 1, seed);
    return s;
  }

  // image (n, C, H, W) -> saliency (n, l), rows sum to 1
  Var forward(ParamUser& ctx, Var image, std::int64_t B, double mu) const {
    Tape& t = ctx.tape;
    const Tensor& v = t.val(image);
    const std::int64_t n = v.shape[0], H = v.shape[2], W = v.shape[3];
    const std::int64_t l = (H / B) * (W / B);
    Var blocks = t.unfold_blocks(image, B);
    Var samples = t.blocks_to_samples(blocks, B);     // (n*l, C, B, B)
    Var h = act.forward(ctx, conv1.forward(ctx, samples));
    h = acam.forward(ctx, h, mu);
    h = conv2.forward(ctx, h);                        // (n*l, 1, B, B)
    Var pooled = t.global_avg_pool(h);                // (n*l, 1)
    Var scores = t.sigmoid(t.reshape(pooled, {n, l}));
    return t.row_normalize(scores);
  }
};

struct SamplerOutput {
  Var x_image;                      // folded aligned samples (n, C, H, W)
  Var saliency;                     // (n, l) on tape; invalid for uniform mode
  std::vector<SamplingPlan> plans;  // one per image
  Tensor R_batch;                   // (n, 1, gh, gw)
};

// Algorithm: scan saliency, allocate per image under the overall ratio,
// sample and align each block with the leading rows of A, fold back.
inline SamplerOutput semantic_sample(ParamUser& ctx, const ScanNet* scan, Var a_var,
                                     Var s_image, std::int64_t B, double r, double mu,
                                     bool uniform) {
  Tape& t = ctx.tape;
  const Tensor& v = t.val(s_image);
  const std::int64_t n = v.shape[0], C = v.shape[1], H = v.shape[2], W = v.shape[3];
  if (H % B != 0 || W % B != 0)
    throw std::invalid_argument("semantic_sample: image not divisible by block size");
  const std::int64_t gh = H / B, gw = W / B, l = gh * gw, N = B * B;

  SamplerOutput out;
  if (!uniform) {
    if (!scan) throw std::invalid_argument("semantic_sample: scanning network required");
    out.saliency = scan->forward(ctx, s_image, B, mu);
  }

  out.plans.reserve(static_cast<std::size_t>(n));
  for (std::int64_t s = 0; s < n; ++s) {
    if (uniform) {
      out.plans.push_back(allocate_uniform(r, N, gh, gw));
    } else {
      const Tensor& m = t.val(out.saliency);
      std::vector<double> row(static_cast<std::size_t>(l));
      for (std::int64_t i = 0; i < l; ++i) row[static_cast<std::size_t>(i)] = m.at2(s, i);
      out.plans.push_back(allocate(row, r, N, gh, gw));
    }
  }

  Var blocks = t.unfold_blocks(s_image, B);
  std::vector<Var> aligned(static_cast<std::size_t>(n * l));
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t i = 0; i < l; ++i) {
      Var sb = t.select_block(blocks, s, i);
      auto [y, x] = sample_block(t, a_var, sb, out.plans[static_cast<std::size_t>(s)]
                                                   .q[static_cast<std::size_t>(i)]);
      (void)y;
      aligned[static_cast<std::size_t>(s * l + i)] = x;
    }
  Var x_blocks = t.assemble_blocks(aligned, n, C, l);
  out.x_image = t.fold_blocks(x_blocks, gh, gw, B);

  out.R_batch = Tensor({n, 1, gh, gw});
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t i = 0; i < l; ++i)
      out.R_batch[s * l + i] = out.plans[static_cast<std::size_t>(s)].R[i];
  return out;
}

}  // namespace ajsscc
