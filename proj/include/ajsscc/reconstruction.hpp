#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ajsscc/acam.hpp"
#include "ajsscc/nn.hpp"
#include "ajsscc/sampling.hpp"

namespace ajsscc {

// Semantic extracting network: same trunk as the scanning network but without
// the pooling head, so it emits a feature map aligned with the image grid.
struct ExtractNet {
  Conv2d conv1, conv2;
  PRelu act;
  Acam acam;

  static ExtractNet create(ParamStore& store, const std::string& name, std::int64_t width,
                           std::int64_t out_channels, std::uint64_t seed, bool acam_enabled) {
    ExtractNet e;
    e.conv1 = Conv2d::create(store, name + ".conv1", 1, width, 3, 1, 1, seed);
    e.act = PRelu::create(store, name + ".act");
    e.acam = Acam::create(store, name + ".acam", width, seed, acam_enabled);
    e.conv2 = Conv2d::create(store, name + ".conv2", width, out_channels, 3, 1, 1, seed);
    return e;
  }

  // r_up: (n, 1, H, W) ratio map upsampled to pixel resolution
  Var forward(ParamUser& ctx, Var r_up, double mu) const {
    Var h = act.forward(ctx, conv1.forward(ctx, r_up));
    h = acam.forward(ctx, h, mu);
    return conv2.forward(ctx, h);
  }
};

// Proximal mapping network: residual over the full image so it can see
// across block boundaries and clean up stitching artifacts.
struct ProxNet {
  Conv2d conv1, conv2;
  PRelu act;

  static ProxNet create(ParamStore& store, const std::string& name, std::int64_t in_channels,
                        std::int64_t width, std::int64_t out_channels, std::uint64_t seed) {
    ProxNet p;
    p.conv1 = Conv2d::create(store, name + ".conv1", in_channels, width, 3, 1, 1, seed);
    p.act = PRelu::create(store, name + ".act");
    p.conv2 = Conv2d::create(store, name + ".conv2", width, out_channels, 3, 1, 1, seed);
    return p;
  }

  Var forward(ParamUser& ctx, Var x) const {
    return conv2.forward(ctx, act.forward(ctx, conv1.forward(ctx, x)));
  }
};

struct ReconstructionConfig {
  std::int64_t np = 11;
  std::int64_t e_width = 8;
  std::int64_t m_channels = 1;  // channels of the extracted feature map M'
  std::int64_t p_width = 8;
  std::int64_t channels = 1;    // image channels
  bool acam_enabled = true;
  double dither_eps = 0.0;      // amplitude of the optional init-time dither
};

struct ReconstructOptions {
  double mu = 0.0;
  std::uint64_t seed = 0;
  std::int64_t np_override = -1;
  // Oracle hook: true measurements per (image, block); pseudo-measurements
  // from the initial estimate are used when absent.
  const std::vector<std::vector<Var>>* measurements = nullptr;
  // When set, receives mean per-block data fidelity 0.5*|A_q x - y|^2 at
  // initialization and after every iteration.
  std::vector<double>* fidelity_trace = nullptr;
};

// Unrolled proximal gradient descent with per-iteration extracting and
// proximal networks and one trainable step size per iteration.
struct Reconstructor {
  ReconstructionConfig cfg;
  std::vector<ExtractNet> extract;
  std::vector<ProxNet> prox;
  std::vector<int> rho;  // one {1}-shaped parameter per iteration, init 0.5

  static Reconstructor create(ParamStore& store, const std::string& name,
                              const ReconstructionConfig& cfg, std::uint64_t seed) {
    Reconstructor r;
    r.cfg = cfg;
    for (std::int64_t k = 0; k < cfg.np; ++k) {
      const std::string idx = std::to_string(k);
      r.extract.push_back(ExtractNet::create(store, name + ".e" + idx, cfg.e_width,
                                             cfg.m_channels, seed, cfg.acam_enabled));
      r.prox.push_back(ProxNet::create(store, name + ".p" + idx,
                                       cfg.channels + cfg.m_channels, cfg.p_width,
                                       cfg.channels, seed));
      r.rho.push_back(store.add(name + ".rho." + idx, Tensor({1}, {0.5})));
    }
    return r;
  }

  // x_hat: decoder output (n, C, H, W); plans: per-image allocations sharing
  // the block grid. Returns the final estimate clamped to [0,1].
  Var forward(ParamUser& ctx, Var x_hat, const std::vector<SamplingPlan>& plans, Var a_var,
              const ReconstructOptions& opt) const {
    Tape& t = ctx.tape;
    const Tensor& v0 = t.val(x_hat);
    const std::int64_t n = v0.shape[0], C = v0.shape[1], H = v0.shape[2], W = v0.shape[3];
    if (static_cast<std::int64_t>(plans.size()) != n)
      throw std::invalid_argument("reconstruct: one plan per image required");
    const std::int64_t gh = plans[0].gh, gw = plans[0].gw, l = gh * gw;
    const std::int64_t B = H / gh;
    if (gh * B != H || gw * B != W || plans[0].N != B * B)
      throw std::invalid_argument("reconstruct: ratio map grid does not match image grid");
    const std::int64_t np = opt.np_override >= 0 ? opt.np_override : cfg.np;
    if (np > static_cast<std::int64_t>(rho.size()))
      throw std::invalid_argument("reconstruct: iteration count exceeds trained depth");

    Var x = x_hat;
    if (cfg.dither_eps > 0.0) {
      Rng rng(derive_seed(opt.seed, "recon_dither"));
      Tensor d = Tensor::zeros(v0.shape);
      for (auto& dv : d.data) dv = rng.uniform(-cfg.dither_eps, cfg.dither_eps);
      x = t.add(x, t.constant(std::move(d)));
    }

    // Pseudo-measurements anchor data consistency to the initial estimate;
    // with a perfect codec they coincide with the transmitter's y_i.
    std::vector<std::vector<Var>> y(static_cast<std::size_t>(n));
    {
      Var blocks0 = t.unfold_blocks(x, B);
      for (std::int64_t s = 0; s < n; ++s) {
        y[static_cast<std::size_t>(s)].resize(static_cast<std::size_t>(l));
        for (std::int64_t i = 0; i < l; ++i) {
          const std::int64_t q = plans[static_cast<std::size_t>(s)].q[static_cast<std::size_t>(i)];
          if (opt.measurements) {
            y[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] =
                (*opt.measurements)[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)];
          } else {
            Var xb = t.select_block(blocks0, s, i);
            y[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] =
                t.measure_rows(xb, a_var, q);
          }
        }
      }
    }

    // Ratio map, shared losslessly with the receiver, upsampled once.
    Tensor r_grid({n, 1, gh, gw});
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t i = 0; i < l; ++i)
        r_grid[s * l + i] = plans[static_cast<std::size_t>(s)].R[i];
    Var r_up = t.upsample_blocks(t.constant(std::move(r_grid)), B);

    if (opt.fidelity_trace) opt.fidelity_trace->push_back(fidelity(t, x, y, plans, a_var, B));

    for (std::int64_t k = 0; k < np; ++k) {
      Var m_prime = extract[static_cast<std::size_t>(k)].forward(ctx, r_up, opt.mu);
      Var blocks = t.unfold_blocks(x, B);
      Var rho_k = ctx.use(rho[static_cast<std::size_t>(k)]);
      std::vector<Var> updated(static_cast<std::size_t>(n * l));
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t i = 0; i < l; ++i) {
          const std::int64_t q = plans[static_cast<std::size_t>(s)].q[static_cast<std::size_t>(i)];
          Var xb = t.select_block(blocks, s, i);
          Var res = t.sub(t.measure_rows(xb, a_var, q),
                          y[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
          Var grad = t.align_rows(res, a_var, q);
          updated[static_cast<std::size_t>(s * l + i)] =
              t.sub(xb, t.scale_by_var(grad, rho_k));
        }
      Var v_img = t.fold_blocks(t.assemble_blocks(updated, n, C, l), gh, gw, B);
      Var s_hat = t.add(v_img, prox[static_cast<std::size_t>(k)].forward(
                                   ctx, t.concat_channels(v_img, m_prime)));
      x = s_hat;
      if (opt.fidelity_trace) opt.fidelity_trace->push_back(fidelity(t, x, y, plans, a_var, B));
    }
    return t.clamp01(x);
  }

 private:
  // mean over blocks of 0.5*|A_q x_i - y_i|^2, computed off-tape
  static double fidelity(Tape& t, Var x, const std::vector<std::vector<Var>>& y,
                         const std::vector<SamplingPlan>& plans, Var a_var, std::int64_t B) {
    const Tensor& img = t.val(x);
    const Tensor& a = t.val(a_var);
    const std::int64_t n = img.shape[0], C = img.shape[1];
    const std::int64_t gh = plans[0].gh, gw = plans[0].gw, l = gh * gw, N = B * B;
    double acc = 0.0;
    Tensor block({C, N});
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t i = 0; i < l; ++i) {
        const std::int64_t by = i / gw, bx = i % gw;
        for (std::int64_t ch = 0; ch < C; ++ch)
          for (std::int64_t py = 0; py < B; ++py)
            for (std::int64_t px = 0; px < B; ++px)
              block[ch * N + py * B + px] =
                  img.at4(s, ch, by * B + py, bx * B + px);
        const std::int64_t q = plans[static_cast<std::size_t>(s)].q[static_cast<std::size_t>(i)];
        Tensor m = measure_block_plain(a, block, q);
        const Tensor& yv = t.val(y[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
        for (std::int64_t j = 0; j < m.numel(); ++j) {
          const double d = m[j] - yv[j];
          acc += 0.5 * d * d;
        }
      }
    return acc / static_cast<double>(n * l);
  }
};

}  // namespace ajsscc
