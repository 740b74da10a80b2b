#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "ajsscc/acam.hpp"
#include "ajsscc/channel.hpp"
#include "ajsscc/nn.hpp"

namespace ajsscc {

// Residual convolutional module: strided conv path through an activation
// plus a 1x1 strided projection skip.
struct RcmBlock {
  Conv2d main, skip;
  PRelu act;

  static RcmBlock create(ParamStore& store, const std::string& name, std::int64_t ci,
                         std::int64_t co, std::uint64_t seed) {
    RcmBlock b;
    b.main = Conv2d::create(store, name + ".main", ci, co, 3, 2, 1, seed);
    b.skip = Conv2d::create(store, name + ".skip", ci, co, 1, 2, 0, seed);
    b.act = PRelu::create(store, name + ".act");
    return b;
  }

  Var forward(ParamUser& ctx, Var x) const {
    Var m = act.forward(ctx, main.forward(ctx, x));
    return ctx.tape.add(m, skip.forward(ctx, x));
  }
};

// Residual transposed convolutional module: 2x upsampling mirror of RcmBlock.
struct RtcmBlock {
  ConvTranspose2d main, skip;
  PRelu act;

  static RtcmBlock create(ParamStore& store, const std::string& name, std::int64_t ci,
                          std::int64_t co, std::uint64_t seed) {
    RtcmBlock b;
    b.main = ConvTranspose2d::create(store, name + ".main", ci, co, 4, 2, 1, seed);
    b.skip = ConvTranspose2d::create(store, name + ".skip", ci, co, 2, 2, 0, seed);
    b.act = PRelu::create(store, name + ".act");
    return b;
  }

  Var forward(ParamUser& ctx, Var x) const {
    Var m = act.forward(ctx, main.forward(ctx, x));
    return ctx.tape.add(m, skip.forward(ctx, x));
  }
};

struct CodecConfig {
  std::int64_t in_channels = 1;
  std::int64_t width1 = 16;
  std::int64_t width2 = 32;
  std::int64_t c_out = 2;  // latent complex channels; real channels are 2*c_out
  bool acam_enabled = true;
  bool per_image_power = false;
};

inline constexpr std::int64_t kCodecStages = 2;  // stride-2 stages in each direction

struct CbrInfo {
  std::int64_t k = 0;  // complex symbols per image
  std::int64_t n = 0;  // source dimension H*W*C
  double cbr = 0.0;    // k/n
};

inline CbrInfo cbr_for(std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t c_out) {
  const std::int64_t f = 1 << kCodecStages;
  if (H % f != 0 || W % f != 0)
    throw std::invalid_argument("codec: image size must be divisible by " + std::to_string(f));
  CbrInfo info;
  info.k = c_out * (H / f) * (W / f);
  info.n = C * H * W;
  info.cbr = static_cast<double>(info.k) / static_cast<double>(info.n);
  return info;
}

// Smallest latent channel count hitting CBR = num/den exactly; throws if the
// geometry cannot represent that ratio with integer channels.
inline std::int64_t solve_c_out(std::int64_t C, std::int64_t H, std::int64_t W,
                                std::int64_t num, std::int64_t den) {
  const std::int64_t f = 1 << kCodecStages;
  const std::int64_t spatial = (H / f) * (W / f);
  const std::int64_t n = C * H * W;
  if ((n * num) % (den * spatial) != 0)
    throw std::invalid_argument("codec: CBR " + std::to_string(num) + "/" +
                                std::to_string(den) + " not exactly representable for " +
                                std::to_string(C) + "x" + std::to_string(H) + "x" +
                                std::to_string(W));
  const std::int64_t c_out = (n * num) / (den * spatial);
  if (c_out < 1) throw std::invalid_argument("codec: CBR target below one latent channel");
  return c_out;
}

struct EncoderGeometry {
  std::int64_t n = 0, c_out = 0, oh = 0, ow = 0;
  std::int64_t C = 0, H = 0, W = 0;
};

// f_Theta: aligned samples -> power-normalized complex symbols
// (stored as 2*c_out real channel pairs).
struct Encoder {
  RcmBlock stage1, stage2;
  Acam acam1, acam2;
  Conv2d head;
  CodecConfig cfg;

  static Encoder create(ParamStore& store, const std::string& name, const CodecConfig& cfg,
                        std::uint64_t seed) {
    Encoder e;
    e.cfg = cfg;
    e.stage1 = RcmBlock::create(store, name + ".stage1", cfg.in_channels, cfg.width1, seed);
    e.acam1 = Acam::create(store, name + ".acam1", cfg.width1, seed, cfg.acam_enabled);
    e.stage2 = RcmBlock::create(store, name + ".stage2", cfg.width1, cfg.width2, seed);
    e.acam2 = Acam::create(store, name + ".acam2", cfg.width2, seed, cfg.acam_enabled);
    e.head = Conv2d::create(store, name + ".head", cfg.width2, 2 * cfg.c_out, 3, 1, 1, seed);
    return e;
  }

  Var forward(ParamUser& ctx, Var x, double mu, EncoderGeometry* geom = nullptr,
              double* measured_power = nullptr) const {
    if (!std::isfinite(mu)) throw std::invalid_argument("encode: non-finite SNR");
    Tape& t = ctx.tape;
    const std::vector<std::int64_t> in_shape = t.val(x).shape;
    if (in_shape.size() != 4 || in_shape[1] != cfg.in_channels)
      throw std::invalid_argument("encode: input shape mismatch");
    Var h = stage1.forward(ctx, x);
    h = acam1.forward(ctx, h, mu);
    h = stage2.forward(ctx, h);
    h = acam2.forward(ctx, h, mu);
    Var latent = head.forward(ctx, h);
    const std::vector<std::int64_t> lat_shape = t.val(latent).shape;
    if (geom) {
      geom->n = lat_shape[0];
      geom->c_out = cfg.c_out;
      geom->oh = lat_shape[2];
      geom->ow = lat_shape[3];
      geom->C = in_shape[1];
      geom->H = in_shape[2];
      geom->W = in_shape[3];
    }
    return t.power_normalize(latent, cfg.per_image_power, measured_power);
  }
};

// g_Phi: noisy symbols -> image-shaped samples in [0,1].
struct Decoder {
  Conv2d head;
  RtcmBlock stage1, stage2;
  Acam acam1, acam2;
  CodecConfig cfg;

  static Decoder create(ParamStore& store, const std::string& name, const CodecConfig& cfg,
                        std::uint64_t seed) {
    Decoder d;
    d.cfg = cfg;
    d.head = Conv2d::create(store, name + ".head", 2 * cfg.c_out, cfg.width2, 3, 1, 1, seed);
    d.acam1 = Acam::create(store, name + ".acam1", cfg.width2, seed, cfg.acam_enabled);
    d.stage1 = RtcmBlock::create(store, name + ".stage1", cfg.width2, cfg.width1, seed);
    d.acam2 = Acam::create(store, name + ".acam2", cfg.width1, seed, cfg.acam_enabled);
    d.stage2 = RtcmBlock::create(store, name + ".stage2", cfg.width1, cfg.in_channels, seed);
    return d;
  }

  Var forward(ParamUser& ctx, Var z_hat, double mu, const EncoderGeometry& geom) const {
    Tape& t = ctx.tape;
    const Tensor& v = t.val(z_hat);
    if (v.ndim() != 4 || v.shape[0] != geom.n || v.shape[1] != 2 * geom.c_out ||
        v.shape[2] != geom.oh || v.shape[3] != geom.ow)
      throw std::invalid_argument("decode: symbol shape " + v.shape_str() +
                                  " does not match recorded encoder geometry");
    Var h = head.forward(ctx, z_hat);
    h = acam1.forward(ctx, h, mu);
    h = stage1.forward(ctx, h);
    h = acam2.forward(ctx, h, mu);
    h = stage2.forward(ctx, h);
    return t.sigmoid(h);
  }
};

}  // namespace ajsscc
