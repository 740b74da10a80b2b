#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ajsscc/channel.hpp"
#include "ajsscc/codec.hpp"
#include "ajsscc/imaging.hpp"
#include "ajsscc/reconstruction.hpp"
#include "ajsscc/sampling.hpp"

namespace ajsscc {

// The four model rows of the ablation matrix: semantic vs uniform
// sampling-reconstruction, with or without the SNR-adaptive attention.
enum class Variant { adaptive_jsscc, adaptive_jscc, jsscc, jscc };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::adaptive_jsscc: return "Adaptive-JSSCC";
    case Variant::adaptive_jscc: return "Adaptive-JSCC";
    case Variant::jsscc: return "JSSCC";
    case Variant::jscc: return "JSCC";
  }
  throw std::invalid_argument("variant_name: bad enum");
}

inline Variant parse_variant(const std::string& s) {
  if (s == "Adaptive-JSSCC") return Variant::adaptive_jsscc;
  if (s == "Adaptive-JSCC") return Variant::adaptive_jscc;
  if (s == "JSSCC") return Variant::jsscc;
  if (s == "JSCC") return Variant::jscc;
  throw std::invalid_argument("unknown variant: " + s +
                              " (expected Adaptive-JSSCC, Adaptive-JSCC, JSSCC or JSCC)");
}

inline bool variant_semantic(Variant v) {
  return v == Variant::adaptive_jsscc || v == Variant::jsscc;
}

inline bool variant_acam(Variant v) {
  return v == Variant::adaptive_jsscc || v == Variant::adaptive_jscc;
}

struct ModelConfig {
  Variant variant = Variant::adaptive_jsscc;
  std::int64_t block_size = 32;
  std::int64_t channels = 1;
  std::int64_t scan_width = 8;
  std::int64_t enc_width1 = 16;
  std::int64_t enc_width2 = 32;
  std::int64_t c_out = 2;
  bool per_image_power = false;
  std::int64_t np = 11;
  std::int64_t e_width = 8;
  std::int64_t m_channels = 1;
  std::int64_t p_width = 8;
  double dither_eps = 0.0;
  std::uint64_t init_seed = 1;

  bool semantic() const { return variant_semantic(variant); }
  bool acam() const { return variant_acam(variant); }
  std::int64_t n_dim() const { return block_size * block_size; }
};

enum class CodecMode { full, identity };

struct ForwardOptions {
  double ratio = 0.5;
  double mu = 10.0;
  std::uint64_t noise_seed = 0;
  bool channel_enabled = true;       // false = noiseless diagnostics
  bool keep_intermediates = false;
  bool uniform_override = false;     // evaluate a model under uniform allocation
  CodecMode codec_mode = CodecMode::full;
  std::vector<double>* fidelity_trace = nullptr;
};

struct PipelineOutput {
  Var s_hat_var;                  // final reconstruction on tape
  Var saliency_var;               // (n, l); invalid for uniform allocation
  std::vector<SamplingPlan> plans;
  Tensor R;                       // (n, 1, gh, gw)
  double channel_power = 0.0;     // measured symbol power before normalization scale
  // retained only when keep_intermediates is set
  std::optional<Tensor> x, z, z_hat, x_hat;
};

struct Model {
  ModelConfig cfg;
  ParamStore store;
  int a_param = -1;
  ScanNet scan;  // registered only for semantic variants
  Encoder encoder;
  Decoder decoder;
  Reconstructor recon;

  static Model build(const ModelConfig& cfg) {
    Model m;
    m.cfg = cfg;
    m.a_param = m.store.add("sampling.a", init_base_matrix(cfg.n_dim(), cfg.init_seed));
    if (cfg.semantic())
      m.scan = ScanNet::create(m.store, "scan", cfg.channels, cfg.scan_width, cfg.init_seed,
                               cfg.acam());
    CodecConfig cc;
    cc.in_channels = cfg.channels;
    cc.width1 = cfg.enc_width1;
    cc.width2 = cfg.enc_width2;
    cc.c_out = cfg.c_out;
    cc.acam_enabled = cfg.acam();
    cc.per_image_power = cfg.per_image_power;
    m.encoder = Encoder::create(m.store, "encoder", cc, cfg.init_seed);
    m.decoder = Decoder::create(m.store, "decoder", cc, cfg.init_seed);
    ReconstructionConfig rc;
    rc.np = cfg.np;
    rc.e_width = cfg.e_width;
    rc.m_channels = cfg.m_channels;
    rc.p_width = cfg.p_width;
    rc.channels = cfg.channels;
    rc.acam_enabled = cfg.acam();
    rc.dither_eps = cfg.dither_eps;
    m.recon = Reconstructor::create(m.store, "recon", rc, cfg.init_seed);
    return m;
  }

  // One end-to-end pass: sample -> encode -> channel -> decode -> reconstruct.
  PipelineOutput forward(ParamUser& ctx, Var s_var, const ForwardOptions& opt) const {
    Tape& t = ctx.tape;
    PipelineOutput out;
    Var a_var = ctx.use(a_param);
    const bool uniform = !cfg.semantic() || opt.uniform_override;

    SamplerOutput sampled;
    try {
      sampled = semantic_sample(ctx, cfg.semantic() ? &scan : nullptr, a_var, s_var,
                                cfg.block_size, opt.ratio, opt.mu, uniform);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("pipeline stage sampling: ") + e.what());
    }
    out.saliency_var = sampled.saliency;
    out.plans = std::move(sampled.plans);
    out.R = std::move(sampled.R_batch);
    if (opt.keep_intermediates) out.x = t.val(sampled.x_image);

    Var x_hat;
    if (opt.codec_mode == CodecMode::identity) {
      x_hat = sampled.x_image;
    } else {
      Var z;
      EncoderGeometry geom;
      try {
        z = encoder.forward(ctx, sampled.x_image, opt.mu, &geom, &out.channel_power);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("pipeline stage encode: ") + e.what());
      }
      if (opt.keep_intermediates) out.z = t.val(z);
      Var z_hat = z;
      if (opt.channel_enabled) z_hat = awgn(t, z, opt.mu, opt.noise_seed);
      if (opt.keep_intermediates) out.z_hat = t.val(z_hat);
      try {
        x_hat = decoder.forward(ctx, z_hat, opt.mu, geom);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("pipeline stage decode: ") + e.what());
      }
    }
    if (opt.keep_intermediates) out.x_hat = t.val(x_hat);

    ReconstructOptions ro;
    ro.mu = opt.mu;
    ro.seed = opt.noise_seed;
    ro.fidelity_trace = opt.fidelity_trace;
    try {
      out.s_hat_var = recon.forward(ctx, x_hat, out.plans, a_var, ro);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("pipeline stage reconstruct: ") + e.what());
    }
    return out;
  }

  // Inference convenience: fresh tape, frozen parameters, returns the
  // reconstruction tensor.
  Tensor infer(const Tensor& s, const ForwardOptions& opt) const {
    Tape t;
    ParamUser ctx(t, static_cast<const ParamStore&>(store));
    Var s_var = t.constant(s);
    PipelineOutput out = forward(ctx, s_var, opt);
    return t.val(out.s_hat_var);
  }
};

}  // namespace ajsscc
