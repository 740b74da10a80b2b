#pragma once

#include <algorithm>
#include <cstdint>
#include <string>

#include "ajsscc/nn.hpp"

namespace ajsscc {

// Attention-based channel adaptive module. Scales each feature channel by a
// sigmoid factor computed from the channel means concatenated with the SNR,
// so the same features are re-weighted as the channel environment changes.
struct Acam {
  Linear fc1, fc2;
  PRelu act;
  std::int64_t channels = 0;
  bool enabled = true;  // disabled = identity (the no-ACAM ablations sever the SNR input)

  static std::int64_t default_hidden(std::int64_t channels) {
    return std::max<std::int64_t>(4, (channels + 1) / 2);
  }

  static Acam create(ParamStore& store, const std::string& name, std::int64_t channels,
                     std::uint64_t seed, bool enabled = true,
                     std::int64_t hidden = 0) {
    Acam a;
    a.channels = channels;
    a.enabled = enabled;
    if (hidden <= 0) hidden = default_hidden(channels);
    a.fc1 = Linear::create(store, name + ".fc1", channels + 1, hidden, seed);
    a.fc2 = Linear::create(store, name + ".fc2", hidden, channels, seed);
    a.act = PRelu::create(store, name + ".act");
    return a;
  }

  // F: (n, C, h, w), mu in dB (fed unnormalized)
  Var forward(ParamUser& ctx, Var f, double mu) const {
    if (!enabled) return f;
    Tape& t = ctx.tape;
    // copy dims out: tape ops below may reallocate the node vector
    const std::vector<std::int64_t> shape = t.val(f).shape;
    if (shape.size() != 4 || shape[1] != channels)
      throw std::invalid_argument("acam: feature tensor has " +
                                  std::to_string(shape.size() == 4 ? shape[1] : -1) +
                                  " channels, module expects " + std::to_string(channels));
    Var pooled = t.global_avg_pool(f);                       // (n, C)
    Var mu_col = t.constant(Tensor::full({shape[0], 1}, mu));
    Var iprime = t.concat_cols(mu_col, pooled);              // (n, C+1), SNR first
    Var hidden = act.forward(ctx, fc1.forward(ctx, iprime));
    Var kappa = t.sigmoid(fc2.forward(ctx, hidden));         // (n, C)
    return t.scale_channels(f, kappa);
  }
};

}  // namespace ajsscc
