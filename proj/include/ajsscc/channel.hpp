#pragma once

#include <cmath>
#include <cstdint>

#include "ajsscc/autograd.hpp"
#include "ajsscc/rng.hpp"
#include "ajsscc/tensor.hpp"

namespace ajsscc {

// SNR values at or above this are treated as a noiseless channel.
inline constexpr double kNoiselessSnrDb = 200.0;

// With unit signal power, sigma^2 = 10^(-mu/10).
inline double noise_variance(double mu_db) { return std::pow(10.0, -mu_db / 10.0); }

// Complex symbols stored as 2k interleaved real components.
struct ChannelSymbols {
  Tensor z;
  double power = 0.0;  // measured mean |z_j|^2 after normalization; 0 flags zero input
};

inline double mean_symbol_power(const Tensor& z) {
  const std::int64_t k = z.numel() / 2;
  if (k == 0) return 0.0;
  double ss = 0.0;
  for (double v : z.data) ss += v * v;
  return ss / static_cast<double>(k);
}

inline ChannelSymbols normalize_power_plain(Tensor z_raw) {
  ChannelSymbols out;
  const double p = mean_symbol_power(z_raw);
  if (p <= 0.0) {
    out.z = std::move(z_raw);
    out.power = 0.0;
    return out;
  }
  const double s = 1.0 / std::sqrt(p);
  for (auto& v : z_raw.data) v *= s;
  out.z = std::move(z_raw);
  out.power = mean_symbol_power(out.z);
  return out;
}

// Circularly symmetric complex Gaussian noise: each real component is
// N(0, sigma^2/2). Generated purely from (seed), never from the signal.
inline Tensor awgn_noise(const std::vector<std::int64_t>& shape, double mu_db,
                         std::uint64_t seed) {
  Tensor n(shape);
  const double comp_std = std::sqrt(noise_variance(mu_db) / 2.0);
  Rng rng(derive_seed(seed, "awgn"));
  for (auto& v : n.data) v = comp_std * rng.normal();
  return n;
}

inline Tensor awgn_plain(const Tensor& z, double mu_db, std::uint64_t seed) {
  if (mu_db >= kNoiselessSnrDb) return z;
  Tensor out = z;
  const Tensor n = awgn_noise(z.shape, mu_db, seed);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += n[i];
  return out;
}

// Tape version: noise is a constant leaf, so gradients pass through the add.
inline Var awgn(Tape& t, Var z, double mu_db, std::uint64_t seed) {
  if (mu_db >= kNoiselessSnrDb) return z;
  Var n = t.constant(awgn_noise(t.val(z).shape, mu_db, seed));
  return t.add(z, n);
}

// 10*log10(signal power / noise power) between a clean and noisy pair.
inline double empirical_snr_db(const Tensor& z, const Tensor& z_hat) {
  double sp = 0.0, np = 0.0;
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    sp += z[i] * z[i];
    const double d = z_hat[i] - z[i];
    np += d * d;
  }
  return 10.0 * std::log10(sp / np);
}

}  // namespace ajsscc
