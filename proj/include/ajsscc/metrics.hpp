#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ajsscc/tensor.hpp"

namespace ajsscc {

inline constexpr double kPsnrCapDb = 99.0;

inline double mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

// 10*log10(1/MSE) for unit peak value, capped for exact matches.
inline double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m <= 0.0) return kPsnrCapDb;
  const double v = 10.0 * std::log10(1.0 / m);
  return v > kPsnrCapDb ? kPsnrCapDb : v;
}

namespace detail {

inline std::vector<double> ssim_window() {
  // 11-tap Gaussian, sigma = 1.5, normalized
  std::vector<double> g(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5.0;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// separable valid-mode filtering of one (H, W) plane with the 11-tap window
inline std::vector<double> ssim_filter(const double* src, std::int64_t H, std::int64_t W,
                                       const std::vector<double>& g) {
  const std::int64_t ow = W - 10;
  const std::int64_t oh = H - 10;
  std::vector<double> tmp(static_cast<std::size_t>(H * ow));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += g[static_cast<std::size_t>(k)] * src[y * W + x + k];
      tmp[static_cast<std::size_t>(y * ow + x)] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += g[static_cast<std::size_t>(k)] * tmp[(y + k) * ow + x];
      out[static_cast<std::size_t>(y * ow + x)] = acc;
    }
  return out;
}

}  // namespace detail

// Windowed SSIM: 11x11 Gaussian (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 at unit
// peak, averaged over valid windows, channels and batch entries.
inline double ssim(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "ssim");
  if (a.ndim() != 4) throw std::invalid_argument("ssim: expected (n, c, h, w)");
  const std::int64_t n = a.shape[0], c = a.shape[1], H = a.shape[2], W = a.shape[3];
  if (H < 11 || W < 11)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  static const std::vector<double> g = detail::ssim_window();
  const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const std::int64_t planes = n * c, hw = H * W;
  double total = 0.0;
  std::int64_t count = 0;
  std::vector<double> xx(static_cast<std::size_t>(hw)), yy(xx.size()), xy(xx.size());
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* x = a.data.data() + p * hw;
    const double* y = b.data.data() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      xx[static_cast<std::size_t>(i)] = x[i] * x[i];
      yy[static_cast<std::size_t>(i)] = y[i] * y[i];
      xy[static_cast<std::size_t>(i)] = x[i] * y[i];
    }
    const auto mx = detail::ssim_filter(x, H, W, g);
    const auto my = detail::ssim_filter(y, H, W, g);
    const auto mxx = detail::ssim_filter(xx.data(), H, W, g);
    const auto myy = detail::ssim_filter(yy.data(), H, W, g);
    const auto mxy = detail::ssim_filter(xy.data(), H, W, g);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double sx = mxx[i] - mx[i] * mx[i];
      const double sy = myy[i] - my[i] * my[i];
      const double sxy = mxy[i] - mx[i] * my[i];
      const double num = (2.0 * mx[i] * my[i] + C1) * (2.0 * sxy + C2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + C1) * (sx + sy + C2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace ajsscc
