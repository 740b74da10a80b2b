#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ajsscc/image_io.hpp"
#include "ajsscc/rng.hpp"
#include "ajsscc/tensor.hpp"

namespace ajsscc {

// Values live in [0,1]; data is (n, C, H, W).
struct ImageBatch {
  Tensor data;
  std::vector<std::string> source_ids;

  std::int64_t size() const { return data.ndim() == 4 ? data.shape[0] : 0; }
};

struct BlockGeometry {
  std::int64_t B = 0, gh = 0, gw = 0, channels = 0;
  std::int64_t l() const { return gh * gw; }
  std::int64_t N() const { return B * B; }
};

// l blocks of dimension N = B*B per channel plane, block row-major order,
// pixels row-major within each block.
struct BlockSet {
  Tensor blocks;  // (n, C, l, N)
  BlockGeometry geom;
};

inline BlockSet unfold(const ImageBatch& img, std::int64_t B) {
  const Tensor& x = img.data;
  if (x.ndim() != 4) throw std::invalid_argument("unfold: batch must be 4-axis");
  const std::int64_t n = x.shape[0], c = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (B <= 0 || H % B != 0 || W % B != 0)
    throw std::invalid_argument("unfold: geometry H=" + std::to_string(H) +
                                " W=" + std::to_string(W) + " not divisible by B=" +
                                std::to_string(B));
  BlockSet out;
  out.geom = BlockGeometry{B, H / B, W / B, c};
  const std::int64_t gh = out.geom.gh, gw = out.geom.gw, l = gh * gw, N = B * B;
  out.blocks = Tensor({n, c, l, N});
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t by = 0; by < gh; ++by)
        for (std::int64_t bx = 0; bx < gw; ++bx)
          for (std::int64_t py = 0; py < B; ++py)
            for (std::int64_t px = 0; px < B; ++px)
              out.blocks[(((s * c + ch) * l + by * gw + bx) * N + py * B + px)] =
                  x.at4(s, ch, by * B + py, bx * B + px);
  return out;
}

inline ImageBatch fold(const BlockSet& bs) {
  const Tensor& x = bs.blocks;
  if (x.ndim() != 4) throw std::invalid_argument("fold: blocks must be 4-axis");
  const std::int64_t n = x.shape[0], c = x.shape[1], l = x.shape[2], N = x.shape[3];
  const std::int64_t B = bs.geom.B, gh = bs.geom.gh, gw = bs.geom.gw;
  if (l != gh * gw || N != B * B || c != bs.geom.channels)
    throw std::invalid_argument("fold: block set inconsistent with recorded geometry");
  ImageBatch out;
  out.data = Tensor({n, c, gh * B, gw * B});
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t by = 0; by < gh; ++by)
        for (std::int64_t bx = 0; bx < gw; ++bx)
          for (std::int64_t py = 0; py < B; ++py)
            for (std::int64_t px = 0; px < B; ++px)
              out.data.at4(s, ch, by * B + py, bx * B + px) =
                  x[(((s * c + ch) * l + by * gw + bx) * N + py * B + px)];
  return out;
}

inline Tensor clamp01_tensor(Tensor t) {
  for (auto& v : t.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return t;
}

struct DatasetOptions {
  std::string path;
  std::int64_t crop = 64;
  bool augment = false;
  std::uint64_t seed = 0;
  bool grayscale = true;
  std::int64_t batch_size = 8;
  bool prefetch = true;
  // Split by sorted order: the last round(fraction*n) usable images form the
  // validation side. 0 disables the split.
  double holdout_fraction = 0.0;
  bool holdout_side_val = false;
};

// Directory-backed image source. Decoded images are cached after first use;
// per-epoch order, crop positions and rotations are pure functions of
// (seed, epoch, index), so streams replay identically and prefetching cannot
// change results.
class Dataset {
 public:
  explicit Dataset(DatasetOptions opt) : opt_(std::move(opt)) {
    namespace fs = std::filesystem;
    if (!fs::exists(opt_.path) || !fs::is_directory(opt_.path))
      throw std::runtime_error("dataset: directory not found: " + opt_.path);
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(opt_.path))
      if (e.is_regular_file() && is_image_path(e.path().string()))
        files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto img = load_image(f, opt_.grayscale);
      if (!img) {
        std::cerr << "warning: skipping unreadable image " << f << "\n";
        ++skipped_;
        continue;
      }
      if (img->w < opt_.crop || img->h < opt_.crop) {
        std::cerr << "warning: skipping image smaller than crop " << opt_.crop << ": " << f
                  << "\n";
        ++skipped_;
        continue;
      }
      images_.push_back(to_tensor(*img));
      ids_.push_back(f);
    }
    if (images_.empty())
      throw std::runtime_error("dataset: no usable images in " + opt_.path +
                               " (need decodable images of size >= " +
                               std::to_string(opt_.crop) + "x" + std::to_string(opt_.crop) +
                               ")");
    if (opt_.holdout_fraction > 0.0 && images_.size() > 1) {
      const auto n = static_cast<std::int64_t>(images_.size());
      std::int64_t held = std::llround(opt_.holdout_fraction * static_cast<double>(n));
      held = std::max<std::int64_t>(1, std::min<std::int64_t>(n - 1, held));
      const std::size_t split = static_cast<std::size_t>(n - held);
      if (opt_.holdout_side_val) {
        images_.erase(images_.begin(), images_.begin() + static_cast<std::ptrdiff_t>(split));
        ids_.erase(ids_.begin(), ids_.begin() + static_cast<std::ptrdiff_t>(split));
      } else {
        images_.resize(split);
        ids_.resize(split);
      }
    }
  }

  std::int64_t image_count() const { return static_cast<std::int64_t>(images_.size()); }
  std::int64_t skipped_count() const { return skipped_; }
  std::int64_t batches_per_epoch() const {
    return (image_count() + opt_.batch_size - 1) / opt_.batch_size;
  }
  const DatasetOptions& options() const { return opt_; }

  // All batches of one epoch in order.
  std::vector<ImageBatch> epoch(std::uint64_t epoch_index) const {
    std::vector<std::int64_t> order(images_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    if (opt_.augment) {
      Rng rng(derive_seed(opt_.seed, "order", epoch_index));
      for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, i)]);
    }
    std::vector<ImageBatch> out;
    for (std::int64_t start = 0; start < image_count(); start += opt_.batch_size) {
      const std::int64_t bs = std::min<std::int64_t>(opt_.batch_size, image_count() - start);
      ImageBatch b;
      const std::int64_t C = images_[0].shape[0];
      b.data = Tensor({bs, C, opt_.crop, opt_.crop});
      for (std::int64_t j = 0; j < bs; ++j) {
        const std::int64_t idx = order[static_cast<std::size_t>(start + j)];
        Tensor crop = make_crop(idx, epoch_index, static_cast<std::uint64_t>(start + j));
        std::copy(crop.data.begin(), crop.data.end(),
                  b.data.data.begin() + j * C * opt_.crop * opt_.crop);
        b.source_ids.push_back(ids_[static_cast<std::size_t>(idx)]);
      }
      out.push_back(std::move(b));
    }
    return out;
  }

 private:
  Tensor to_tensor(const ImageU8& img) const {
    Tensor t({img.c, img.h, img.w});
    for (std::int64_t c = 0; c < img.c; ++c)
      for (std::int64_t y = 0; y < img.h; ++y)
        for (std::int64_t x = 0; x < img.w; ++x)
          t[(c * img.h + y) * img.w + x] =
              img.pixels[(static_cast<std::size_t>(y) * img.w + x) * img.c + c] / 255.0;
    return t;
  }

  Tensor make_crop(std::int64_t idx, std::uint64_t epoch_index, std::uint64_t pos) const {
    const Tensor& src = images_[static_cast<std::size_t>(idx)];
    const std::int64_t C = src.shape[0], H = src.shape[1], W = src.shape[2];
    const std::int64_t cs = opt_.crop;
    std::int64_t y0 = (H - cs) / 2, x0 = (W - cs) / 2;
    int rot = 0;
    if (opt_.augment) {
      Rng rng(derive_seed(opt_.seed, "aug", epoch_index, pos));
      y0 = rng.uniform_int(0, H - cs);
      x0 = rng.uniform_int(0, W - cs);
      rot = static_cast<int>(rng.uniform_int(0, 3));
    }
    Tensor out({C, cs, cs});
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < cs; ++y)
        for (std::int64_t x = 0; x < cs; ++x) {
          std::int64_t ty = y, tx = x;
          switch (rot) {  // CCW quarter turns
            case 1: ty = x; tx = cs - 1 - y; break;
            case 2: ty = cs - 1 - y; tx = cs - 1 - x; break;
            case 3: ty = cs - 1 - x; tx = y; break;
            default: break;
          }
          out[(c * cs + y) * cs + x] = src[(c * H + y0 + ty) * W + x0 + tx];
        }
    return out;
  }

  DatasetOptions opt_;
  std::vector<Tensor> images_;  // (C, H, W) full images
  std::vector<std::string> ids_;
  std::int64_t skipped_ = 0;
};

// Bounded background prefetch over one epoch. The worker only moves
// already-deterministic batches, so consumption order never changes.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, std::uint64_t epoch_index)
      : prefetch_(ds.options().prefetch) {
    if (prefetch_) {
      worker_ = std::thread([this, &ds, epoch_index] {
        auto batches = ds.epoch(epoch_index);
        for (auto& b : batches) push(std::move(b));
        done();
      });
    } else {
      batches_ = ds.epoch(epoch_index);
    }
  }

  ~BatchStream() {
    if (worker_.joinable()) worker_.join();
  }

  std::optional<ImageBatch> next() {
    if (!prefetch_) {
      if (pos_ >= batches_.size()) return std::nullopt;
      return std::move(batches_[pos_++]);
    }
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || finished_; });
    if (queue_.empty()) return std::nullopt;
    ImageBatch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  void push(ImageBatch b) {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return queue_.size() < 2; });
    queue_.push_back(std::move(b));
    cv_.notify_all();
  }
  void done() {
    std::lock_guard<std::mutex> lock(mu_);
    finished_ = true;
    cv_.notify_all();
  }

  bool prefetch_;
  std::vector<ImageBatch> batches_;
  std::size_t pos_ = 0;
  std::deque<ImageBatch> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool finished_ = false;
  std::thread worker_;
};

}  // namespace ajsscc
