#pragma once

#include <cstddef>
#include <string>

#include "dive/tensor.hpp"

namespace dive {

class Rng;

/// Multi-view video latent [V, T, H, W, C].
class LatentGrid {
 public:
  LatentGrid() = default;
  LatentGrid(std::size_t views, std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
             double fill = 0.0);
  explicit LatentGrid(Tensor data);

  std::size_t views() const { return data_.dim(0); }
  std::size_t frames() const { return data_.dim(1); }
  std::size_t height() const { return data_.dim(2); }
  std::size_t width() const { return data_.dim(3); }
  std::size_t channels() const { return data_.dim(4); }
  std::size_t frame_size() const { return height() * width() * channels(); }

  /// "HxW", e.g. "16x28".
  std::string resolution_tag() const;

  double& at(std::size_t v, std::size_t t, std::size_t y, std::size_t x, std::size_t c) {
    return data_[index(v, t, y, x, c)];
  }
  double at(std::size_t v, std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return data_[index(v, t, y, x, c)];
  }
  std::size_t index(std::size_t v, std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return (((v * frames() + t) * height() + y) * width() + x) * channels() + c;
  }

  Tensor& tensor() noexcept { return data_; }
  const Tensor& tensor() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_layout(const LatentGrid& o) const { return data_.same_shape(o.data_); }

  friend bool operator==(const LatentGrid& a, const LatentGrid& b) { return a.data_ == b.data_; }

 private:
  Tensor data_;
};

LatentGrid gaussian_latent(std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                           std::size_t channels, Rng& rng);

/// a + s * b.
LatentGrid axpy(const LatentGrid& a, double s, const LatentGrid& b);
/// wa * a + wb * b.
LatentGrid lincomb(double wa, const LatentGrid& a, double wb, const LatentGrid& b);

/// Frames [begin, begin + count) of every view.
LatentGrid slice_frames(const LatentGrid& x, std::size_t begin, std::size_t count);
/// Concatenates along the frame axis.
LatentGrid concat_frames(const LatentGrid& a, const LatentGrid& b);

double mean_squared_error(const LatentGrid& a, const LatentGrid& b);

}  // namespace dive
