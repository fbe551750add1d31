#include "dive/latent.hpp"

#include <algorithm>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

LatentGrid::LatentGrid(std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                       std::size_t channels, double fill)
    : data_({views, frames, height, width, channels}, fill) {}

LatentGrid::LatentGrid(Tensor data) : data_(std::move(data)) {
  if (data_.rank() != 5) throw Error(ErrorCode::kShapeMismatch, "LatentGrid needs rank 5, got " + shape_string(data_.shape()));
}

std::string LatentGrid::resolution_tag() const {
  return std::to_string(height()) + "x" + std::to_string(width());
}

LatentGrid gaussian_latent(std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                           std::size_t channels, Rng& rng) {
  LatentGrid g(views, frames, height, width, channels);
  for (double& v : g.tensor().values()) v = rng.normal();
  return g;
}

LatentGrid axpy(const LatentGrid& a, double s, const LatentGrid& b) {
  if (!a.same_layout(b)) throw Error(ErrorCode::kShapeMismatch, "latent axpy: layouts differ");
  LatentGrid out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * b[i];
  return out;
}

LatentGrid lincomb(double wa, const LatentGrid& a, double wb, const LatentGrid& b) {
  if (!a.same_layout(b)) throw Error(ErrorCode::kShapeMismatch, "latent lincomb: layouts differ");
  LatentGrid out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * a[i] + wb * b[i];
  return out;
}

LatentGrid slice_frames(const LatentGrid& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.frames()) throw Error(ErrorCode::kInvalidArgument, "slice_frames out of range");
  LatentGrid out(x.views(), count, x.height(), x.width(), x.channels());
  const std::size_t fs = x.frame_size();
  for (std::size_t v = 0; v < x.views(); ++v) {
    std::copy_n(x.tensor().data() + x.index(v, begin, 0, 0, 0), count * fs, out.tensor().data() + out.index(v, 0, 0, 0, 0));
  }
  return out;
}

LatentGrid concat_frames(const LatentGrid& a, const LatentGrid& b) {
  if (a.views() != b.views() || a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels()) {
    throw Error(ErrorCode::kShapeMismatch, "concat_frames: layouts differ");
  }
  LatentGrid out(a.views(), a.frames() + b.frames(), a.height(), a.width(), a.channels());
  const std::size_t fs = a.frame_size();
  for (std::size_t v = 0; v < a.views(); ++v) {
    std::copy_n(a.tensor().data() + a.index(v, 0, 0, 0, 0), a.frames() * fs, out.tensor().data() + out.index(v, 0, 0, 0, 0));
    std::copy_n(b.tensor().data() + b.index(v, 0, 0, 0, 0), b.frames() * fs,
                out.tensor().data() + out.index(v, a.frames(), 0, 0, 0));
  }
  return out;
}

double mean_squared_error(const LatentGrid& a, const LatentGrid& b) {
  if (!a.same_layout(b)) throw Error(ErrorCode::kShapeMismatch, "mse: layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

}  // namespace dive
