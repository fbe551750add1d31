#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "dive/conditions.hpp"
#include "dive/latent.hpp"

namespace dive {

class Rng;

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t area() const { return height * width; }
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

/// Synthetic driving world: three cameras on a static ego rig looking over a
/// ground plane with a road and moving boxes. World axes: x right, y down,
/// z forward; the ground is the plane y = camera_height.
struct ToyWorld {
  std::size_t views = 3;
  std::size_t frames = 4;
  std::size_t channels = 4;
  std::size_t max_instances = 4;
  std::vector<Resolution> buckets{{8, 14}, {12, 21}, {16, 28}};
  double camera_height = 1.5;
  int supersample = 4;  // per axis

  std::vector<CameraSpec> camera_rig() const;
  SceneSpec generate_scene(Rng& rng) const;
};

inline constexpr int kSceneLabels = 6;
inline constexpr int kCaptions = 8;

/// Projected 2-D box of an instance at its current state; nullopt when any
/// corner falls behind the camera or the clipped box is empty.
std::optional<Box2D> project_instance(const InstanceSpec& inst, const CameraSpec& cam, double camera_height,
                                      std::size_t frame);

/// Fills InstanceSpec::boxes for every view and frame.
void project_boxes(SceneSpec& scene, double camera_height);

/// Lateral road test on the ground plane.
bool on_road(const RoadSpec& road, double x, double z);

/// Deterministic render [V, T, H, W, C] with per-pixel supersampling.
LatentGrid render_oracle(const ToyWorld& world, const SceneSpec& scene, std::size_t height, std::size_t width);

/// Binary road raster sampled at pixel centres [V, T, H, W, 1].
SketchRaster rasterize_sketch(const ToyWorld& world, const SceneSpec& scene, std::size_t height, std::size_t width);
/// One raster per bucket.
std::vector<SketchRaster> rasterize_sketches(const ToyWorld& world, const SceneSpec& scene);

/// Background colour (all channels) of a label, used by empty scenes.
std::array<double, 4> sky_colour(int label);
std::array<double, 4> ground_colour(int label);
std::array<double, 4> road_colour(int label);
std::array<double, 4> instance_colour(int label, int caption, double angle);

}  // namespace dive
