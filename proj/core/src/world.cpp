#include "dive/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

using Vec3 = std::array<double, 3>;

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kFarPlane = 80.0;

Vec3 mul(const std::array<double, 9>& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

// R^T (world -> camera) applied to a world-space offset.
Vec3 mul_transposed(const std::array<double, 9>& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

double night_factor(int label) { return label == 4 || label == 5 ? 0.35 : 1.0; }

std::array<double, 4> scaled(std::array<double, 3> rgb, double semantic, int label) {
  const double f = night_factor(label);
  return {rgb[0] * f, rgb[1] * f, rgb[2] * f, semantic};
}

// Ray direction in world space for normalized image coordinates (u, v).
Vec3 ray(const CameraSpec& cam, double u, double v) {
  const auto& k = cam.intrinsics;
  const Vec3 d{(u - k[2]) / k[0], (v - k[5]) / k[4], 1.0};
  return mul(cam.rotation, d);
}

struct DrawBox {
  Box2D box;
  double depth;
  std::array<double, 4> colour;
};

}  // namespace

std::array<double, 4> sky_colour(int label) {
  static constexpr std::array<std::array<double, 3>, kSceneLabels> kSky{{
      {0.45, 0.70, 0.95},  // clear
      {0.70, 0.72, 0.75},  // overcast
      {0.50, 0.55, 0.60},  // rain
      {0.90, 0.60, 0.40},  // dusk
      {0.10, 0.12, 0.30},  // night
      {0.15, 0.15, 0.20},  // rainy night
  }};
  return scaled(kSky.at(static_cast<std::size_t>(label)), 1.0, label);
}

std::array<double, 4> ground_colour(int label) {
  static constexpr std::array<std::array<double, 3>, kSceneLabels> kGround{{
      {0.35, 0.60, 0.30},
      {0.40, 0.50, 0.35},
      {0.30, 0.40, 0.30},
      {0.55, 0.45, 0.30},
      {0.30, 0.45, 0.30},
      {0.25, 0.35, 0.30},
  }};
  return scaled(kGround.at(static_cast<std::size_t>(label)), -0.5, label);
}

std::array<double, 4> road_colour(int label) {
  static constexpr std::array<std::array<double, 3>, kSceneLabels> kRoad{{
      {0.25, 0.25, 0.28},
      {0.30, 0.30, 0.32},
      {0.15, 0.15, 0.20},
      {0.35, 0.30, 0.28},
      {0.40, 0.40, 0.45},
      {0.30, 0.30, 0.40},
  }};
  return scaled(kRoad.at(static_cast<std::size_t>(label)), 0.0, label);
}

std::array<double, 4> instance_colour(int label, int caption, double angle) {
  static constexpr std::array<std::array<double, 3>, kCaptions> kPalette{{
      {0.90, 0.10, 0.10},
      {0.10, 0.30, 0.90},
      {0.95, 0.85, 0.10},
      {0.95, 0.95, 0.95},
      {0.05, 0.05, 0.05},
      {0.10, 0.75, 0.25},
      {0.90, 0.45, 0.05},
      {0.60, 0.20, 0.70},
  }};
  const double shade = 0.75 + 0.25 * std::cos(angle);
  auto rgb = kPalette.at(static_cast<std::size_t>(caption));
  for (double& c : rgb) c *= shade;
  // Instances keep some brightness at night (lights).
  const double f = std::max(night_factor(label), 0.6);
  return {rgb[0] * f, rgb[1] * f, rgb[2] * f, 0.8};
}

std::vector<CameraSpec> ToyWorld::camera_rig() const {
  static constexpr std::array<double, 3> kYaw{-55.0, 0.0, 55.0};
  static constexpr std::array<double, 3> kZoom{1.0, 1.1, 0.95};
  static constexpr std::array<Vec3, 3> kCentre{{{-0.5, 0.0, 0.2}, {0.0, 0.0, 0.5}, {0.5, 0.0, 0.2}}};
  const double fx0 = 0.5 / std::tan(35.0 * kDeg);
  const double aspect = 28.0 / 16.0;
  std::vector<CameraSpec> rig;
  for (std::size_t v = 0; v < views; ++v) {
    const std::size_t i = v % 3;
    CameraSpec cam;
    const double fx = fx0 * kZoom[i];
    cam.intrinsics = {fx, 0.0, 0.5, 0.0, fx * aspect, 0.5, 0.0, 0.0, 1.0};
    const double c = std::cos(kYaw[i] * kDeg);
    const double s = std::sin(kYaw[i] * kDeg);
    cam.rotation = {c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c};
    cam.translation = kCentre[i];
    rig.push_back(cam);
  }
  return rig;
}

bool on_road(const RoadSpec& road, double x, double z) {
  if (z > 0.0) {
    const double centre = road.offset + road.slope * z + road.curve * z * z;
    if (std::abs(x - centre) < road.half_width) return true;
  }
  return road.has_cross && std::abs(z - road.cross_z) < road.cross_half_width;
}

std::optional<Box2D> project_instance(const InstanceSpec& inst, const CameraSpec& cam, double camera_height,
                                      std::size_t frame) {
  const double t = static_cast<double>(frame);
  const double cx = inst.x + inst.vx * t;
  const double cz = inst.z + inst.vz * t;
  const double ca = std::cos(inst.angle);
  const double sa = std::sin(inst.angle);
  const auto& k = cam.intrinsics;
  double u0 = std::numeric_limits<double>::infinity();
  double v0 = u0;
  double u1 = -u0;
  double v1 = -u0;
  for (int corner = 0; corner < 8; ++corner) {
    const double a = (corner & 1 ? 0.5 : -0.5) * inst.width;
    const double b = (corner & 2 ? 0.5 : -0.5) * inst.length;
    const double y = corner & 4 ? camera_height - inst.height : camera_height;
    // Yaw rotates the footprint about the vertical axis; length runs along heading.
    const Vec3 world{cx + a * ca + b * sa, y, cz - a * sa + b * ca};
    const Vec3 rel{world[0] - cam.translation[0], world[1] - cam.translation[1], world[2] - cam.translation[2]};
    const Vec3 pc = mul_transposed(cam.rotation, rel);
    if (pc[2] < 0.1) return std::nullopt;
    const double u = k[0] * pc[0] / pc[2] + k[2];
    const double v = k[4] * pc[1] / pc[2] + k[5];
    u0 = std::min(u0, u);
    u1 = std::max(u1, u);
    v0 = std::min(v0, v);
    v1 = std::max(v1, v);
  }
  u0 = std::clamp(u0, 0.0, 1.0);
  u1 = std::clamp(u1, 0.0, 1.0);
  v0 = std::clamp(v0, 0.0, 1.0);
  v1 = std::clamp(v1, 0.0, 1.0);
  if (u1 - u0 <= 1e-6 || v1 - v0 <= 1e-6) return std::nullopt;
  return Box2D{u0, v0, u1 - u0, v1 - v0, true};
}

void project_boxes(SceneSpec& scene, double camera_height) {
  for (InstanceSpec& inst : scene.instances) {
    inst.boxes.assign(scene.views() * scene.frames, Box2D{});
    for (std::size_t v = 0; v < scene.views(); ++v) {
      for (std::size_t t = 0; t < scene.frames; ++t) {
        if (auto b = project_instance(inst, scene.cameras[v], camera_height, t)) inst.boxes[v * scene.frames + t] = *b;
      }
    }
  }
}

SceneSpec ToyWorld::generate_scene(Rng& rng) const {
  SceneSpec scene;
  scene.label = static_cast<int>(rng.uniform_int(kSceneLabels));
  scene.frames = frames;
  scene.cameras = camera_rig();
  RoadSpec& road = scene.road;
  road.offset = rng.uniform(-2.0, 2.0);
  road.slope = rng.uniform(-0.15, 0.15);
  road.curve = rng.uniform(-0.005, 0.005);
  road.half_width = rng.uniform(2.5, 4.0);
  road.has_cross = rng.bernoulli(0.35);
  road.cross_z = rng.uniform(10.0, 25.0);
  road.cross_half_width = rng.uniform(2.0, 3.5);

  const std::size_t n = rng.uniform_int(static_cast<std::uint32_t>(max_instances + 1));
  for (std::size_t i = 0; i < n; ++i) {
    InstanceSpec inst;
    for (int attempt = 0; attempt < 20; ++attempt) {
      inst.z = rng.uniform(5.0, 22.0);
      inst.x = rng.uniform(-10.0, 10.0);
      inst.length = rng.uniform(3.5, 5.0);
      inst.width = rng.uniform(1.7, 2.3);
      inst.height = rng.uniform(1.3, 2.2);
      inst.angle = rng.uniform(-1.0, 1.0);
      inst.vx = rng.uniform(-0.3, 0.3);
      inst.vz = rng.uniform(-0.6, 0.6);
      inst.caption_id = static_cast<int>(rng.uniform_int(kCaptions));
      bool seen = false;
      for (const CameraSpec& cam : scene.cameras) seen = seen || project_instance(inst, cam, camera_height, 0).has_value();
      if (seen) break;
    }
    scene.instances.push_back(inst);
  }
  project_boxes(scene, camera_height);
  return scene;
}

LatentGrid render_oracle(const ToyWorld& world, const SceneSpec& scene, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw Error(ErrorCode::kInvalidArgument, "render resolution must be >= 1x1");
  if (scene.label < 0 || scene.label >= kSceneLabels) throw Error(ErrorCode::kInvalidArgument, "scene label out of range");
  const std::size_t views = scene.views();
  const std::size_t frames = scene.frames;
  const std::size_t ch = world.channels;
  LatentGrid out(views, frames, height, width, ch);
  const int ss = world.supersample;
  const double inv = 1.0 / static_cast<double>(ss * ss);
  const auto sky = sky_colour(scene.label);
  const auto ground = ground_colour(scene.label);
  const auto road = road_colour(scene.label);

  for (std::size_t v = 0; v < views; ++v) {
    const CameraSpec& cam = scene.cameras[v];
    // Background is static across frames.
    LatentGrid background(1, 1, height, width, ch);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        std::array<double, 4> acc{};
        for (int sy = 0; sy < ss; ++sy) {
          for (int sx = 0; sx < ss; ++sx) {
            const double u = (static_cast<double>(x) + (sx + 0.5) / ss) / static_cast<double>(width);
            const double w = (static_cast<double>(y) + (sy + 0.5) / ss) / static_cast<double>(height);
            const Vec3 d = ray(cam, u, w);
            const std::array<double, 4>* c = &sky;
            if (d[1] > 1e-9) {
              const double lam = (world.camera_height - cam.translation[1]) / d[1];
              const double gx = cam.translation[0] + lam * d[0];
              const double gz = cam.translation[2] + lam * d[2];
              if (std::hypot(gx, gz) < kFarPlane) c = on_road(scene.road, gx, gz) ? &road : &ground;
            }
            for (std::size_t k = 0; k < 4; ++k) acc[k] += (*c)[k];
          }
        }
        for (std::size_t k = 0; k < ch && k < 4; ++k) background.at(0, 0, y, x, k) = acc[k] * inv;
      }
    }

    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<DrawBox> boxes;
      for (const InstanceSpec& inst : scene.instances) {
        const Box2D& b = inst.box(v, t, frames);
        if (!b.visible) continue;
        const double ft = static_cast<double>(t);
        const double dx = inst.x + inst.vx * ft - cam.translation[0];
        const double dz = inst.z + inst.vz * ft - cam.translation[2];
        boxes.push_back({b, std::hypot(dx, dz), instance_colour(scene.label, inst.caption_id, inst.angle)});
      }
      std::stable_sort(boxes.begin(), boxes.end(), [](const DrawBox& a, const DrawBox& b) { return a.depth > b.depth; });

      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          std::array<double, 4> acc{};
          int covered = 0;
          for (int sy = 0; sy < ss; ++sy) {
            for (int sx = 0; sx < ss; ++sx) {
              const double u = (static_cast<double>(x) + (sx + 0.5) / ss) / static_cast<double>(width);
              const double w = (static_cast<double>(y) + (sy + 0.5) / ss) / static_cast<double>(height);
              const std::array<double, 4>* c = nullptr;
              for (const DrawBox& db : boxes) {
                if (u >= db.box.x && u < db.box.x + db.box.w && w >= db.box.y && w < db.box.y + db.box.h) {
                  c = &db.colour;
                }
              }
              if (!c) continue;
              ++covered;
              for (std::size_t k = 0; k < 4; ++k) acc[k] += (*c)[k];
            }
          }
          const double bg_weight = static_cast<double>(ss * ss - covered) * inv;
          for (std::size_t k = 0; k < ch && k < 4; ++k) {
            out.at(v, t, y, x, k) = covered == 0 ? background.at(0, 0, y, x, k)
                                                 : acc[k] * inv + bg_weight * background.at(0, 0, y, x, k);
          }
        }
      }
    }
  }
  return out;
}

SketchRaster rasterize_sketch(const ToyWorld& world, const SceneSpec& scene, std::size_t height, std::size_t width) {
  const std::size_t views = scene.views();
  SketchRaster out{Tensor({views, scene.frames, height, width, 1})};
  for (std::size_t v = 0; v < views; ++v) {
    const CameraSpec& cam = scene.cameras[v];
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(width);
        const double w = (static_cast<double>(y) + 0.5) / static_cast<double>(height);
        const Vec3 d = ray(cam, u, w);
        double value = 0.0;
        if (d[1] > 1e-9) {
          const double lam = (world.camera_height - cam.translation[1]) / d[1];
          const double gx = cam.translation[0] + lam * d[0];
          const double gz = cam.translation[2] + lam * d[2];
          if (std::hypot(gx, gz) < kFarPlane && on_road(scene.road, gx, gz)) value = 1.0;
        }
        for (std::size_t t = 0; t < scene.frames; ++t) {
          out.data[(((v * scene.frames + t) * height + y) * width + x)] = value;
        }
      }
    }
  }
  return out;
}

std::vector<SketchRaster> rasterize_sketches(const ToyWorld& world, const SceneSpec& scene) {
  std::vector<SketchRaster> out;
  for (const Resolution& r : world.buckets) out.push_back(rasterize_sketch(world, scene, r.height, r.width));
  return out;
}

}  // namespace dive
