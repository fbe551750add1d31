#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "dive/error.hpp"
#include "dive/rng.hpp"
#include "dive/world.hpp"

namespace dive {
namespace {

// Independent pinhole projection: world point -> normalized (u, v), or false
// when the point is behind the camera.
bool project_point(const CameraSpec& cam, double x, double y, double z, double& u, double& v) {
  const double rx = x - cam.translation[0], ry = y - cam.translation[1], rz = z - cam.translation[2];
  const auto& r = cam.rotation;
  const double cx = r[0] * rx + r[3] * ry + r[6] * rz;
  const double cy = r[1] * rx + r[4] * ry + r[7] * rz;
  const double cz = r[2] * rx + r[5] * ry + r[8] * rz;
  if (cz <= 0.0) return false;
  const auto& k = cam.intrinsics;
  u = (k[0] * cx + k[1] * cy + k[2] * cz) / cz;
  v = (k[3] * cx + k[4] * cy + k[5] * cz) / cz;
  return true;
}

SceneSpec empty_scene(const ToyWorld& world, int label) {
  SceneSpec s;
  s.label = label;
  s.frames = world.frames;
  s.cameras = world.camera_rig();
  s.road.offset = 1000.0;  // far off to the side
  return s;
}

TEST(Rig, FrontCameraLooksDownTheZAxis) {
  ToyWorld world;
  const auto rig = world.camera_rig();
  ASSERT_EQ(rig.size(), 3u);
  double u = 0, v = 0;
  ASSERT_TRUE(project_point(rig[1], rig[1].translation[0], rig[1].translation[1], 30.0, u, v));
  EXPECT_NEAR(u, 0.5, 1e-12);
  EXPECT_NEAR(v, 0.5, 1e-12);
  // Side cameras are mirror images of each other.
  EXPECT_NEAR(rig[0].rotation[2], -rig[2].rotation[2], 1e-15);
  EXPECT_NEAR(rig[0].translation[0], -rig[2].translation[0], 1e-15);
}

TEST(Projection, BoxMatchesCornerProjection) {
  ToyWorld world;
  const auto rig = world.camera_rig();
  InstanceSpec inst;
  inst.x = 0.5;
  inst.z = 12.0;
  inst.angle = 0.3;
  inst.vx = 0.2;
  inst.vz = -0.5;
  for (std::size_t t = 0; t < 3; ++t) {
    const double cx = inst.x + inst.vx * t, cz = inst.z + inst.vz * t;
    double u0 = 1e9, v0 = 1e9, u1 = -1e9, v1 = -1e9;
    for (double a : {-0.5, 0.5})
      for (double b : {-0.5, 0.5})
        for (double y : {world.camera_height, world.camera_height - inst.height}) {
          const double dx = a * inst.width, dz = b * inst.length;
          const double wx = cx + dx * std::cos(inst.angle) + dz * std::sin(inst.angle);
          const double wz = cz - dx * std::sin(inst.angle) + dz * std::cos(inst.angle);
          double u, v;
          ASSERT_TRUE(project_point(rig[1], wx, y, wz, u, v));
          u0 = std::min(u0, u), u1 = std::max(u1, u), v0 = std::min(v0, v), v1 = std::max(v1, v);
        }
    u0 = std::clamp(u0, 0.0, 1.0), u1 = std::clamp(u1, 0.0, 1.0);
    v0 = std::clamp(v0, 0.0, 1.0), v1 = std::clamp(v1, 0.0, 1.0);
    const auto box = project_instance(inst, rig[1], world.camera_height, t);
    ASSERT_TRUE(box.has_value());
    EXPECT_TRUE(box->visible);
    EXPECT_NEAR(box->x, u0, 1e-12);
    EXPECT_NEAR(box->y, v0, 1e-12);
    EXPECT_NEAR(box->w, u1 - u0, 1e-12);
    EXPECT_NEAR(box->h, v1 - v0, 1e-12);
  }
}

TEST(Projection, BehindCameraIsInvisible) {
  ToyWorld world;
  InstanceSpec inst;
  inst.z = -10.0;
  EXPECT_FALSE(project_instance(inst, world.camera_rig()[1], world.camera_height, 0).has_value());
}

TEST(Scene, GenerationIsDeterministicAndWellFormed) {
  ToyWorld world;
  Rng a(70), b(70);
  std::set<int> labels;
  for (int i = 0; i < 60; ++i) {
    const SceneSpec s = world.generate_scene(a);
    EXPECT_EQ(s, world.generate_scene(b));
    EXPECT_EQ(s.views(), 3u);
    EXPECT_EQ(s.frames, world.frames);
    EXPECT_LE(s.instances.size(), world.max_instances);
    for (const InstanceSpec& inst : s.instances) {
      ASSERT_EQ(inst.boxes.size(), s.views() * s.frames);
      for (const Box2D& bx : inst.boxes) {
        if (!bx.visible) {
          EXPECT_EQ(bx, Box2D{});
          continue;
        }
        EXPECT_GE(bx.x, 0.0);
        EXPECT_LE(bx.x + bx.w, 1.0 + 1e-12);
        EXPECT_GT(bx.w, 0.0);
      }
    }
    labels.insert(s.label);
  }
  EXPECT_EQ(labels.size(), static_cast<std::size_t>(kSceneLabels));
}

TEST(Scene, FrameWindowAdvancesInstances) {
  ToyWorld world;
  Rng rng(71);
  SceneSpec s = world.generate_scene(rng);
  while (s.instances.empty()) s = world.generate_scene(rng);
  const SceneSpec w = s.frame_window(2, 2);
  EXPECT_EQ(w.frames, 2u);
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    EXPECT_DOUBLE_EQ(w.instances[i].x, s.instances[i].x + 2 * s.instances[i].vx);
    for (std::size_t v = 0; v < 3; ++v) EXPECT_EQ(w.instances[i].box(v, 0, 2), s.instances[i].box(v, 2, 4));
  }
  EXPECT_THROW(s.frame_window(3, 2), Error);
}

TEST(Render, ShapeRangeAndDeterminism) {
  ToyWorld world;
  Rng rng(72);
  const SceneSpec s = world.generate_scene(rng);
  for (const Resolution& r : world.buckets) {
    const LatentGrid x = render_oracle(world, s, r.height, r.width);
    EXPECT_EQ(x.tensor().shape(), (Shape{3, 4, r.height, r.width, 4}));
    // Colour channels in [0, 1]; the semantic channel in [-0.5, 1].
    for (std::size_t i = 0; i < x.size(); ++i) {
      ASSERT_GE(x[i], i % 4 == 3 ? -0.5 : 0.0);
      ASSERT_LE(x[i], 1.0);
    }
    EXPECT_EQ(x, render_oracle(world, s, r.height, r.width));
  }
}

TEST(Render, EmptySceneTopRowIsSkyAndBottomRowIsGround) {
  ToyWorld world;
  for (int label = 0; label < kSceneLabels; ++label) {
    const LatentGrid x = render_oracle(world, empty_scene(world, label), 16, 28);
    const auto sky = sky_colour(label), ground = ground_colour(label);
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_DOUBLE_EQ(x.at(1, 0, 0, 14, c), sky[c]);
      EXPECT_DOUBLE_EQ(x.at(1, 3, 15, 14, c), ground[c]);
    }
  }
}

TEST(Render, WideRoadCoversTheNearGround) {
  ToyWorld world;
  SceneSpec s = empty_scene(world, 0);
  s.road.offset = 0.0;
  s.road.half_width = 500.0;
  const LatentGrid x = render_oracle(world, s, 16, 28);
  const SketchRaster r = rasterize_sketch(world, s, 16, 28);
  const auto road = road_colour(0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(x.at(1, 0, 15, 14, c), road[c]);
  EXPECT_EQ(r.data[((1 * 4 + 0) * 16 + 15) * 28 + 14], 1.0);
  EXPECT_EQ(r.data[((1 * 4 + 0) * 16 + 0) * 28 + 14], 0.0);
}

TEST(Render, NightIsDarker) {
  ToyWorld world;
  auto luminance = [&](int label) {
    const LatentGrid x = render_oracle(world, empty_scene(world, label), 8, 14);
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); i += 4) sum += x[i] + x[i + 1] + x[i + 2];
    return sum;
  };
  for (int day : {0, 1, 2, 3}) {
    EXPECT_LT(luminance(4), luminance(day));
    EXPECT_LT(luminance(5), luminance(day));
  }
}

TEST(Render, InteriorPixelOfNearestBoxHasInstanceColour) {
  ToyWorld world;
  SceneSpec s = empty_scene(world, 2);
  InstanceSpec inst;
  inst.z = 8.0;
  inst.caption_id = 3;
  s.instances.push_back(inst);
  project_boxes(s, world.camera_height);
  const Box2D& b = s.instances[0].box(1, 0, s.frames);
  ASSERT_TRUE(b.visible);
  const std::size_t h = 16, w = 28;
  const std::size_t px = static_cast<std::size_t>((b.x + b.w / 2) * w);
  const std::size_t py = static_cast<std::size_t>((b.y + b.h / 2) * h);
  ASSERT_GT(b.w * w, 2.0);
  ASSERT_GT(b.h * h, 2.0);
  const LatentGrid x = render_oracle(world, s, h, w);
  const auto colour = instance_colour(2, 3, 0.0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(x.at(1, 0, py, px, c), colour[c]);
}

TEST(Render, PartialCoverageBlends) {
  ToyWorld world;
  SceneSpec s = empty_scene(world, 0);
  InstanceSpec inst;
  inst.z = 10.0;
  s.instances.push_back(inst);
  project_boxes(s, world.camera_height);
  const Box2D& b = s.instances[0].box(1, 0, s.frames);
  const std::size_t h = 8, w = 14;
  // Column containing the left edge of the box.
  const std::size_t col = static_cast<std::size_t>(b.x * w);
  const std::size_t row = static_cast<std::size_t>((b.y + b.h / 2) * h);
  const LatentGrid with = render_oracle(world, s, h, w);
  SceneSpec bare = s;
  bare.instances.clear();
  const LatentGrid without = render_oracle(world, bare, h, w);
  const double bg = without.at(1, 0, row, col, 3);
  const double fg = instance_colour(0, 0, 0.0)[3];
  const double mixed = with.at(1, 0, row, col, 3);
  EXPECT_GE(mixed, std::min(bg, fg) - 1e-12);
  EXPECT_LE(mixed, std::max(bg, fg) + 1e-12);
}

TEST(Render, RejectsBadInput) {
  ToyWorld world;
  SceneSpec s = empty_scene(world, 0);
  EXPECT_THROW(render_oracle(world, s, 0, 4), Error);
  s.label = 9;
  EXPECT_THROW(render_oracle(world, s, 4, 4), Error);
}

TEST(Sketch, BinaryAndStaticAcrossFrames) {
  ToyWorld world;
  Rng rng(73);
  const SceneSpec s = world.generate_scene(rng);
  const auto rasters = rasterize_sketches(world, s);
  ASSERT_EQ(rasters.size(), world.buckets.size());
  for (const SketchRaster& r : rasters) {
    const std::size_t hw = r.height() * r.width();
    for (std::size_t v = 0; v < 3; ++v)
      for (std::size_t t = 1; t < 4; ++t)
        for (std::size_t i = 0; i < hw; ++i) {
          const double a = r.data[(v * 4 + t) * hw + i];
          ASSERT_TRUE(a == 0.0 || a == 1.0);
          ASSERT_EQ(a, r.data[(v * 4) * hw + i]);
        }
  }
}

TEST(Road, LateralTest) {
  RoadSpec road;
  road.offset = 1.0;
  road.half_width = 2.0;
  EXPECT_TRUE(on_road(road, 2.5, 10.0));
  EXPECT_FALSE(on_road(road, 3.5, 10.0));
  EXPECT_FALSE(on_road(road, 1.0, -1.0));
  road.has_cross = true;
  road.cross_z = 15.0;
  EXPECT_TRUE(on_road(road, 40.0, 16.0));
}

}  // namespace
}  // namespace dive
