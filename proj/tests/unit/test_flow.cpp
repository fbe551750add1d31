#include <gtest/gtest.h>

#include <cmath>

#include "dive/error.hpp"
#include "dive/flow.hpp"
#include "dive/optim.hpp"
#include "dive/rng.hpp"
#include "dive/world.hpp"
#include "test_support.hpp"

namespace dive {
namespace {

// Knows the data point: the straight-path velocity from the current state.
FunctionVelocity exact_velocity(const LatentGrid& data) {
  return FunctionVelocity([data](const LatentGrid& x, double s) { return lincomb(1.0 / s, data, -1.0 / s, x); });
}

class FlowModel : public ::testing::Test {
 protected:
  ToyWorld world;
  BackboneConfig cfg;
  ModelParams params = ModelParams::create(cfg, 5);
  SceneSpec scene;
  GuidedConditions cond;

  void SetUp() override {
    Rng rng(21);
    testing::randomize(params.parameters(), rng, 0.1);
    scene = world.generate_scene(rng);
    cond = GuidedConditions::from(params.conditions,
                                  encode_conditions(params.conditions, scene, {rasterize_sketch(world, scene, 4, 6)}));
  }
  LatentGrid latent(std::uint64_t seed) {
    Rng rng(seed);
    return testing::random_latent(3, 4, 4, 6, cfg.channels, rng);
  }
};

TEST(Guidance, NamesRoundTrip) {
  for (GuidanceMode m : {GuidanceMode::kOff, GuidanceMode::kExtended, GuidanceMode::kNight, GuidanceMode::kMad}) {
    EXPECT_EQ(parse_guidance(guidance_name(m)), m);
  }
  EXPECT_THROW(parse_guidance("cfg"), Error);
}

TEST(Guidance, NightLabelsDefaultToNightMode) {
  EXPECT_EQ(default_guidance_for(4), GuidanceMode::kNight);
  EXPECT_EQ(default_guidance_for(5), GuidanceMode::kNight);
  EXPECT_EQ(default_guidance_for(0), GuidanceMode::kExtended);
}

TEST_F(FlowModel, ScaleOneIsTheConditionalPass) {
  const LatentGrid x = latent(1);
  const LatentGrid vc = denoiser_forward(x, 0.6, cond.full, params);
  for (GuidanceMode m : {GuidanceMode::kExtended, GuidanceMode::kNight}) {
    EXPECT_EQ(cfg_velocity(x, 0.6, cond, {m, 1.0}, params), vc);
  }
  EXPECT_EQ(cfg_velocity(x, 0.6, cond, {GuidanceMode::kOff, 7.0}, params), vc);
}

TEST_F(FlowModel, ScaleZeroExtendedIsTheNullPass) {
  const LatentGrid x = latent(2);
  EXPECT_EQ(cfg_velocity(x, 0.3, cond, {GuidanceMode::kExtended, 0.0}, params),
            denoiser_forward(x, 0.3, cond.null_all, params));
  EXPECT_EQ(cfg_velocity(x, 0.3, cond, {GuidanceMode::kNight, 0.0}, params),
            denoiser_forward(x, 0.3, cond.text_only, params));
}

TEST_F(FlowModel, AffineInScale) {
  const LatentGrid x = latent(3);
  for (GuidanceMode m : {GuidanceMode::kExtended, GuidanceMode::kNight}) {
    const LatentGrid v0 = cfg_velocity(x, 0.5, cond, {m, 0.0}, params);
    const LatentGrid v1 = cfg_velocity(x, 0.5, cond, {m, 1.0}, params);
    for (double lambda : {0.5, 2.0, 3.7}) {
      const LatentGrid v = cfg_velocity(x, 0.5, cond, {m, lambda}, params);
      const LatentGrid ref = axpy(v0, lambda, axpy(v1, -1.0, v0));
      EXPECT_LE(max_abs_diff(v.tensor(), ref.tensor()), 1e-12);
    }
  }
}

TEST_F(FlowModel, NfePerCall) {
  const LatentGrid x = latent(4);
  std::size_t nfe = 0;
  cfg_velocity(x, 0.5, cond, {GuidanceMode::kExtended, 2.0}, params, &nfe);
  EXPECT_EQ(nfe, 2u);
  cfg_velocity(x, 0.5, cond, {GuidanceMode::kOff, 2.0}, params, &nfe);
  EXPECT_EQ(nfe, 3u);
  EXPECT_THROW(cfg_velocity(x, 0.5, cond, {GuidanceMode::kExtended, -1.0}, params), Error);
  EXPECT_THROW(cfg_velocity(x, 0.5, cond, {GuidanceMode::kMad, 2.0}, params), Error);
}

TEST_F(FlowModel, EulerNfeAccounting) {
  EXPECT_EQ(euler_sample(params, cond, {GuidanceMode::kExtended, 2.0}, 30, 4, 6, 1).run.nfe, 60u);
  EXPECT_EQ(euler_sample(params, cond, {GuidanceMode::kNight, 2.0}, 30, 4, 6, 1).run.nfe, 60u);
  const SampleResult off = euler_sample(params, cond, {GuidanceMode::kOff, 1.0}, 30, 4, 6, 1);
  EXPECT_EQ(off.run.nfe, 30u);
  EXPECT_EQ(off.run.steps, 30u);
  EXPECT_EQ(off.run.levels.size(), 31u);
  EXPECT_EQ(off.run.levels.front(), 1.0);
  EXPECT_EQ(off.run.levels.back(), 0.0);
  EXPECT_EQ(off.run.token_steps, 30u * 24u);
}

TEST_F(FlowModel, SamplingIsReproducible) {
  const GuidanceSpec spec{GuidanceMode::kExtended, 2.0};
  const SampleResult a = euler_sample(params, cond, spec, 5, 4, 6, 9);
  const SampleResult b = euler_sample(params, cond, spec, 5, 4, 6, 9);
  const SampleResult c = euler_sample(params, cond, spec, 5, 4, 6, 10);
  EXPECT_EQ(a.x, b.x);
  EXPECT_NE(a.x, c.x);
}

TEST(Euler, ExactVelocityRecoversDataInOneStep) {
  Rng rng(30);
  const LatentGrid data = testing::random_latent(2, 3, 4, 5, 2, rng);
  FunctionVelocity v = exact_velocity(data);
  const SampleResult r = euler_sample(v, 2, 3, 4, 5, 2, 1, 77);
  EXPECT_LE(max_abs_diff(r.x.tensor(), data.tensor()), 1e-12);
  EXPECT_EQ(r.run.nfe, 1u);
}

TEST(Euler, ExactVelocityIndependentOfStepCount) {
  Rng rng(31);
  const LatentGrid data = testing::random_latent(1, 2, 3, 3, 2, rng);
  for (std::size_t n : {1u, 2u, 7u, 30u, 100u}) {
    FunctionVelocity v = exact_velocity(data);
    const SampleResult r = euler_sample(v, 1, 2, 3, 3, 2, n, 5);
    EXPECT_LE(max_abs_diff(r.x.tensor(), data.tensor()), 1e-10) << n;
    EXPECT_EQ(r.run.nfe, n);
  }
}

TEST(Euler, TwoPassVelocityCountsTwice) {
  FunctionVelocity v([](const LatentGrid& x, double) { return x; }, 2);
  EXPECT_EQ(euler_sample(v, 1, 1, 2, 2, 1, 30, 0).run.nfe, 60u);
}

TEST(UniformLevels, EndpointsAndSpacing) {
  const auto l = uniform_levels(1.0, 0.0, 4);
  ASSERT_EQ(l.size(), 5u);
  EXPECT_EQ(l[0], 1.0);
  EXPECT_EQ(l[2], 0.5);
  EXPECT_EQ(l[4], 0.0);
  EXPECT_THROW(uniform_levels(1.0, 0.0, 0), Error);
}

TEST(Extension, ContextFramesPinnedExactly) {
  Rng rng(32);
  const LatentGrid prefix = testing::random_latent(2, 4, 3, 3, 2, rng);
  const LatentGrid data = testing::random_latent(2, 4, 3, 3, 2, rng);
  for (std::size_t k : {1u, 2u, 3u}) {
    FunctionVelocity v = exact_velocity(data);
    const SampleResult r = extend_video(prefix, k, v, 8, 3);
    EXPECT_EQ(slice_frames(r.x, 0, k), slice_frames(prefix, 4 - k, k)) << k;
    const LatentGrid stitched = stitch_extension(prefix, r.x, k);
    EXPECT_EQ(stitched.frames(), 2 * 4 - k);
    EXPECT_EQ(slice_frames(stitched, 0, 4), prefix);
  }
}

TEST(Extension, RejectsBadOverlap) {
  const LatentGrid prefix(1, 4, 2, 2, 1);
  FunctionVelocity v([](const LatentGrid& x, double) { return x; });
  EXPECT_THROW(extend_video(prefix, 0, v, 4, 0), Error);
  EXPECT_THROW(extend_video(prefix, 4, v, 4, 0), Error);
}

TEST(Extension, ChainingTwoExtensions) {
  Rng rng(33);
  const LatentGrid first = testing::random_latent(1, 4, 2, 2, 1, rng);
  FunctionVelocity v([](const LatentGrid& x, double) { return lincomb(-1.0, x, 0.0, x); });
  LatentGrid video = first;
  for (int i = 0; i < 2; ++i) {
    const LatentGrid window = extend_video(slice_frames(video, video.frames() - 4, 4), 1, v, 3, i).x;
    video = stitch_extension(video, window, 1);
  }
  EXPECT_EQ(video.frames(), 4u + 3u + 3u);
}

TEST(RfObjective, ExactPredictionHasZeroLoss) {
  Rng rng(34);
  const LatentGrid x = testing::random_latent(2, 3, 2, 2, 2, rng);
  const RfSample s = rf_sample(x, rng, 1);
  EXPECT_EQ(rf_loss(s.target, s.target, s.loss_mask), 0.0);
}

TEST(RfObjective, InterpolantAndTarget) {
  Rng rng(35);
  const LatentGrid x = testing::random_latent(1, 2, 2, 2, 2, rng);
  const RfSample s = rf_sample(x, rng);
  EXPECT_LE(max_abs_diff(s.x_s.tensor(), lincomb(1.0 - s.s, x, s.s, s.noise).tensor()), 0.0);
  EXPECT_EQ(s.target, axpy(x, -1.0, s.noise));
  EXPECT_GE(s.s, 0.0);
  EXPECT_LT(s.s, 1.0);
}

TEST(RfObjective, ZeroModelLossMatchesClosedForm) {
  // E ||x - eps||^2 per element = x^2 + 1 over unmasked frames.
  Rng data_rng(36);
  const LatentGrid x = testing::random_latent(1, 3, 2, 2, 2, data_rng);
  const std::vector<double> mask{0.0, 1.0, 1.0};
  double expected = 0.0;
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t i = 0; i < 8; ++i) expected += x[x.index(0, t, 0, 0, 0) + i] * x[x.index(0, t, 0, 0, 0) + i] + 1.0;
  expected /= 16.0;
  const LatentGrid zero(1, 3, 2, 2, 2);
  const int n = 20000;
  double sum = 0.0, sq = 0.0;
  Rng rng(37);
  for (int i = 0; i < n; ++i) {
    const RfSample s = rf_sample(x, rng, 1);
    const double l = rf_loss(zero, s.target, mask);
    sum += l;
    sq += l * l;
  }
  const double mean = sum / n;
  const double sigma = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_NEAR(mean, expected, 3.0 * sigma);
}

TEST(RfObjective, EmptyMaskThrows) {
  const LatentGrid v(1, 2, 1, 1, 1);
  EXPECT_THROW(rf_loss(v, v, std::vector<double>{0.0, 0.0}), Error);
}

TEST_F(FlowModel, TrainingStepReducesLossOnFixedBatch) {
  std::vector<TrainExample> batch;
  TrainExample ex;
  ex.x = render_oracle(world, scene, 4, 6);
  ex.scene = scene;
  ex.sketches = {rasterize_sketch(world, scene, 4, 6)};
  batch.push_back(ex);
  AdamW opt(params.parameters(), {.lr = 3e-3});
  const TrainOptions no_drop{0.0, 0.0, 0.0};
  auto eval = [&] {
    Rng r(99);
    double l = 0.0;
    for (int i = 0; i < 8; ++i) {
      const RfSample s = rf_sample(ex.x, r);
      const ConditionSet c = encode_conditions(params.conditions, scene, ex.sketches);
      l += rf_loss(denoiser_forward(s.x_s, s.s, c, params), s.target, s.loss_mask);
    }
    return l / 8;
  };
  const double before = eval();
  Rng rng(38);
  for (int i = 0; i < 60; ++i) {
    opt.zero_grad();
    const double loss = rf_training_step(params, batch, rng, no_drop);
    EXPECT_TRUE(std::isfinite(loss));
    opt.step();
  }
  EXPECT_LT(eval(), before);
}

TEST_F(FlowModel, ForcedContextStepIsDeterministic) {
  TrainExample ex;
  ex.x = latent(40);
  ex.scene = scene;
  ex.sketches = {rasterize_sketch(world, scene, 4, 6)};
  Rng a(41), b(41);
  zero_grads(params.parameters());
  const double l1 = rf_training_step(params, std::span<const TrainExample>(&ex, 1), a, {}, 3);
  zero_grads(params.parameters());
  const double l2 = rf_training_step(params, std::span<const TrainExample>(&ex, 1), b, {}, 3);
  EXPECT_EQ(l1, l2);
  EXPECT_THROW(rf_training_step(params, {}, a), Error);
}

}  // namespace
}  // namespace dive
