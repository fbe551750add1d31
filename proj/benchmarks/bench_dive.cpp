#include <benchmark/benchmark.h>

#include "dive/harness.hpp"
#include "dive/rng.hpp"

using namespace dive;

namespace {

struct Fixture {
  ToyWorld world;
  ModelParams params = ModelParams::create(BackboneConfig{}, 1);
  BranchParams branches = BranchParams::create(BackboneConfig{}, 2);
  SceneSpec scene = make_scenes(world, 0, "bench", 1)[0];
  GuidedConditions cond = scene_conditions(params, world, scene);

  static Fixture& get() {
    static Fixture f;
    return f;
  }
};

Resolution bucket(const benchmark::State& state) { return Fixture::get().world.buckets.at(state.range(0)); }

void set_label(benchmark::State& state, Resolution r) {
  state.SetLabel(std::to_string(r.height) + "x" + std::to_string(r.width));
}

void BM_DenoiserForward(benchmark::State& state) {
  Fixture& f = Fixture::get();
  const Resolution r = bucket(state);
  const LatentGrid x = sampling_noise(3, 4, r.height, r.width, 4, 3);
  for (auto _ : state) benchmark::DoNotOptimize(denoiser_forward(x, 0.5, f.cond.full, f.params));
  set_label(state, r);
}
BENCHMARK(BM_DenoiserForward)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_ExtendedCfgVelocity(benchmark::State& state) {
  Fixture& f = Fixture::get();
  const Resolution r = bucket(state);
  const LatentGrid x = sampling_noise(3, 4, r.height, r.width, 4, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cfg_velocity(x, 0.5, f.cond, {GuidanceMode::kExtended, 2.0}, f.params));
  }
  set_label(state, r);
}
BENCHMARK(BM_ExtendedCfgVelocity)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_MadVelocity(benchmark::State& state) {
  Fixture& f = Fixture::get();
  const Resolution r = bucket(state);
  const LatentGrid x = sampling_noise(3, 4, r.height, r.width, 4, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(branch_forward(x, 0.5, f.cond.full, {1.0, 1.0, 1.0}, f.params, f.branches));
  }
  set_label(state, r);
}
BENCHMARK(BM_MadVelocity)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_SpatialAttention(benchmark::State& state) {
  Fixture& f = Fixture::get();
  const Resolution r = bucket(state);
  Rng rng(4);
  const LatentGrid x = gaussian_latent(3, 4, r.height / 2, (r.width + 1) / 2, f.params.config.d_model, rng);
  const SelfAttentionParams& p = f.params.blocks[0].spatial;
  const bool inflated = state.range(1) != 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(inflated ? view_inflated_spatial_attention(x, p, f.params.config.n_heads)
                                      : per_view_spatial_attention(x, p, f.params.config.n_heads));
  }
  state.SetLabel(std::string(inflated ? "view-inflated " : "per-view ") + std::to_string(x.height()) + "x" +
                 std::to_string(x.width()) + " tokens");
}
BENCHMARK(BM_SpatialAttention)->ArgsProduct({{0, 1, 2}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_Sampling(benchmark::State& state) {
  Fixture& f = Fixture::get();
  const bool rps = state.range(0) != 0;
  const StageSchedule schedule = default_schedule(f.world, 6);
  for (auto _ : state) {
    if (rps) {
      benchmark::DoNotOptimize(rps_sample(f.params, f.cond, {GuidanceMode::kExtended, 2.0}, schedule, 5).x);
    } else {
      benchmark::DoNotOptimize(euler_sample(f.params, f.cond, {GuidanceMode::kExtended, 2.0}, 6, 16, 28, 5).x);
    }
  }
  state.SetLabel(rps ? schedule.to_string() : "16x28:6");
}
BENCHMARK(BM_Sampling)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(2);

void BM_LatentResize(benchmark::State& state) {
  const LatentGrid x = sampling_noise(3, 4, 8, 14, 4, 6);
  for (auto _ : state) benchmark::DoNotOptimize(latent_resize(x, 16, 28));
}
BENCHMARK(BM_LatentResize);

void BM_RenderOracle(benchmark::State& state) {
  Fixture& f = Fixture::get();
  const Resolution r = bucket(state);
  for (auto _ : state) benchmark::DoNotOptimize(render_oracle(f.world, f.scene, r.height, r.width));
  set_label(state, r);
}
BENCHMARK(BM_RenderOracle)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
