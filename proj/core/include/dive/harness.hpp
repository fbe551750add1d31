#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dive/backbone.hpp"
#include "dive/flow.hpp"
#include "dive/io.hpp"
#include "dive/mad.hpp"
#include "dive/rps.hpp"
#include "dive/world.hpp"

namespace dive {

/// Scenes of one named split. Scene i is drawn from its own substream, so a
/// split is a prefix-stable sequence.
std::vector<SceneSpec> make_scenes(const ToyWorld& world, std::uint64_t seed, const std::string& split,
                                   std::size_t count);

/// Oracle render at `res` plus the road raster at every bucket and at `res`.
TrainExample make_example(const ToyWorld& world, const SceneSpec& scene, Resolution res);

/// Single-frame window `frame` of an example.
TrainExample frame_example(const TrainExample& ex, std::size_t frame);

/// Frames [begin, begin + count) of every raster.
SketchRaster slice_sketch(const SketchRaster& sketch, std::size_t begin, std::size_t count);

/// Renders scenes lazily and keeps each (scene, resolution) pair.
class ExampleCache {
 public:
  ExampleCache(const ToyWorld& world, std::vector<SceneSpec> scenes) : world_(world), scenes_(std::move(scenes)) {}

  const TrainExample& get(std::size_t scene, Resolution res);
  std::size_t size() const { return scenes_.size(); }
  const SceneSpec& scene(std::size_t i) const { return scenes_.at(i); }
  const ToyWorld& world() const { return world_; }

 private:
  ToyWorld world_;
  std::vector<SceneSpec> scenes_;
  std::map<std::pair<std::size_t, std::size_t>, TrainExample> cache_;  // (scene, area)
};

struct BucketSpec {
  Resolution res;
  std::size_t batch = 1;
};

struct TrainPhase {
  std::string name;
  std::size_t iterations = 0;
  std::size_t frames = 4;  // 1 trains on single images
  std::vector<BucketSpec> buckets;
};

struct TrainPlan {
  std::vector<TrainPhase> phases;
  double lr = 1e-3;
  double clip = 1.0;
  std::size_t scenes = 256;
  std::uint64_t seed = 0;
  TrainOptions options;

  /// Images, then low-resolution video, then every bucket with batch sizes
  /// 4 / 2 / 1 by increasing resolution; 2k / 3k / 8k iterations.
  static TrainPlan standard(const ToyWorld& world);
  /// Multiplies every phase's iteration count (rounded, at least 1).
  TrainPlan scaled(double factor) const;
};

struct TrainProgress {
  std::string phase;
  std::size_t iteration = 0;  // within the phase
  std::size_t iterations = 0;
  double loss = 0.0;
};
using ProgressFn = std::function<void(const TrainProgress&)>;

/// Runs the curriculum with AdamW; returns the final phase's mean loss over
/// its last 10% of iterations.
double train_model(ModelParams& params, const ToyWorld& world, const TrainPlan& plan, const ProgressFn& progress = {});

struct DistillPlan {
  std::size_t iterations = 800;
  std::size_t batch = 2;
  double lr = 1e-3;
  double clip = 1.0;
  std::size_t scenes = 256;
  Resolution res{8, 14};
  DistillStrategy strategy = DistillStrategy::kMixed;
  std::uint64_t seed = 0;
};

/// Trains the auxiliary branches against the frozen model. Returns the mean
/// loss over the last 10% of iterations.
double distill_branches(ModelParams& params, BranchParams& branches, const ToyWorld& world, const DistillPlan& plan,
                        const ProgressFn& progress = {});

struct SampleOptions {
  GuidanceSpec guidance;
  std::size_t steps = 30;
  Resolution res{8, 14};
  std::optional<StageSchedule> schedule;  // resolution progressive sampling
  std::uint64_t seed = 0;
};

struct SceneSample {
  LatentGrid x;
  std::size_t nfe = 0;
  std::size_t token_steps = 0;
};

/// Conditions for one scene, with rasters for every bucket and `extra`.
GuidedConditions scene_conditions(const ModelParams& params, const ToyWorld& world, const SceneSpec& scene,
                                  std::span<const Resolution> extra = {});

SceneSample sample_scene(const ModelParams& params, const ToyWorld& world, const SceneSpec& scene,
                         const SampleOptions& options, BranchParams* branches = nullptr);
/// Same sampler with every condition replaced by its null.
SceneSample sample_unconditional(const ModelParams& params, const ToyWorld& world, const SceneSpec& scene,
                                 const SampleOptions& options);

struct EvalReport {
  std::vector<double> mse;  // one per scene
  double mean = 0.0;
  double stddev = 0.0;
};

/// Per-scene MSE of each sample against the oracle render at its resolution.
EvalReport evaluate(const ToyWorld& world, std::span<const LatentGrid> samples, std::span<const SceneSpec> scenes);

struct BenchOptions {
  std::size_t steps = 30;
  Resolution target{16, 28};
  StageSchedule schedule;  // empty: 10 steps on each bucket
  double scale = 2.0;
  std::size_t repeats = 1;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// Rows "cfg", "mad", "cfg+rps", "mad+rps" over `scenes`; wall_ms is the best
/// of `repeats` total times and speedup is relative to "cfg".
std::vector<MetricsRow> bench(const ModelParams& params, BranchParams& branches, const ToyWorld& world,
                              std::span<const SceneSpec> scenes, const BenchOptions& options);

/// Equal split of `steps` over the world's buckets (remainder to the last).
StageSchedule default_schedule(const ToyWorld& world, std::size_t steps);

}  // namespace dive
