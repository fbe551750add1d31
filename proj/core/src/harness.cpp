#include "dive/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "dive/error.hpp"
#include "dive/optim.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

double tail_mean(const std::vector<double>& losses) {
  if (losses.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, losses.size() / 10);
  double sum = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) sum += losses[i];
  return sum / static_cast<double>(n);
}

bool has_resolution(const std::vector<SketchRaster>& rasters, Resolution res) {
  return std::any_of(rasters.begin(), rasters.end(),
                     [&](const SketchRaster& r) { return r.height() == res.height && r.width() == res.width; });
}

}  // namespace

std::vector<SceneSpec> make_scenes(const ToyWorld& world, std::uint64_t seed, const std::string& split,
                                   std::size_t count) {
  const Rng root = Rng(seed).substream("scenes").substream(split);
  std::vector<SceneSpec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = root.substream(i);
    out.push_back(world.generate_scene(rng));
  }
  return out;
}

TrainExample make_example(const ToyWorld& world, const SceneSpec& scene, Resolution res) {
  TrainExample ex;
  ex.x = render_oracle(world, scene, res.height, res.width);
  ex.scene = scene;
  ex.sketches = rasterize_sketches(world, scene);
  if (!has_resolution(ex.sketches, res)) ex.sketches.push_back(rasterize_sketch(world, scene, res.height, res.width));
  return ex;
}

SketchRaster slice_sketch(const SketchRaster& sketch, std::size_t begin, std::size_t count) {
  const Tensor& d = sketch.data;
  const std::size_t views = d.dim(0);
  const std::size_t frames = d.dim(1);
  if (begin + count > frames) throw Error(ErrorCode::kInvalidArgument, "sketch frame window out of range");
  const std::size_t frame_size = d.dim(2) * d.dim(3) * d.dim(4);
  SketchRaster out{Tensor({views, count, d.dim(2), d.dim(3), d.dim(4)})};
  for (std::size_t v = 0; v < views; ++v) {
    const double* src = d.data() + (v * frames + begin) * frame_size;
    std::copy_n(src, count * frame_size, out.data.data() + v * count * frame_size);
  }
  return out;
}

TrainExample frame_example(const TrainExample& ex, std::size_t frame) {
  TrainExample out;
  out.x = slice_frames(ex.x, frame, 1);
  out.scene = ex.scene.frame_window(frame, 1);
  out.sketches.reserve(ex.sketches.size());
  for (const SketchRaster& s : ex.sketches) out.sketches.push_back(slice_sketch(s, frame, 1));
  return out;
}

const TrainExample& ExampleCache::get(std::size_t scene, Resolution res) {
  const auto key = std::make_pair(scene, res.height * 100000 + res.width);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, make_example(world_, scenes_.at(scene), res)).first;
  return it->second;
}

TrainPlan TrainPlan::standard(const ToyWorld& world) {
  TrainPlan plan;
  std::vector<BucketSpec> mixed;
  static constexpr std::size_t kBatches[] = {4, 2, 1};
  for (std::size_t i = 0; i < world.buckets.size(); ++i) {
    mixed.push_back({world.buckets[i], kBatches[std::min<std::size_t>(i, 2)]});
  }
  plan.phases.push_back({"images", 2000, 1, mixed});
  plan.phases.push_back({"video-low", 3000, world.frames, {mixed.front()}});
  plan.phases.push_back({"video-mixed", 8000, world.frames, mixed});
  return plan;
}

TrainPlan TrainPlan::scaled(double factor) const {
  TrainPlan out = *this;
  for (TrainPhase& p : out.phases) {
    p.iterations = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(factor * p.iterations)));
  }
  return out;
}

double train_model(ModelParams& params, const ToyWorld& world, const TrainPlan& plan, const ProgressFn& progress) {
  ExampleCache data(world, make_scenes(world, plan.seed, "train", plan.scenes));
  AdamW opt(params.parameters(), {.lr = plan.lr});
  const Rng root = Rng(plan.seed).substream("train");
  std::vector<double> losses;
  for (std::size_t ph = 0; ph < plan.phases.size(); ++ph) {
    const TrainPhase& phase = plan.phases[ph];
    if (phase.buckets.empty()) throw Error(ErrorCode::kConfig, "training phase '" + phase.name + "' has no buckets");
    losses.clear();
    for (std::size_t it = 0; it < phase.iterations; ++it) {
      Rng rng = root.substream(ph).substream(it);
      const BucketSpec& bucket = phase.buckets[rng.uniform_int(static_cast<std::uint32_t>(phase.buckets.size()))];
      std::vector<TrainExample> batch;
      batch.reserve(bucket.batch);
      for (std::size_t b = 0; b < bucket.batch; ++b) {
        const std::size_t idx = rng.uniform_int(static_cast<std::uint32_t>(data.size()));
        const TrainExample& ex = data.get(idx, bucket.res);
        if (phase.frames == 1) {
          batch.push_back(frame_example(ex, rng.uniform_int(static_cast<std::uint32_t>(ex.x.frames()))));
        } else {
          batch.push_back(ex);
        }
      }
      TrainOptions options = plan.options;
      if (phase.frames == 1) options.first_k_prob = 0.0;
      opt.zero_grad();
      const double loss = rf_training_step(params, batch, rng, options);
      if (plan.clip > 0.0) clip_grad_norm(params.parameters(), plan.clip);
      opt.step();
      losses.push_back(loss);
      if (progress) progress({phase.name, it, phase.iterations, loss});
    }
  }
  return tail_mean(losses);
}

double distill_branches(ModelParams& params, BranchParams& branches, const ToyWorld& world, const DistillPlan& plan,
                        const ProgressFn& progress) {
  ExampleCache data(world, make_scenes(world, plan.seed, "train", plan.scenes));
  AdamW opt(branches.parameters(), {.lr = plan.lr});
  const Rng root = Rng(plan.seed).substream("distill").substream(strategy_name(plan.strategy));
  const std::string name = "distill-" + strategy_name(plan.strategy);
  std::vector<double> losses;
  for (std::size_t it = 0; it < plan.iterations; ++it) {
    Rng rng = root.substream(it);
    std::vector<TrainExample> batch;
    for (std::size_t b = 0; b < plan.batch; ++b) {
      batch.push_back(data.get(rng.uniform_int(static_cast<std::uint32_t>(data.size())), plan.res));
    }
    opt.zero_grad();
    const DistillStepStats stats = mad_distill_step(params, branches, batch, plan.strategy, rng);
    if (plan.clip > 0.0) clip_grad_norm(branches.parameters(), plan.clip);
    opt.step();
    losses.push_back(stats.loss);
    if (progress) progress({name, it, plan.iterations, stats.loss});
  }
  return tail_mean(losses);
}

StageSchedule default_schedule(const ToyWorld& world, std::size_t steps) {
  const std::size_t k = world.buckets.size();
  if (k == 0 || steps < k) throw Error(ErrorCode::kInvalidArgument, "need at least one step per bucket");
  StageSchedule s;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t n = i + 1 == k ? steps - (k - 1) * (steps / k) : steps / k;
    s.stages.push_back({world.buckets[i].height, world.buckets[i].width, n});
  }
  return s;
}

GuidedConditions scene_conditions(const ModelParams& params, const ToyWorld& world, const SceneSpec& scene,
                                  std::span<const Resolution> extra) {
  std::vector<SketchRaster> rasters = rasterize_sketches(world, scene);
  for (const Resolution& r : extra) {
    if (!has_resolution(rasters, r)) rasters.push_back(rasterize_sketch(world, scene, r.height, r.width));
  }
  return GuidedConditions::from(params.conditions, encode_conditions(params.conditions, scene, std::move(rasters)));
}

namespace {

SceneSample run_sampler(const ModelParams& params, const GuidedConditions& cond, const SampleOptions& options,
                        BranchParams* branches) {
  SceneSample out;
  if (options.schedule) {
    RpsResult r = rps_sample(params, cond, options.guidance, *options.schedule, options.seed, branches);
    out.x = std::move(r.x);
    out.nfe = r.ledger.nfe;
    out.token_steps = r.ledger.token_steps;
  } else {
    SampleResult r = euler_sample(params, cond, options.guidance, options.steps, options.res.height,
                                  options.res.width, options.seed, branches);
    out.x = std::move(r.x);
    out.nfe = r.run.nfe;
    out.token_steps = r.run.token_steps;
  }
  return out;
}

std::vector<Resolution> stage_resolutions(const SampleOptions& options) {
  std::vector<Resolution> res{options.res};
  if (options.schedule) {
    for (const Stage& s : options.schedule->stages) res.push_back({s.height, s.width});
  }
  return res;
}

}  // namespace

SceneSample sample_scene(const ModelParams& params, const ToyWorld& world, const SceneSpec& scene,
                         const SampleOptions& options, BranchParams* branches) {
  const std::vector<Resolution> res = stage_resolutions(options);
  return run_sampler(params, scene_conditions(params, world, scene, res), options, branches);
}

SceneSample sample_unconditional(const ModelParams& params, const ToyWorld& world, const SceneSpec& scene,
                                 const SampleOptions& options) {
  const std::vector<Resolution> res = stage_resolutions(options);
  const GuidedConditions cond = scene_conditions(params, world, scene, res);
  const GuidedConditions null = GuidedConditions::from(params.conditions, cond.null_all);
  SampleOptions off = options;
  off.guidance.mode = GuidanceMode::kOff;
  return run_sampler(params, null, off, nullptr);
}

EvalReport evaluate(const ToyWorld& world, std::span<const LatentGrid> samples, std::span<const SceneSpec> scenes) {
  if (samples.size() != scenes.size()) throw Error(ErrorCode::kInvalidArgument, "samples and scenes differ in count");
  EvalReport rep;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const LatentGrid oracle = render_oracle(world, scenes[i], samples[i].height(), samples[i].width());
    rep.mse.push_back(mean_squared_error(samples[i], oracle));
  }
  if (rep.mse.empty()) return rep;
  for (double m : rep.mse) rep.mean += m;
  rep.mean /= static_cast<double>(rep.mse.size());
  double var = 0.0;
  for (double m : rep.mse) var += (m - rep.mean) * (m - rep.mean);
  rep.stddev = std::sqrt(var / static_cast<double>(rep.mse.size()));
  return rep;
}

std::vector<MetricsRow> bench(const ModelParams& params, BranchParams& branches, const ToyWorld& world,
                              std::span<const SceneSpec> scenes, const BenchOptions& options) {
  const StageSchedule schedule =
      options.schedule.stages.empty() ? default_schedule(world, options.steps) : options.schedule;
  schedule.validate();
  const Stage& last = schedule.stages.back();
  if (last.height != options.target.height || last.width != options.target.width) {
    throw Error(ErrorCode::kConfig, "schedule must end at the target resolution");
  }

  struct Variant {
    std::string name;
    bool mad;
    bool rps;
  };
  const Variant variants[] = {{"cfg", false, false}, {"mad", true, false}, {"cfg+rps", false, true},
                              {"mad+rps", true, true}};
  std::vector<GuidedConditions> conds;
  for (const SceneSpec& s : scenes) {
    conds.push_back(scene_conditions(params, world, s, std::span<const Resolution>(&options.target, 1)));
  }

  std::vector<MetricsRow> rows;
  for (const Variant& var : variants) {
    SampleOptions so;
    so.steps = options.steps;
    so.res = options.target;
    if (var.mad) {
      so.guidance.mode = GuidanceMode::kMad;
      const double omega = options.scale - 1.0;
      so.guidance.omega = {omega, omega, omega};
    } else {
      so.guidance.mode = GuidanceMode::kExtended;
      so.guidance.scale = options.scale;
    }
    if (var.rps) so.schedule = schedule;

    MetricsRow row;
    row.config_hash = options.config_hash;
    row.run = var.name;
    row.guidance = guidance_name(so.guidance.mode);
    row.schedule = var.rps ? schedule.to_string()
                           : StageSchedule{{{options.target.height, options.target.width, options.steps}}}.to_string();
    row.steps = options.steps;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t rep = 0; rep < std::max<std::size_t>(1, options.repeats); ++rep) {
      std::size_t nfe = 0;
      std::size_t tokens = 0;
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < conds.size(); ++i) {
        so.seed = hash_tags({options.seed, i});
        const SceneSample s = run_sampler(params, conds[i], so, var.mad ? &branches : nullptr);
        nfe += s.nfe;
        tokens += s.token_steps;
      }
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
      row.nfe = conds.empty() ? 0 : nfe / conds.size();
      row.token_steps = conds.empty() ? 0 : tokens / conds.size();
    }
    row.wall_ms = best;
    rows.push_back(row);
  }
  for (MetricsRow& r : rows) r.speedup = rows.front().wall_ms / r.wall_ms;
  return rows;
}

}  // namespace dive
