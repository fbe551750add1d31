// dive: data generation, training, distillation, sampling and benchmarking.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dive/config.hpp"
#include "dive/error.hpp"
#include "dive/gradcheck.hpp"
#include "dive/harness.hpp"
#include "dive/io.hpp"
#include "dive/rng.hpp"

namespace fs = std::filesystem;
using namespace dive;

namespace {

// Every subcommand flag doubles as `key = value` in the config section named
// after the subcommand. Flags given on the command line win.
class Bindings {
 public:
  template <class T>
  CLI::Option* add(CLI::App* sub, const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = sub->add_option("--" + key, var, help)->capture_default_str();
    entries_.push_back({sub, key, opt});
    return opt;
  }

  void resolve(Config& config) {
    for (const Entry& e : entries_) {
      if (!e.sub->parsed()) continue;
      const std::string section = e.sub->get_name();
      if (e.opt->count() == 0) {
        if (auto v = config.get(section, e.key)) {
          e.opt->add_result(*v);
          e.opt->run_callback();
        }
      }
      config.set(section, e.key, e.opt->count() ? e.opt->as<std::string>() : e.opt->get_default_str());
    }
  }

 private:
  struct Entry {
    CLI::App* sub;
    std::string key;
    CLI::Option* opt;
  };
  std::vector<Entry> entries_;
};

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::array<double, 3> parse_omega(const std::string& text) {
  std::array<double, 3> w{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) break;
    try {
      w[i++] = std::stod(part);
    } catch (const std::exception&) {
      i = 4;
      break;
    }
  }
  if (i != 3) throw Error(ErrorCode::kInvalidArgument, "omega must be three comma-separated numbers: " + text);
  return w;
}

Resolution parse_resolution(const std::string& text) {
  const StageSchedule s = StageSchedule::parse(text + ":1");
  return {s.stages[0].height, s.stages[0].width};
}

ProgressFn progress_printer(std::size_t every) {
  const auto t0 = std::chrono::steady_clock::now();
  return [=](const TrainProgress& p) {
    if (every && (p.iteration + 1) % every == 0) {
      std::fprintf(stderr, "%s %zu/%zu loss %.5f  %.0fs\n", p.phase.c_str(), p.iteration + 1, p.iterations, p.loss,
                   since(t0) / 1000.0);
    }
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dive-lite multi-view video diffusion toolkit"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  std::uint64_t seed = 0;
  std::size_t log_every = 200;
  app.add_option("--config", config_path, "flat key = value config file");
  CLI::Option* seed_opt = app.add_option("--seed", seed, "root seed (default DIVE_SEED or 0)");
  CLI::Option* out_opt =
      app.add_option("--out-dir", out_dir, "directory for metrics.csv, frames and default outputs")->capture_default_str();
  CLI::Option* log_opt =
      app.add_option("--log-every", log_every, "progress interval in iterations (0 silences)")->capture_default_str();
  Bindings b;

  // gen-data
  CLI::App* gen = app.add_subcommand("gen-data", "render a synthetic dataset with the oracle");
  std::size_t gen_scenes = 64;
  std::string gen_split = "train", gen_res = "8x14", gen_out = "dataset.bin";
  b.add(gen, "scenes", gen_scenes, "number of scenes");
  b.add(gen, "split", gen_split, "scene split name");
  b.add(gen, "resolution", gen_res, "latent resolution HxW");
  b.add(gen, "out", gen_out, "dataset file");

  // train
  CLI::App* train = app.add_subcommand("train", "train the denoiser on the toy world");
  double train_iter_scale = 1.0, train_lr = TrainPlan{}.lr;
  std::size_t train_scenes = 256;
  std::string train_out = "model.ckpt";
  b.add(train, "iter-scale", train_iter_scale, "multiplier on every phase's iteration count");
  b.add(train, "lr", train_lr, "AdamW learning rate");
  b.add(train, "scenes", train_scenes, "training scenes");
  b.add(train, "out", train_out, "checkpoint file");

  // distill
  CLI::App* distill = app.add_subcommand("distill", "train the single-pass guidance branches");
  std::string dist_model = "model.ckpt", dist_out = "model_mad.ckpt", dist_strategy = "mixed";
  DistillPlan dplan;
  std::size_t dist_val_scenes = 16;
  b.add(distill, "model", dist_model, "trained checkpoint");
  b.add(distill, "out", dist_out, "checkpoint with branches");
  b.add(distill, "strategy", dist_strategy, "mixed, single1 or single2")
      ->check(CLI::IsMember({"mixed", "single1", "single2"}));
  b.add(distill, "iterations", dplan.iterations, "distillation iterations");
  b.add(distill, "batch", dplan.batch, "examples per iteration");
  b.add(distill, "lr", dplan.lr, "AdamW learning rate");
  b.add(distill, "validation-scenes", dist_val_scenes, "held-out scenes for the validation ratio");

  // sample
  CLI::App* sample = app.add_subcommand("sample", "sample one held-out scene and export PPM frames");
  std::string smp_model = "model.ckpt", smp_guidance = "extended", smp_rps, smp_res = "8x14", smp_omega = "1,1,1";
  std::string smp_split = "heldout";
  double smp_scale = 2.0;
  std::size_t smp_steps = 30, smp_scene = 0, smp_extend = 0;
  b.add(sample, "model", smp_model, "checkpoint (with branches for mad)");
  b.add(sample, "guidance", smp_guidance, "off, extended, night or mad")
      ->check(CLI::IsMember({"off", "extended", "night", "mad"}));
  b.add(sample, "scale", smp_scale, "guidance scale lambda");
  b.add(sample, "omega", smp_omega, "mad branch scales text,instance,sketch");
  b.add(sample, "steps", smp_steps, "Euler steps");
  b.add(sample, "resolution", smp_res, "latent resolution HxW");
  b.add(sample, "rps", smp_rps, "progressive schedule, e.g. 8x14:10,12x21:10,16x28:10");
  b.add(sample, "extend", smp_extend, "extend by one window reusing the last k frames");
  b.add(sample, "split", smp_split, "scene split name");
  b.add(sample, "scene", smp_scene, "scene index within the split");

  // bench
  CLI::App* benchc = app.add_subcommand("bench", "time CFG, MAD and their progressive variants");
  std::string bench_model = "model_mad.ckpt", bench_target = "16x28", bench_schedule;
  std::size_t bench_scenes = 4;
  BenchOptions bopt;
  b.add(benchc, "model", bench_model, "checkpoint with branches");
  b.add(benchc, "scenes", bench_scenes, "held-out scenes per configuration");
  b.add(benchc, "steps", bopt.steps, "total Euler steps");
  b.add(benchc, "target", bench_target, "final resolution HxW");
  b.add(benchc, "schedule", bench_schedule, "progressive schedule (default: equal split over buckets)");
  b.add(benchc, "scale", bopt.scale, "guidance scale lambda");
  b.add(benchc, "repeats", bopt.repeats, "timing repeats (best is kept)");

  // gradcheck
  CLI::App* gradc = app.add_subcommand("gradcheck", "finite-difference check of the full denoiser");
  std::size_t gc_entries = 4, gc_blocks = 2;
  double gc_tolerance = 1e-4;
  b.add(gradc, "entries", gc_entries, "entries checked per parameter");
  b.add(gradc, "blocks", gc_blocks, "transformer blocks in the checked model");
  b.add(gradc, "tolerance", gc_tolerance, "maximum relative error");

  // eval
  CLI::App* evalc = app.add_subcommand("eval", "sample held-out scenes and score them against the oracle");
  std::string ev_model = "model.ckpt", ev_guidance = "default", ev_res = "8x14";
  std::size_t ev_scenes = 32, ev_steps = 30;
  double ev_scale = 2.0;
  b.add(evalc, "model", ev_model, "checkpoint");
  b.add(evalc, "guidance", ev_guidance, "default (label based), off, extended, night or mad")
      ->check(CLI::IsMember({"default", "off", "extended", "night", "mad"}));
  b.add(evalc, "scale", ev_scale, "guidance scale lambda");
  b.add(evalc, "steps", ev_steps, "Euler steps");
  b.add(evalc, "scenes", ev_scenes, "held-out scenes");
  b.add(evalc, "resolution", ev_res, "latent resolution HxW");

  CLI11_PARSE(app, argc, argv);

  try {
    Config config = config_path.empty() ? Config() : Config::load(config_path);
    if (seed_opt->count() == 0) {
      seed = default_seed();
      if (auto v = config.get("", "seed")) seed = std::stoull(*v);
    }
    config.set("", "seed", std::to_string(seed));
    if (out_opt->count() == 0) out_dir = config.get_string("", "out-dir", out_dir);
    if (log_opt->count() == 0) log_every = static_cast<std::size_t>(config.get_int("", "log-every", 200));
    b.resolve(config);
    const std::string hash = config.hash();
    const fs::path out = out_dir;
    fs::create_directories(out);
    const fs::path metrics = out / "metrics.csv";
    auto append_row = [&](const MetricsRow& row) { write_metrics_csv(metrics, {row}, fs::exists(metrics)); };
    auto out_path = [&](const std::string& name) { return fs::path(name).is_absolute() ? fs::path(name) : out / name; };
    auto in_path = [&](const std::string& name) {
      return fs::exists(name) || fs::path(name).is_absolute() ? fs::path(name) : out / name;
    };
    const ToyWorld world;

    if (gen->parsed()) {
      const Resolution res = parse_resolution(gen_res);
      std::vector<DatasetRecord> records;
      for (const SceneSpec& sc : make_scenes(world, seed, gen_split, gen_scenes)) {
        LatentGrid video = render_oracle(world, sc, res.height, res.width);
        round_to_f32(video);
        records.push_back({sc, std::move(video)});
      }
      dataset_write(out_path(gen_out), records);
      std::printf("wrote %zu scenes to %s\n", records.size(), out_path(gen_out).c_str());
    } else if (train->parsed()) {
      TrainPlan plan = TrainPlan::standard(world).scaled(train_iter_scale);
      plan.lr = train_lr;
      plan.scenes = train_scenes;
      plan.seed = seed;
      ModelParams params = ModelParams::create(BackboneConfig{}, seed);
      const double loss = train_model(params, world, plan, progress_printer(log_every));
      checkpoint_write(out_path(train_out), params);
      std::printf("final loss %.5f, checkpoint %s\n", loss, out_path(train_out).c_str());
    } else if (distill->parsed()) {
      Checkpoint ck = checkpoint_read(in_path(dist_model));
      dplan.strategy = parse_strategy(dist_strategy);
      dplan.seed = seed;
      BranchParams branches = BranchParams::create(ck.model.config, seed);
      const double loss = distill_branches(ck.model, branches, world, dplan, progress_printer(log_every));
      std::vector<TrainExample> validation;
      for (const SceneSpec& sc : make_scenes(world, seed, "distill-validation", dist_val_scenes)) {
        validation.push_back(make_example(world, sc, dplan.res));
      }
      const std::array<double, 4> omegas{1.0, 2.0, 4.0, 8.0};
      const double err = distill_validation_error(ck.model, branches, validation, omegas, seed);
      checkpoint_write(out_path(dist_out), ck.model, &branches);
      append_row({hash, "distill-" + dist_strategy, "mad", "", 0, 0, 0, 0.0, 0.0, -1.0, err});
      std::printf("train loss %.5f, validation ratio %.4f, checkpoint %s\n", loss, err, out_path(dist_out).c_str());
    } else if (sample->parsed()) {
      Checkpoint ck = checkpoint_read(in_path(smp_model));
      SampleOptions so;
      so.guidance = {parse_guidance(smp_guidance), smp_scale, parse_omega(smp_omega)};
      so.steps = smp_steps;
      so.res = parse_resolution(smp_res);
      so.seed = seed;
      if (!smp_rps.empty()) {
        so.schedule = StageSchedule::parse(smp_rps);
        so.steps = so.schedule->total_steps();
        so.res = {so.schedule->stages.back().height, so.schedule->stages.back().width};
      }
      BranchParams* branches = ck.branches ? &*ck.branches : nullptr;
      if (so.guidance.mode == GuidanceMode::kMad && !branches) {
        throw Error(ErrorCode::kInvalidArgument, "mad guidance needs a checkpoint with branches");
      }
      ToyWorld long_world = world;
      long_world.frames = world.frames + (smp_extend ? world.frames - smp_extend : 0);
      const SceneSpec scene = make_scenes(long_world, seed, smp_split, smp_scene + 1)[smp_scene];
      const auto t0 = std::chrono::steady_clock::now();
      SceneSample first = sample_scene(ck.model, world, scene.frame_window(0, world.frames), so, branches);
      LatentGrid video = first.x;
      std::size_t nfe = first.nfe, token_steps = first.token_steps;
      if (smp_extend) {
        if (so.schedule) throw Error(ErrorCode::kInvalidArgument, "--extend and --rps cannot be combined");
        const SceneSpec next = scene.frame_window(world.frames - smp_extend, world.frames);
        const GuidedConditions cond = scene_conditions(ck.model, world, next, std::array{so.res});
        const SampleResult ext = extend_video(first.x, smp_extend, ck.model, cond, so.guidance, so.steps,
                                              hash_tags({seed, 1}), branches);
        video = stitch_extension(first.x, ext.x, smp_extend);
        nfe += ext.run.nfe;
        token_steps += ext.run.token_steps;
      }
      const double ms = since(t0);
      const EvalReport r = evaluate(long_world, std::span(&video, 1), std::span(&scene, 1));
      const fs::path frames = out / "frames";
      const auto files = export_frames(video, frames);
      append_row({hash, "sample", smp_guidance, so.schedule ? so.schedule->to_string() : "", so.steps, nfe, token_steps,
                  ms, 0.0, r.mean, -1.0});
      std::printf("nfe %zu, token steps %zu, %.0f ms, oracle mse %.5f, %zu frames in %s\n", nfe, token_steps, ms,
                  r.mean, files.size(), frames.c_str());
    } else if (benchc->parsed()) {
      Checkpoint ck = checkpoint_read(in_path(bench_model));
      if (!ck.branches) throw Error(ErrorCode::kInvalidArgument, "bench needs a checkpoint with branches");
      bopt.target = parse_resolution(bench_target);
      if (!bench_schedule.empty()) bopt.schedule = StageSchedule::parse(bench_schedule);
      bopt.seed = seed;
      bopt.config_hash = hash;
      const std::vector<SceneSpec> scenes = make_scenes(world, seed, "bench", bench_scenes);
      const std::vector<MetricsRow> rows = bench(ck.model, *ck.branches, world, scenes, bopt);
      write_metrics_csv(metrics, rows, fs::exists(metrics));
      for (const MetricsRow& r : rows) {
        std::printf("%-8s nfe %3zu  token steps %6zu  %9.1f ms  speedup %.2fx  %s\n", r.run.c_str(), r.nfe,
                    r.token_steps, r.wall_ms, r.speedup, r.schedule.c_str());
      }
    } else if (gradc->parsed()) {
      BackboneConfig cfg;
      cfg.n_blocks = gc_blocks;
      ModelParams params = ModelParams::create(cfg, seed);
      ParamList list = params.parameters();
      Rng rng = Rng(seed).substream("gradcheck");
      for (Parameter* p : list) {
        for (double& v : p->value.storage()) v += rng.normal() * 0.1;
      }
      ToyWorld small = world;
      small.frames = 2;
      Rng scene_rng = rng.substream("scene");
      const SceneSpec scene = small.generate_scene(scene_rng);
      const std::vector<SketchRaster> sketches{rasterize_sketch(small, scene, 4, 6)};
      const LatentGrid x = gaussian_latent(small.views, small.frames, 4, 6, cfg.channels, rng);
      const LatentGrid probe = gaussian_latent(small.views, small.frames, 4, 6, cfg.channels, rng);
      const double s = 0.4;
      auto objective = [&] {
        const ConditionSet cond = encode_conditions(params.conditions, scene, sketches);
        const LatentGrid v = denoiser_forward(x, s, cond, params);
        double acc = 0.0;
        for (std::size_t i = 0; i < v.tensor().size(); ++i) acc += v.tensor()[i] * probe.tensor()[i];
        return acc;
      };
      auto backward = [&] {
        zero_grads(list);
        ConditionCache cache;
        const ConditionSet cond = encode_conditions(params.conditions, scene, sketches, NullMask::none(), &cache);
        DenoiserTape tape;
        denoiser_forward(x, s, cond, params, &tape);
        encode_conditions_backward(params.conditions, cache, denoiser_backward(tape, probe, cond, params));
      };
      const GradCheckReport r = grad_check(objective, backward, list, 1e-5, gc_entries);
      const bool ok = r.max_rel_error <= gc_tolerance;
      std::printf("%s: %zu entries, max relative error %.3e at %s (analytic %.6e, numeric %.6e)\n",
                  ok ? "ok" : "FAILED", r.entries_checked, r.max_rel_error, r.worst.empty() ? "none" : r.worst.c_str(), r.worst_analytic,
                  r.worst_numeric);
      return ok ? 0 : 1;
    } else if (evalc->parsed()) {
      Checkpoint ck = checkpoint_read(in_path(ev_model));
      BranchParams* branches = ck.branches ? &*ck.branches : nullptr;
      const std::vector<SceneSpec> scenes = make_scenes(world, seed, "heldout", ev_scenes);
      SampleOptions so;
      so.steps = ev_steps;
      so.res = parse_resolution(ev_res);
      std::vector<LatentGrid> samples;
      std::size_t nfe = 0;
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        const GuidanceMode mode =
            ev_guidance == "default" ? default_guidance_for(scenes[i].label) : parse_guidance(ev_guidance);
        so.guidance = {mode, ev_scale};
        so.seed = hash_tags({seed, i});
        SceneSample smp = sample_scene(ck.model, world, scenes[i], so, branches);
        nfe += smp.nfe;
        samples.push_back(std::move(smp.x));
      }
      const EvalReport r = evaluate(world, samples, scenes);
      append_row({hash, "eval", ev_guidance, "", ev_steps, nfe / scenes.size(), 0, since(t0), 0.0, r.mean, -1.0});
      std::printf("oracle mse %.5f +- %.5f over %zu scenes\n", r.mean, r.stddev, scenes.size());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
