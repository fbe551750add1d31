#include "dive/flow.hpp"

#include <algorithm>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

std::string guidance_name(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::kOff: return "off";
    case GuidanceMode::kExtended: return "extended";
    case GuidanceMode::kNight: return "night";
    case GuidanceMode::kMad: return "mad";
  }
  return "?";
}

GuidanceMode parse_guidance(const std::string& name) {
  for (GuidanceMode m : {GuidanceMode::kOff, GuidanceMode::kExtended, GuidanceMode::kNight, GuidanceMode::kMad}) {
    if (guidance_name(m) == name) return m;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown guidance mode '" + name + "'");
}

bool is_night_label(int label) { return label == 4 || label == 5; }

GuidanceMode default_guidance_for(int label) {
  return is_night_label(label) ? GuidanceMode::kNight : GuidanceMode::kExtended;
}

GuidedConditions GuidedConditions::from(const ConditionEncoder& enc, ConditionSet full) {
  GuidedConditions g;
  g.text_only = nullify(full, {false, true, true}, enc);
  g.null_all = nullify(full, NullMask::all(), enc);
  g.full = std::move(full);
  return g;
}

LatentGrid cfg_velocity(const LatentGrid& x_s, double s, const GuidedConditions& cond, const GuidanceSpec& spec,
                        const ModelParams& params, std::size_t* nfe, BranchHooks* branches) {
  if (spec.scale < 0.0) throw Error(ErrorCode::kInvalidArgument, "guidance scale must be >= 0");
  auto count = [nfe](std::size_t n) {
    if (nfe) *nfe += n;
  };
  switch (spec.mode) {
    case GuidanceMode::kOff:
      count(1);
      return denoiser_forward(x_s, s, cond.full, params);
    case GuidanceMode::kMad:
      if (!branches) throw Error(ErrorCode::kInvalidArgument, "mad guidance requires distilled branches");
      branches->set_scales(spec.omega);
      count(1);
      return denoiser_forward(x_s, s, cond.full, params, nullptr, branches);
    case GuidanceMode::kExtended:
    case GuidanceMode::kNight: {
      const ConditionSet& base = spec.mode == GuidanceMode::kExtended ? cond.null_all : cond.text_only;
      const LatentGrid vc = denoiser_forward(x_s, s, cond.full, params);
      const LatentGrid vu = denoiser_forward(x_s, s, base, params);
      count(2);
      return lincomb(spec.scale, vc, 1.0 - spec.scale, vu);
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "bad guidance mode");
}

GuidedVelocity::GuidedVelocity(const ModelParams& params, const GuidedConditions& cond, GuidanceSpec spec,
                               BranchHooks* branches)
    : params_(params), cond_(cond), spec_(spec), branches_(branches) {}

LatentGrid GuidedVelocity::eval(const LatentGrid& x, double s) {
  return cfg_velocity(x, s, cond_, spec_, params_, &nfe_, branches_);
}

std::vector<double> uniform_levels(double from, double to, std::size_t steps) {
  if (steps == 0) throw Error(ErrorCode::kInvalidArgument, "need at least one step");
  std::vector<double> levels(steps + 1);
  for (std::size_t i = 0; i < steps; ++i) {
    levels[i] = from + (to - from) * static_cast<double>(i) / static_cast<double>(steps);
  }
  levels[steps] = to;
  return levels;
}

LatentGrid integrate_euler(LatentGrid x, std::span<const double> levels, Velocity& v, SamplerRun* run,
                           const std::function<void(LatentGrid&)>& before_eval) {
  const std::size_t before = v.nfe();
  for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
    if (before_eval) before_eval(x);
    const LatentGrid vel = v.eval(x, levels[i]);
    const double step = levels[i] - levels[i + 1];
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += step * vel[j];
    if (run) {
      run->levels.push_back(levels[i]);
      run->token_steps += x.height() * x.width();
      ++run->steps;
    }
  }
  if (before_eval) before_eval(x);
  if (run) {
    if (!levels.empty()) run->levels.push_back(levels.back());
    run->nfe += v.nfe() - before;
  }
  return x;
}

LatentGrid sampling_noise(std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                          std::size_t channels, std::uint64_t seed) {
  Rng rng = Rng(seed).substream("sampling-noise");
  return gaussian_latent(views, frames, height, width, channels, rng);
}

SampleResult euler_sample(Velocity& v, std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                          std::size_t channels, std::size_t steps, std::uint64_t seed) {
  SampleResult out;
  out.run.seed = seed;
  const std::vector<double> levels = uniform_levels(1.0, 0.0, steps);
  out.x = integrate_euler(sampling_noise(views, frames, height, width, channels, seed), levels, v, &out.run);
  return out;
}

SampleResult euler_sample(const ModelParams& params, const GuidedConditions& cond, const GuidanceSpec& spec,
                          std::size_t steps, std::size_t height, std::size_t width, std::uint64_t seed,
                          BranchHooks* branches) {
  GuidedVelocity v(params, cond, spec, branches);
  return euler_sample(v, cond.full.views, cond.full.frames, height, width, params.config.channels, steps, seed);
}

SampleResult extend_video(const LatentGrid& prefix, std::size_t k, Velocity& v, std::size_t steps, std::uint64_t seed) {
  const std::size_t frames = prefix.frames();
  if (k < 1 || k >= frames) {
    throw Error(ErrorCode::kInvalidArgument,
                "extension overlap k=" + std::to_string(k) + " must lie in [1, " + std::to_string(frames) + ")");
  }
  const LatentGrid context = slice_frames(prefix, frames - k, k);
  const LatentGrid pinned = concat_frames(
      context, LatentGrid(prefix.views(), frames - k, prefix.height(), prefix.width(), prefix.channels()));
  SampleResult out;
  out.run.seed = seed;
  const std::vector<double> levels = uniform_levels(1.0, 0.0, steps);
  const LatentGrid noise =
      sampling_noise(prefix.views(), frames, prefix.height(), prefix.width(), prefix.channels(), seed);
  out.x = integrate_euler(noise, levels, v, &out.run,
                          [&](LatentGrid& x) { x = apply_first_k_mask(x, pinned, k).x; });
  return out;
}

SampleResult extend_video(const LatentGrid& prefix, std::size_t k, const ModelParams& params,
                          const GuidedConditions& cond, const GuidanceSpec& spec, std::size_t steps,
                          std::uint64_t seed, BranchHooks* branches) {
  if (cond.full.frames != prefix.frames() || cond.full.views != prefix.views()) {
    throw Error(ErrorCode::kShapeMismatch, "extension conditions do not match the prefix window");
  }
  GuidedVelocity v(params, cond, spec, branches);
  return extend_video(prefix, k, v, steps, seed);
}

LatentGrid stitch_extension(const LatentGrid& prefix, const LatentGrid& window, std::size_t k) {
  if (k > window.frames()) throw Error(ErrorCode::kInvalidArgument, "overlap longer than window");
  return concat_frames(prefix, slice_frames(window, k, window.frames() - k));
}

RfSample rf_sample(const LatentGrid& x_data, Rng& rng, std::size_t first_k) {
  RfSample out;
  out.noise = gaussian_latent(x_data.views(), x_data.frames(), x_data.height(), x_data.width(), x_data.channels(), rng);
  out.s = rng.uniform();
  out.x_s = lincomb(1.0 - out.s, x_data, out.s, out.noise);
  out.target = axpy(x_data, -1.0, out.noise);
  if (first_k > 0) {
    FrameMaskResult m = apply_first_k_mask(out.x_s, x_data, first_k);
    out.x_s = std::move(m.x);
    out.loss_mask = std::move(m.loss_mask);
  } else {
    out.loss_mask.assign(x_data.frames(), 1.0);
  }
  return out;
}

double rf_loss(const LatentGrid& v, const LatentGrid& target, std::span<const double> loss_mask, LatentGrid* dv) {
  if (!v.same_layout(target)) throw Error(ErrorCode::kShapeMismatch, "rf_loss: prediction and target layouts differ");
  if (loss_mask.size() != v.frames()) throw Error(ErrorCode::kShapeMismatch, "rf_loss: mask length != frames");
  double weight = 0.0;
  for (double m : loss_mask) weight += m;
  if (weight <= 0.0) throw Error(ErrorCode::kInvalidArgument, "rf_loss: empty loss mask");
  const double count = weight * static_cast<double>(v.views() * v.frame_size());
  if (dv) *dv = LatentGrid(v.views(), v.frames(), v.height(), v.width(), v.channels());
  double loss = 0.0;
  const std::size_t fs = v.frame_size();
  for (std::size_t vi = 0; vi < v.views(); ++vi) {
    for (std::size_t t = 0; t < v.frames(); ++t) {
      const double m = loss_mask[t];
      if (m == 0.0) continue;
      const std::size_t base = v.index(vi, t, 0, 0, 0);
      for (std::size_t j = base; j < base + fs; ++j) {
        const double e = v[j] - target[j];
        loss += m * e * e;
        if (dv) (*dv)[j] = 2.0 * m * e / count;
      }
    }
  }
  return loss / count;
}

double rf_training_step(ModelParams& params, std::span<const TrainExample> batch, Rng& rng,
                        const TrainOptions& options, std::optional<std::size_t> first_k) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty training batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const TrainExample& ex : batch) {
    NullMask mask;
    if (rng.bernoulli(options.drop_all)) {
      mask = NullMask::all();
    } else {
      mask.text = rng.bernoulli(options.drop_each);
      mask.instance = rng.bernoulli(options.drop_each);
      mask.sketch = rng.bernoulli(options.drop_each);
    }
    std::size_t k = 0;
    if (first_k) {
      k = *first_k;
    } else if (ex.x.frames() > 1 && rng.bernoulli(options.first_k_prob)) {
      k = 1 + rng.uniform_int(static_cast<std::uint32_t>(ex.x.frames() - 1));
    }
    const RfSample rs = rf_sample(ex.x, rng, k);

    ConditionCache cache;
    const ConditionSet cond = encode_conditions(params.conditions, ex.scene, ex.sketches, mask, &cache);
    DenoiserTape tape;
    const LatentGrid v = denoiser_forward(rs.x_s, rs.s, cond, params, &tape);
    LatentGrid dv;
    total += rf_loss(v, rs.target, rs.loss_mask, &dv);
    dv.tensor() *= inv_b;
    const ConditionGrads cg = denoiser_backward(tape, dv, cond, params);
    encode_conditions_backward(params.conditions, cache, cg);
  }
  return total * inv_b;
}

}  // namespace dive
