#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dive/backbone.hpp"
#include "dive/conditions.hpp"
#include "dive/latent.hpp"

namespace dive {

class Rng;

// Noise level s: s = 0 is clean data, s = 1 is pure noise.
// x_s = (1 - s) x_data + s noise, target velocity v = x_data - noise,
// Euler step x_{s - d} = x_s + d v.

enum class GuidanceMode { kOff, kExtended, kNight, kMad };

std::string guidance_name(GuidanceMode mode);
GuidanceMode parse_guidance(const std::string& name);

struct GuidanceSpec {
  GuidanceMode mode = GuidanceMode::kExtended;
  double scale = 2.0;                           // lambda
  std::array<double, 3> omega{1.0, 1.0, 1.0};  // mad: (text, instance, sketch)

  bool two_pass() const { return mode == GuidanceMode::kExtended || mode == GuidanceMode::kNight; }
};

bool is_night_label(int label);
/// Night guidance for night labels, extended otherwise.
GuidanceMode default_guidance_for(int label);

/// The condition sets a guided sampler needs for one scene window.
struct GuidedConditions {
  ConditionSet full;       // (L, I, R)
  ConditionSet text_only;  // (L, phi, phi)
  ConditionSet null_all;   // (phi, phi, phi)

  static GuidedConditions from(const ConditionEncoder& enc, ConditionSet full);
};

/// Guided velocity; adds the passes it spends to `*nfe`. Mad mode runs the
/// student (base model plus `branches`) once on the full conditions.
LatentGrid cfg_velocity(const LatentGrid& x_s, double s, const GuidedConditions& cond, const GuidanceSpec& spec,
                        const ModelParams& params, std::size_t* nfe = nullptr, BranchHooks* branches = nullptr);

/// A velocity field that counts its own function evaluations.
class Velocity {
 public:
  virtual ~Velocity() = default;
  virtual LatentGrid eval(const LatentGrid& x, double s) = 0;
  std::size_t nfe() const { return nfe_; }

 protected:
  std::size_t nfe_ = 0;
};

class GuidedVelocity final : public Velocity {
 public:
  GuidedVelocity(const ModelParams& params, const GuidedConditions& cond, GuidanceSpec spec,
                 BranchHooks* branches = nullptr);
  LatentGrid eval(const LatentGrid& x, double s) override;

 private:
  const ModelParams& params_;
  const GuidedConditions& cond_;
  GuidanceSpec spec_;
  BranchHooks* branches_;
};

/// Wraps a plain function; each call costs `passes_per_call` evaluations.
class FunctionVelocity final : public Velocity {
 public:
  using Fn = std::function<LatentGrid(const LatentGrid&, double)>;
  explicit FunctionVelocity(Fn fn, std::size_t passes_per_call = 1) : fn_(std::move(fn)), passes_(passes_per_call) {}
  LatentGrid eval(const LatentGrid& x, double s) override {
    nfe_ += passes_;
    return fn_(x, s);
  }

 private:
  Fn fn_;
  std::size_t passes_;
};

struct SamplerRun {
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t nfe = 0;
  std::vector<double> levels;    // visited noise levels, first to last
  std::size_t token_steps = 0;   // sum over steps of h * w
};

/// steps + 1 levels from `from` to `to`, evenly spaced.
std::vector<double> uniform_levels(double from, double to, std::size_t steps);

/// Euler integration through `levels` (decreasing). `before_eval` may rewrite
/// the state before each velocity evaluation and once after the last step.
LatentGrid integrate_euler(LatentGrid x, std::span<const double> levels, Velocity& v, SamplerRun* run = nullptr,
                           const std::function<void(LatentGrid&)>& before_eval = {});

/// Starting noise for a sampling run; identical for every sampler given the seed.
LatentGrid sampling_noise(std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                          std::size_t channels, std::uint64_t seed);

struct SampleResult {
  LatentGrid x;
  SamplerRun run;
};

/// Uniform-grid Euler from s = 1 to 0 starting at sampling_noise(seed).
SampleResult euler_sample(Velocity& v, std::size_t views, std::size_t frames, std::size_t height, std::size_t width,
                          std::size_t channels, std::size_t steps, std::uint64_t seed);
SampleResult euler_sample(const ModelParams& params, const GuidedConditions& cond, const GuidanceSpec& spec,
                          std::size_t steps, std::size_t height, std::size_t width, std::uint64_t seed,
                          BranchHooks* branches = nullptr);

/// Samples a window whose first k frames are pinned to the last k frames of
/// `prefix`. `cond` describes the new window.
SampleResult extend_video(const LatentGrid& prefix, std::size_t k, const ModelParams& params,
                          const GuidedConditions& cond, const GuidanceSpec& spec, std::size_t steps,
                          std::uint64_t seed, BranchHooks* branches = nullptr);
SampleResult extend_video(const LatentGrid& prefix, std::size_t k, Velocity& v, std::size_t steps, std::uint64_t seed);

/// prefix followed by frames [k, T) of `window`.
LatentGrid stitch_extension(const LatentGrid& prefix, const LatentGrid& window, std::size_t k);

// Training objective.

struct RfSample {
  double s = 0.0;
  LatentGrid noise;
  LatentGrid x_s;
  LatentGrid target;               // x_data - noise
  std::vector<double> loss_mask;   // per frame
};

/// Draws noise and s ~ U[0, 1], forms x_s and, when first_k > 0, pins the
/// first k frames to the data.
RfSample rf_sample(const LatentGrid& x_data, Rng& rng, std::size_t first_k = 0);

/// Mean squared error over unmasked frames; writes dLoss/dv to `dv` when given.
double rf_loss(const LatentGrid& v, const LatentGrid& target, std::span<const double> loss_mask,
               LatentGrid* dv = nullptr);

struct TrainExample {
  LatentGrid x;                        // clean video
  SceneSpec scene;
  std::vector<SketchRaster> sketches;  // rasters matching x's resolution
};

struct TrainOptions {
  double drop_all = 0.1;       // probability all three conditions are nulled
  double drop_each = 0.15;     // otherwise, independent per-condition probability
  double first_k_prob = 0.25;  // probability of a random first-k context mask
};

/// Accumulates gradients of the batch-mean loss into `params`; returns the loss.
/// `first_k` forces a context length; otherwise it is drawn per TrainOptions.
double rf_training_step(ModelParams& params, std::span<const TrainExample> batch, Rng& rng,
                        const TrainOptions& options = {}, std::optional<std::size_t> first_k = std::nullopt);

}  // namespace dive
