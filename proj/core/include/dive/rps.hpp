#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dive/backbone.hpp"
#include "dive/flow.hpp"
#include "dive/latent.hpp"

namespace dive {

class Rng;

/// s' = s sqrt(r) / (1 + s (sqrt(r) - 1)) for area ratio r = (h' w') / (h w).
double noise_level_shift(double s, double area_ratio);

/// One-step clean estimate x_s + s v.
LatentGrid straight_flow_estimate(const LatentGrid& x_s, double s, const LatentGrid& v);

/// Bilinear, half-pixel centres, edge clamped; per (view, frame, channel).
LatentGrid latent_resize(const LatentGrid& x, std::size_t height, std::size_t width);

/// (1 - s) clean + s eps with fresh eps from `rng`.
LatentGrid renoise(const LatentGrid& clean, double s, Rng& rng);

struct Stage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t steps = 0;
};

struct StageSchedule {
  std::vector<Stage> stages;

  std::size_t total_steps() const;
  void validate() const;
  /// "8x14:10,12x21:10,16x28:10"; 'x' or the multiplication sign separate h and w.
  static StageSchedule parse(const std::string& text);
  std::string to_string() const;
};

struct StageCost {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t steps = 0;
  std::size_t nfe = 0;
  std::size_t token_steps = 0;  // steps * h * w
  double s_start = 0.0;
  double s_end = 0.0;           // level of the last evaluation (handoff level)
  double s_next = 0.0;          // shifted start of the next stage
};

struct RpsLedger {
  std::vector<StageCost> stages;
  std::size_t nfe = 0;
  std::size_t token_steps = 0;
};

struct RpsResult {
  LatentGrid x;
  RpsLedger ledger;
};

/// Stage k integrates uniformly from its start level down to the handoff
/// level 1 - (a_k + n_k - 1) / N (a_k = steps of earlier stages) with n_k - 1
/// Euler steps, then takes a straight-flow estimate, resizes it, and renoises
/// at the shifted level. The last stage integrates down to 0.
RpsResult rps_sample(Velocity& v, std::size_t views, std::size_t frames, std::size_t channels,
                     const StageSchedule& schedule, std::uint64_t seed);
RpsResult rps_sample(const ModelParams& params, const GuidedConditions& cond, const GuidanceSpec& spec,
                     const StageSchedule& schedule, std::uint64_t seed, BranchHooks* branches = nullptr);

}  // namespace dive
