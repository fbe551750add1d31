#include "dive/rps.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <sstream>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

double noise_level_shift(double s, double area_ratio) {
  if (!(area_ratio > 0.0)) throw Error(ErrorCode::kInvalidArgument, "area ratio must be > 0");
  if (s < 0.0 || s > 1.0) throw Error(ErrorCode::kInvalidArgument, "noise level must lie in [0, 1]");
  const double q = std::sqrt(area_ratio);
  return s * q / (1.0 + s * (q - 1.0));
}

LatentGrid straight_flow_estimate(const LatentGrid& x_s, double s, const LatentGrid& v) { return axpy(x_s, s, v); }

LatentGrid latent_resize(const LatentGrid& x, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw Error(ErrorCode::kInvalidArgument, "resize target must be >= 1x1");
  if (height == x.height() && width == x.width()) return x;
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const std::vector<Tap> ty = taps(x.height(), height);
  const std::vector<Tap> tx = taps(x.width(), width);
  LatentGrid out(x.views(), x.frames(), height, width, x.channels());
  for (std::size_t v = 0; v < x.views(); ++v) {
    for (std::size_t t = 0; t < x.frames(); ++t) {
      for (std::size_t y = 0; y < height; ++y) {
        const Tap& a = ty[y];
        for (std::size_t xx = 0; xx < width; ++xx) {
          const Tap& b = tx[xx];
          for (std::size_t c = 0; c < x.channels(); ++c) {
            const double top = (1.0 - b.f) * x.at(v, t, a.i0, b.i0, c) + b.f * x.at(v, t, a.i0, b.i1, c);
            const double bot = (1.0 - b.f) * x.at(v, t, a.i1, b.i0, c) + b.f * x.at(v, t, a.i1, b.i1, c);
            out.at(v, t, y, xx, c) = (1.0 - a.f) * top + a.f * bot;
          }
        }
      }
    }
  }
  return out;
}

LatentGrid renoise(const LatentGrid& clean, double s, Rng& rng) {
  if (s < 0.0 || s > 1.0) throw Error(ErrorCode::kInvalidArgument, "noise level must lie in [0, 1]");
  const LatentGrid eps =
      gaussian_latent(clean.views(), clean.frames(), clean.height(), clean.width(), clean.channels(), rng);
  return lincomb(1.0 - s, clean, s, eps);
}

std::size_t StageSchedule::total_steps() const {
  std::size_t n = 0;
  for (const Stage& st : stages) n += st.steps;
  return n;
}

void StageSchedule::validate() const {
  if (stages.empty()) throw Error(ErrorCode::kInvalidArgument, "schedule has no stages");
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const Stage& st = stages[k];
    if (st.height == 0 || st.width == 0 || st.steps == 0) {
      throw Error(ErrorCode::kInvalidArgument, "stage " + std::to_string(k) + " has a zero extent or step count");
    }
    if (k > 0 && st.height * st.width < stages[k - 1].height * stages[k - 1].width) {
      throw Error(ErrorCode::kInvalidArgument, "stage resolutions must not decrease in area");
    }
  }
}

StageSchedule StageSchedule::parse(const std::string& text) {
  std::string norm;
  for (std::size_t i = 0; i < text.size(); ++i) {
    // UTF-8 multiplication sign
    if (static_cast<unsigned char>(text[i]) == 0xC3 && i + 1 < text.size() &&
        static_cast<unsigned char>(text[i + 1]) == 0x97) {
      norm += 'x';
      ++i;
    } else if (text[i] != ' ') {
      norm += text[i];
    }
  }
  static const std::regex item(R"((\d+)[xX](\d+):(\d+))");
  StageSchedule sched;
  std::stringstream ss(norm);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::smatch m;
    if (!std::regex_match(part, m, item)) {
      throw Error(ErrorCode::kConfig, "bad stage '" + part + "' (expected HxW:steps)");
    }
    sched.stages.push_back({std::stoul(m[1]), std::stoul(m[2]), std::stoul(m[3])});
  }
  sched.validate();
  return sched;
}

std::string StageSchedule::to_string() const {
  std::string out;
  for (const Stage& st : stages) {
    if (!out.empty()) out += ',';
    out += std::to_string(st.height) + "x" + std::to_string(st.width) + ":" + std::to_string(st.steps);
  }
  return out;
}

RpsResult rps_sample(Velocity& v, std::size_t views, std::size_t frames, std::size_t channels,
                     const StageSchedule& schedule, std::uint64_t seed) {
  schedule.validate();
  const std::size_t total = schedule.total_steps();
  const Rng renoise_root = Rng(seed).substream("rps-renoise");
  RpsResult out;
  const Stage& first = schedule.stages.front();
  LatentGrid x = sampling_noise(views, frames, first.height, first.width, channels, seed);
  double s_start = 1.0;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < schedule.stages.size(); ++k) {
    const Stage& st = schedule.stages[k];
    const bool last = k + 1 == schedule.stages.size();
    StageCost cost{st.height, st.width, st.steps, 0, 0, s_start, 0.0, 0.0};
    const std::size_t nfe_before = v.nfe();
    SamplerRun run;
    if (last) {
      const std::vector<double> levels = uniform_levels(s_start, 0.0, st.steps);
      x = integrate_euler(std::move(x), levels, v, &run);
      cost.s_end = levels[st.steps - 1];
    } else {
      const double handoff = 1.0 - static_cast<double>(offset + st.steps - 1) / static_cast<double>(total);
      if (st.steps > 1) {
        const std::vector<double> levels = uniform_levels(s_start, handoff, st.steps - 1);
        x = integrate_euler(std::move(x), levels, v, &run);
      }
      const LatentGrid vel = v.eval(x, handoff);
      run.token_steps += st.height * st.width;
      const Stage& next = schedule.stages[k + 1];
      const LatentGrid clean = latent_resize(straight_flow_estimate(x, handoff, vel), next.height, next.width);
      const double ratio = static_cast<double>(next.height * next.width) / static_cast<double>(st.height * st.width);
      cost.s_end = handoff;
      cost.s_next = noise_level_shift(handoff, ratio);
      Rng rng = renoise_root.substream(k);
      x = renoise(clean, cost.s_next, rng);
      s_start = cost.s_next;
    }
    cost.nfe = v.nfe() - nfe_before;
    cost.token_steps = run.token_steps;
    out.ledger.nfe += cost.nfe;
    out.ledger.token_steps += cost.token_steps;
    out.ledger.stages.push_back(cost);
    offset += st.steps;
  }
  out.x = std::move(x);
  return out;
}

RpsResult rps_sample(const ModelParams& params, const GuidedConditions& cond, const GuidanceSpec& spec,
                     const StageSchedule& schedule, std::uint64_t seed, BranchHooks* branches) {
  GuidedVelocity v(params, cond, spec, branches);
  return rps_sample(v, cond.full.views, cond.full.frames, params.config.channels, schedule, seed);
}

}  // namespace dive
