#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dive/backbone.hpp"
#include "dive/conditions.hpp"
#include "dive/flow.hpp"

namespace dive {

class AdamW;
class Rng;

/// gamma(omega), beta(omega) = linear(F(omega / 16)) with 4 bands. A branch
/// residual a becomes omega * (a * (1 + gamma) + beta), so it vanishes at
/// omega = 0 and grows with the scale like the guidance it imitates.
struct ScaleModulation {
  Parameter gamma_w, gamma_b, beta_w, beta_b;
};

/// Auxiliary cross-attention onto one condition block (text or instances).
struct CrossBranchParams {
  Parameter q_w, q_b, kv_w, kv_b;
  ScaleModulation mod;
  Parameter out_w, out_b;  // zero-initialized
};

/// Auxiliary MLP on a SketchFormer fusion path.
struct SketchBranchParams {
  Mlp mlp;
  ScaleModulation mod;
  Parameter out_w, out_b;  // zero-initialized
};

enum class BranchKind { kText = 0, kInstance = 1, kSketch = 2 };

/// psi_l, psi_i (one per block) and psi_r (one per sketch cell). A branch
/// whose scale is 0 is skipped, contributing exactly nothing.
class BranchParams final : public BranchHooks {
 public:
  static BranchParams create(const BackboneConfig& config, std::uint64_t seed);

  std::vector<CrossBranchParams> text;
  std::vector<CrossBranchParams> instance;
  std::vector<SketchBranchParams> sketch;
  std::size_t heads = 4;

  ParamList parameters();
  ParamList parameters(BranchKind kind);

  void set_scales(const std::array<double, 3>& omega) override;
  const std::array<double, 3>& scales() const { return omega_; }

  bool cross_active(std::size_t block) const override;
  Tensor cross_residual(std::size_t block, const Tensor& normed, const ConditionSet& cond, const TokenGrid& grid,
                        bool record) override;
  Tensor cross_residual_backward(std::size_t block, const Tensor& dres, const ConditionSet& cond,
                                 const TokenGrid& grid) override;
  bool sketch_active(std::size_t cell) const override;
  Tensor sketch_residual(std::size_t cell, const Tensor& state, bool record) override;
  Tensor sketch_residual_backward(std::size_t cell, const Tensor& dres) override;

  struct ModTape {
    Tensor features, gamma, beta, a, m;
    double omega = 0.0;
    std::vector<double> row_on;  // 1 where the branch saw any key
  };
  struct CrossTape {
    Tensor normed, q, kv;
    std::vector<AttentionCache> core;
    ModTape mod;
  };
  struct SketchTape {
    MlpCache mlp;
    ModTape mod;
  };

 private:
  std::array<double, 3> omega_{0.0, 0.0, 0.0};
  std::vector<CrossTape> text_tape_, instance_tape_;
  std::vector<SketchTape> sketch_tape_;
};

enum class DistillStrategy { kMixed, kSingle1, kSingle2 };

std::string strategy_name(DistillStrategy s);
DistillStrategy parse_strategy(const std::string& name);

/// Uniform over the seven masks that null at least one condition.
NullMask sample_null_combination(Rng& rng);

/// (omega + 1) v(cond_c) - omega v(cond_u): two frozen passes.
LatentGrid teacher_velocity(const LatentGrid& x_s, double s, const ConditionSet& cond_c, const ConditionSet& cond_u,
                            double omega, const ModelParams& params, std::size_t* nfe = nullptr);

/// Single-pass student v_[theta, psi](x_s, s, cond, Omega).
LatentGrid branch_forward(const LatentGrid& x_s, double s, const ConditionSet& cond, const std::array<double, 3>& omega,
                          const ModelParams& params, BranchParams& branches, std::size_t* nfe = nullptr);

struct DistillStepStats {
  double loss = 0.0;
  std::size_t teacher_passes = 0;
  std::vector<NullMask> combos;  // per example: the nulled teacher conditions
};

/// Accumulates branch gradients of one distillation step; theta is only read.
DistillStepStats mad_distill_step(ModelParams& params, BranchParams& branches, std::span<const TrainExample> batch,
                                  DistillStrategy strategy, Rng& rng);

/// ||student(omega, omega, omega) - teacher||^2 / ||teacher - v(L, I, R)||^2
/// with the extended teacher, summed over `examples` and averaged over `omegas`.
double distill_validation_error(const ModelParams& params, BranchParams& branches,
                                std::span<const TrainExample> examples, std::span<const double> omegas,
                                std::uint64_t seed);

}  // namespace dive
