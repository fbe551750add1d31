#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dive/conditions.hpp"
#include "dive/latent.hpp"
#include "dive/ops.hpp"
#include "dive/tensor.hpp"

namespace dive {

struct BackboneConfig {
  std::size_t channels = 4;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 4;
  std::size_t sketch_cells = 2;
  std::size_t patch = 2;  // spatial; temporal patch is 1
  std::size_t max_frames = 16;
  std::size_t mlp_ratio = 4;
  int noise_bands = 6;
  ConditionConfig conditions;

  void validate() const;
};

struct SelfAttentionParams {
  Parameter ln_g, ln_b, qkv_w, qkv_b, out_w, out_b;
};

struct CrossAttentionParams {
  Parameter ln_g, ln_b, q_w, q_b, kv_w, kv_b, out_w, out_b;
};

struct FeedForwardParams {
  Parameter ln_g, ln_b;
  Mlp mlp;
};

struct BlockParams {
  SelfAttentionParams spatial;  // view-inflated
  SelfAttentionParams temporal;
  Parameter temporal_pos;       // [max_frames, d]
  CrossAttentionParams cross;
  FeedForwardParams ffn;
};

/// Mirrored fusion cell of the sketch branch. `fuse_*` is the zero-initialized
/// projection into the main stream.
struct SketchCellParams {
  SelfAttentionParams spatial;  // per (view, frame); no view inflation
  FeedForwardParams ffn;
  Parameter fuse_w, fuse_b;
};

/// Frozen backbone parameters (theta), condition encoders included.
struct ModelParams {
  BackboneConfig config;
  Parameter patch_w, patch_b;  // shared 3D patch embedder [p*p*C, d]
  Mlp noise_mlp;               // F(s) -> d
  ConditionEncoder conditions;
  std::vector<BlockParams> blocks;
  std::vector<SketchCellParams> sketch;
  Parameter out_ln_g, out_ln_b, out_w, out_b;

  static ModelParams create(const BackboneConfig& config, std::uint64_t seed);
  /// Pointers into this object; invalidated by copies/moves.
  ParamList parameters();
};

/// Token layout after patch embedding: row index = ((v * T + t) * gh + i) * gw + j.
struct TokenGrid {
  std::size_t views = 0, frames = 0, height = 0, width = 0;
  std::size_t patch = 2;
  std::size_t gh = 0, gw = 0;

  static TokenGrid of(const LatentGrid& x, std::size_t patch);
  std::size_t per_frame() const { return gh * gw; }
  std::size_t count() const { return views * frames * gh * gw; }
  std::size_t row(std::size_t v, std::size_t t, std::size_t i, std::size_t j) const {
    return ((v * frames + t) * gh + i) * gw + j;
  }
};

using Groups = std::vector<std::vector<std::uint32_t>>;

/// One group per frame spanning every view: the V*h*w token sequence.
Groups view_inflated_groups(const TokenGrid& g);
/// One group per (view, frame).
Groups per_view_groups(const TokenGrid& g);
/// One group per (view, spatial position) running over frames.
Groups temporal_groups(const TokenGrid& g);

/// Patches of p x p pixels (zero padded at the right/bottom edge) -> [N, p*p*C].
Tensor patchify(const LatentGrid& x, std::size_t patch);
LatentGrid unpatchify(const Tensor& tokens, const TokenGrid& grid, std::size_t channels);

/// Fixed 2-D sinusoid evaluated at each token's normalized centre, so the same
/// parameters serve every resolution. [N, d].
Tensor spatial_position_encoding(const TokenGrid& grid, std::size_t d_model);

struct SelfAttnTape {
  LayerNormCache ln;
  Tensor in;      // input of the QKV projection
  Tensor qkv;
  std::vector<AttentionCache> core;
  Tensor merged;  // concatenated heads, input of the output projection
};

struct CrossTape {
  LayerNormCache ln;
  Tensor normed;
  Tensor q;
  Tensor kv_text, kv_inst, kv_cam;
  std::vector<AttentionCache> core;
  Tensor merged;
};

struct FfnTape {
  LayerNormCache ln;
  MlpCache mlp;
};

/// Multi-head self-attention over groups of rows of `qkv` ([N, 3d]).
Tensor grouped_self_attention(const Tensor& qkv, const Groups& groups, std::size_t heads,
                              std::vector<AttentionCache>* caches);
Tensor grouped_self_attention_backward(const Tensor& qkv, const Groups& groups, std::size_t heads,
                                       const std::vector<AttentionCache>& caches, const Tensor& dout);

/// Sub-layer delta Wo * MHA(LN(x) [+ pos]) for self-attention (residual not added).
Tensor self_attention_delta(const SelfAttentionParams& p, const Tensor& x, const Groups& groups, std::size_t heads,
                            const Tensor* pos, SelfAttnTape* tape);
/// Returns d(input of LN). Writes d(pos) to `dpos` when non-null.
Tensor self_attention_delta_backward(SelfAttentionParams& p, const SelfAttnTape& tape, const Groups& groups,
                                     std::size_t heads, const Tensor& ddelta, bool param_grads, Tensor* dpos = nullptr);

Tensor ffn_delta(const FeedForwardParams& p, const Tensor& x, FfnTape* tape);
Tensor ffn_delta_backward(FeedForwardParams& p, const FfnTape& tape, const Tensor& ddelta, bool param_grads);

// Spec-level operators over token latents (channels = d_model). Each returns
// x plus the sub-layer output.
LatentGrid view_inflated_spatial_attention(const LatentGrid& x, const SelfAttentionParams& p, std::size_t heads);
/// Plain per-(view, frame) spatial attention, used by the sketch cells.
LatentGrid per_view_spatial_attention(const LatentGrid& x, const SelfAttentionParams& p, std::size_t heads);
LatentGrid temporal_attention(const LatentGrid& x, const SelfAttentionParams& p, const Parameter& temporal_pos,
                              std::size_t heads);
/// Every token attends to the same condition rows `cond` ([n_c, d]).
LatentGrid cross_attention_block(const LatentGrid& x, const Tensor& cond, const CrossAttentionParams& p,
                                 std::size_t heads);

/// Extension points used by the auxiliary distillation branches.
class BranchHooks {
 public:
  virtual ~BranchHooks() = default;
  /// Guidance scales (text, instance, sketch) for the next forward passes.
  virtual void set_scales(const std::array<double, 3>& omega) { (void)omega; }
  virtual bool cross_active(std::size_t block) const = 0;
  /// Residual added after block `block`'s cross-attention; `normed` is that
  /// sub-layer's normalized input.
  virtual Tensor cross_residual(std::size_t block, const Tensor& normed, const ConditionSet& cond,
                                const TokenGrid& grid, bool record) = 0;
  /// Returns d(normed).
  virtual Tensor cross_residual_backward(std::size_t block, const Tensor& dres, const ConditionSet& cond,
                                         const TokenGrid& grid) = 0;
  virtual bool sketch_active(std::size_t cell) const = 0;
  /// Extra residual on the fusion path of sketch cell `cell`.
  virtual Tensor sketch_residual(std::size_t cell, const Tensor& state, bool record) = 0;
  virtual Tensor sketch_residual_backward(std::size_t cell, const Tensor& dres) = 0;
};

struct SketchCellTape {
  SelfAttnTape spatial;
  FfnTape ffn;
  Tensor state;  // cell output, input of the fusion projection
};

struct BlockTape {
  SelfAttnTape spatial;
  SelfAttnTape temporal;
  CrossTape cross;
  FfnTape ffn;
};

struct DenoiserTape {
  TokenGrid grid;
  Tensor patches;
  Tensor sketch_patches;
  bool sketch_used = false;
  Tensor noise_features;
  MlpCache noise;
  std::vector<BlockTape> blocks;
  std::vector<SketchCellTape> cells;
  LayerNormCache out_ln;
  Tensor out_normed;
};

struct ForwardOptions {
  bool sketch_branch = true;  // false skips the sketch side network entirely
};

struct BackwardOptions {
  bool base_param_grads = true;  // accumulate into theta
  bool condition_grads = true;   // compute gradients w.r.t. condition tokens
};

/// Residual features of the sketch side network, one per fusion cell.
/// `base_tokens` are the main stream's embedded tokens the branch starts from.
std::vector<Tensor> sketchformer_forward(const SketchRaster& sketch, const Tensor& base_tokens,
                                         const ModelParams& params, const TokenGrid& grid,
                                         BranchHooks* hooks = nullptr, DenoiserTape* tape = nullptr);

/// Velocity model v_theta(x_s, s, cond). Output has the layout of `x_s`.
LatentGrid denoiser_forward(const LatentGrid& x_s, double s, const ConditionSet& cond, const ModelParams& params,
                            DenoiserTape* tape = nullptr, BranchHooks* hooks = nullptr,
                            const ForwardOptions& options = {});

/// Back-propagates dL/dv through a recorded forward. Parameter gradients are
/// accumulated into `params` (and the hooks' own parameters).
ConditionGrads denoiser_backward(const DenoiserTape& tape, const LatentGrid& dv, const ConditionSet& cond,
                                 ModelParams& params, BranchHooks* hooks = nullptr, const BackwardOptions& options = {});


/// Query rows [row_begin, row_begin + row_count) attend to `kv` ([M, 2d]:
/// keys then values). Groups with M = 0 produce zero output.
struct KvGroup {
  std::size_t row_begin = 0;
  std::size_t row_count = 0;
  Tensor kv;
};

Tensor grouped_cross_attention(const Tensor& q, const std::vector<KvGroup>& groups, std::size_t heads,
                               std::vector<AttentionCache>* caches);
/// Returns dq; `dkv` receives one gradient per group.
Tensor grouped_cross_attention_backward(const Tensor& q, const std::vector<KvGroup>& groups, std::size_t heads,
                                        const std::vector<AttentionCache>& caches, const Tensor& dout,
                                        std::vector<Tensor>& dkv);

}  // namespace dive
