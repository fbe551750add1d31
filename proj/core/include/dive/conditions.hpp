#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "dive/latent.hpp"
#include "dive/ops.hpp"
#include "dive/tensor.hpp"

namespace dive {

class Rng;

/// Axis-aligned box in normalized image coordinates, (x, y) = top-left.
/// An instance outside a view's frustum has visible = false and a zero box.
struct Box2D {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  bool visible = false;

  friend bool operator==(const Box2D&, const Box2D&) = default;
};

/// One object. World state lives on the ground plane (x right, z forward);
/// `boxes` holds its projection for every (view, frame), view-major.
struct InstanceSpec {
  double x = 0.0;
  double z = 0.0;
  double length = 4.0;
  double width = 2.0;
  double height = 1.5;
  double angle = 0.0;  // yaw, radians
  double vx = 0.0;     // per-frame displacement
  double vz = 0.0;
  int caption_id = 0;
  std::vector<Box2D> boxes;

  const Box2D& box(std::size_t view, std::size_t frame, std::size_t frames) const {
    return boxes.at(view * frames + frame);
  }

  friend bool operator==(const InstanceSpec&, const InstanceSpec&) = default;
};

struct CameraSpec {
  std::array<double, 9> intrinsics{};  // K, row-major
  std::array<double, 9> rotation{};    // camera-to-world R, row-major
  std::array<double, 3> translation{};  // camera centre in world

  friend bool operator==(const CameraSpec&, const CameraSpec&) = default;
};

/// Road layout on the ground plane: a curved ribbon x = offset + slope z + curve z^2
/// plus an optional straight cross street at depth cross_z.
struct RoadSpec {
  double offset = 0.0;
  double slope = 0.0;
  double curve = 0.0;
  double half_width = 3.0;
  bool has_cross = false;
  double cross_z = 20.0;
  double cross_half_width = 3.0;

  friend bool operator==(const RoadSpec&, const RoadSpec&) = default;
};

struct SceneSpec {
  int label = 0;
  std::size_t frames = 0;  // frames covered by every InstanceSpec::boxes
  std::vector<InstanceSpec> instances;
  std::vector<CameraSpec> cameras;  // one per view
  RoadSpec road;

  std::size_t views() const { return cameras.size(); }

  /// Same scene restricted to frames [begin, begin + count); instances keep
  /// their world state advanced to `begin`.
  SceneSpec frame_window(std::size_t begin, std::size_t count) const;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// Binary road raster [V, T, H, W, 1].
struct SketchRaster {
  Tensor data;

  std::size_t height() const { return data.dim(2); }
  std::size_t width() const { return data.dim(3); }
};

struct NullMask {
  bool text = false;
  bool instance = false;
  bool sketch = false;

  static constexpr NullMask none() { return {}; }
  static constexpr NullMask all() { return {true, true, true}; }
  friend bool operator==(const NullMask&, const NullMask&) = default;
};

struct ConditionConfig {
  std::size_t d_model = 32;
  std::size_t text_tokens = 8;  // n_L
  std::size_t labels = 6;
  std::size_t captions = 8;
  int bands = 4;
};

/// Learned parameters of the condition encoders, including the null rows.
struct ConditionEncoder {
  ConditionConfig config;
  Parameter text_embed;     // [labels, d]
  Parameter text_pos;       // [n_L, d]
  Parameter text_null;      // [n_L, d]
  Parameter caption_embed;  // [captions, d]
  Mlp instance_mlp;         // blends F(box), F(angle), caption, visibility
  Parameter instance_null;  // [1, d]
  Mlp camera_mlp;           // F(image-to-world 4x4) -> d

  static ConditionEncoder create(const ConditionConfig& config, Rng& rng);
  std::size_t instance_feature_dim() const;
  void collect(ParamList& out);
};

/// Encoded conditions for a V-view, T-frame window. Row group (v, t) of
/// `instances` holds the n_ins instance tokens as seen from view v at frame t.
struct ConditionSet {
  Tensor text;       // [n_L, d]
  Tensor instances;  // [V * T * n_ins, d]
  Tensor camera;     // [V, d]
  std::vector<SketchRaster> sketches;  // one raster per available resolution
  std::size_t views = 0;
  std::size_t frames = 0;
  std::size_t n_ins = 0;
  NullMask null_flags;

  std::size_t d_model() const { return text.cols(); }
  Tensor instance_group(std::size_t view, std::size_t frame) const;
  /// [L; I_(v,t); P_v], n_L + n_ins + 1 rows.
  Tensor aggregate(std::size_t view, std::size_t frame) const;
  /// Raster at exactly H x W; throws kShapeMismatch if none was provided.
  const SketchRaster& sketch_for(std::size_t height, std::size_t width) const;

  friend bool operator==(const ConditionSet& a, const ConditionSet& b);
};

/// Single-instance encoder input.
struct InstanceToken {
  Box2D box;
  double angle = 0.0;
  int caption_id = 0;
};

Tensor encode_text(const ConditionEncoder& enc, int label);
Tensor encode_instances(const ConditionEncoder& enc, std::span<const InstanceToken> instances);
Tensor encode_camera(const ConditionEncoder& enc, const CameraSpec& cam);
/// Row concatenation [L; I; P].
Tensor aggregate_conditions(const Tensor& text, const Tensor& instances, const Tensor& camera);

/// Flattened [[R, t], [0, 1]] * [[K^-1, 0], [0, 1]]. Throws on singular K.
std::array<double, 16> camera_transform(const CameraSpec& cam);

/// Forward state kept for back-propagating into the encoders.
struct ConditionCache {
  int label = 0;
  NullMask mask;
  std::vector<int> captions;  // per instance row
  Tensor instance_features;
  MlpCache instance_mlp;
  Tensor camera_features;
  MlpCache camera_mlp;
};

struct ConditionGrads {
  Tensor text;
  Tensor instances;
  Tensor camera;

  static ConditionGrads zeros_like(const ConditionSet& c);
};

/// Encodes a scene window; blocks selected by `mask` are replaced by nulls.
ConditionSet encode_conditions(const ConditionEncoder& enc, const SceneSpec& scene, std::vector<SketchRaster> sketches,
                               NullMask mask = NullMask::none(), ConditionCache* cache = nullptr);
void encode_conditions_backward(ConditionEncoder& enc, const ConditionCache& cache, const ConditionGrads& grads);

/// Replaces masked blocks by the learned null tokens (text, instances) or an
/// all-zero raster (sketch). A null instance block holds one null token per
/// (view, frame) whatever the instance count. Already-null blocks stay null.
ConditionSet nullify(const ConditionSet& cond, NullMask mask, const ConditionEncoder& enc);

struct FrameMaskResult {
  LatentGrid x;
  std::vector<double> loss_mask;  // per frame: 0 on context frames, 1 elsewhere
};

/// Copies the first k frames of `x_clean` into `x_t`. Requires k < T.
FrameMaskResult apply_first_k_mask(const LatentGrid& x_t, const LatentGrid& x_clean, std::size_t k);

}  // namespace dive
