#include "dive/conditions.hpp"

#include <cmath>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

SceneSpec SceneSpec::frame_window(std::size_t begin, std::size_t count) const {
  if (begin + count > frames) throw Error(ErrorCode::kInvalidArgument, "frame_window beyond scene length");
  SceneSpec out = *this;
  out.frames = count;
  for (InstanceSpec& inst : out.instances) {
    inst.x += inst.vx * static_cast<double>(begin);
    inst.z += inst.vz * static_cast<double>(begin);
    std::vector<Box2D> boxes;
    boxes.reserve(views() * count);
    for (std::size_t v = 0; v < views(); ++v) {
      for (std::size_t t = 0; t < count; ++t) boxes.push_back(inst.boxes.at(v * frames + begin + t));
    }
    inst.boxes = std::move(boxes);
  }
  return out;
}

ConditionEncoder ConditionEncoder::create(const ConditionConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model;
  ConditionEncoder enc;
  enc.config = cfg;
  enc.text_embed = Parameter("cond.text_embed", {cfg.labels, d});
  enc.text_pos = Parameter("cond.text_pos", {cfg.text_tokens, d});
  enc.text_null = Parameter("cond.text_null", {cfg.text_tokens, d});
  enc.caption_embed = Parameter("cond.caption_embed", {cfg.captions, d});
  enc.instance_mlp = make_mlp("cond.instance_mlp", enc.instance_feature_dim(), d, d);
  enc.instance_null = Parameter("cond.instance_null", {1, d});
  enc.camera_mlp = make_mlp("cond.camera_mlp", 16 * 2 * static_cast<std::size_t>(cfg.bands), d, d);

  Rng r = rng.substream("conditions");
  init_normal(enc.text_embed, r, 1.0);
  init_normal(enc.text_pos, r, 0.1);
  init_normal(enc.caption_embed, r, 1.0);
  init_glorot(enc.instance_mlp.w1, r);
  init_glorot(enc.instance_mlp.w2, r);
  init_glorot(enc.camera_mlp.w1, r);
  init_glorot(enc.camera_mlp.w2, r);
  return enc;
}

std::size_t ConditionEncoder::instance_feature_dim() const {
  const std::size_t nb = 2 * static_cast<std::size_t>(config.bands);
  return 4 * nb + nb + config.d_model + 1;
}

void ConditionEncoder::collect(ParamList& out) {
  out.insert(out.end(), {&text_embed, &text_pos, &text_null, &caption_embed});
  dive::collect(instance_mlp, out);
  out.push_back(&instance_null);
  dive::collect(camera_mlp, out);
}

Tensor ConditionSet::instance_group(std::size_t view, std::size_t frame) const {
  return slice_rows(instances, (view * frames + frame) * n_ins, n_ins);
}

Tensor ConditionSet::aggregate(std::size_t view, std::size_t frame) const {
  return aggregate_conditions(text, instance_group(view, frame), slice_rows(camera, view, 1));
}

const SketchRaster& ConditionSet::sketch_for(std::size_t height, std::size_t width) const {
  for (const SketchRaster& s : sketches) {
    if (s.height() == height && s.width() == width) return s;
  }
  throw Error(ErrorCode::kShapeMismatch,
              "no sketch raster at " + std::to_string(height) + "x" + std::to_string(width));
}

bool operator==(const ConditionSet& a, const ConditionSet& b) {
  if (a.sketches.size() != b.sketches.size()) return false;
  for (std::size_t i = 0; i < a.sketches.size(); ++i) {
    if (!(a.sketches[i].data == b.sketches[i].data)) return false;
  }
  return a.text == b.text && a.instances == b.instances && a.camera == b.camera && a.views == b.views &&
         a.frames == b.frames && a.n_ins == b.n_ins && a.null_flags == b.null_flags;
}

namespace {

void check_label(const ConditionEncoder& enc, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= enc.config.labels) {
    throw Error(ErrorCode::kInvalidArgument, "unknown scene label " + std::to_string(label));
  }
}

void check_caption(const ConditionEncoder& enc, int caption) {
  if (caption < 0 || static_cast<std::size_t>(caption) >= enc.config.captions) {
    throw Error(ErrorCode::kInvalidArgument, "unknown caption id " + std::to_string(caption));
  }
}

Tensor text_tokens(const ConditionEncoder& enc, int label) {
  check_label(enc, label);
  Tensor out = enc.text_pos.value;
  const std::size_t d = enc.config.d_model;
  const double* e = enc.text_embed.value.row(static_cast<std::size_t>(label));
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) += e[c];
  }
  return out;
}

// Rows: [F(box) | F(angle) | caption embedding | visible].
Tensor instance_features(const ConditionEncoder& enc, std::span<const InstanceToken> tokens) {
  const std::size_t dim = enc.instance_feature_dim();
  const std::size_t d = enc.config.d_model;
  Tensor feats({tokens.size(), dim});
  Tensor geo({tokens.size(), 4});
  Tensor ang({tokens.size(), 1});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Box2D& b = tokens[i].box;
    geo.at(i, 0) = b.x;
    geo.at(i, 1) = b.y;
    geo.at(i, 2) = b.w;
    geo.at(i, 3) = b.h;
    ang.at(i, 0) = tokens[i].angle;
  }
  const Tensor fg = fourier_features(geo, enc.config.bands);
  const Tensor fa = fourier_features(ang, enc.config.bands);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    check_caption(enc, tokens[i].caption_id);
    double* row = feats.row(i);
    std::size_t off = 0;
    for (std::size_t c = 0; c < fg.cols(); ++c) row[off++] = fg.at(i, c);
    for (std::size_t c = 0; c < fa.cols(); ++c) row[off++] = fa.at(i, c);
    const double* e = enc.caption_embed.value.row(static_cast<std::size_t>(tokens[i].caption_id));
    for (std::size_t c = 0; c < d; ++c) row[off++] = e[c];
    row[off] = tokens[i].box.visible ? 1.0 : 0.0;
  }
  return feats;
}

Tensor camera_features(const ConditionEncoder& enc, std::span<const CameraSpec> cams) {
  Tensor m({cams.size(), 16});
  for (std::size_t v = 0; v < cams.size(); ++v) {
    const auto flat = camera_transform(cams[v]);
    std::copy(flat.begin(), flat.end(), m.row(v));
  }
  return fourier_features(m, enc.config.bands);
}

Tensor repeat_row(const Tensor& row, std::size_t n) {
  Tensor out({n, row.cols()});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(row.data(), row.cols(), out.row(r));
  return out;
}

}  // namespace

std::array<double, 16> camera_transform(const CameraSpec& cam) {
  const auto& k = cam.intrinsics;
  const double det = k[0] * (k[4] * k[8] - k[5] * k[7]) - k[1] * (k[3] * k[8] - k[5] * k[6]) +
                     k[2] * (k[3] * k[7] - k[4] * k[6]);
  if (std::abs(det) < 1e-12) throw Error(ErrorCode::kInvalidArgument, "camera intrinsics are singular");
  std::array<double, 9> inv{};
  inv[0] = (k[4] * k[8] - k[5] * k[7]) / det;
  inv[1] = (k[2] * k[7] - k[1] * k[8]) / det;
  inv[2] = (k[1] * k[5] - k[2] * k[4]) / det;
  inv[3] = (k[5] * k[6] - k[3] * k[8]) / det;
  inv[4] = (k[0] * k[8] - k[2] * k[6]) / det;
  inv[5] = (k[2] * k[3] - k[0] * k[5]) / det;
  inv[6] = (k[3] * k[7] - k[4] * k[6]) / det;
  inv[7] = (k[1] * k[6] - k[0] * k[7]) / det;
  inv[8] = (k[0] * k[4] - k[1] * k[3]) / det;
  const auto& r = cam.rotation;
  std::array<double, 16> m{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int l = 0; l < 3; ++l) s += r[static_cast<std::size_t>(i * 3 + l)] * inv[static_cast<std::size_t>(l * 3 + j)];
      m[static_cast<std::size_t>(i * 4 + j)] = s;
    }
    m[static_cast<std::size_t>(i * 4 + 3)] = cam.translation[static_cast<std::size_t>(i)];
  }
  m[15] = 1.0;
  return m;
}

Tensor encode_text(const ConditionEncoder& enc, int label) { return text_tokens(enc, label); }

Tensor encode_instances(const ConditionEncoder& enc, std::span<const InstanceToken> instances) {
  if (instances.empty()) return Tensor({0, enc.config.d_model});
  return mlp_forward(enc.instance_mlp, instance_features(enc, instances));
}

Tensor encode_camera(const ConditionEncoder& enc, const CameraSpec& cam) {
  return mlp_forward(enc.camera_mlp, camera_features(enc, std::span<const CameraSpec>(&cam, 1)));
}

Tensor aggregate_conditions(const Tensor& text, const Tensor& instances, const Tensor& camera) {
  if (text.cols() != camera.cols() || (instances.rows() > 0 && instances.cols() != text.cols())) {
    throw Error(ErrorCode::kShapeMismatch, "aggregate_conditions: widths " + shape_string(text.shape()) + ", " +
                                               shape_string(instances.shape()) + ", " + shape_string(camera.shape()));
  }
  const Tensor* parts[] = {&text, &instances, &camera};
  return concat_rows(parts);
}

ConditionGrads ConditionGrads::zeros_like(const ConditionSet& c) {
  return {Tensor(c.text.shape()), Tensor(c.instances.shape()), Tensor(c.camera.shape())};
}

ConditionSet encode_conditions(const ConditionEncoder& enc, const SceneSpec& scene, std::vector<SketchRaster> sketches,
                               NullMask mask, ConditionCache* cache) {
  const std::size_t d = enc.config.d_model;
  const std::size_t views = scene.views();
  const std::size_t frames = scene.frames;
  const std::size_t n_ins = scene.instances.size();
  ConditionSet out;
  out.views = views;
  out.frames = frames;
  out.n_ins = n_ins;
  out.null_flags = mask;

  check_label(enc, scene.label);
  out.text = mask.text ? enc.text_null.value : text_tokens(enc, scene.label);

  std::vector<InstanceToken> tokens;
  tokens.reserve(views * frames * n_ins);
  std::vector<int> captions;
  for (std::size_t v = 0; v < views; ++v) {
    for (std::size_t t = 0; t < frames; ++t) {
      for (const InstanceSpec& inst : scene.instances) {
        tokens.push_back({inst.box(v, t, frames), inst.angle, inst.caption_id});
        captions.push_back(inst.caption_id);
      }
    }
  }
  Tensor inst_feats;
  MlpCache inst_cache;
  if (mask.instance) {
    out.n_ins = 1;
    out.instances = repeat_row(enc.instance_null.value, views * frames);
  } else if (tokens.empty()) {
    out.instances = Tensor({0, d});
  } else {
    inst_feats = instance_features(enc, tokens);
    out.instances = mlp_forward(enc.instance_mlp, inst_feats, cache ? &inst_cache : nullptr);
  }

  Tensor cam_feats = camera_features(enc, scene.cameras);
  MlpCache cam_cache;
  out.camera = mlp_forward(enc.camera_mlp, cam_feats, cache ? &cam_cache : nullptr);

  if (mask.sketch) {
    for (SketchRaster& s : sketches) s.data.fill(0.0);
  }
  out.sketches = std::move(sketches);

  if (cache) {
    cache->label = scene.label;
    cache->mask = mask;
    cache->captions = std::move(captions);
    cache->instance_features = std::move(inst_feats);
    cache->instance_mlp = std::move(inst_cache);
    cache->camera_features = std::move(cam_feats);
    cache->camera_mlp = std::move(cam_cache);
  }
  return out;
}

void encode_conditions_backward(ConditionEncoder& enc, const ConditionCache& cache, const ConditionGrads& grads) {
  const std::size_t d = enc.config.d_model;
  if (cache.mask.text) {
    enc.text_null.grad += grads.text;
  } else {
    enc.text_pos.grad += grads.text;
    double* g = enc.text_embed.grad.row(static_cast<std::size_t>(cache.label));
    for (std::size_t r = 0; r < grads.text.rows(); ++r) {
      for (std::size_t c = 0; c < d; ++c) g[c] += grads.text.at(r, c);
    }
  }

  if (grads.instances.rows() > 0) {
    if (cache.mask.instance) {
      for (std::size_t r = 0; r < grads.instances.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) enc.instance_null.grad[c] += grads.instances.at(r, c);
      }
    } else {
      const Tensor dfeat = mlp_backward(enc.instance_mlp, cache.instance_mlp, grads.instances);
      const std::size_t off = dfeat.cols() - d - 1;
      for (std::size_t r = 0; r < dfeat.rows(); ++r) {
        double* g = enc.caption_embed.grad.row(static_cast<std::size_t>(cache.captions[r]));
        for (std::size_t c = 0; c < d; ++c) g[c] += dfeat.at(r, off + c);
      }
    }
  }

  mlp_backward(enc.camera_mlp, cache.camera_mlp, grads.camera);
}

ConditionSet nullify(const ConditionSet& cond, NullMask mask, const ConditionEncoder& enc) {
  ConditionSet out = cond;
  if (mask.text) {
    out.text = enc.text_null.value;
    out.null_flags.text = true;
  }
  if (mask.instance) {
    out.n_ins = 1;
    out.instances = repeat_row(enc.instance_null.value, cond.views * cond.frames);
    out.null_flags.instance = true;
  }
  if (mask.sketch) {
    for (SketchRaster& s : out.sketches) s.data.fill(0.0);
    out.null_flags.sketch = true;
  }
  return out;
}

FrameMaskResult apply_first_k_mask(const LatentGrid& x_t, const LatentGrid& x_clean, std::size_t k) {
  if (!x_t.same_layout(x_clean)) throw Error(ErrorCode::kShapeMismatch, "apply_first_k_mask: layouts differ");
  const std::size_t frames = x_t.frames();
  if (k >= frames) {
    throw Error(ErrorCode::kInvalidArgument,
                "apply_first_k_mask: k=" + std::to_string(k) + " leaves no unmasked frame of " + std::to_string(frames));
  }
  FrameMaskResult out{x_t, std::vector<double>(frames, 1.0)};
  const std::size_t fs = x_t.frame_size();
  for (std::size_t v = 0; v < x_t.views(); ++v) {
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t base = x_t.index(v, t, 0, 0, 0);
      std::copy_n(x_clean.tensor().data() + base, fs, out.x.tensor().data() + base);
    }
  }
  for (std::size_t t = 0; t < k; ++t) out.loss_mask[t] = 0.0;
  return out;
}

}  // namespace dive
