#include "test_support.hpp"

#include <algorithm>
#include <cmath>

#include "dive/conditions.hpp"
#include "dive/flow.hpp"
#include "dive/mad.hpp"
#include "dive/ops.hpp"
#include "dive/world.hpp"

namespace dive::testing {

Tensor random_tensor(const Shape& shape, Rng& rng, double scale) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

LatentGrid random_latent(std::size_t v, std::size_t t, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  return gaussian_latent(v, t, h, w, c, rng);
}

void randomize(const ParamList& params, Rng& rng, double scale) {
  for (Parameter* p : params) {
    const bool gain = p->name.size() >= 2 && p->name.compare(p->name.size() - 2, 2, ".g") == 0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      p->value[i] = gain ? 1.0 + 0.2 * rng.normal() : scale * rng.normal();
    }
  }
}

SelfAttentionParams make_self_params(const std::string& name, std::size_t d, Rng& rng) {
  SelfAttentionParams p{Parameter(name + ".ln.g", {d}),        Parameter(name + ".ln.b", {d}),
                        Parameter(name + ".qkv.w", {d, 3 * d}), Parameter(name + ".qkv.b", {3 * d}),
                        Parameter(name + ".out.w", {d, d}),     Parameter(name + ".out.b", {d})};
  randomize(params_of(p), rng, 0.5);
  return p;
}

CrossAttentionParams make_cross_params(const std::string& name, std::size_t d, Rng& rng) {
  CrossAttentionParams p{Parameter(name + ".ln.g", {d}),      Parameter(name + ".ln.b", {d}),
                         Parameter(name + ".q.w", {d, d}),      Parameter(name + ".q.b", {d}),
                         Parameter(name + ".kv.w", {d, 2 * d}), Parameter(name + ".kv.b", {2 * d}),
                         Parameter(name + ".out.w", {d, d}),    Parameter(name + ".out.b", {d})};
  randomize(params_of(p), rng, 0.5);
  return p;
}

FeedForwardParams make_ffn_params(const std::string& name, std::size_t d, std::size_t hidden, Rng& rng) {
  FeedForwardParams p{Parameter(name + ".ln.g", {d}), Parameter(name + ".ln.b", {d}),
                      make_mlp(name + ".mlp", d, hidden, d)};
  ParamList list{&p.ln_g, &p.ln_b};
  collect(p.mlp, list);
  randomize(list, rng, 0.5);
  return p;
}

ParamList params_of(SelfAttentionParams& p) { return {&p.ln_g, &p.ln_b, &p.qkv_w, &p.qkv_b, &p.out_w, &p.out_b}; }

ParamList params_of(CrossAttentionParams& p) {
  return {&p.ln_g, &p.ln_b, &p.q_w, &p.q_b, &p.kv_w, &p.kv_b, &p.out_w, &p.out_b};
}

BackboneConfig tiny_config(std::size_t blocks, std::size_t cells) {
  BackboneConfig c;
  c.channels = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_blocks = blocks;
  c.sketch_cells = cells;
  c.max_frames = 4;
  c.mlp_ratio = 2;
  c.noise_bands = 3;
  c.conditions.d_model = 8;
  c.conditions.text_tokens = 3;
  c.conditions.bands = 2;
  return c;
}

Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), dv = v.cols();
  Tensor out({n, dv});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w(m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * k.at(j, c);
      w[j] = std::exp(dot / std::sqrt(static_cast<double>(d)));
      z += w[j];
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t c = 0; c < dv; ++c) out.at(i, c) += w[j] / z * v.at(j, c);
    }
  }
  return out;
}

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& w, const Tensor& b, std::size_t col0, std::size_t ncols) {
  Tensor out({a.rows(), ncols});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t c = 0; c < ncols; ++c) {
      double acc = b[col0 + c];
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * w.at(k, col0 + c);
      out.at(i, c) = acc;
    }
  }
  return out;
}

Tensor naive_layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
  Tensor out(x.shape());
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += x.at(i, c);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x.at(i, c) - mu) * (x.at(i, c) - mu);
    var /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) out.at(i, c) = (x.at(i, c) - mu) / std::sqrt(var + kLayerNormEps) * g[c] + b[c];
  }
  return out;
}

}  // namespace

Tensor naive_self_attention(const SelfAttentionParams& p, const Tensor& rows, std::size_t heads, const Tensor* pos) {
  Tensor x = naive_layer_norm(rows, p.ln_g.value, p.ln_b.value);
  if (pos) x += *pos;
  const std::size_t d = rows.cols();
  const std::size_t dh = d / heads;
  Tensor merged({rows.rows(), d});
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor q = naive_matmul(x, p.qkv_w.value, p.qkv_b.value, h * dh, dh);
    const Tensor k = naive_matmul(x, p.qkv_w.value, p.qkv_b.value, d + h * dh, dh);
    const Tensor v = naive_matmul(x, p.qkv_w.value, p.qkv_b.value, 2 * d + h * dh, dh);
    const Tensor o = naive_attention(q, k, v);
    for (std::size_t i = 0; i < o.rows(); ++i) {
      for (std::size_t c = 0; c < dh; ++c) merged.at(i, h * dh + c) = o.at(i, c);
    }
  }
  return naive_matmul(merged, p.out_w.value, p.out_b.value, 0, d);
}

LatentGrid naive_bilinear(const LatentGrid& x, std::size_t h, std::size_t w) {
  LatentGrid out(x.views(), x.frames(), h, w, x.channels());
  const double sy = static_cast<double>(x.height()) / static_cast<double>(h);
  const double sx = static_cast<double>(x.width()) / static_cast<double>(w);
  auto clampi = [](long v, long hi) { return std::clamp<long>(v, 0, hi); };
  for (std::size_t v = 0; v < x.views(); ++v)
    for (std::size_t t = 0; t < x.frames(); ++t)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double fy = (static_cast<double>(i) + 0.5) * sy - 0.5;
          const double fx = (static_cast<double>(j) + 0.5) * sx - 0.5;
          const long y0 = static_cast<long>(std::floor(fy));
          const long x0 = static_cast<long>(std::floor(fx));
          const double ay = fy - static_cast<double>(y0);
          const double ax = fx - static_cast<double>(x0);
          const long hy = static_cast<long>(x.height()) - 1;
          const long hx = static_cast<long>(x.width()) - 1;
          for (std::size_t c = 0; c < x.channels(); ++c) {
            auto px = [&](long yy, long xx) {
              return x.at(v, t, static_cast<std::size_t>(clampi(yy, hy)), static_cast<std::size_t>(clampi(xx, hx)), c);
            };
            out.at(v, t, i, j, c) = (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x0 + 1)) +
                                    ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
          }
        }
  return out;
}

namespace {

// Objective sum(w * y) for a random w fixed per case.
struct Probe {
  Tensor w;
  double dot(const Tensor& y) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += w[i] * y[i];
    return acc;
  }
};

Probe probe_for(const Shape& shape, Rng& rng) { return {random_tensor(shape, rng)}; }

Parameter input(const std::string& name, const Shape& shape, Rng& rng, double scale = 1.0) {
  Parameter p(name, shape);
  p.value = random_tensor(shape, rng, scale);
  return p;
}

GradCheckReport check(const std::function<double()>& f, const std::function<void()>& b, const ParamList& params,
                      std::size_t cap = 0) {
  return grad_check(f, b, params, 1e-5, cap);
}

SceneSpec tiny_scene(Rng& rng, std::size_t views, std::size_t frames) {
  ToyWorld world;
  world.views = views;
  SceneSpec scene;
  // Draw until the scene has at least one visible instance in the window so
  // every encoder path carries gradient.
  for (int attempt = 0; attempt < 64; ++attempt) {
    scene = world.generate_scene(rng);
    if (views < scene.cameras.size()) {
      scene.cameras.resize(views);
      project_boxes(scene, world.camera_height);
    }
    scene = scene.frame_window(0, frames);
    bool visible = false;
    for (const InstanceSpec& inst : scene.instances)
      for (const Box2D& b : inst.boxes) visible = visible || b.visible;
    if (visible) break;
  }
  return scene;
}

GradCheckReport denoiser_case(std::uint64_t seed, std::size_t views, std::size_t frames, std::size_t h,
                              std::size_t w, std::size_t blocks, std::size_t cells) {
  Rng rng = Rng(seed).substream("grad-denoiser");
  const BackboneConfig cfg = tiny_config(blocks, cells);
  ModelParams params = ModelParams::create(cfg, seed);
  ParamList list = params.parameters();
  randomize(list, rng);
  const SceneSpec scene = tiny_scene(rng, views, frames);
  ToyWorld world;
  world.views = views;
  std::vector<SketchRaster> sketches{rasterize_sketch(world, scene, h, w)};
  const LatentGrid x = random_latent(views, frames, h, w, cfg.channels, rng);
  const double s = rng.uniform(0.05, 0.95);
  const Probe probe = probe_for(x.tensor().shape(), rng);
  auto f = [&] {
    const ConditionSet cond = encode_conditions(params.conditions, scene, sketches);
    return probe.dot(denoiser_forward(x, s, cond, params).tensor());
  };
  auto b = [&] {
    zero_grads(list);
    ConditionCache cache;
    const ConditionSet cond = encode_conditions(params.conditions, scene, sketches, NullMask::none(), &cache);
    DenoiserTape tape;
    denoiser_forward(x, s, cond, params, &tape);
    const ConditionGrads g = denoiser_backward(tape, LatentGrid(probe.w), cond, params);
    encode_conditions_backward(params.conditions, cache, g);
  };
  return check(f, b, list, 6);
}

std::vector<GradCase> build_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"linear", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-linear");
                     Parameter x = input("x", {3, 4}, rng), w = input("w", {4, 5}, rng), b = input("b", {5}, rng);
                     const Probe pr = probe_for({3, 5}, rng);
                     return check([&] { return pr.dot(linear(x.value, w, b)); },
                                  [&] {
                                    zero_grads({&x, &w, &b});
                                    x.grad = linear_backward(x.value, w, b, pr.w);
                                  },
                                  {&x, &w, &b});
                   }});
  cases.push_back({"layer_norm", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-ln");
                     Parameter x = input("x", {3, 6}, rng), g = input("g", {6}, rng), b = input("b", {6}, rng);
                     const Probe pr = probe_for({3, 6}, rng);
                     return check([&] { return pr.dot(layer_norm(x.value, g, b)); },
                                  [&] {
                                    zero_grads({&x, &g, &b});
                                    LayerNormCache c;
                                    layer_norm(x.value, g, b, kLayerNormEps, &c);
                                    x.grad = layer_norm_backward(c, g, b, pr.w);
                                  },
                                  {&x, &g, &b});
                   }});
  cases.push_back({"attention_core", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-attn");
                     const std::size_t n = 1 + rng.uniform_int(4), m = 1 + rng.uniform_int(5);
                     Parameter q = input("q", {n, 4}, rng), k = input("k", {m, 4}, rng), v = input("v", {m, 3}, rng);
                     const Probe pr = probe_for({n, 3}, rng);
                     return check([&] { return pr.dot(attention_core(q.value, k.value, v.value)); },
                                  [&] {
                                    AttentionCache c;
                                    attention_core(q.value, k.value, v.value, &c);
                                    AttentionGrads g = attention_core_backward(q.value, k.value, v.value, c, pr.w);
                                    q.grad = g.dq;
                                    k.grad = g.dk;
                                    v.grad = g.dv;
                                  },
                                  {&q, &k, &v});
                   }});
  cases.push_back({"silu", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-silu");
                     Parameter x = input("x", {4, 5}, rng, 2.0);
                     const Probe pr = probe_for({4, 5}, rng);
                     return check([&] { return pr.dot(silu(x.value)); },
                                  [&] { x.grad = silu_backward(x.value, pr.w); }, {&x});
                   }});
  cases.push_back({"fourier_features", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-fourier");
                     Parameter x = input("x", {3, 2}, rng);
                     const Probe pr = probe_for({3, 12}, rng);
                     return check([&] { return pr.dot(fourier_features(x.value, 3)); },
                                  [&] { x.grad = fourier_features_backward(x.value, 3, pr.w); }, {&x});
                   }});
  cases.push_back({"mlp", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-mlp");
                     Mlp mlp = make_mlp("mlp", 5, 7, 3);
                     ParamList list;
                     collect(mlp, list);
                     randomize(list, rng, 0.5);
                     Parameter x = input("x", {4, 5}, rng);
                     list.push_back(&x);
                     const Probe pr = probe_for({4, 3}, rng);
                     return check([&] { return pr.dot(mlp_forward(mlp, x.value)); },
                                  [&] {
                                    zero_grads(list);
                                    MlpCache c;
                                    mlp_forward(mlp, x.value, &c);
                                    x.grad = mlp_backward(mlp, c, pr.w);
                                  },
                                  list);
                   }});
  auto self_case = [](const char* tag, bool temporal) {
    return [tag, temporal](std::uint64_t seed) {
      Rng rng = Rng(seed).substream(tag);
      const std::size_t d = 8, heads = 2;
      TokenGrid g;
      g.views = 2;
      g.frames = 3;
      g.gh = 2;
      g.gw = 2;
      g.height = 4;
      g.width = 4;
      const Groups groups = temporal ? temporal_groups(g) : view_inflated_groups(g);
      SelfAttentionParams p = make_self_params("attn", d, rng);
      Parameter x = input("x", {g.count(), d}, rng);
      Parameter pos = input("pos", {g.count(), d}, rng, 0.5);
      ParamList list = params_of(p);
      list.push_back(&x);
      if (temporal) list.push_back(&pos);
      const Probe pr = probe_for({g.count(), d}, rng);
      const Tensor* posp = temporal ? &pos.value : nullptr;
      return check([&] { return pr.dot(self_attention_delta(p, x.value, groups, heads, posp, nullptr)); },
                   [&] {
                     zero_grads(list);
                     SelfAttnTape tape;
                     self_attention_delta(p, x.value, groups, heads, posp, &tape);
                     x.grad = self_attention_delta_backward(p, tape, groups, heads, pr.w, true,
                                                            temporal ? &pos.grad : nullptr);
                   },
                   list);
    };
  };
  cases.push_back({"view_inflated_attention", self_case("grad-spatial", false)});
  cases.push_back({"temporal_attention", self_case("grad-temporal", true)});
  cases.push_back({"grouped_cross_attention", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-cross");
                     const std::size_t d = 8, heads = 2;
                     Parameter q = input("q", {6, d}, rng);
                     Parameter kv0 = input("kv0", {3, 2 * d}, rng), kv1 = input("kv1", {1, 2 * d}, rng);
                     const Probe pr = probe_for({6, d}, rng);
                     auto groups = [&] {
                       return std::vector<KvGroup>{{0, 2, kv0.value}, {2, 3, kv1.value}, {5, 1, Tensor({0, 2 * d})}};
                     };
                     return check([&] { return pr.dot(grouped_cross_attention(q.value, groups(), heads, nullptr)); },
                                  [&] {
                                    std::vector<AttentionCache> caches;
                                    const auto gs = groups();
                                    grouped_cross_attention(q.value, gs, heads, &caches);
                                    std::vector<Tensor> dkv;
                                    q.grad = grouped_cross_attention_backward(q.value, gs, heads, caches, pr.w, dkv);
                                    kv0.grad = dkv.at(0);
                                    kv1.grad = dkv.at(1);
                                  },
                                  {&q, &kv0, &kv1});
                   }});
  cases.push_back({"feed_forward", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-ffn");
                     FeedForwardParams p = make_ffn_params("ffn", 6, 12, rng);
                     ParamList list{&p.ln_g, &p.ln_b};
                     collect(p.mlp, list);
                     Parameter x = input("x", {5, 6}, rng);
                     list.push_back(&x);
                     const Probe pr = probe_for({5, 6}, rng);
                     return check([&] { return pr.dot(ffn_delta(p, x.value, nullptr)); },
                                  [&] {
                                    zero_grads(list);
                                    FfnTape tape;
                                    ffn_delta(p, x.value, &tape);
                                    x.grad = ffn_delta_backward(p, tape, pr.w, true);
                                  },
                                  list);
                   }});
  cases.push_back({"condition_encoders", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-cond");
                     ConditionConfig cc = tiny_config().conditions;
                     ConditionEncoder enc = ConditionEncoder::create(cc, rng);
                     ParamList list;
                     enc.collect(list);
                     randomize(list, rng, 0.5);
                     const SceneSpec scene = tiny_scene(rng, 2, 2);
                     const ConditionSet shape = encode_conditions(enc, scene, {});
                     const Probe pt = probe_for(shape.text.shape(), rng);
                     const Probe pi = probe_for(shape.instances.shape(), rng);
                     const Probe pc = probe_for(shape.camera.shape(), rng);
                     return check(
                         [&] {
                           const ConditionSet c = encode_conditions(enc, scene, {});
                           return pt.dot(c.text) + pi.dot(c.instances) + pc.dot(c.camera);
                         },
                         [&] {
                           zero_grads(list);
                           ConditionCache cache;
                           encode_conditions(enc, scene, {}, NullMask::none(), &cache);
                           encode_conditions_backward(enc, cache, {pt.w, pi.w, pc.w});
                         },
                         list);
                   }});
  cases.push_back({"rf_loss", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-rf");
                     Parameter v("v", {2, 3, 2, 2, 2});
                     v.value = random_tensor(v.value.shape(), rng);
                     const LatentGrid target(random_tensor({2, 3, 2, 2, 2}, rng));
                     const std::vector<double> mask{0.0, 1.0, 1.0};
                     return check([&] { return rf_loss(LatentGrid(v.value), target, mask); },
                                  [&] {
                                    LatentGrid dv;
                                    rf_loss(LatentGrid(v.value), target, mask, &dv);
                                    v.grad = dv.tensor();
                                  },
                                  {&v});
                   }});
  cases.push_back({"mad_branches", [](std::uint64_t seed) {
                     Rng rng = Rng(seed).substream("grad-mad");
                     const BackboneConfig cfg = tiny_config(2, 1);
                     ModelParams params = ModelParams::create(cfg, seed);
                     randomize(params.parameters(), rng);
                     BranchParams branches = BranchParams::create(cfg, seed);
                     ParamList list = branches.parameters();
                     randomize(list, rng);
                     const std::array<double, 3> omega{rng.uniform(0.5, 8.0), rng.uniform(0.5, 8.0),
                                                       rng.uniform(0.5, 8.0)};
                     const SceneSpec scene = tiny_scene(rng, 2, 2);
                     ToyWorld world;
                     world.views = 2;
                     const ConditionSet cond =
                         encode_conditions(params.conditions, scene, {rasterize_sketch(world, scene, 4, 4)});
                     const LatentGrid x = random_latent(2, 2, 4, 4, cfg.channels, rng);
                     const double s = rng.uniform(0.05, 0.95);
                     const Probe pr = probe_for(x.tensor().shape(), rng);
                     return check([&] { return pr.dot(branch_forward(x, s, cond, omega, params, branches).tensor()); },
                                  [&] {
                                    zero_grads(list);
                                    branches.set_scales(omega);
                                    DenoiserTape tape;
                                    denoiser_forward(x, s, cond, params, &tape, &branches);
                                    denoiser_backward(tape, LatentGrid(pr.w), cond, params, &branches,
                                                      {.base_param_grads = false, .condition_grads = false});
                                  },
                                  list, 6);
                   }});
  cases.push_back({"denoiser_minimal", [](std::uint64_t seed) { return denoiser_case(seed, 1, 1, 2, 2, 1, 1); }});
  cases.push_back({"denoiser_multiview", [](std::uint64_t seed) { return denoiser_case(seed, 2, 3, 4, 5, 2, 1); }});
  for (GradCase& c : cases) {
    if (c.name == "linear" || c.name == "layer_norm") c.tolerance = 1e-6;
    if (c.name == "condition_encoders") c.tolerance = 1e-5;
  }
  return cases;
}

}  // namespace

const std::vector<GradCase>& gradient_cases() {
  static const std::vector<GradCase> cases = build_cases();
  return cases;
}

}  // namespace dive::testing
