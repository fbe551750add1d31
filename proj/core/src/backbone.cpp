#include "dive/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

void BackboneConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, "backbone config: " + m); };
  if (channels == 0 || d_model == 0 || n_heads == 0 || n_blocks == 0 || patch == 0) fail("zero extent");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % 4 != 0) fail("d_model must be divisible by 4 for the 2-D position encoding");
  if (sketch_cells > n_blocks) fail("sketch_cells exceeds n_blocks");
  if (conditions.d_model != d_model) fail("condition width differs from d_model");
}

namespace {

SelfAttentionParams make_self_attention(const std::string& name, std::size_t d) {
  SelfAttentionParams p{Parameter(name + ".ln.g", {d}),        Parameter(name + ".ln.b", {d}),
                        Parameter(name + ".qkv.w", {d, 3 * d}), Parameter(name + ".qkv.b", {3 * d}),
                        Parameter(name + ".out.w", {d, d}),     Parameter(name + ".out.b", {d})};
  p.ln_g.value.fill(1.0);
  return p;
}

CrossAttentionParams make_cross_attention(const std::string& name, std::size_t d) {
  CrossAttentionParams p{Parameter(name + ".ln.g", {d}),      Parameter(name + ".ln.b", {d}),
                         Parameter(name + ".q.w", {d, d}),      Parameter(name + ".q.b", {d}),
                         Parameter(name + ".kv.w", {d, 2 * d}), Parameter(name + ".kv.b", {2 * d}),
                         Parameter(name + ".out.w", {d, d}),    Parameter(name + ".out.b", {d})};
  p.ln_g.value.fill(1.0);
  return p;
}

FeedForwardParams make_ffn(const std::string& name, std::size_t d, std::size_t hidden) {
  FeedForwardParams p{Parameter(name + ".ln.g", {d}), Parameter(name + ".ln.b", {d}), make_mlp(name + ".mlp", d, hidden, d)};
  p.ln_g.value.fill(1.0);
  return p;
}

void collect_self(SelfAttentionParams& p, ParamList& out) {
  out.insert(out.end(), {&p.ln_g, &p.ln_b, &p.qkv_w, &p.qkv_b, &p.out_w, &p.out_b});
}
void collect_cross(CrossAttentionParams& p, ParamList& out) {
  out.insert(out.end(), {&p.ln_g, &p.ln_b, &p.q_w, &p.q_b, &p.kv_w, &p.kv_b, &p.out_w, &p.out_b});
}
void collect_ffn(FeedForwardParams& p, ParamList& out) {
  out.insert(out.end(), {&p.ln_g, &p.ln_b});
  collect(p.mlp, out);
}

Tensor gather(const Tensor& src, const std::vector<std::uint32_t>& rows, std::size_t col0, std::size_t ncols) {
  Tensor out({rows.size(), ncols});
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(src.row(rows[r]) + col0, ncols, out.row(r));
  return out;
}

void scatter(Tensor& dst, const std::vector<std::uint32_t>& rows, std::size_t col0, const Tensor& blk) {
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(blk.row(r), blk.cols(), dst.row(rows[r]) + col0);
}

void scatter_add(Tensor& dst, const std::vector<std::uint32_t>& rows, std::size_t col0, const Tensor& blk) {
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double* d = dst.row(rows[r]) + col0;
    const double* s = blk.row(r);
    for (std::size_t c = 0; c < blk.cols(); ++c) d[c] += s[c];
  }
}

Tensor block_of(const Tensor& src, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  Tensor out({nr, nc});
  for (std::size_t r = 0; r < nr; ++r) std::copy_n(src.row(r0 + r) + c0, nc, out.row(r));
  return out;
}

void put_block(Tensor& dst, std::size_t r0, std::size_t c0, const Tensor& blk, bool add) {
  for (std::size_t r = 0; r < blk.rows(); ++r) {
    double* d = dst.row(r0 + r) + c0;
    const double* s = blk.row(r);
    if (add) {
      for (std::size_t c = 0; c < blk.cols(); ++c) d[c] += s[c];
    } else {
      std::copy_n(s, blk.cols(), d);
    }
  }
}

void add_row_broadcast(Tensor& x, const Tensor& row) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* xr = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) xr[c] += row[c];
  }
}

Tensor column_sum(const Tensor& x) {
  Tensor out({1, x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] += xr[c];
  }
  return out;
}

Tensor temporal_rows(const Parameter& tpos, const TokenGrid& g) {
  if (g.frames > tpos.value.rows()) {
    throw Error(ErrorCode::kShapeMismatch, std::to_string(g.frames) + " frames exceed temporal table of " +
                                               std::to_string(tpos.value.rows()));
  }
  const std::size_t d = tpos.value.cols();
  Tensor out({g.count(), d});
  const std::size_t pf = g.per_frame();
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t t = 0; t < g.frames; ++t) {
      for (std::size_t k = 0; k < pf; ++k) std::copy_n(tpos.value.row(t), d, out.row((v * g.frames + t) * pf + k));
    }
  }
  return out;
}

void temporal_rows_backward(Parameter& tpos, const TokenGrid& g, const Tensor& drows) {
  const std::size_t d = tpos.value.cols();
  const std::size_t pf = g.per_frame();
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t t = 0; t < g.frames; ++t) {
      double* gr = tpos.grad.row(t);
      for (std::size_t k = 0; k < pf; ++k) {
        const double* s = drows.row((v * g.frames + t) * pf + k);
        for (std::size_t c = 0; c < d; ++c) gr[c] += s[c];
      }
    }
  }
}

std::vector<KvGroup> condition_groups(const TokenGrid& g, const ConditionSet& cond, const Tensor& kv_text,
                                      const Tensor& kv_inst, const Tensor& kv_cam) {
  if (cond.views != g.views || cond.frames != g.frames) {
    throw Error(ErrorCode::kShapeMismatch, "conditions cover " + std::to_string(cond.views) + "x" +
                                               std::to_string(cond.frames) + " (views x frames), latent has " +
                                               std::to_string(g.views) + "x" + std::to_string(g.frames));
  }
  std::vector<KvGroup> groups;
  groups.reserve(g.views * g.frames);
  const std::size_t pf = g.per_frame();
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t t = 0; t < g.frames; ++t) {
      const Tensor inst = slice_rows(kv_inst, (v * g.frames + t) * cond.n_ins, cond.n_ins);
      const Tensor cam = slice_rows(kv_cam, v, 1);
      const Tensor* parts[] = {&kv_text, &inst, &cam};
      groups.push_back({(v * g.frames + t) * pf, pf, concat_rows(parts)});
    }
  }
  return groups;
}

LatentGrid replicate_sketch(const SketchRaster& sketch, std::size_t channels) {
  const Tensor& s = sketch.data;
  LatentGrid out(s.dim(0), s.dim(1), s.dim(2), s.dim(3), channels);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t c = 0; c < channels; ++c) out[i * channels + c] = s[i];
  }
  return out;
}

Tensor to_tokens(const LatentGrid& x) {
  return x.tensor().reshaped({x.size() / x.channels(), x.channels()});
}

}  // namespace

ModelParams ModelParams::create(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t pc = config.patch * config.patch * config.channels;
  Rng root(seed);
  Rng rng = root.substream("backbone");

  ModelParams m;
  m.config = config;
  m.patch_w = Parameter("patch.w", {pc, d});
  m.patch_b = Parameter("patch.b", {d});
  m.noise_mlp = make_mlp("noise", 2 * static_cast<std::size_t>(config.noise_bands), d, d);
  m.conditions = ConditionEncoder::create(config.conditions, root);
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const std::string n = "blocks." + std::to_string(b);
    BlockParams bp{make_self_attention(n + ".spatial", d), make_self_attention(n + ".temporal", d),
                   Parameter(n + ".temporal_pos", {config.max_frames, d}), make_cross_attention(n + ".cross", d),
                   make_ffn(n + ".ffn", d, d * config.mlp_ratio)};
    m.blocks.push_back(std::move(bp));
  }
  for (std::size_t c = 0; c < config.sketch_cells; ++c) {
    const std::string n = "sketch." + std::to_string(c);
    SketchCellParams sp{make_self_attention(n + ".spatial", d), make_ffn(n + ".ffn", d, d * config.mlp_ratio),
                        Parameter(n + ".fuse.w", {d, d}), Parameter(n + ".fuse.b", {d})};
    m.sketch.push_back(std::move(sp));
  }
  m.out_ln_g = Parameter("out.ln.g", {d});
  m.out_ln_b = Parameter("out.ln.b", {d});
  m.out_ln_g.value.fill(1.0);
  m.out_w = Parameter("out.w", {d, pc});
  m.out_b = Parameter("out.b", {pc});

  init_glorot(m.patch_w, rng);
  init_glorot(m.noise_mlp.w1, rng);
  init_glorot(m.noise_mlp.w2, rng);
  auto init_self = [&](SelfAttentionParams& p) {
    init_glorot(p.qkv_w, rng);
    init_glorot(p.out_w, rng);
  };
  for (BlockParams& bp : m.blocks) {
    init_self(bp.spatial);
    init_self(bp.temporal);
    init_normal(bp.temporal_pos, rng, 0.02);
    init_glorot(bp.cross.q_w, rng);
    init_glorot(bp.cross.kv_w, rng);
    init_glorot(bp.cross.out_w, rng);
    init_glorot(bp.ffn.mlp.w1, rng);
    init_glorot(bp.ffn.mlp.w2, rng);
  }
  for (SketchCellParams& sp : m.sketch) {
    init_self(sp.spatial);
    init_glorot(sp.ffn.mlp.w1, rng);
    init_glorot(sp.ffn.mlp.w2, rng);
    // fuse_w / fuse_b stay exactly zero
  }
  init_glorot(m.out_w, rng, 0.5);
  return m;
}

ParamList ModelParams::parameters() {
  ParamList out{&patch_w, &patch_b};
  collect(noise_mlp, out);
  conditions.collect(out);
  for (BlockParams& bp : blocks) {
    collect_self(bp.spatial, out);
    collect_self(bp.temporal, out);
    out.push_back(&bp.temporal_pos);
    collect_cross(bp.cross, out);
    collect_ffn(bp.ffn, out);
  }
  for (SketchCellParams& sp : sketch) {
    collect_self(sp.spatial, out);
    collect_ffn(sp.ffn, out);
    out.insert(out.end(), {&sp.fuse_w, &sp.fuse_b});
  }
  out.insert(out.end(), {&out_ln_g, &out_ln_b, &out_w, &out_b});
  return out;
}

TokenGrid TokenGrid::of(const LatentGrid& x, std::size_t patch) {
  TokenGrid g;
  g.views = x.views();
  g.frames = x.frames();
  g.height = x.height();
  g.width = x.width();
  g.patch = patch;
  g.gh = (x.height() + patch - 1) / patch;
  g.gw = (x.width() + patch - 1) / patch;
  return g;
}

Groups view_inflated_groups(const TokenGrid& g) {
  Groups groups(g.frames);
  for (std::size_t t = 0; t < g.frames; ++t) {
    auto& idx = groups[t];
    idx.reserve(g.views * g.per_frame());
    for (std::size_t v = 0; v < g.views; ++v) {
      for (std::size_t k = 0; k < g.per_frame(); ++k) {
        idx.push_back(static_cast<std::uint32_t>((v * g.frames + t) * g.per_frame() + k));
      }
    }
  }
  return groups;
}

Groups per_view_groups(const TokenGrid& g) {
  Groups groups(g.views * g.frames);
  for (std::size_t vt = 0; vt < groups.size(); ++vt) {
    auto& idx = groups[vt];
    idx.reserve(g.per_frame());
    for (std::size_t k = 0; k < g.per_frame(); ++k) idx.push_back(static_cast<std::uint32_t>(vt * g.per_frame() + k));
  }
  return groups;
}

Groups temporal_groups(const TokenGrid& g) {
  Groups groups(g.views * g.per_frame());
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t k = 0; k < g.per_frame(); ++k) {
      auto& idx = groups[v * g.per_frame() + k];
      idx.reserve(g.frames);
      for (std::size_t t = 0; t < g.frames; ++t) {
        idx.push_back(static_cast<std::uint32_t>((v * g.frames + t) * g.per_frame() + k));
      }
    }
  }
  return groups;
}

Tensor patchify(const LatentGrid& x, std::size_t patch) {
  const TokenGrid g = TokenGrid::of(x, patch);
  const std::size_t c = x.channels();
  Tensor out({g.count(), patch * patch * c});
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t t = 0; t < g.frames; ++t) {
      for (std::size_t i = 0; i < g.gh; ++i) {
        for (std::size_t j = 0; j < g.gw; ++j) {
          double* row = out.row(g.row(v, t, i, j));
          for (std::size_t py = 0; py < patch; ++py) {
            const std::size_t y = i * patch + py;
            for (std::size_t px = 0; px < patch; ++px) {
              const std::size_t xx = j * patch + px;
              if (y >= g.height || xx >= g.width) continue;
              for (std::size_t ch = 0; ch < c; ++ch) row[(py * patch + px) * c + ch] = x.at(v, t, y, xx, ch);
            }
          }
        }
      }
    }
  }
  return out;
}

LatentGrid unpatchify(const Tensor& tokens, const TokenGrid& g, std::size_t channels) {
  const std::size_t p = g.patch;
  if (tokens.rows() != g.count() || tokens.cols() != p * p * channels) {
    throw Error(ErrorCode::kShapeMismatch, "unpatchify: tokens " + shape_string(tokens.shape()));
  }
  LatentGrid out(g.views, g.frames, g.height, g.width, channels);
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t t = 0; t < g.frames; ++t) {
      for (std::size_t i = 0; i < g.gh; ++i) {
        for (std::size_t j = 0; j < g.gw; ++j) {
          const double* row = tokens.row(g.row(v, t, i, j));
          for (std::size_t py = 0; py < p; ++py) {
            const std::size_t y = i * p + py;
            for (std::size_t px = 0; px < p; ++px) {
              const std::size_t xx = j * p + px;
              if (y >= g.height || xx >= g.width) continue;
              for (std::size_t ch = 0; ch < channels; ++ch) out.at(v, t, y, xx, ch) = row[(py * p + px) * channels + ch];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor spatial_position_encoding(const TokenGrid& g, std::size_t d) {
  const std::size_t pairs = d / 4;
  std::vector<double> freqs(pairs);
  for (std::size_t m = 0; m < pairs; ++m) {
    const double e = pairs > 1 ? 4.0 * static_cast<double>(m) / static_cast<double>(pairs - 1) : 0.0;
    freqs[m] = std::numbers::pi * std::exp2(e);
  }
  Tensor frame({g.per_frame(), d});
  for (std::size_t i = 0; i < g.gh; ++i) {
    const double cy = (static_cast<double>(i * g.patch) + 0.5 * static_cast<double>(g.patch)) / static_cast<double>(g.height);
    for (std::size_t j = 0; j < g.gw; ++j) {
      const double cx = (static_cast<double>(j * g.patch) + 0.5 * static_cast<double>(g.patch)) / static_cast<double>(g.width);
      double* row = frame.row(i * g.gw + j);
      for (std::size_t m = 0; m < pairs; ++m) {
        row[2 * m] = std::sin(freqs[m] * cy);
        row[2 * m + 1] = std::cos(freqs[m] * cy);
        row[2 * pairs + 2 * m] = std::sin(freqs[m] * cx);
        row[2 * pairs + 2 * m + 1] = std::cos(freqs[m] * cx);
      }
    }
  }
  Tensor out({g.count(), d});
  for (std::size_t vt = 0; vt < g.views * g.frames; ++vt) {
    std::copy_n(frame.data(), frame.size(), out.data() + vt * frame.size());
  }
  return out;
}

Tensor grouped_self_attention(const Tensor& qkv, const Groups& groups, std::size_t heads,
                              std::vector<AttentionCache>* caches) {
  const std::size_t d = qkv.cols() / 3;
  const std::size_t dh = d / heads;
  Tensor out({qkv.rows(), d});
  if (caches) caches->assign(groups.size() * heads, {});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& idx = groups[gi];
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor q = gather(qkv, idx, h * dh, dh);
      const Tensor k = gather(qkv, idx, d + h * dh, dh);
      const Tensor v = gather(qkv, idx, 2 * d + h * dh, dh);
      const Tensor o = attention_core(q, k, v, caches ? &(*caches)[gi * heads + h] : nullptr);
      scatter(out, idx, h * dh, o);
    }
  }
  return out;
}

Tensor grouped_self_attention_backward(const Tensor& qkv, const Groups& groups, std::size_t heads,
                                       const std::vector<AttentionCache>& caches, const Tensor& dout) {
  const std::size_t d = qkv.cols() / 3;
  const std::size_t dh = d / heads;
  Tensor dqkv(qkv.shape());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& idx = groups[gi];
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor q = gather(qkv, idx, h * dh, dh);
      const Tensor k = gather(qkv, idx, d + h * dh, dh);
      const Tensor v = gather(qkv, idx, 2 * d + h * dh, dh);
      const Tensor dO = gather(dout, idx, h * dh, dh);
      const AttentionGrads g = attention_core_backward(q, k, v, caches[gi * heads + h], dO);
      scatter_add(dqkv, idx, h * dh, g.dq);
      scatter_add(dqkv, idx, d + h * dh, g.dk);
      scatter_add(dqkv, idx, 2 * d + h * dh, g.dv);
    }
  }
  return dqkv;
}

Tensor grouped_cross_attention(const Tensor& q, const std::vector<KvGroup>& groups, std::size_t heads,
                               std::vector<AttentionCache>* caches) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  Tensor out(q.shape());
  if (caches) caches->assign(groups.size() * heads, {});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const KvGroup& g = groups[gi];
    if (g.kv.rows() == 0) continue;
    if (g.kv.cols() != 2 * d) throw Error(ErrorCode::kShapeMismatch, "cross attention: kv " + shape_string(g.kv.shape()));
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = block_of(q, g.row_begin, g.row_count, h * dh, dh);
      const Tensor kh = block_of(g.kv, 0, g.kv.rows(), h * dh, dh);
      const Tensor vh = block_of(g.kv, 0, g.kv.rows(), d + h * dh, dh);
      const Tensor o = attention_core(qh, kh, vh, caches ? &(*caches)[gi * heads + h] : nullptr);
      put_block(out, g.row_begin, h * dh, o, false);
    }
  }
  return out;
}

Tensor grouped_cross_attention_backward(const Tensor& q, const std::vector<KvGroup>& groups, std::size_t heads,
                                        const std::vector<AttentionCache>& caches, const Tensor& dout,
                                        std::vector<Tensor>& dkv) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  Tensor dq(q.shape());
  dkv.clear();
  dkv.reserve(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const KvGroup& g = groups[gi];
    dkv.emplace_back(g.kv.shape());
    if (g.kv.rows() == 0) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = block_of(q, g.row_begin, g.row_count, h * dh, dh);
      const Tensor kh = block_of(g.kv, 0, g.kv.rows(), h * dh, dh);
      const Tensor vh = block_of(g.kv, 0, g.kv.rows(), d + h * dh, dh);
      const Tensor dO = block_of(dout, g.row_begin, g.row_count, h * dh, dh);
      const AttentionGrads ag = attention_core_backward(qh, kh, vh, caches[gi * heads + h], dO);
      put_block(dq, g.row_begin, h * dh, ag.dq, true);
      put_block(dkv.back(), 0, h * dh, ag.dk, true);
      put_block(dkv.back(), 0, d + h * dh, ag.dv, true);
    }
  }
  return dq;
}

Tensor self_attention_delta(const SelfAttentionParams& p, const Tensor& x, const Groups& groups, std::size_t heads,
                            const Tensor* pos, SelfAttnTape* tape) {
  Tensor in = layer_norm(x, p.ln_g, p.ln_b, kLayerNormEps, tape ? &tape->ln : nullptr);
  if (pos) in += *pos;
  Tensor qkv = linear(in, p.qkv_w, p.qkv_b);
  Tensor merged = grouped_self_attention(qkv, groups, heads, tape ? &tape->core : nullptr);
  Tensor delta = linear(merged, p.out_w, p.out_b);
  if (tape) {
    tape->in = std::move(in);
    tape->qkv = std::move(qkv);
    tape->merged = std::move(merged);
  }
  return delta;
}

Tensor self_attention_delta_backward(SelfAttentionParams& p, const SelfAttnTape& tape, const Groups& groups,
                                     std::size_t heads, const Tensor& ddelta, bool param_grads, Tensor* dpos) {
  const Tensor dmerged = linear_backward(tape.merged, p.out_w, p.out_b, ddelta, param_grads);
  const Tensor dqkv = grouped_self_attention_backward(tape.qkv, groups, heads, tape.core, dmerged);
  Tensor din = linear_backward(tape.in, p.qkv_w, p.qkv_b, dqkv, param_grads);
  if (dpos) *dpos = din;
  return layer_norm_backward(tape.ln, p.ln_g, p.ln_b, din, param_grads);
}

Tensor ffn_delta(const FeedForwardParams& p, const Tensor& x, FfnTape* tape) {
  const Tensor n = layer_norm(x, p.ln_g, p.ln_b, kLayerNormEps, tape ? &tape->ln : nullptr);
  return mlp_forward(p.mlp, n, tape ? &tape->mlp : nullptr);
}

Tensor ffn_delta_backward(FeedForwardParams& p, const FfnTape& tape, const Tensor& ddelta, bool param_grads) {
  const Tensor dn = mlp_backward(p.mlp, tape.mlp, ddelta, param_grads);
  return layer_norm_backward(tape.ln, p.ln_g, p.ln_b, dn, param_grads);
}

namespace {

LatentGrid apply_self(const LatentGrid& x, const SelfAttentionParams& p, std::size_t heads, const Groups& groups,
                      const Tensor* pos) {
  Tensor tokens = to_tokens(x);
  tokens += self_attention_delta(p, tokens, groups, heads, pos, nullptr);
  return LatentGrid(tokens.reshaped(x.tensor().shape()));
}

// Token latents are already one token per pixel.
TokenGrid unit_grid(const LatentGrid& x) { return TokenGrid::of(x, 1); }

}  // namespace

LatentGrid view_inflated_spatial_attention(const LatentGrid& x, const SelfAttentionParams& p, std::size_t heads) {
  return apply_self(x, p, heads, view_inflated_groups(unit_grid(x)), nullptr);
}

LatentGrid per_view_spatial_attention(const LatentGrid& x, const SelfAttentionParams& p, std::size_t heads) {
  return apply_self(x, p, heads, per_view_groups(unit_grid(x)), nullptr);
}

LatentGrid temporal_attention(const LatentGrid& x, const SelfAttentionParams& p, const Parameter& temporal_pos,
                              std::size_t heads) {
  const TokenGrid g = unit_grid(x);
  const Tensor pos = temporal_rows(temporal_pos, g);
  return apply_self(x, p, heads, temporal_groups(g), &pos);
}

LatentGrid cross_attention_block(const LatentGrid& x, const Tensor& cond, const CrossAttentionParams& p,
                                 std::size_t heads) {
  if (cond.cols() != x.channels()) {
    throw Error(ErrorCode::kShapeMismatch, "cross_attention_block: condition width " + std::to_string(cond.cols()) +
                                               " vs model width " + std::to_string(x.channels()));
  }
  Tensor tokens = to_tokens(x);
  const Tensor normed = layer_norm(tokens, p.ln_g, p.ln_b);
  const Tensor q = linear(normed, p.q_w, p.q_b);
  std::vector<KvGroup> groups{{0, tokens.rows(), linear(cond, p.kv_w, p.kv_b)}};
  const Tensor merged = grouped_cross_attention(q, groups, heads, nullptr);
  tokens += linear(merged, p.out_w, p.out_b);
  return LatentGrid(tokens.reshaped(x.tensor().shape()));
}

std::vector<Tensor> sketchformer_forward(const SketchRaster& sketch, const Tensor& base_tokens,
                                         const ModelParams& params, const TokenGrid& grid, BranchHooks* hooks,
                                         DenoiserTape* tape) {
  const Tensor& s = sketch.data;
  if (s.rank() != 5 || s.dim(0) != grid.views || s.dim(1) != grid.frames || s.dim(2) != grid.height ||
      s.dim(3) != grid.width || s.dim(4) != 1) {
    throw Error(ErrorCode::kShapeMismatch, "sketch raster " + shape_string(s.shape()) + " incompatible with latent " +
                                               std::to_string(grid.views) + "x" + std::to_string(grid.frames) + "x" +
                                               std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  const BackboneConfig& cfg = params.config;
  Tensor patches = patchify(replicate_sketch(sketch, cfg.channels), cfg.patch);
  Tensor state = base_tokens + linear(patches, params.patch_w, params.patch_b);
  const Groups groups = per_view_groups(grid);
  std::vector<Tensor> residuals;
  if (tape) {
    tape->sketch_patches = std::move(patches);
    tape->cells.assign(params.sketch.size(), {});
  }
  for (std::size_t c = 0; c < params.sketch.size(); ++c) {
    const SketchCellParams& cell = params.sketch[c];
    SketchCellTape* ct = tape ? &tape->cells[c] : nullptr;
    state += self_attention_delta(cell.spatial, state, groups, cfg.n_heads, nullptr, ct ? &ct->spatial : nullptr);
    state += ffn_delta(cell.ffn, state, ct ? &ct->ffn : nullptr);
    Tensor r = linear(state, cell.fuse_w, cell.fuse_b);
    if (hooks && hooks->sketch_active(c)) r += hooks->sketch_residual(c, state, tape != nullptr);
    if (ct) ct->state = state;
    residuals.push_back(std::move(r));
  }
  return residuals;
}

LatentGrid denoiser_forward(const LatentGrid& x_s, double s, const ConditionSet& cond, const ModelParams& params,
                            DenoiserTape* tape, BranchHooks* hooks, const ForwardOptions& options) {
  const BackboneConfig& cfg = params.config;
  if (x_s.channels() != cfg.channels) {
    throw Error(ErrorCode::kShapeMismatch, "latent has " + std::to_string(x_s.channels()) + " channels, model expects " +
                                               std::to_string(cfg.channels));
  }
  if (cond.d_model() != cfg.d_model) {
    throw Error(ErrorCode::kShapeMismatch, "condition width " + std::to_string(cond.d_model()) + " vs d_model " +
                                               std::to_string(cfg.d_model));
  }
  const TokenGrid grid = TokenGrid::of(x_s, cfg.patch);
  const std::size_t heads = cfg.n_heads;

  Tensor patches = patchify(x_s, cfg.patch);
  Tensor x = linear(patches, params.patch_w, params.patch_b);
  x += spatial_position_encoding(grid, cfg.d_model);
  Tensor noise_features = fourier_features(Tensor({1, 1}, std::vector<double>{s}), cfg.noise_bands);
  MlpCache noise_cache;
  const Tensor e = mlp_forward(params.noise_mlp, noise_features, tape ? &noise_cache : nullptr);
  add_row_broadcast(x, e);

  if (tape) {
    tape->grid = grid;
    tape->patches = std::move(patches);
    tape->noise_features = std::move(noise_features);
    tape->noise = std::move(noise_cache);
    tape->blocks.assign(cfg.n_blocks, {});
    tape->sketch_used = false;
    tape->cells.clear();
  }

  std::vector<Tensor> sketch_res;
  if (options.sketch_branch && !params.sketch.empty()) {
    sketch_res = sketchformer_forward(cond.sketch_for(x_s.height(), x_s.width()), x, params, grid, hooks, tape);
    if (tape) tape->sketch_used = true;
  }

  const Groups spatial_groups = view_inflated_groups(grid);
  const Groups time_groups = temporal_groups(grid);

  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const BlockParams& bp = params.blocks[b];
    BlockTape* bt = tape ? &tape->blocks[b] : nullptr;

    x += self_attention_delta(bp.spatial, x, spatial_groups, heads, nullptr, bt ? &bt->spatial : nullptr);

    const Tensor tpos = temporal_rows(bp.temporal_pos, grid);
    x += self_attention_delta(bp.temporal, x, time_groups, heads, &tpos, bt ? &bt->temporal : nullptr);

    {
      LayerNormCache ln;
      Tensor normed = layer_norm(x, bp.cross.ln_g, bp.cross.ln_b, kLayerNormEps, bt ? &ln : nullptr);
      Tensor q = linear(normed, bp.cross.q_w, bp.cross.q_b);
      Tensor kv_text = linear(cond.text, bp.cross.kv_w, bp.cross.kv_b);
      Tensor kv_inst = linear(cond.instances, bp.cross.kv_w, bp.cross.kv_b);
      Tensor kv_cam = linear(cond.camera, bp.cross.kv_w, bp.cross.kv_b);
      const std::vector<KvGroup> groups = condition_groups(grid, cond, kv_text, kv_inst, kv_cam);
      std::vector<AttentionCache> caches;
      Tensor merged = grouped_cross_attention(q, groups, heads, bt ? &caches : nullptr);
      x += linear(merged, bp.cross.out_w, bp.cross.out_b);
      if (hooks && hooks->cross_active(b)) x += hooks->cross_residual(b, normed, cond, grid, bt != nullptr);
      if (bt) {
        bt->cross = CrossTape{std::move(ln),      std::move(normed),  std::move(q),      std::move(kv_text),
                              std::move(kv_inst), std::move(kv_cam),  std::move(caches), std::move(merged)};
      }
    }

    x += ffn_delta(bp.ffn, x, bt ? &bt->ffn : nullptr);

    if (b < sketch_res.size()) x += sketch_res[b];
  }

  LayerNormCache out_ln;
  Tensor normed = layer_norm(x, params.out_ln_g, params.out_ln_b, kLayerNormEps, tape ? &out_ln : nullptr);
  const Tensor y = linear(normed, params.out_w, params.out_b);
  if (tape) {
    tape->out_ln = std::move(out_ln);
    tape->out_normed = std::move(normed);
  }
  return unpatchify(y, grid, cfg.channels);
}

ConditionGrads denoiser_backward(const DenoiserTape& tape, const LatentGrid& dv, const ConditionSet& cond,
                                 ModelParams& params, BranchHooks* hooks, const BackwardOptions& options) {
  const BackboneConfig& cfg = params.config;
  const TokenGrid& grid = tape.grid;
  const std::size_t heads = cfg.n_heads;
  const bool pg = options.base_param_grads;
  ConditionGrads cgrads = ConditionGrads::zeros_like(cond);

  const Tensor dy = patchify(dv, cfg.patch);
  Tensor dnormed = linear_backward(tape.out_normed, params.out_w, params.out_b, dy, pg);
  Tensor dx = layer_norm_backward(tape.out_ln, params.out_ln_g, params.out_ln_b, dnormed, pg);

  const Groups spatial_groups = view_inflated_groups(grid);
  const Groups time_groups = temporal_groups(grid);
  std::vector<Tensor> dsketch(tape.cells.size());

  for (std::size_t bi = cfg.n_blocks; bi-- > 0;) {
    BlockParams& bp = params.blocks[bi];
    const BlockTape& bt = tape.blocks[bi];

    if (tape.sketch_used && bi < dsketch.size()) dsketch[bi] = dx;

    dx += ffn_delta_backward(bp.ffn, bt.ffn, dx, pg);

    {
      const CrossTape& ct = bt.cross;
      const std::vector<KvGroup> groups = condition_groups(grid, cond, ct.kv_text, ct.kv_inst, ct.kv_cam);
      const Tensor dmerged = linear_backward(ct.merged, bp.cross.out_w, bp.cross.out_b, dx, pg);
      std::vector<Tensor> dkv;
      const Tensor dq = grouped_cross_attention_backward(ct.q, groups, heads, ct.core, dmerged, dkv);
      Tensor dn = linear_backward(ct.normed, bp.cross.q_w, bp.cross.q_b, dq, pg);
      if (hooks && hooks->cross_active(bi)) dn += hooks->cross_residual_backward(bi, dx, cond, grid);

      if (pg || options.condition_grads) {
        Tensor dkv_text(ct.kv_text.shape());
        Tensor dkv_inst(ct.kv_inst.shape());
        Tensor dkv_cam(ct.kv_cam.shape());
        const std::size_t n_l = ct.kv_text.rows();
        for (std::size_t v = 0; v < grid.views; ++v) {
          for (std::size_t t = 0; t < grid.frames; ++t) {
            const Tensor& gk = dkv[v * grid.frames + t];
            for (std::size_t r = 0; r < n_l; ++r) {
              for (std::size_t c = 0; c < gk.cols(); ++c) dkv_text.at(r, c) += gk.at(r, c);
            }
            for (std::size_t r = 0; r < cond.n_ins; ++r) {
              std::copy_n(gk.row(n_l + r), gk.cols(), dkv_inst.row((v * grid.frames + t) * cond.n_ins + r));
            }
            const double* gc = gk.row(n_l + cond.n_ins);
            for (std::size_t c = 0; c < gk.cols(); ++c) dkv_cam.at(v, c) += gc[c];
          }
        }
        cgrads.text += linear_backward(cond.text, bp.cross.kv_w, bp.cross.kv_b, dkv_text, pg);
        cgrads.instances += linear_backward(cond.instances, bp.cross.kv_w, bp.cross.kv_b, dkv_inst, pg);
        cgrads.camera += linear_backward(cond.camera, bp.cross.kv_w, bp.cross.kv_b, dkv_cam, pg);
      }
      dx += layer_norm_backward(ct.ln, bp.cross.ln_g, bp.cross.ln_b, dn, pg);
    }

    {
      Tensor dpos;
      dx += self_attention_delta_backward(bp.temporal, bt.temporal, time_groups, heads, dx, pg, &dpos);
      if (pg) temporal_rows_backward(bp.temporal_pos, grid, dpos);
    }

    dx += self_attention_delta_backward(bp.spatial, bt.spatial, spatial_groups, heads, dx, pg);
  }

  if (tape.sketch_used) {
    const Groups groups = per_view_groups(grid);
    Tensor ds(dx.shape());
    for (std::size_t c = tape.cells.size(); c-- > 0;) {
      SketchCellParams& cell = params.sketch[c];
      const SketchCellTape& ct = tape.cells[c];
      ds += linear_backward(ct.state, cell.fuse_w, cell.fuse_b, dsketch[c], pg);
      if (hooks && hooks->sketch_active(c)) ds += hooks->sketch_residual_backward(c, dsketch[c]);
      ds += ffn_delta_backward(cell.ffn, ct.ffn, ds, pg);
      ds += self_attention_delta_backward(cell.spatial, ct.spatial, groups, heads, ds, pg);
    }
    // state_0 = x_0 + embed(sketch)
    if (pg) linear_backward(tape.sketch_patches, params.patch_w, params.patch_b, ds, true);
    dx += ds;
  }

  if (pg) {
    linear_backward(tape.patches, params.patch_w, params.patch_b, dx, true);
    mlp_backward(params.noise_mlp, tape.noise, column_sum(dx), true);
  }
  return cgrads;
}

}  // namespace dive
