#include "dive/mad.hpp"

#include <algorithm>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

constexpr int kScaleBands = 4;
constexpr double kScaleDivisor = 16.0;

ScaleModulation make_modulation(const std::string& name, std::size_t d, Rng& rng) {
  ScaleModulation m{Parameter(name + ".gamma.w", {2 * kScaleBands, d}), Parameter(name + ".gamma.b", {d}),
                    Parameter(name + ".beta.w", {2 * kScaleBands, d}), Parameter(name + ".beta.b", {d})};
  init_normal(m.gamma_w, rng, 0.1);
  init_normal(m.beta_w, rng, 0.1);
  return m;
}

CrossBranchParams make_cross_branch(const std::string& name, std::size_t d, Rng& rng) {
  CrossBranchParams p{Parameter(name + ".q.w", {d, d}),      Parameter(name + ".q.b", {d}),
                      Parameter(name + ".kv.w", {d, 2 * d}), Parameter(name + ".kv.b", {2 * d}),
                      make_modulation(name + ".mod", d, rng), Parameter(name + ".out.w", {d, d}),
                      Parameter(name + ".out.b", {d})};
  init_glorot(p.q_w, rng);
  init_glorot(p.kv_w, rng);
  return p;
}

void collect_mod(ScaleModulation& m, ParamList& out) {
  out.insert(out.end(), {&m.gamma_w, &m.gamma_b, &m.beta_w, &m.beta_b});
}

void collect_cross(CrossBranchParams& p, ParamList& out) {
  out.insert(out.end(), {&p.q_w, &p.q_b, &p.kv_w, &p.kv_b});
  collect_mod(p.mod, out);
  out.insert(out.end(), {&p.out_w, &p.out_b});
}

void collect_sketch(SketchBranchParams& p, ParamList& out) {
  collect(p.mlp, out);
  collect_mod(p.mod, out);
  out.insert(out.end(), {&p.out_w, &p.out_b});
}

// m = omega * (a * (1 + gamma(omega)) + beta(omega)) on rows where row_on is set.
Tensor modulate(const ScaleModulation& mod, double omega, const Tensor& a, std::vector<double> row_on,
                BranchParams::ModTape* tape) {
  Tensor features = fourier_features(Tensor({1, 1}, std::vector<double>{omega / kScaleDivisor}), kScaleBands);
  Tensor gamma = linear(features, mod.gamma_w, mod.gamma_b);
  Tensor beta = linear(features, mod.beta_w, mod.beta_b);
  Tensor m(a.shape());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    if (row_on[r] == 0.0) continue;
    const double* ar = a.row(r);
    double* mr = m.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) mr[c] = omega * (ar[c] * (1.0 + gamma[c]) + beta[c]);
  }
  if (tape) {
    tape->features = std::move(features);
    tape->gamma = std::move(gamma);
    tape->beta = std::move(beta);
    tape->a = a;
    tape->m = m;
    tape->omega = omega;
    tape->row_on = std::move(row_on);
  }
  return m;
}

// Returns d(a); accumulates the modulation parameter gradients.
Tensor modulate_backward(ScaleModulation& mod, const BranchParams::ModTape& tape, const Tensor& dm) {
  Tensor da(dm.shape());
  Tensor dgamma({1, dm.cols()});
  Tensor dbeta({1, dm.cols()});
  for (std::size_t r = 0; r < dm.rows(); ++r) {
    if (tape.row_on[r] == 0.0) continue;
    const double* g = dm.row(r);
    const double* ar = tape.a.row(r);
    double* dar = da.row(r);
    for (std::size_t c = 0; c < dm.cols(); ++c) {
      const double gw = g[c] * tape.omega;
      dar[c] = gw * (1.0 + tape.gamma[c]);
      dgamma[c] += gw * ar[c];
      dbeta[c] += gw;
    }
  }
  linear_backward(tape.features, mod.gamma_w, mod.gamma_b, dgamma);
  linear_backward(tape.features, mod.beta_w, mod.beta_b, dbeta);
  return da;
}

std::vector<KvGroup> text_groups(const Tensor& q, const Tensor& kv) { return {{0, q.rows(), kv}}; }

std::vector<KvGroup> instance_groups(const TokenGrid& g, const ConditionSet& cond, const Tensor& kv) {
  std::vector<KvGroup> groups;
  groups.reserve(g.views * g.frames);
  const std::size_t pf = g.per_frame();
  for (std::size_t v = 0; v < g.views; ++v) {
    for (std::size_t t = 0; t < g.frames; ++t) {
      groups.push_back({(v * g.frames + t) * pf, pf, slice_rows(kv, (v * g.frames + t) * cond.n_ins, cond.n_ins)});
    }
  }
  return groups;
}

std::vector<double> rows_with_keys(std::size_t n, const std::vector<KvGroup>& groups) {
  std::vector<double> on(n, 0.0);
  for (const KvGroup& g : groups) {
    if (g.kv.rows() == 0) continue;
    std::fill_n(on.begin() + static_cast<std::ptrdiff_t>(g.row_begin), g.row_count, 1.0);
  }
  return on;
}

double sum_sq_diff(const LatentGrid& a, const LatentGrid& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a[i] - b[i];
    acc += e * e;
  }
  return acc;
}

}  // namespace

BranchParams BranchParams::create(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model;
  Rng rng = Rng(seed).substream("branches");
  BranchParams b;
  b.heads = config.n_heads;
  for (std::size_t i = 0; i < config.n_blocks; ++i) {
    b.text.push_back(make_cross_branch("mad.text." + std::to_string(i), d, rng));
    b.instance.push_back(make_cross_branch("mad.instance." + std::to_string(i), d, rng));
  }
  for (std::size_t c = 0; c < config.sketch_cells; ++c) {
    const std::string n = "mad.sketch." + std::to_string(c);
    SketchBranchParams p{make_mlp(n + ".mlp", d, d, d), make_modulation(n + ".mod", d, rng),
                         Parameter(n + ".out.w", {d, d}), Parameter(n + ".out.b", {d})};
    init_glorot(p.mlp.w1, rng);
    init_glorot(p.mlp.w2, rng);
    b.sketch.push_back(std::move(p));
  }
  return b;
}

ParamList BranchParams::parameters() {
  ParamList out;
  for (BranchKind k : {BranchKind::kText, BranchKind::kInstance, BranchKind::kSketch}) {
    const ParamList part = parameters(k);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

ParamList BranchParams::parameters(BranchKind kind) {
  ParamList out;
  switch (kind) {
    case BranchKind::kText:
      for (CrossBranchParams& p : text) collect_cross(p, out);
      break;
    case BranchKind::kInstance:
      for (CrossBranchParams& p : instance) collect_cross(p, out);
      break;
    case BranchKind::kSketch:
      for (SketchBranchParams& p : sketch) collect_sketch(p, out);
      break;
  }
  return out;
}

void BranchParams::set_scales(const std::array<double, 3>& omega) {
  for (double w : omega) {
    if (!(w >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "branch scales must be >= 0");
  }
  omega_ = omega;
}

bool BranchParams::cross_active(std::size_t block) const {
  return (omega_[0] != 0.0 && block < text.size()) || (omega_[1] != 0.0 && block < instance.size());
}

bool BranchParams::sketch_active(std::size_t cell) const { return omega_[2] != 0.0 && cell < sketch.size(); }

Tensor BranchParams::cross_residual(std::size_t block, const Tensor& normed, const ConditionSet& cond,
                                    const TokenGrid& grid, bool record) {
  if (record) {
    text_tape_.resize(text.size());
    instance_tape_.resize(instance.size());
  }
  Tensor out(normed.shape());
  auto run = [&](CrossBranchParams& p, double omega, bool is_text, CrossTape* tape) {
    Tensor q = linear(normed, p.q_w, p.q_b);
    Tensor kv = linear(is_text ? cond.text : cond.instances, p.kv_w, p.kv_b);
    const std::vector<KvGroup> groups = is_text ? text_groups(q, kv) : instance_groups(grid, cond, kv);
    std::vector<AttentionCache> caches;
    const Tensor a = grouped_cross_attention(q, groups, heads, tape ? &caches : nullptr);
    const Tensor m = modulate(p.mod, omega, a, rows_with_keys(q.rows(), groups), tape ? &tape->mod : nullptr);
    out += linear(m, p.out_w, p.out_b);
    if (tape) {
      tape->normed = normed;
      tape->q = std::move(q);
      tape->kv = std::move(kv);
      tape->core = std::move(caches);
    }
  };
  if (omega_[0] != 0.0 && block < text.size()) run(text[block], omega_[0], true, record ? &text_tape_[block] : nullptr);
  if (omega_[1] != 0.0 && block < instance.size()) {
    run(instance[block], omega_[1], false, record ? &instance_tape_[block] : nullptr);
  }
  return out;
}

Tensor BranchParams::cross_residual_backward(std::size_t block, const Tensor& dres, const ConditionSet& cond,
                                             const TokenGrid& grid) {
  Tensor dnormed(dres.shape());
  auto run = [&](CrossBranchParams& p, bool is_text, const CrossTape& tape) {
    const Tensor dm = linear_backward(tape.mod.m, p.out_w, p.out_b, dres);
    const Tensor da = modulate_backward(p.mod, tape.mod, dm);
    const std::vector<KvGroup> groups = is_text ? text_groups(tape.q, tape.kv) : instance_groups(grid, cond, tape.kv);
    std::vector<Tensor> dkv_groups;
    const Tensor dq = grouped_cross_attention_backward(tape.q, groups, heads, tape.core, da, dkv_groups);
    dnormed += linear_backward(tape.normed, p.q_w, p.q_b, dq);
    Tensor dkv(tape.kv.shape());
    if (is_text) {
      dkv = dkv_groups.front();
    } else {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t r = 0; r < cond.n_ins; ++r) {
          std::copy_n(dkv_groups[g].row(r), dkv.cols(), dkv.row(g * cond.n_ins + r));
        }
      }
    }
    linear_backward(is_text ? cond.text : cond.instances, p.kv_w, p.kv_b, dkv);
  };
  if (omega_[0] != 0.0 && block < text.size()) run(text[block], true, text_tape_.at(block));
  if (omega_[1] != 0.0 && block < instance.size()) run(instance[block], false, instance_tape_.at(block));
  return dnormed;
}

Tensor BranchParams::sketch_residual(std::size_t cell, const Tensor& state, bool record) {
  if (record) sketch_tape_.resize(sketch.size());
  SketchTape* tape = record ? &sketch_tape_[cell] : nullptr;
  SketchBranchParams& p = sketch[cell];
  const Tensor a = mlp_forward(p.mlp, state, tape ? &tape->mlp : nullptr);
  const Tensor m = modulate(p.mod, omega_[2], a, std::vector<double>(a.rows(), 1.0), tape ? &tape->mod : nullptr);
  return linear(m, p.out_w, p.out_b);
}

Tensor BranchParams::sketch_residual_backward(std::size_t cell, const Tensor& dres) {
  SketchBranchParams& p = sketch[cell];
  const SketchTape& tape = sketch_tape_.at(cell);
  const Tensor dm = linear_backward(tape.mod.m, p.out_w, p.out_b, dres);
  const Tensor da = modulate_backward(p.mod, tape.mod, dm);
  return mlp_backward(p.mlp, tape.mlp, da);
}

std::string strategy_name(DistillStrategy s) {
  switch (s) {
    case DistillStrategy::kMixed: return "mixed";
    case DistillStrategy::kSingle1: return "single1";
    case DistillStrategy::kSingle2: return "single2";
  }
  return "?";
}

DistillStrategy parse_strategy(const std::string& name) {
  for (DistillStrategy s : {DistillStrategy::kMixed, DistillStrategy::kSingle1, DistillStrategy::kSingle2}) {
    if (strategy_name(s) == name) return s;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown distillation strategy '" + name + "'");
}

NullMask sample_null_combination(Rng& rng) {
  const std::uint32_t bits = 1 + rng.uniform_int(7);
  return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0};
}

LatentGrid teacher_velocity(const LatentGrid& x_s, double s, const ConditionSet& cond_c, const ConditionSet& cond_u,
                            double omega, const ModelParams& params, std::size_t* nfe) {
  if (omega < 0.0) throw Error(ErrorCode::kInvalidArgument, "teacher scale must be >= 0");
  const LatentGrid vc = denoiser_forward(x_s, s, cond_c, params);
  const LatentGrid vu = denoiser_forward(x_s, s, cond_u, params);
  if (nfe) *nfe += 2;
  return lincomb(omega + 1.0, vc, -omega, vu);
}

LatentGrid branch_forward(const LatentGrid& x_s, double s, const ConditionSet& cond, const std::array<double, 3>& omega,
                          const ModelParams& params, BranchParams& branches, std::size_t* nfe) {
  branches.set_scales(omega);
  if (nfe) *nfe += 1;
  return denoiser_forward(x_s, s, cond, params, nullptr, &branches);
}

DistillStepStats mad_distill_step(ModelParams& params, BranchParams& branches, std::span<const TrainExample> batch,
                                  DistillStrategy strategy, Rng& rng) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty distillation batch");
  DistillStepStats stats;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const TrainExample& ex : batch) {
    const RfSample rs = rf_sample(ex.x, rng);
    const double omega = rng.uniform(1.0, 8.0);
    const ConditionSet full = encode_conditions(params.conditions, ex.scene, ex.sketches);

    NullMask hi = NullMask::none();
    NullMask lo;
    std::array<double, 3> scales{0.0, 0.0, 0.0};
    switch (strategy) {
      case DistillStrategy::kMixed:
        lo = sample_null_combination(rng);
        break;
      case DistillStrategy::kSingle1: {
        static constexpr NullMask kSingles[3] = {{true, false, false}, {false, true, false}, {false, false, true}};
        lo = kSingles[rng.uniform_int(3)];
        break;
      }
      case DistillStrategy::kSingle2: {
        // Nested schedule: each case distils one more condition on top of
        // the previous case's unconditional side.
        static constexpr NullMask kNested[4] = {
            {false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
        const std::uint32_t c = rng.uniform_int(3);
        hi = kNested[c];
        lo = kNested[c + 1];
        scales[c] = omega;
        break;
      }
    }
    if (strategy != DistillStrategy::kSingle2) {
      if (lo.text) scales[0] = omega;
      if (lo.instance) scales[1] = omega;
      if (lo.sketch) scales[2] = omega;
    }

    const LatentGrid teacher = teacher_velocity(rs.x_s, rs.s, nullify(full, hi, params.conditions),
                                                nullify(full, lo, params.conditions), omega, params,
                                                &stats.teacher_passes);

    branches.set_scales(scales);
    DenoiserTape tape;
    const LatentGrid student = denoiser_forward(rs.x_s, rs.s, full, params, &tape, &branches);
    LatentGrid dv;
    stats.loss += rf_loss(student, teacher, std::vector<double>(ex.x.frames(), 1.0), &dv) * inv_b;
    dv.tensor() *= inv_b;
    denoiser_backward(tape, dv, full, params, &branches, {.base_param_grads = false, .condition_grads = false});
    stats.combos.push_back(lo);
  }
  return stats;
}

double distill_validation_error(const ModelParams& params, BranchParams& branches,
                                std::span<const TrainExample> examples, std::span<const double> omegas,
                                std::uint64_t seed) {
  Rng root = Rng(seed).substream("distill-validation");
  std::vector<double> num(omegas.size(), 0.0), den(omegas.size(), 0.0);
  for (std::size_t e = 0; e < examples.size(); ++e) {
    Rng rng = root.substream(e);
    const TrainExample& ex = examples[e];
    const RfSample rs = rf_sample(ex.x, rng);
    const ConditionSet full = encode_conditions(params.conditions, ex.scene, ex.sketches);
    const ConditionSet null_all = nullify(full, NullMask::all(), params.conditions);
    const LatentGrid vc = denoiser_forward(rs.x_s, rs.s, full, params);
    const LatentGrid vu = denoiser_forward(rs.x_s, rs.s, null_all, params);
    for (std::size_t k = 0; k < omegas.size(); ++k) {
      const double omega = omegas[k];
      const LatentGrid teacher = lincomb(omega + 1.0, vc, -omega, vu);
      const LatentGrid student = branch_forward(rs.x_s, rs.s, full, {omega, omega, omega}, params, branches);
      num[k] += sum_sq_diff(student, teacher);
      den[k] += sum_sq_diff(teacher, vc);
    }
  }
  double ratio = 0.0;
  for (std::size_t k = 0; k < omegas.size(); ++k) {
    if (den[k] <= 0.0) throw Error(ErrorCode::kInvalidArgument, "validation set has no guidance signal");
    ratio += num[k] / den[k];
  }
  return ratio / static_cast<double>(omegas.size());
}

}  // namespace dive
