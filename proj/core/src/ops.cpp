#include "dive/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dive/error.hpp"
#include "dive/rng.hpp"
#include "eigen_view.hpp"

namespace dive {

using detail::as_mat;
using detail::as_row;

namespace {

template <class Msg>
void require(bool ok, Msg&& what) {
  if (!ok) throw Error(ErrorCode::kShapeMismatch, what());
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s.empty() ? Shape{1} : s;
  out.back() = last;
  return out;
}

}  // namespace

Tensor linear(const Tensor& x, const Parameter& weight, const Parameter& bias) {
  const Tensor& w = weight.value;
  require(w.rank() == 2, [&] { return std::string("linear: weight must be 2-D, got " + shape_string(w.shape())); });
  require(x.cols() == w.dim(0) || (x.size() == 0 && x.rank() >= 1 && x.shape().back() == w.dim(0)), [&] { return std::string("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape())); });
  require(bias.value.size() == w.dim(1), [&] { return std::string("linear: bias " + shape_string(bias.value.shape()) + " vs weight " + shape_string(w.shape())); });
  Tensor y(with_last(x.shape(), w.dim(1)));
  if (x.rows() == 0) return y;
  auto ym = as_mat(y);
  ym.noalias() = as_mat(x) * as_mat(w);
  ym.rowwise() += as_row(bias.value);
  return y;
}

Tensor linear_backward(const Tensor& x, Parameter& weight, Parameter& bias, const Tensor& dy, bool param_grads) {
  require(dy.cols() == weight.value.dim(1) && dy.rows() == x.rows(), [&] { return std::string("linear_backward: dy " + shape_string(dy.shape()) + " vs x " + shape_string(x.shape())); });
  Tensor dx(x.shape());
  if (x.rows() == 0) return dx;
  if (param_grads) {
    as_mat(weight.grad).noalias() += as_mat(x).transpose() * as_mat(dy);
    as_row(bias.grad) += as_mat(dy).colwise().sum();
  }
  as_mat(dx).noalias() = as_mat(dy) * as_mat(weight.value).transpose();
  return dx;
}

Tensor layer_norm(const Tensor& x, const Parameter& gamma, const Parameter& beta, double eps,
                  LayerNormCache* cache) {
  const std::size_t d = x.cols();
  require(d >= 1 && gamma.value.size() == d && beta.value.size() == d, [&] { return std::string("layer_norm: input " + shape_string(x.shape()) + " vs gamma " + shape_string(gamma.value.shape())); });
  const std::size_t n = x.rows();
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(d);
    // A zero-variance row with eps = 0 normalizes to zeros.
    const double denom = var + eps;
    const double rs = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    rstd[r] = rs;
    double* hr = xhat.row(r);
    double* yr = y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      hr[c] = (xr[c] - mean) * rs;
      yr[c] = gamma.value[c] * hr[c] + beta.value[c];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Tensor layer_norm_backward(const LayerNormCache& cache, Parameter& gamma, Parameter& beta, const Tensor& dy,
                           bool param_grads) {
  const Tensor& xhat = cache.xhat;
  require(dy.same_shape(xhat), [&] { return std::string("layer_norm_backward: dy " + shape_string(dy.shape())); });
  const std::size_t d = xhat.cols();
  const std::size_t n = xhat.rows();
  const double inv_d = 1.0 / static_cast<double>(d);
  Tensor dx(xhat.shape());
  std::vector<double> g(d);
  for (std::size_t r = 0; r < n; ++r) {
    const double* hr = xhat.row(r);
    const double* dyr = dy.row(r);
    double sum_g = 0.0;
    double sum_gh = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      g[c] = dyr[c] * gamma.value[c];
      sum_g += g[c];
      sum_gh += g[c] * hr[c];
      if (param_grads) {
        gamma.grad[c] += dyr[c] * hr[c];
        beta.grad[c] += dyr[c];
      }
    }
    double* dxr = dx.row(r);
    const double rs = cache.rstd[r];
    for (std::size_t c = 0; c < d; ++c) {
      dxr[c] = rs * (g[c] - inv_d * sum_g - hr[c] * inv_d * sum_gh);
    }
  }
  return dx;
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, AttentionCache* cache) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, [&] { return std::string("attention_core: expects 2-D operands"); });
  require(q.cols() > 0 && q.cols() == k.cols(), [&] { return std::string("attention_core: Q " + shape_string(q.shape()) + " vs K " + shape_string(k.shape())); });
  require(k.rows() == v.rows(), [&] { return std::string("attention_core: K " + shape_string(k.shape()) + " vs V " + shape_string(v.shape())); });
  require(k.rows() > 0, [&] { return std::string("attention_core: empty key set"); });
  const std::size_t n = q.rows();
  const std::size_t m = k.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor probs({n, m});
  auto p = as_mat(probs);
  p.noalias() = (as_mat(q) * as_mat(k).transpose()) * scale;
  for (std::size_t r = 0; r < n; ++r) {
    Eigen::Map<Eigen::ArrayXd> pr(probs.row(r), static_cast<Eigen::Index>(m));
    pr = (pr - pr.maxCoeff()).exp();
    pr /= pr.sum();
  }
  Tensor out({n, v.cols()});
  as_mat(out).noalias() = p * as_mat(v);
  if (cache) cache->probs = std::move(probs);
  return out;
}

AttentionGrads attention_core_backward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionCache& cache,
                                       const Tensor& dout) {
  const std::size_t n = q.rows();
  const std::size_t m = k.rows();
  require(dout.rows() == n && dout.cols() == v.cols(), [&] { return std::string("attention_core_backward: dout " + shape_string(dout.shape())); });
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  auto p = as_mat(cache.probs);
  AttentionGrads g{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape())};
  as_mat(g.dv).noalias() = p.transpose() * as_mat(dout);
  Tensor ds({n, m});
  auto dsm = as_mat(ds);
  dsm.noalias() = as_mat(dout) * as_mat(v).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    const double* pr = cache.probs.row(r);
    double* dr = ds.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < m; ++c) dot += dr[c] * pr[c];
    for (std::size_t c = 0; c < m; ++c) dr[c] = pr[c] * (dr[c] - dot) * scale;
  }
  as_mat(g.dq).noalias() = dsm * as_mat(k);
  as_mat(g.dk).noalias() = dsm.transpose() * as_mat(q);
  return g;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  const auto xa = as_row(x).array();
  as_row(y).array() = xa / (1.0 + (-xa).exp());
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  require(x.same_shape(dy), [&] { return std::string("silu_backward: shapes differ"); });
  Tensor dx(x.shape());
  const auto xa = as_row(x).array();
  const Eigen::ArrayXXd sg = (1.0 + (-xa).exp()).inverse();
  as_row(dx).array() = as_row(dy).array() * sg * (1.0 + xa * (1.0 - sg));
  return dx;
}

Tensor fourier_features(const Tensor& x, int bands) {
  if (bands < 1) throw Error(ErrorCode::kInvalidArgument, "fourier_features: bands must be >= 1");
  const std::size_t nb = static_cast<std::size_t>(bands);
  Tensor y(with_last(x.shape(), x.cols() * 2 * nb));
  for (std::size_t i = 0; i < x.size(); ++i) {
    double freq = std::numbers::pi;
    for (std::size_t j = 0; j < nb; ++j, freq *= 2.0) {
      y[i * 2 * nb + 2 * j] = std::sin(freq * x[i]);
      y[i * 2 * nb + 2 * j + 1] = std::cos(freq * x[i]);
    }
  }
  return y;
}

Tensor fourier_features_backward(const Tensor& x, int bands, const Tensor& dy) {
  const std::size_t nb = static_cast<std::size_t>(bands);
  require(dy.size() == x.size() * 2 * nb, [&] { return std::string("fourier_features_backward: dy " + shape_string(dy.shape())); });
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double freq = std::numbers::pi;
    double acc = 0.0;
    for (std::size_t j = 0; j < nb; ++j, freq *= 2.0) {
      acc += dy[i * 2 * nb + 2 * j] * freq * std::cos(freq * x[i]);
      acc -= dy[i * 2 * nb + 2 * j + 1] * freq * std::sin(freq * x[i]);
    }
    dx[i] = acc;
  }
  return dx;
}

Mlp make_mlp(const std::string& name, std::size_t d_in, std::size_t d_hidden, std::size_t d_out) {
  return Mlp{Parameter(name + ".fc1.w", {d_in, d_hidden}), Parameter(name + ".fc1.b", {d_hidden}),
             Parameter(name + ".fc2.w", {d_hidden, d_out}), Parameter(name + ".fc2.b", {d_out})};
}

Tensor mlp_forward(const Mlp& mlp, const Tensor& x, MlpCache* cache) {
  Tensor pre = linear(x, mlp.w1, mlp.b1);
  Tensor act = silu(pre);
  Tensor y = linear(act, mlp.w2, mlp.b2);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Tensor mlp_backward(Mlp& mlp, const MlpCache& cache, const Tensor& dy, bool param_grads) {
  Tensor dact = linear_backward(cache.act, mlp.w2, mlp.b2, dy, param_grads);
  Tensor dpre = silu_backward(cache.pre, dact);
  return linear_backward(cache.x, mlp.w1, mlp.b1, dpre, param_grads);
}

void collect(Mlp& mlp, ParamList& out) {
  out.insert(out.end(), {&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2});
}

void init_glorot(Parameter& weight, Rng& rng, double gain) {
  const Tensor& w = weight.value;
  const double fan_in = static_cast<double>(w.rank() == 2 ? w.dim(0) : w.size());
  const double fan_out = static_cast<double>(w.rank() == 2 ? w.dim(1) : w.size());
  const double limit = gain * std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : weight.value.values()) v = rng.uniform(-limit, limit);
}

void init_normal(Parameter& p, Rng& rng, double stddev) {
  for (double& v : p.value.values()) v = stddev * rng.normal();
}

}  // namespace dive
