#pragma once

#include <cstddef>
#include <vector>

#include "dive/tensor.hpp"

namespace dive {

class Rng;

// Fixed operation set. Each forward has a matching backward that returns the
// input gradient and accumulates into Parameter::grad (unless `param_grads`
// is false, which is used when back-propagating through a frozen network).

/// y = x W + b, x: [n, d_in], W: [d_in, d_out], b: [d_out].
Tensor linear(const Tensor& x, const Parameter& weight, const Parameter& bias);
Tensor linear_backward(const Tensor& x, Parameter& weight, Parameter& bias, const Tensor& dy,
                       bool param_grads = true);

struct LayerNormCache {
  Tensor xhat;                // normalized input, before the affine
  std::vector<double> rstd;   // 1 / sqrt(var + eps), one per row
};

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then applies gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Parameter& gamma, const Parameter& beta, double eps = kLayerNormEps,
                  LayerNormCache* cache = nullptr);
Tensor layer_norm_backward(const LayerNormCache& cache, Parameter& gamma, Parameter& beta, const Tensor& dy,
                           bool param_grads = true);

struct AttentionCache {
  Tensor probs;  // [n, m] softmax weights
};

/// softmax(Q K^T / sqrt(d)) V with row-max subtraction. Q: [n,d], K,V: [m,d].
/// V may have a different width than Q/K.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, AttentionCache* cache = nullptr);

struct AttentionGrads {
  Tensor dq;
  Tensor dk;
  Tensor dv;
};
AttentionGrads attention_core_backward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionCache& cache,
                                       const Tensor& dout);

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);

/// For each scalar x and j = 0..bands-1: [sin(2^j pi x), cos(2^j pi x)].
/// Input [..., k] becomes [..., 2 * bands * k]; the trailing layout per scalar
/// is sin0, cos0, sin1, cos1, ...
Tensor fourier_features(const Tensor& x, int bands);
Tensor fourier_features_backward(const Tensor& x, int bands, const Tensor& dy);

/// Two-layer perceptron fc2(silu(fc1(x))).
struct Mlp {
  Parameter w1, b1, w2, b2;
};

struct MlpCache {
  Tensor x;
  Tensor pre;  // fc1 output
  Tensor act;  // silu(pre)
};

Mlp make_mlp(const std::string& name, std::size_t d_in, std::size_t d_hidden, std::size_t d_out);
Tensor mlp_forward(const Mlp& mlp, const Tensor& x, MlpCache* cache = nullptr);
Tensor mlp_backward(Mlp& mlp, const MlpCache& cache, const Tensor& dy, bool param_grads = true);
void collect(Mlp& mlp, ParamList& out);

/// Uniform Glorot init for weights; biases are left at zero.
void init_glorot(Parameter& weight, Rng& rng, double gain = 1.0);
void init_normal(Parameter& p, Rng& rng, double stddev);

}  // namespace dive
