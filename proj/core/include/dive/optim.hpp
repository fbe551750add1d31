#pragma once

#include <cstdint>
#include <vector>

#include "dive/tensor.hpp"

namespace dive {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(ParamList params, AdamWOptions options);

  void step();
  void zero_grad() { zero_grads(params_); }
  std::int64_t steps() const noexcept { return t_; }
  AdamWOptions& options() noexcept { return opt_; }

 private:
  ParamList params_;
  AdamWOptions opt_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

}  // namespace dive
