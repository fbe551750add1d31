#include "dive/optim.hpp"

#include <cmath>

namespace dive {

AdamW::AdamW(ParamList params, AdamWOptions options) : params_(std::move(params)), opt_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * p.value[i]);
    }
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += squared_norm(p->grad);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace dive
