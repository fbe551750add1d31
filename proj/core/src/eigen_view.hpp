#pragma once

#include <Eigen/Core>

#include "dive/tensor.hpp"

namespace dive::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap as_mat(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline Eigen::Map<Eigen::RowVectorXd> as_row(Tensor& t) {
  return Eigen::Map<Eigen::RowVectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}
inline Eigen::Map<const Eigen::RowVectorXd> as_row(const Tensor& t) {
  return Eigen::Map<const Eigen::RowVectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

}  // namespace dive::detail
