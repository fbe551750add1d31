#include "dive/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dive/error.hpp"

namespace dive {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kBadVersion: return "bad version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kIo: return "io error";
    case ErrorCode::kConfig: return "config error";
  }
  return "error";
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "shape " + shape_string(shape_) + " does not hold " + std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(ErrorCode::kShapeMismatch, "ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const noexcept {
  const std::size_t c = cols();
  return c == 0 ? 0 : data_.size() / c;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw Error(ErrorCode::kShapeMismatch, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (shape_ != other.shape_) {
    throw Error(ErrorCode::kShapeMismatch, shape_string(shape_) + " += " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (shape_ != other.shape_) {
    throw Error(ErrorCode::kShapeMismatch, shape_string(shape_) + " -= " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (double& v : data_) v *= scale;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }
Tensor operator*(double s, Tensor a) { return a *= s; }

Tensor axpy(const Tensor& a, double s, const Tensor& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShapeMismatch, "axpy " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * b[i];
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShapeMismatch, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double squared_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return s;
}

Tensor concat_rows(std::span<const Tensor* const> parts) {
  std::size_t cols = 0;
  std::size_t rows = 0;
  bool have_cols = false;
  for (const Tensor* p : parts) {
    if (p->empty() && p->rank() == 2 && p->dim(0) == 0) {
      if (!have_cols) cols = p->dim(1);
      continue;
    }
    if (have_cols && p->cols() != cols) {
      throw Error(ErrorCode::kShapeMismatch,
                  "concat_rows: width " + std::to_string(p->cols()) + " vs " + std::to_string(cols));
    }
    cols = p->cols();
    have_cols = true;
    rows += p->rows();
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Tensor* p : parts) {
    std::copy(p->storage().begin(), p->storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(off));
    off += p->size();
  }
  return out;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  const std::size_t c = t.cols();
  if (begin + count > t.rows()) throw Error(ErrorCode::kShapeMismatch, "slice_rows out of range");
  Tensor out({count, c});
  std::copy_n(t.data() + begin * c, count * c, out.data());
  return out;
}

Parameter::Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

void zero_grads(const ParamList& params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace dive
