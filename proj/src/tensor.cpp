#include "dpe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dpe {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ConfigError("tensor shape " + shape_to_string(shape_) +
                      " does not match " + std::to_string(data_.size()) +
                      " values");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  if (shape_.empty()) throw ConfigError("gather_rows on a scalar tensor");
  const std::size_t row = shape_[0] ? data_.size() / shape_[0] : 0;
  Shape out_shape = shape_;
  out_shape[0] = indices.size();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= shape_[0]) {
      throw ConfigError("row index " + std::to_string(indices[i]) +
                        " out of range " + std::to_string(shape_[0]));
    }
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * row),
                row, out.data_.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value in ") + where);
  }
}

}  // namespace dpe
