#include "can/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace can {

std::string Dims::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(t) + "," + std::to_string(h) + "," +
         std::to_string(w) + "," + std::to_string(c) + ")";
}

void require_dims(const Dims& dims, const char* what) {
  if (dims.n == 0 || dims.t == 0 || dims.h == 0 || dims.w == 0 || dims.c == 0) {
    throw ShapeError(std::string(what) + ": every extent must be >= 1, got " + dims.str());
  }
}

void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

VideoTensor::VideoTensor(const Dims& dims, real fill) : dims_(dims) {
  require_dims(dims, "VideoTensor");
  data_.assign(dims.size(), fill);
}

VideoTensor::VideoTensor(const Dims& dims, std::vector<real> values) : dims_(dims), data_(std::move(values)) {
  require_dims(dims, "VideoTensor");
  if (data_.size() != dims.size()) {
    throw ShapeError("VideoTensor: " + std::to_string(data_.size()) + " values for dims " + dims.str());
  }
}

void VideoTensor::fill(real v) { std::fill(data_.begin(), data_.end(), v); }

bool VideoTensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
}

real VideoTensor::max_abs() const noexcept {
  real m = 0;
  for (real v : data_) m = std::max(m, std::abs(v));
  return m;
}

real max_abs_diff(const VideoTensor& a, const VideoTensor& b) {
  require_same_dims(a.dims(), b.dims(), "max_abs_diff");
  real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace can
