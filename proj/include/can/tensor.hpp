#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "can/errors.hpp"

namespace can {

#ifdef CAN_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

// Extents of a rank-5 video feature map laid out as (N, T, H, W, C), channels last.
struct Dims {
  std::size_t n = 1;
  std::size_t t = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t c = 1;

  std::size_t size() const noexcept { return n * t * h * w * c; }
  std::size_t sites() const noexcept { return n * t * h * w; }
  bool operator==(const Dims&) const = default;
  std::string str() const;
};

// Dense row-major (N, T, H, W, C) tensor of `real`. All extents are >= 1.
class VideoTensor {
 public:
  VideoTensor() : VideoTensor(Dims{}) {}
  explicit VideoTensor(const Dims& dims, real fill = real(0));
  VideoTensor(const Dims& dims, std::vector<real> values);

  const Dims& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  const std::vector<real>& values() const noexcept { return data_; }

  std::size_t offset(std::size_t n, std::size_t t, std::size_t h, std::size_t w,
                     std::size_t c) const noexcept {
    return ((((n * dims_.t + t) * dims_.h + h) * dims_.w + w) * dims_.c) + c;
  }

  real& operator()(std::size_t n, std::size_t t, std::size_t h, std::size_t w, std::size_t c) noexcept {
    return data_[offset(n, t, h, w, c)];
  }
  real operator()(std::size_t n, std::size_t t, std::size_t h, std::size_t w,
                  std::size_t c) const noexcept {
    return data_[offset(n, t, h, w, c)];
  }

  // Pointer to the contiguous channel vector at one (n, t, h, w) site.
  real* site(std::size_t n, std::size_t t, std::size_t h, std::size_t w) noexcept {
    return data_.data() + offset(n, t, h, w, 0);
  }
  const real* site(std::size_t n, std::size_t t, std::size_t h, std::size_t w) const noexcept {
    return data_.data() + offset(n, t, h, w, 0);
  }

  void fill(real v);
  bool all_finite() const noexcept;
  real max_abs() const noexcept;

  bool operator==(const VideoTensor&) const = default;

 private:
  Dims dims_;
  std::vector<real> data_;
};

void require_dims(const Dims& dims, const char* what);
void require_same_dims(const Dims& a, const Dims& b, const char* what);

// Largest absolute elementwise difference; shapes must match.
real max_abs_diff(const VideoTensor& a, const VideoTensor& b);

}  // namespace can
