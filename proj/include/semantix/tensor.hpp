#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace semantix {

using Real = double;
using Array = Eigen::ArrayX<Real>;
using Matrix = Eigen::MatrixX<Real>;

/// Dense 4-D array [batch, channels, height, width], row-major in that order.
/// Batch doubles as the frame axis for video latents. All elementwise math
/// goes through array(), so Eigen expressions compose directly at call sites.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int batch, int channels, int height, int width)
      : dims_{batch, channels, height, width},
        data_(Array::Zero(static_cast<Eigen::Index>(batch) * channels * height * width)) {
    if (batch < 1 || channels < 1 || height < 1 || width < 1)
      throw std::invalid_argument("Tensor: all dims must be positive");
  }

  static Tensor constant(int b, int c, int h, int w, Real value) {
    Tensor t(b, c, h, w);
    t.data_.setConstant(value);
    return t;
  }

  int batch() const { return dims_[0]; }
  int channels() const { return dims_[1]; }
  int height() const { return dims_[2]; }
  int width() const { return dims_[3]; }
  const std::array<int, 4>& dims() const { return dims_; }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  Real& at(int b, int c, int y, int x) { return data_[offset(b, c, y, x)]; }
  Real at(int b, int c, int y, int x) const { return data_[offset(b, c, y, x)]; }

  /// Wrap-around (toroidal) read; used by patch extraction.
  Real at_wrapped(int b, int c, int y, int x) const {
    int h = dims_[2], w = dims_[3];
    y = ((y % h) + h) % h;
    x = ((x % w) + w) % w;
    return data_[offset(b, c, y, x)];
  }

  /// One channel plane of one batch entry as a flat h*w view.
  Eigen::Map<Array> plane(int b, int c) {
    return Eigen::Map<Array>(data_.data() + plane_offset(b, c), plane_size());
  }
  Eigen::Map<const Array> plane(int b, int c) const {
    return Eigen::Map<const Array>(data_.data() + plane_offset(b, c), plane_size());
  }

  Eigen::Index plane_size() const { return static_cast<Eigen::Index>(dims_[2]) * dims_[3]; }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

 private:
  Eigen::Index offset(int b, int c, int y, int x) const {
    return ((static_cast<Eigen::Index>(b) * dims_[1] + c) * dims_[2] + y) * dims_[3] + x;
  }
  Eigen::Index plane_offset(int b, int c) const {
    return (static_cast<Eigen::Index>(b) * dims_[1] + c) * plane_size();
  }

  std::array<int, 4> dims_{0, 0, 0, 0};
  Array data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(what + ": shape mismatch [" + std::to_string(a.batch()) + "," +
                                std::to_string(a.channels()) + "," + std::to_string(a.height()) +
                                "," + std::to_string(b.width()) + "] vs [" +
                                std::to_string(b.batch()) + "," + std::to_string(b.channels()) +
                                "," + std::to_string(b.height()) + "," + std::to_string(b.width()) +
                                "]");
}

inline bool all_finite(const Tensor& t) { return t.array().isFinite().all(); }

inline Real max_abs(const Tensor& t) {
  return t.size() == 0 ? 0.0 : t.array().abs().maxCoeff();
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  return a.size() == 0 ? 0.0 : (a.array() - b.array()).abs().maxCoeff();
}

/// Per-position feature view of one batch entry: rows are the h*w grid
/// positions (row-major), columns the channels. Zero-copy over the
/// [B,c,h,w] layout (channel stride = h*w).
inline Eigen::Map<const Matrix, 0, Eigen::OuterStride<>> position_view(const Tensor& t, int b) {
  return {t.data() + static_cast<Eigen::Index>(b) * t.channels() * t.plane_size(),
          t.plane_size(), t.channels(), Eigen::OuterStride<>(t.plane_size())};
}

inline Eigen::Map<Matrix, 0, Eigen::OuterStride<>> position_view(Tensor& t, int b) {
  return {t.data() + static_cast<Eigen::Index>(b) * t.channels() * t.plane_size(),
          t.plane_size(), t.channels(), Eigen::OuterStride<>(t.plane_size())};
}

}  // namespace semantix
