#pragma once

// Minimal dense NCHW tensor plus the binary16 rounding used by the
// mixed-precision inference path. GEMMs go through Eigen.

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <cstring>
#include <vector>

#include "octseg/core.hpp"

namespace octseg {

template <typename T>
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};  // N, C, H, W
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w)
      : shape{n, c, h, w},
        data(static_cast<size_t>(n) * c * h * w, T(0)) {}

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }
  size_t size() const { return data.size(); }
  size_t plane() const { return static_cast<size_t>(shape[2]) * shape[3]; }

  T* ptr(int in, int ic) { return data.data() + (static_cast<size_t>(in) * shape[1] + ic) * plane(); }
  const T* ptr(int in, int ic) const {
    return data.data() + (static_cast<size_t>(in) * shape[1] + ic) * plane();
  }

  T& at(int in, int ic, int ir, int iw) {
    return data[((static_cast<size_t>(in) * shape[1] + ic) * shape[2] + ir) * shape[3] + iw];
  }
  T at(int in, int ic, int ir, int iw) const {
    return data[((static_cast<size_t>(in) * shape[1] + ic) * shape[2] + ir) * shape[3] + iw];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------------------
// binary16 emulation (IEEE 754 half, round-to-nearest-even)
// ---------------------------------------------------------------------------

inline uint16_t float_to_half_bits(float f) {
  uint32_t x;
  std::memcpy(&x, &f, 4);
  uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t mant = x & 0x007fffffu;
  int32_t exp = static_cast<int32_t>((x >> 23) & 0xffu) - 127 + 15;
  if (((x >> 23) & 0xffu) == 0xffu) {  // inf / nan
    return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x0200u : 0u));
  }
  if (exp >= 0x1f) return static_cast<uint16_t>(sign | 0x7c00u);  // overflow -> inf
  if (exp <= 0) {
    if (exp < -10) return static_cast<uint16_t>(sign);  // underflow -> zero
    mant |= 0x00800000u;                                // implicit leading 1
    int shift = 14 - exp;
    uint32_t half_mant = mant >> shift;
    uint32_t rem = mant & ((1u << shift) - 1);
    uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
    return static_cast<uint16_t>(sign | half_mant);
  }
  uint32_t half_mant = mant >> 13;
  uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1u))) {
    ++half_mant;
    if (half_mant == 0x400u) {  // mantissa overflow bumps exponent
      half_mant = 0;
      ++exp;
      if (exp >= 0x1f) return static_cast<uint16_t>(sign | 0x7c00u);
    }
  }
  return static_cast<uint16_t>(sign | (static_cast<uint32_t>(exp) << 10) | half_mant);
}

inline float half_bits_to_float(uint16_t h) {
  uint32_t sign = (static_cast<uint32_t>(h) & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {  // subnormal: renormalize
      int e = -1;
      do {
        mant <<= 1;
        ++e;
      } while (!(mant & 0x400u));
      mant &= 0x3ffu;
      x = sign | (static_cast<uint32_t>(127 - 15 - e) << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    x = sign | 0x7f800000u | (mant << 13);
  } else {
    x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

inline float round_to_half(float f) { return half_bits_to_float(float_to_half_bits(f)); }

inline void round_to_half_inplace(float* data, size_t n) {
  for (size_t i = 0; i < n; ++i) data[i] = round_to_half(data[i]);
}

// double instantiation exists so templated layers compile; the reduced
// precision path is only meaningful for float.
inline void round_to_half_inplace(double* data, size_t n) {
  for (size_t i = 0; i < n; ++i) data[i] = static_cast<double>(round_to_half(static_cast<float>(data[i])));
}

enum class Precision { Full, Mixed };

}  // namespace octseg
