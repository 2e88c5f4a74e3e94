#pragma once

// Raw volumetric kernels shared by the autodiff ops. Everything here works on
// contiguous row-major buffers and is templated on the scalar type so the same
// code serves the float64 engine and any reduced-precision experiments.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

namespace bmds::kernels {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

struct ConvGeometry {
  std::int64_t channels;
  std::array<std::int64_t, 3> in;
  std::array<std::int64_t, 3> out;
  int kernel;
  int stride;
  int padding;

  std::int64_t rows() const {
    return channels * kernel * kernel * kernel;
  }
  std::int64_t out_plane() const { return out[1] * out[2]; }
  std::int64_t in_voxels() const { return in[0] * in[1] * in[2]; }
};

inline std::int64_t conv_out_size(std::int64_t n, int kernel, int stride, int padding) {
  return (n + 2 * padding - kernel) / stride + 1;
}

/// Unfolds output rows [oh_begin, oh_end) of one batch item into a
/// (C*k^3) x ((oh_end-oh_begin)*W'*D') column matrix.
template <typename Scalar>
void im2col(const Scalar* input, const ConvGeometry& g, std::int64_t oh_begin,
            std::int64_t oh_end, Scalar* col) {
  const int k = g.kernel;
  const std::int64_t cols = (oh_end - oh_begin) * g.out_plane();
  const std::int64_t H = g.in[0], W = g.in[1], D = g.in[2];
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const Scalar* chan = input + c * g.in_voxels();
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        for (int e = 0; e < k; ++e, ++row) {
          Scalar* dst = col + row * cols;
          for (std::int64_t oh = oh_begin; oh < oh_end; ++oh) {
            const std::int64_t ih = oh * g.stride - g.padding + a;
            for (std::int64_t ow = 0; ow < g.out[1]; ++ow) {
              const std::int64_t iw = ow * g.stride - g.padding + b;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) {
                std::fill(dst, dst + g.out[2], Scalar(0));
                dst += g.out[2];
                continue;
              }
              const Scalar* src = chan + (ih * W + iw) * D;
              for (std::int64_t od = 0; od < g.out[2]; ++od) {
                const std::int64_t id = od * g.stride - g.padding + e;
                *dst++ = (id >= 0 && id < D) ? src[id] : Scalar(0);
              }
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters a column matrix back into `input_grad`.
template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, std::int64_t oh_begin,
            std::int64_t oh_end, Scalar* input_grad) {
  const int k = g.kernel;
  const std::int64_t cols = (oh_end - oh_begin) * g.out_plane();
  const std::int64_t H = g.in[0], W = g.in[1], D = g.in[2];
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    Scalar* chan = input_grad + c * g.in_voxels();
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        for (int e = 0; e < k; ++e, ++row) {
          const Scalar* src = col + row * cols;
          for (std::int64_t oh = oh_begin; oh < oh_end; ++oh) {
            const std::int64_t ih = oh * g.stride - g.padding + a;
            for (std::int64_t ow = 0; ow < g.out[1]; ++ow) {
              const std::int64_t iw = ow * g.stride - g.padding + b;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) {
                src += g.out[2];
                continue;
              }
              Scalar* dst = chan + (ih * W + iw) * D;
              for (std::int64_t od = 0; od < g.out[2]; ++od, ++src) {
                const std::int64_t id = od * g.stride - g.padding + e;
                if (id >= 0 && id < D) dst[id] += *src;
              }
            }
          }
        }
      }
    }
  }
}

/// Two-tap linear stencil along one axis (align_corners=false).
template <typename Scalar>
struct LinearTap {
  std::int64_t lo;
  std::int64_t hi;
  Scalar w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

template <typename Scalar>
LinearTap<Scalar> linear_tap(std::int64_t dst, std::int64_t in_size, std::int64_t out_size) {
  const Scalar scale = static_cast<Scalar>(in_size) / static_cast<Scalar>(out_size);
  Scalar src = (static_cast<Scalar>(dst) + Scalar(0.5)) * scale - Scalar(0.5);
  if (src < Scalar(0)) src = Scalar(0);
  auto lo = static_cast<std::int64_t>(std::floor(src));
  if (lo > in_size - 1) lo = in_size - 1;
  const std::int64_t hi = std::min(lo + 1, in_size - 1);
  return {lo, hi, src - static_cast<Scalar>(lo)};
}

inline std::int64_t nearest_tap(std::int64_t dst, std::int64_t in_size, std::int64_t out_size) {
  const auto src = static_cast<std::int64_t>(
      std::floor(static_cast<double>(dst) * static_cast<double>(in_size) /
                 static_cast<double>(out_size)));
  return std::min(src, in_size - 1);
}

}  // namespace bmds::kernels
