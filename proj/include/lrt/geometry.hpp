#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "lrt/common.hpp"
#include "lrt/image.hpp"

namespace lrt {

// ---------------------------------------------------------------------------
// Coordinate convention
//
// Sampling coordinates are normalized to [-1, 1] per axis with half-pixel
// centers: -1 is the left/top edge of the first pixel, +1 the right/bottom
// edge of the last one, so pixel p has center (2p+1)/S - 1 for size S. The
// normalized->pixel map is px = ((n + 1) * S - 1) / 2. Under this convention
// a uniform-scale matrix stays a uniform pixel-space scale for any pair of
// source/target sizes, which the layout augmentation depends on.
// Grids store (y, x) per output pixel, row-major.
// ---------------------------------------------------------------------------

struct Mat23 {
  // row-major 2x3, acting on homogeneous (y, x, 1)
  double m[2][3] = {{1, 0, 0}, {0, 1, 0}};

  bool is_identity() const {
    return m[0][0] == 1 && m[0][1] == 0 && m[0][2] == 0 && m[1][0] == 0 &&
           m[1][1] == 1 && m[1][2] == 0;
  }
};

/// Affine warp parameters as predicted by a network head: five raw values
/// and the derived rotation/scale/translation plus the 2x3 matrix.
struct AffineParams {
  std::array<double, 5> raw{0, 0, 0, 0, 0};
  double rotation = 0.0;  // radians, in (-pi, pi)
  double scale_x = 1.0;
  double scale_y = 1.0;
  double trans_x = 0.0;  // row-0 (y) offset of A
  double trans_y = 0.0;  // row-1 (x) offset of A
  Mat23 a;
};

/// Per-output-pixel source sampling positions in normalized coordinates.
struct SamplingGrid {
  int height = 0;
  int width = 0;
  std::vector<double> coords;  // height*width*2, (y, x) interleaved

  SamplingGrid() = default;
  SamplingGrid(int h, int w)
      : height(h), width(w), coords(static_cast<size_t>(h) * w * 2, 0.0) {
    check(h > 0 && w > 0, "SamplingGrid: bad dimensions");
  }

  double& y_at(int i, int j) {
    return coords[(static_cast<size_t>(i) * width + j) * 2];
  }
  double& x_at(int i, int j) {
    return coords[(static_cast<size_t>(i) * width + j) * 2 + 1];
  }
  double y_at(int i, int j) const {
    return coords[(static_cast<size_t>(i) * width + j) * 2];
  }
  double x_at(int i, int j) const {
    return coords[(static_cast<size_t>(i) * width + j) * 2 + 1];
  }
};

/// Random layout transformation: uniform scale s plus a small translation,
/// mapping a source of (src_h, src_w) onto a target frame (dst_h, dst_w).
struct AugmentParams {
  double scale = 1.0;        // s, sampled U[0.9, 1.5] during training
  double t1 = 0.0, t2 = 0.0; // translations, fractions of the target frame
  int src_h = 0, src_w = 0;
  int dst_h = 0, dst_w = 0;

  double kx() const { return static_cast<double>(dst_h) / src_h; }
  double ky() const { return static_cast<double>(dst_w) / src_w; }
};

inline AugmentParams sample_augment(Rng& rng, int src_h, int src_w, int dst_h,
                                    int dst_w) {
  AugmentParams p;
  p.scale = rng.uniform(0.9, 1.5);
  p.t1 = rng.uniform(-0.01, 0.01);
  p.t2 = rng.uniform(-0.01, 0.01);
  p.src_h = src_h;
  p.src_w = src_w;
  p.dst_h = dst_h;
  p.dst_w = dst_w;
  return p;
}

// ---------------------------------------------------------------------------
// affine_from_raw
// ---------------------------------------------------------------------------

/// Derive rotation/scale/translation and the 2x3 matrix from the five raw
/// head outputs:
///   r = pi * tanh(o1), s_x = exp(o2), s_y = exp(o3), t_x = o4, t_y = o5
///   A = [[ s_x*cos r, -s_y*sin r, t_x ],
///        [ s_y*sin r,  s_x*cos r, t_y ]]
/// Note the second diagonal entry uses s_x (s_y appears only in the sin
/// slots); with o2 == o3 this is an exact similarity transform.
inline AffineParams affine_from_raw(const std::array<double, 5>& raw) {
  for (double v : raw) {
    if (!std::isfinite(v))
      throw InvalidParamError("affine_from_raw: non-finite raw parameter");
  }
  AffineParams p;
  p.raw = raw;
  p.rotation = M_PI * std::tanh(raw[0]);
  p.scale_x = std::exp(raw[1]);
  p.scale_y = std::exp(raw[2]);
  p.trans_x = raw[3];
  p.trans_y = raw[4];
  const double c = std::cos(p.rotation);
  const double s = std::sin(p.rotation);
  p.a.m[0][0] = p.scale_x * c;
  p.a.m[0][1] = -p.scale_y * s;
  p.a.m[0][2] = p.trans_x;
  p.a.m[1][0] = p.scale_y * s;
  p.a.m[1][1] = p.scale_x * c;
  p.a.m[1][2] = p.trans_y;
  return p;
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

inline double pixel_center_norm(int p, int size) {
  return (2.0 * p + 1.0) / size - 1.0;
}

inline SamplingGrid identity_grid(int h, int w) {
  SamplingGrid g(h, w);
  for (int i = 0; i < h; ++i) {
    const double y = pixel_center_norm(i, h);
    for (int j = 0; j < w; ++j) {
      g.y_at(i, j) = y;
      g.x_at(i, j) = pixel_center_norm(j, w);
    }
  }
  return g;
}

/// Apply a 2x3 matrix to the identity grid of the target size.
inline SamplingGrid grid_from_matrix(const Mat23& a, int h, int w) {
  if (h < 2 || w < 2)
    throw InvalidParamError("grid_from_matrix: target size must be >= 2x2");
  SamplingGrid g(h, w);
  for (int i = 0; i < h; ++i) {
    const double y = pixel_center_norm(i, h);
    for (int j = 0; j < w; ++j) {
      const double x = pixel_center_norm(j, w);
      g.y_at(i, j) = a.m[0][0] * y + a.m[0][1] * x + a.m[0][2];
      g.x_at(i, j) = a.m[1][0] * y + a.m[1][1] * x + a.m[1][2];
    }
  }
  return g;
}

inline SamplingGrid grid_from_affine(const AffineParams& p, int h, int w) {
  return grid_from_matrix(p.a, h, w);
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

enum class Pad {
  Zero,  // out-of-support taps contribute zero (warping)
  Clamp  // taps clamp to the border (resizing)
};

struct BilinearTaps {
  int y0, x0;        // top-left tap (may be out of range)
  double wy, wx;     // fractional weights toward (y0+1, x0+1)
};

inline BilinearTaps bilinear_taps(double ny, double nx, int h, int w) {
  const double py = ((ny + 1.0) * h - 1.0) * 0.5;
  const double px = ((nx + 1.0) * w - 1.0) * 0.5;
  BilinearTaps t;
  t.y0 = static_cast<int>(std::floor(py));
  t.x0 = static_cast<int>(std::floor(px));
  t.wy = py - t.y0;
  t.wx = px - t.x0;
  return t;
}

namespace detail {

inline bool tap_in(int v, int size) { return v >= 0 && v < size; }
inline int tap_clamp(int v, int size) { return std::clamp(v, 0, size - 1); }

// Sample one channel plane (arbitrary element stride) at one grid position.
template <Pad P>
inline double sample_plane(const double* src, int h, int w, size_t stride,
                           const BilinearTaps& t) {
  auto fetch = [&](int y, int x) -> double {
    if constexpr (P == Pad::Zero) {
      if (!tap_in(y, h) || !tap_in(x, w)) return 0.0;
      return src[(static_cast<size_t>(y) * w + x) * stride];
    } else {
      return src[(static_cast<size_t>(tap_clamp(y, h)) * w +
                  tap_clamp(x, w)) * stride];
    }
  };
  const double v00 = fetch(t.y0, t.x0);
  const double v01 = fetch(t.y0, t.x0 + 1);
  const double v10 = fetch(t.y0 + 1, t.x0);
  const double v11 = fetch(t.y0 + 1, t.x0 + 1);
  return (1.0 - t.wy) * ((1.0 - t.wx) * v00 + t.wx * v01) +
         t.wy * ((1.0 - t.wx) * v10 + t.wx * v11);
}

inline double sample_plane(Pad pad, const double* src, int h, int w,
                           size_t stride, const BilinearTaps& t) {
  return pad == Pad::Zero ? sample_plane<Pad::Zero>(src, h, w, stride, t)
                          : sample_plane<Pad::Clamp>(src, h, w, stride, t);
}

}  // namespace detail

/// Backward-warp an image: each output pixel takes a bilinear sample of the
/// source at its grid coordinate. Taps outside the source contribute zero.
inline ImageBuffer warp(const ImageBuffer& src, const SamplingGrid& grid,
                        Pad pad = Pad::Zero) {
  for (double v : grid.coords)
    check(std::isfinite(v), "warp: non-finite grid coordinate");
  ImageBuffer out(grid.height, grid.width, src.channels);
  for (int i = 0; i < grid.height; ++i) {
    for (int j = 0; j < grid.width; ++j) {
      const BilinearTaps t =
          bilinear_taps(grid.y_at(i, j), grid.x_at(i, j), src.height, src.width);
      for (int c = 0; c < src.channels; ++c) {
        out.at(i, j, c) = detail::sample_plane(
            pad, src.data.data() + c, src.height, src.width, src.channels, t);
      }
    }
  }
  return out;
}

/// Warp a saliency mask; the result is clamped back to [0, 1].
inline SaliencyMask warp(const SaliencyMask& src, const SamplingGrid& grid,
                         Pad pad = Pad::Zero) {
  for (double v : grid.coords)
    check(std::isfinite(v), "warp: non-finite grid coordinate");
  SaliencyMask out(grid.height, grid.width);
  for (int i = 0; i < grid.height; ++i) {
    for (int j = 0; j < grid.width; ++j) {
      const BilinearTaps t =
          bilinear_taps(grid.y_at(i, j), grid.x_at(i, j), src.height, src.width);
      const double v =
          detail::sample_plane(pad, src.values.data(), src.height, src.width,
                               1, t);
      out.at(i, j) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

/// Standard bilinear resize (border-clamped sampling at the identity grid of
/// the target size). Preserves constant images exactly.
inline ImageBuffer resize(const ImageBuffer& src, int h, int w) {
  check(h > 0 && w > 0, "resize: bad target size");
  if (h == src.height && w == src.width) return src;
  return warp(src, identity_grid(h, w), Pad::Clamp);
}

inline SaliencyMask resize(const SaliencyMask& src, int h, int w) {
  check(h > 0 && w > 0, "resize: bad target size");
  if (h == src.height && w == src.width) return src;
  return warp(src, identity_grid(h, w), Pad::Clamp);
}

// ---------------------------------------------------------------------------
// Layout augmentation
// ---------------------------------------------------------------------------

/// D = [[s*kx, 0, 2*t1], [0, s*ky, 2*t2]] with kx = H'/H, ky = W'/W.
/// The linear part is diagonal, so the induced pixel-space scale is the
/// single scalar s on both axes: content is rescaled without anisotropy or
/// rotation. Translations are fractions of the target frame; a fraction t of
/// the frame is 2t in normalized units.
inline Mat23 augment_matrix(const AugmentParams& p) {
  if (p.src_h <= 0 || p.src_w <= 0 || p.dst_h <= 0 || p.dst_w <= 0)
    throw InvalidParamError("augment_matrix: sizes must be positive");
  if (!(p.scale > 0.0))
    throw InvalidParamError("augment_matrix: scale must be positive");
  Mat23 d;
  d.m[0][0] = p.scale * p.kx();
  d.m[0][1] = 0.0;
  d.m[0][2] = 2.0 * p.t1;
  d.m[1][0] = 0.0;
  d.m[1][1] = p.scale * p.ky();
  d.m[1][2] = 2.0 * p.t2;
  return d;
}

/// I_aug: the input warped by the augmentation matrix onto the target frame.
/// Undistorted by construction; regions beyond the source come out empty.
inline ImageBuffer layout_augment(const ImageBuffer& img,
                                  const AugmentParams& p) {
  check(img.height == p.src_h && img.width == p.src_w,
        "layout_augment: params do not match image size");
  return warp(img, grid_from_matrix(augment_matrix(p), p.dst_h, p.dst_w));
}

}  // namespace lrt
