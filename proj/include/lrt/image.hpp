#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "lrt/common.hpp"

namespace lrt {

/// Dense H x W x C raster, row-major with interleaved channels, values in
/// [-1, 1]. 8-bit files map [0,255] -> [-1,1] affinely on load.
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;  // height*width*channels

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        data(static_cast<size_t>(h) * w * c, fill) {
    check(h > 0 && w > 0 && (c == 1 || c == 3), "ImageBuffer: bad dimensions");
  }

  size_t size() const { return data.size(); }
  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

/// H x W importance map in [0, 1].
struct SaliencyMask {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // height*width

  SaliencyMask() = default;
  SaliencyMask(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {
    check(h > 0 && w > 0, "SaliencyMask: bad dimensions");
  }

  double& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const {
    return values[static_cast<size_t>(y) * width + x];
  }
};

inline SaliencyMask all_one_mask(int h, int w) { return SaliencyMask(h, w, 1.0); }

// Value-space helpers. Buffers live in [-1,1]; masking and compositing
// happen on [0,1] intensities (multiplying signed values would invert
// dark pixels).
inline double to01(double v) { return (v + 1.0) * 0.5; }
inline double from01(double v) { return v * 2.0 - 1.0; }

inline ImageBuffer map_to01(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (double& v : out.data) v = to01(v);
  return out;
}

inline ImageBuffer map_from01(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (double& v : out.data) v = from01(v);
  return out;
}

inline std::uint8_t quantize8(double v) {
  // [-1,1] -> [0,255], clamped
  double x = (v + 1.0) * 0.5 * 255.0;
  x = std::clamp(x, 0.0, 255.0);
  return static_cast<std::uint8_t>(std::lround(x));
}

inline double dequantize8(std::uint8_t v) {
  return static_cast<double>(v) / 255.0 * 2.0 - 1.0;
}

}  // namespace lrt
