#pragma once

// Image containers, PPM/PNG codecs, color conversion and 2x box resampling.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "birqa/common.hpp"

namespace birqa {

inline constexpr int kMinImageSide = 16;

/// Row-major interleaved 8-bit RGB.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {
    if (w < 1 || h < 1) throw Error("RgbImage: dimensions must be positive");
  }

  std::uint8_t& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  bool operator==(const RgbImage&) const = default;
};

/// Planar 32-bit float image, channel-major then row-major.
struct PlanarImage {
  int channels = 0;
  int width = 0;
  int height = 0;
  std::vector<float> data;

  PlanarImage() = default;
  PlanarImage(int c, int w, int h, float fill = 0.0f)
      : channels(c), width(w), height(h),
        data(static_cast<std::size_t>(c) * w * h, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(width) * height; }

  std::span<float> plane(int c) {
    return {data.data() + c * plane_size(), plane_size()};
  }
  std::span<const float> plane(int c) const {
    return {data.data() + c * plane_size(), plane_size()};
  }

  float& at(int c, int x, int y) {
    return data[c * plane_size() + static_cast<std::size_t>(y) * width + x];
  }
  float at(int c, int x, int y) const {
    return data[c * plane_size() + static_cast<std::size_t>(y) * width + x];
  }

  /// Single-channel copy of channel c.
  PlanarImage channel(int c) const {
    PlanarImage out(1, width, height);
    std::copy(plane(c).begin(), plane(c).end(), out.data.begin());
    return out;
  }

  bool same_dims(const PlanarImage& o) const {
    return width == o.width && height == o.height;
  }

  bool operator==(const PlanarImage&) const = default;
};

namespace detail {

inline RgbImage read_ppm(const std::filesystem::path& path,
                         const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) {
      throw IoError(path.string() + ": malformed PPM header");
    }
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000) throw IoError(path.string() + ": malformed PPM header");
      ++pos;
    }
    return v;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (maxval != 255) {
    throw IoError(path.string() + ": unsupported PPM maxval " + std::to_string(maxval));
  }
  if (w < 1 || h < 1) throw IoError(path.string() + ": malformed PPM header");
  // exactly one whitespace byte separates the header from the raster
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw IoError(path.string() + ": malformed PPM header");
  }
  ++pos;
  RgbImage img(static_cast<int>(w), static_cast<int>(h));
  if (bytes.size() - pos < img.data.size()) {
    throw IoError(path.string() + ": unexpected end of pixel data");
  }
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.data.size(),
              img.data.begin());
  return img;
}

inline RgbImage read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError(path.string() + ": " + png.message);
  }
  if (png.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&png);
    throw IoError(path.string() + ": unsupported bit depth (only 8-bit PNG)");
  }
  if (png.format & PNG_FORMAT_FLAG_ALPHA) {
    png_image_free(&png);
    throw IoError(path.string() + ": unsupported colorspace (alpha channel)");
  }
  png.format = PNG_FORMAT_RGB;
  RgbImage img(static_cast<int>(png.width), static_cast<int>(png.height));
  if (!png_image_finish_read(&png, nullptr, img.data.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw IoError(path.string() + ": " + msg);
  }
  return img;
}

}  // namespace detail

/// Decodes a binary PPM (P6, maxval 255) or an 8-bit RGB/gray PNG.
/// Images smaller than min_side in either dimension are rejected.
inline RgbImage load_image(const std::filesystem::path& path,
                           int min_side = kMinImageSide) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  RgbImage img;
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
    img = detail::read_ppm(path, bytes);
  } else if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) {
    img = detail::read_png(path);
  } else {
    throw IoError(path.string() + ": unsupported image format (expected PNG or P6 PPM)");
  }
  if (img.width < min_side || img.height < min_side) {
    throw IoError(path.string() + ": image " + std::to_string(img.width) + "x" +
                  std::to_string(img.height) + " is below the minimum " +
                  std::to_string(min_side) + "x" + std::to_string(min_side));
  }
  return img;
}

/// Writes a binary PPM (P6).
inline void save_image(const RgbImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

inline PlanarImage to_float(const RgbImage& img) {
  PlanarImage out(3, img.width, img.height);
  const std::size_t n = out.plane_size();
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) {
      out.data[c * n + p] = static_cast<float>(img.data[p * 3 + c]) / 255.0f;
    }
  }
  return out;
}

/// Rounds [0,1] floats back to 8-bit.
inline RgbImage to_rgb8(const PlanarImage& img) {
  if (img.channels != 3) throw Error("to_rgb8: expected 3 channels");
  RgbImage out(img.width, img.height);
  const std::size_t n = img.plane_size();
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(img.data[c * n + p], 0.0f, 1.0f);
      out.data[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

// BT.601 full-range RGB -> YCbCr, chroma offset by +0.5.
inline constexpr float kYcbcrMatrix[3][3] = {
    {0.299f, 0.587f, 0.114f},
    {-0.168736f, -0.331264f, 0.5f},
    {0.5f, -0.418688f, -0.081312f},
};
inline constexpr float kYcbcrOffset[3] = {0.0f, 0.5f, 0.5f};

inline PlanarImage rgb_to_ycbcr(const PlanarImage& img) {
  if (img.channels != 3) {
    throw Error("rgb_to_ycbcr: expected 3 channels, got " + std::to_string(img.channels));
  }
  PlanarImage out(3, img.width, img.height);
  const std::size_t n = img.plane_size();
  for (std::size_t p = 0; p < n; ++p) {
    const float r = img.data[p], g = img.data[n + p], b = img.data[2 * n + p];
    for (int c = 0; c < 3; ++c) {
      const float v = kYcbcrMatrix[c][0] * r + kYcbcrMatrix[c][1] * g +
                      kYcbcrMatrix[c][2] * b + kYcbcrOffset[c];
      out.data[c * n + p] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

/// 2x2 box average; output dims are floor(dim / 2).
inline PlanarImage resize_half(const PlanarImage& img) {
  if (img.width < 2 || img.height < 2) {
    throw Error("resize_half: dimensions must be at least 2x2");
  }
  const int ow = img.width / 2, oh = img.height / 2;
  PlanarImage out(img.channels, ow, oh);
  for (int c = 0; c < img.channels; ++c) {
    const float* src = img.plane(c).data();
    float* dst = out.plane(c).data();
    for (int y = 0; y < oh; ++y) {
      const float* r0 = src + static_cast<std::size_t>(2 * y) * img.width;
      const float* r1 = r0 + img.width;
      for (int x = 0; x < ow; ++x) {
        dst[static_cast<std::size_t>(y) * ow + x] =
            0.25f * ((r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]));
      }
    }
  }
  return out;
}

}  // namespace birqa
