#pragma once

// The four analytic feature maps (SSIM, local variance, YCbCr difference,
// LBP) and the four-level pyramid built from them.

#include <array>
#include <bitset>
#include <cmath>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "birqa/imgcore.hpp"

namespace birqa {

enum class FeatureKind { kSsim = 0, kInfo = 1, kColorDiff = 2, kLbp = 3 };

inline constexpr int kNumFeatures = 4;
inline constexpr int kNumLevels = 4;
inline constexpr std::array<int, kNumFeatures> kFeatureChannels = {1, 2, 3, 2};
inline constexpr int kFeatureInputChannels = 8;

// First channel of each kind inside the stacked 8-channel level tensor.
inline constexpr std::array<int, kNumFeatures> kFeatureOffset = {0, 1, 3, 6};

inline std::string_view feature_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::kSsim: return "SSIM";
    case FeatureKind::kInfo: return "INFO";
    case FeatureKind::kColorDiff: return "COLORDIFF";
    case FeatureKind::kLbp: return "LBP";
  }
  return "?";
}

/// Bit j set means feature kind j is computed; cleared kinds are zero-filled.
using FeatureMask = std::bitset<kNumFeatures>;
inline const FeatureMask kAllFeatures{0b1111};

/// "1010" style subset, characters in kind order SSIM, INFO, COLORDIFF, LBP.
/// (std::bitset's own string constructor reads the opposite way.)
inline FeatureMask parse_feature_mask(const std::string& bits) {
  if (bits.size() != kNumFeatures || bits.find_first_not_of("01") != std::string::npos) {
    throw Error("features must be a 4-bit string like 1111, got '" + bits + "'");
  }
  FeatureMask m;
  for (int j = 0; j < kNumFeatures; ++j) m.set(j, bits[j] == '1');
  return m;
}

// SSIM window and stabilizers on a unit dynamic range.
inline constexpr int kWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

struct FeatureMap {
  FeatureKind kind = FeatureKind::kSsim;
  PlanarImage data;
};

struct PyramidLevel {
  std::array<FeatureMap, kNumFeatures> maps;

  int width() const { return maps[0].data.width; }
  int height() const { return maps[0].data.height; }

  /// Concatenation of all maps in kind order (8 channels).
  PlanarImage stacked() const {
    PlanarImage out(kFeatureInputChannels, width(), height());
    auto it = out.data.begin();
    for (const auto& m : maps) it = std::copy(m.data.data.begin(), m.data.data.end(), it);
    return out;
  }
};

struct FeaturePyramid {
  std::array<PyramidLevel, kNumLevels> levels;

  bool operator==(const FeaturePyramid& o) const {
    for (int i = 0; i < kNumLevels; ++i) {
      for (int j = 0; j < kNumFeatures; ++j) {
        if (!(levels[i].maps[j].data == o.levels[i].maps[j].data)) return false;
      }
    }
    return true;
  }
};

/// Reflect-101 index (edge pixel not repeated), periodic for any offset.
inline int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline std::vector<float> gaussian_kernel(int size = kWindow, double sigma = kSsimSigma) {
  std::vector<double> k(size);
  const int r = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    sum += k[i];
  }
  std::vector<float> out(size);
  for (int i = 0; i < size; ++i) out[i] = static_cast<float>(k[i] / sum);
  return out;
}

inline std::vector<float> box_kernel(int size = kWindow) {
  return std::vector<float>(size, 1.0f / static_cast<float>(size));
}

/// Separable filtering of every channel with mirror padding.
inline PlanarImage filter_separable(const PlanarImage& img, std::span<const float> kernel) {
  const int r = static_cast<int>(kernel.size()) / 2;
  const int w = img.width, h = img.height;
  PlanarImage tmp(img.channels, w, h), out(img.channels, w, h);
  std::vector<int> xs(w + 2 * r), ys(h + 2 * r);
  for (int i = 0; i < w + 2 * r; ++i) xs[i] = mirror_index(i - r, w);
  for (int i = 0; i < h + 2 * r; ++i) ys[i] = mirror_index(i - r, h);
  for (int c = 0; c < img.channels; ++c) {
    const float* src = img.plane(c).data();
    float* t = tmp.plane(c).data();
    float* dst = out.plane(c).data();
    for (int y = 0; y < h; ++y) {
      const float* row = src + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * row[xs[x + k]];
        t[static_cast<std::size_t>(y) * w + x] = acc;
      }
    }
    for (int y = 0; y < h; ++y) {
      float* drow = dst + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) drow[x] = 0.0f;
      for (std::size_t k = 0; k < kernel.size(); ++k) {
        const float* srow = t + static_cast<std::size_t>(ys[y + k]) * w;
        const float kv = kernel[k];
        for (int x = 0; x < w; ++x) drow[x] += kv * srow[x];
      }
    }
  }
  return out;
}

namespace detail {

inline void require_luma_pair(const PlanarImage& a, const PlanarImage& b, const char* op) {
  if (!a.same_dims(b)) {
    throw Error(std::string(op) + ": dimension mismatch (" + std::to_string(a.width) + "x" +
                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                std::to_string(b.height) + ")");
  }
  if (a.channels != 1 || b.channels != 1) {
    throw Error(std::string(op) + ": expected single-channel luminance inputs");
  }
}

inline PlanarImage elementwise(const PlanarImage& a, const PlanarImage& b, auto fn) {
  PlanarImage out(a.channels, a.width, a.height);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = fn(a.data[i], b.data[i]);
  return out;
}

inline float plane_mean(const PlanarImage& a) {
  double s = 0.0;
  for (float v : a.data) s += v;
  return static_cast<float>(s / static_cast<double>(a.data.size()));
}

}  // namespace detail

/// Per-pixel SSIM of two luminance planes (11x11 Gaussian window).
inline FeatureMap ssim_map(const PlanarImage& ref, const PlanarImage& dist) {
  detail::require_luma_pair(ref, dist, "ssim_map");
  const auto k = gaussian_kernel();
  // Second moments are taken about the plane means: the shift leaves the
  // (co)variances unchanged but avoids float cancellation on flat regions.
  const float cx = detail::plane_mean(ref), cy = detail::plane_mean(dist);
  auto centered_mul = [](float ca, float cb) {
    return [ca, cb](float a, float b) { return (a - ca) * (b - cb); };
  };
  const PlanarImage mx = filter_separable(ref, k);
  const PlanarImage my = filter_separable(dist, k);
  const PlanarImage xx = filter_separable(detail::elementwise(ref, ref, centered_mul(cx, cx)), k);
  const PlanarImage yy = filter_separable(detail::elementwise(dist, dist, centered_mul(cy, cy)), k);
  const PlanarImage xy = filter_separable(detail::elementwise(ref, dist, centered_mul(cx, cy)), k);
  FeatureMap out{FeatureKind::kSsim, PlanarImage(1, ref.width, ref.height)};
  const auto c1 = static_cast<float>(kSsimC1), c2 = static_cast<float>(kSsimC2);
  for (std::size_t i = 0; i < out.data.data.size(); ++i) {
    const float ux = mx.data[i], uy = my.data[i];
    const float dx = ux - cx, dy = uy - cy;
    const float vx = xx.data[i] - dx * dx;
    const float vy = yy.data[i] - dy * dy;
    const float cov = xy.data[i] - dx * dy;
    const float num = (2.0f * ux * uy + c1) * (2.0f * cov + c2);
    const float den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
    out.data.data[i] = std::clamp(num / den, -1.0f, 1.0f);
  }
  return out;
}

/// Local variance (11x11 box window) of reference and distorted planes.
inline FeatureMap info_map(const PlanarImage& ref, const PlanarImage& dist) {
  detail::require_luma_pair(ref, dist, "info_map");
  const auto k = box_kernel();
  FeatureMap out{FeatureKind::kInfo, PlanarImage(2, ref.width, ref.height)};
  const PlanarImage* src[2] = {&ref, &dist};
  for (int c = 0; c < 2; ++c) {
    const PlanarImage m = filter_separable(*src[c], k);
    const PlanarImage sq = filter_separable(
        detail::elementwise(*src[c], *src[c], [](float a, float b) { return a * b; }), k);
    auto dst = out.data.plane(c);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = std::max(0.0f, sq.data[i] - m.data[i] * m.data[i]);
    }
  }
  return out;
}

/// |ref - dist| per YCbCr channel.
inline FeatureMap colordiff_map(const PlanarImage& ref, const PlanarImage& dist) {
  if (!ref.same_dims(dist)) throw Error("colordiff_map: dimension mismatch");
  if (ref.channels != 3 || dist.channels != 3) {
    throw Error("colordiff_map: expected 3-channel YCbCr inputs");
  }
  return {FeatureKind::kColorDiff,
          detail::elementwise(ref, dist, [](float a, float b) { return std::fabs(a - b); })};
}

// Neighbor offsets in bit order, clockwise from the top-left.
inline constexpr std::array<std::array<int, 2>, 8> kLbpOffsets = {{
    {-1, -1}, {0, -1}, {1, -1}, {1, 0}, {1, 1}, {0, 1}, {-1, 1}, {-1, 0},
}};

/// Normalized 8-neighbor LBP code of a single plane (bit set when neighbor >= center).
inline PlanarImage lbp_code(const PlanarImage& img) {
  PlanarImage out(1, img.width, img.height);
  const int w = img.width, h = img.height;
  const float* src = img.data.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float center = src[static_cast<std::size_t>(y) * w + x];
      int code = 0;
      for (int b = 0; b < 8; ++b) {
        const int nx = mirror_index(x + kLbpOffsets[b][0], w);
        const int ny = mirror_index(y + kLbpOffsets[b][1], h);
        if (src[static_cast<std::size_t>(ny) * w + nx] >= center) code |= 1 << b;
      }
      out.data[static_cast<std::size_t>(y) * w + x] = static_cast<float>(code) / 255.0f;
    }
  }
  return out;
}

inline FeatureMap lbp_map(const PlanarImage& ref, const PlanarImage& dist) {
  detail::require_luma_pair(ref, dist, "lbp_map");
  FeatureMap out{FeatureKind::kLbp, PlanarImage(2, ref.width, ref.height)};
  const PlanarImage a = lbp_code(ref), b = lbp_code(dist);
  std::copy(a.data.begin(), a.data.end(), out.data.plane(0).begin());
  std::copy(b.data.begin(), b.data.end(), out.data.plane(1).begin());
  return out;
}

/// Builds the pyramid from float RGB inputs in [0,1]. Maps are computed at
/// full resolution and then box-downsampled to fill levels 1..3.
inline FeaturePyramid build_pyramid(const PlanarImage& ref_rgb, const PlanarImage& dist_rgb,
                                    FeatureMask mask = kAllFeatures) {
  if (!ref_rgb.same_dims(dist_rgb)) throw Error("build_pyramid: dimension mismatch");
  if (ref_rgb.width < kMinImageSide || ref_rgb.height < kMinImageSide) {
    throw Error("build_pyramid: input " + std::to_string(ref_rgb.width) + "x" +
                std::to_string(ref_rgb.height) + " is below the 16x16 minimum");
  }
  const PlanarImage ry = rgb_to_ycbcr(ref_rgb);
  const PlanarImage dy = rgb_to_ycbcr(dist_rgb);
  const PlanarImage rl = ry.channel(0), dl = dy.channel(0);
  const int w = ref_rgb.width, h = ref_rgb.height;

  FeaturePyramid pyr;
  auto& base = pyr.levels[0].maps;
  for (int j = 0; j < kNumFeatures; ++j) {
    const auto kind = static_cast<FeatureKind>(j);
    if (!mask.test(j)) {
      base[j] = {kind, PlanarImage(kFeatureChannels[j], w, h)};
      continue;
    }
    switch (kind) {
      case FeatureKind::kSsim: base[j] = ssim_map(rl, dl); break;
      case FeatureKind::kInfo: base[j] = info_map(rl, dl); break;
      case FeatureKind::kColorDiff: base[j] = colordiff_map(ry, dy); break;
      case FeatureKind::kLbp: base[j] = lbp_map(rl, dl); break;
    }
  }
  for (int i = 1; i < kNumLevels; ++i) {
    for (int j = 0; j < kNumFeatures; ++j) {
      pyr.levels[i].maps[j] = {static_cast<FeatureKind>(j),
                               resize_half(pyr.levels[i - 1].maps[j].data)};
    }
  }
  return pyr;
}

inline FeaturePyramid build_pyramid(const RgbImage& ref, const RgbImage& dist,
                                    FeatureMask mask = kAllFeatures) {
  if (ref.width != dist.width || ref.height != dist.height) {
    throw Error("build_pyramid: dimension mismatch");
  }
  return build_pyramid(to_float(ref), to_float(dist), mask);
}

/// Writes each channel as a gray PPM named L{level}_{kind}_{chan}.ppm,
/// linearly mapping the channel's [min,max] to [0,255].
inline void dump_features(const FeaturePyramid& pyr, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < kNumLevels; ++i) {
    for (const auto& m : pyr.levels[i].maps) {
      for (int c = 0; c < m.data.channels; ++c) {
        const auto plane = m.data.plane(c);
        const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
        const float span = *hi - *lo;
        RgbImage img(m.data.width, m.data.height);
        for (std::size_t p = 0; p < plane.size(); ++p) {
          const float v = span > 0.0f ? (plane[p] - *lo) / span : 0.0f;
          const auto byte = static_cast<std::uint8_t>(std::lround(v * 255.0f));
          img.data[p * 3] = img.data[p * 3 + 1] = img.data[p * 3 + 2] = byte;
        }
        save_image(img, dir / ("L" + std::to_string(i) + "_" +
                               std::string(feature_name(m.kind)) + "_" +
                               std::to_string(c) + ".ppm"));
      }
    }
  }
}

}  // namespace birqa
