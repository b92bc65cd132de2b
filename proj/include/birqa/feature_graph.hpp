#pragma once

// Feature pyramid expressed as graph ops, so attacks can differentiate the
// score with respect to the distorted image. The forward values match
// build_pyramid up to float rounding; LBP uses a straight-through gradient.

#include <array>
#include <vector>

#include "birqa/diff.hpp"
#include "birqa/features.hpp"

namespace birqa {

template <class T>
using LevelInputs = std::array<ad::Var<T>, kNumLevels>;

namespace detail {

template <class T>
ad::Var<T> constant_image(ad::Graph<T>& g, const PlanarImage& img) {
  return g.constant(ad::Shape{img.channels, img.height, img.width},
                    std::vector<T>(img.data.begin(), img.data.end()));
}

template <class T>
LevelInputs<T> pyramid_levels(const ad::Var<T>& level0) {
  LevelInputs<T> out;
  out[0] = level0;
  for (int i = 1; i < kNumLevels; ++i) out[i] = ad::downsample2(out[i - 1]);
  return out;
}

}  // namespace detail

/// Stacked 8-channel level tensors of a precomputed pyramid, as constants.
template <class T>
LevelInputs<T> level_inputs(ad::Graph<T>& g, const FeaturePyramid& pyr) {
  LevelInputs<T> out;
  for (int i = 0; i < kNumLevels; ++i) out[i] = detail::constant_image(g, pyr.levels[i].stacked());
  return out;
}

/// Differentiable pyramid of (ref, dist) where dist is a (3,H,W) RGB Var in
/// [0,1]; the reference enters as a constant.
template <class T>
LevelInputs<T> pyramid_graph(const PlanarImage& ref_rgb, const ad::Var<T>& dist_rgb,
                             FeatureMask mask = kAllFeatures) {
  using ad::Shape;
  using ad::Var;
  ad::Graph<T>& g = dist_rgb.graph();
  const Shape& ds = dist_rgb.shape();
  if (ds.rank() != 3 || ds[0] != 3 || ds[1] != ref_rgb.height || ds[2] != ref_rgb.width) {
    throw Error("pyramid_graph: distorted tensor " + ds.str() + " does not match reference");
  }
  if (ref_rgb.width < kMinImageSide || ref_rgb.height < kMinImageSide) {
    throw Error("pyramid_graph: input below the 16x16 minimum");
  }
  const int h = ref_rgb.height, w = ref_rgb.width;
  const PlanarImage ry = rgb_to_ycbcr(ref_rgb);
  const PlanarImage rl = ry.channel(0);

  std::vector<T> cw(9), cb(3);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cw[r * 3 + c] = static_cast<T>(kYcbcrMatrix[r][c]);
    cb[r] = static_cast<T>(kYcbcrOffset[r]);
  }
  Var<T> dy = ad::clamp(ad::conv2d(dist_rgb, g.constant(Shape{3, 3, 1, 1}, cw),
                                   g.constant(Shape{3}, cb)),
                        T(0), T(1));
  Var<T> dl = ad::slice(dy, 0, 1);

  std::vector<Var<T>> parts;
  auto zeros = [&](int c) {
    return g.constant(Shape{c, h, w}, std::vector<T>(static_cast<std::size_t>(c) * h * w, T(0)));
  };

  if (mask.test(0)) {
    const auto k = gaussian_kernel();
    // Moments about the plane means, matching ssim_map.
    const float cx = birqa::detail::plane_mean(rl);
    float cy_f = 0.0f;
    {
      double s = 0.0;
      for (T v : dl.value()) s += static_cast<double>(v);
      cy_f = static_cast<float>(s / static_cast<double>(dl.size()));
    }
    const T cy = static_cast<T>(cy_f);
    PlanarImage rc = rl;
    for (auto& v : rc.data) v -= cx;
    Var<T> mx = detail::constant_image(g, filter_separable(rl, k));
    PlanarImage rsq = rc;
    for (auto& v : rsq.data) v *= v;
    Var<T> xx = detail::constant_image(g, filter_separable(rsq, k));
    Var<T> dlc = ad::add_scalar(dl, -cy);
    Var<T> my = ad::filter_separable(dl, std::span<const float>(k));
    Var<T> yy = ad::filter_separable(ad::square(dlc), std::span<const float>(k));
    Var<T> xy = ad::filter_separable(ad::mul(detail::constant_image(g, rc), dlc), std::span<const float>(k));
    const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
    Var<T> mx2 = ad::square(mx), my2 = ad::square(my), mxy = ad::mul(mx, my);
    Var<T> dxv = ad::add_scalar(mx, static_cast<T>(-cx)), dyv = ad::add_scalar(my, -cy);
    Var<T> vx = ad::sub(xx, ad::square(dxv)), vy = ad::sub(yy, ad::square(dyv));
    Var<T> cov = ad::sub(xy, ad::mul(dxv, dyv));
    Var<T> num = ad::mul(ad::add_scalar(ad::scale(mxy, T(2)), c1),
                         ad::add_scalar(ad::scale(cov, T(2)), c2));
    Var<T> den = ad::mul(ad::add_scalar(ad::add(mx2, my2), c1),
                         ad::add_scalar(ad::add(vx, vy), c2));
    parts.push_back(ad::clamp(ad::div(num, den), T(-1), T(1)));
  } else {
    parts.push_back(zeros(1));
  }

  if (mask.test(1)) {
    const auto k = box_kernel();
    const FeatureMap ref_info = info_map(rl, rl);
    parts.push_back(detail::constant_image(g, ref_info.data.channel(0)));
    Var<T> m = ad::filter_separable(dl, std::span<const float>(k));
    Var<T> sq = ad::filter_separable(ad::square(dl), std::span<const float>(k));
    parts.push_back(ad::relu(ad::sub(sq, ad::square(m))));
  } else {
    parts.push_back(zeros(2));
  }

  if (mask.test(2)) {
    parts.push_back(ad::abs(ad::sub(detail::constant_image(g, ry), dy)));
  } else {
    parts.push_back(zeros(3));
  }

  if (mask.test(3)) {
    parts.push_back(detail::constant_image(g, lbp_code(rl)));
    parts.push_back(ad::lbp_straight_through(dl));
  } else {
    parts.push_back(zeros(2));
  }

  return detail::pyramid_levels(ad::concat(parts));
}

}  // namespace birqa
