#pragma once

#include "cmrlm/landmarks.hpp"
#include "cmrlm/preprocess.hpp"
#include "cmrlm/tensor.hpp"

namespace cmrlm {

inline constexpr double kDefaultSigma = 5.0;
inline constexpr double kDefaultTau = 0.5;

/// Per-pixel class probabilities [4, H, W]: background, then the view's slots.
struct HeatmapStack {
  Tensor<float> probs;
  double sigma_px = kDefaultSigma;
};

/// Gaussian blob per present slot, background = max(0, 1 - sum), then every
/// pixel is renormalised to a 4-way distribution.
HeatmapStack encode(const LandmarkSet& landmarks, int height, int width, double sigma_px = kDefaultSigma);

/// Present iff the channel peak is >= tau; the coordinate is the
/// probability-weighted centroid of all pixels >= half the peak (one global
/// superlevel set, so two equal far-apart peaks yield their midpoint).
/// `probs` is [4, H, W] or [1, 4, H, W]; points are reported in `frame`, whose
/// extent must match the map.
LandmarkSet decode(const Tensor<float>& probs, View view, double tau = kDefaultTau, Frame frame = {});

/// Peak probability of each landmark channel.
std::array<double, kSlots> channel_peaks(const Tensor<float>& probs);

/// Inverse of the preprocess coordinate map; restores the source frame.
LandmarkSet to_original_frame(const LandmarkSet& landmarks, const PreprocRecord& record);

}  // namespace cmrlm
