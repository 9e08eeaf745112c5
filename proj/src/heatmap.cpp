#include "cmrlm/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cmrlm {

HeatmapStack encode(const LandmarkSet& landmarks, int height, int width, double sigma_px) {
  if (!(sigma_px > 0)) throw ConfigError("encode: sigma must be positive");
  if (height < 1 || width < 1) throw ConfigError("encode: empty frame");
  Frame frame = landmarks.frame;
  frame.height = height;
  frame.width = width;
  for (const auto& p : landmarks.points) {
    if (p && !frame.contains(*p)) throw UsageError("encode: landmark outside the " + std::to_string(height) + "x" +
                                                   std::to_string(width) + " frame");
  }
  HeatmapStack out{Tensor<float>(Shape{kSlots + 1, height, width}), sigma_px};
  const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  float* probs = out.probs.ptr();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double raw[kSlots + 1] = {0, 0, 0, 0};
      double fg = 0;
      for (int k = 0; k < kSlots; ++k) {
        const auto& p = landmarks.points[k];
        if (!p) continue;
        const double dx = x - p->x;
        const double dy = y - p->y;
        raw[k + 1] = std::exp(-(dx * dx + dy * dy) * inv);
        fg += raw[k + 1];
      }
      raw[0] = std::max(0.0, 1.0 - fg);
      const double total = raw[0] + fg;
      const std::size_t at = static_cast<std::size_t>(y) * width + x;
      for (int c = 0; c <= kSlots; ++c) probs[c * plane + at] = static_cast<float>(raw[c] / total);
    }
  }
  return out;
}

namespace {

void check_probs(const Tensor<float>& probs) {
  const bool ok = (probs.rank() == 3 && probs.dim(0) == kSlots + 1) ||
                  (probs.rank() == 4 && probs.dim(0) == 1 && probs.dim(1) == kSlots + 1);
  if (!ok) throw ConfigError("decode: expected [4,H,W] probabilities, got " + shape_string(probs.shape()));
}

}  // namespace

std::array<double, kSlots> channel_peaks(const Tensor<float>& probs) {
  check_probs(probs);
  const std::size_t plane = probs.size() / (kSlots + 1);
  std::array<double, kSlots> peaks{};
  for (int k = 0; k < kSlots; ++k) {
    const float* ch = probs.ptr() + (k + 1) * plane;
    peaks[k] = *std::max_element(ch, ch + plane);
  }
  return peaks;
}

LandmarkSet decode(const Tensor<float>& probs, View view, double tau, Frame frame) {
  if (!(tau > 0 && tau < 1)) throw ConfigError("decode: tau must lie in (0, 1)");
  check_probs(probs);
  const int h = probs.dim(probs.rank() - 2);
  const int w = probs.dim(probs.rank() - 1);
  if (frame.height == 0 && frame.width == 0) {
    frame.height = h;
    frame.width = w;
  }
  if (frame.height != h || frame.width != w) throw UsageError("decode: frame does not match the probability map");

  LandmarkSet out;
  out.view = view;
  out.frame = frame;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto peaks = channel_peaks(probs);
  for (int k = 0; k < kSlots; ++k) {
    if (peaks[k] < tau) continue;
    const float* ch = probs.ptr() + (k + 1) * plane;
    const double cut = 0.5 * peaks[k];
    double sw = 0, sx = 0, sy = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double v = ch[static_cast<std::size_t>(y) * w + x];
        if (v < cut) continue;
        sw += v;
        sx += v * x;
        sy += v * y;
      }
    }
    out.points[k] = Point2{sx / sw, sy / sw};
  }
  return out;
}

LandmarkSet to_original_frame(const LandmarkSet& landmarks, const PreprocRecord& record) {
  if (landmarks.frame.height != record.out_height || landmarks.frame.width != record.out_width) {
    throw UsageError("to_original_frame: landmarks are in a " + std::to_string(landmarks.frame.height) + "x" +
                     std::to_string(landmarks.frame.width) + " frame, record expects " +
                     std::to_string(record.out_height) + "x" + std::to_string(record.out_width));
  }
  LandmarkSet out = landmarks;
  out.frame = record.source;
  for (auto& p : out.points) {
    if (p) p = record.inverse(*p);
  }
  return out;
}

}  // namespace cmrlm
