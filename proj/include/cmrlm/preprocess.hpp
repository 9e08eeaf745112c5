#pragma once

#include <cstdint>
#include <vector>

#include "cmrlm/landmarks.hpp"

namespace cmrlm {

/// 2-D scalar image with physical pixel spacing, row-major.
struct Image {
  int height = 0;
  int width = 0;
  double spacing_row = 1.0;
  double spacing_col = 1.0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, double sr = 1.0, double sc = 1.0, float fill = 0.0f);

  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }
  double mean() const;
  Frame frame() const { return {height, width, spacing_row, spacing_col}; }

  /// Positive spacing and a pixel buffer matching the extents; throws ConfigError.
  void validate() const;
};

/// Forward coordinate map from an original image to the network frame:
/// x' = x * scale_col + offset_col, y' = y * scale_row + offset_row.
struct PreprocRecord {
  Frame source;
  double scale_row = 1.0;
  double scale_col = 1.0;
  int offset_row = 0;
  int offset_col = 0;
  int out_height = 0;
  int out_width = 0;

  Frame output_frame() const { return {out_height, out_width, 1.0, 1.0}; }
  Point2 forward(const Point2& p) const;
  Point2 inverse(const Point2& p) const;
};

struct Resampled {
  Image image;
  double scale_row = 1.0;
  double scale_col = 1.0;
};

/// Bilinear resampling to 1 mm spacing; output extent = round(extent * spacing).
/// Output pixel i samples the input at i / scale with edge clamping.
Resampled resample_to_1mm(const Image& image);

struct Framed {
  Image image;
  int offset_row = 0;
  int offset_col = 0;
};

/// Centre-aligned zero pad / crop to size x size; the odd remainder goes to the
/// high-index side. The offset maps input to output coordinates.
Framed pad_crop(const Image& image, int size = 400);

inline constexpr double kBiasSigma = 60.0;
inline constexpr double kBiasFloor = 0.05;

/// Divides by a broad Gaussian (local linear, sigma = 60 px) estimate of the coil
/// sensitivity, floored at 5% of its mean, and restores the input mean. Zero
/// pixels (padding, empty background) are excluded from the estimate. An
/// all-zero image is returned unchanged.
Image bias_correct(const Image& image, double sigma = kBiasSigma);

/// Separable Gaussian smoothing truncated at 3 sigma with replicated borders.
Image gaussian_blur(const Image& image, double sigma);

struct AugmentConfig {
  double p_corrected = 0.5;
  double p_noise = 0.5;
  double noise_lo = 0.10;
  double noise_hi = 0.30;
  double p_blur = 0.5;
  std::vector<double> blur_sigmas{0.5, 1.0, 2.0};

  void validate() const;  // throws ConfigError
};

/// Branch choice, additive noise, blur; in that order and deterministic in `seed`.
Image augment(const Image& image, const AugmentConfig& config, std::uint64_t seed);
/// Same draws, with the bias-corrected branch supplied by the caller (cached).
Image augment(const Image& image, const Image& corrected, const AugmentConfig& config, std::uint64_t seed);

/// Zero mean, unit variance over nonzero pixels; zero pixels stay zero. Returns
/// false (leaving the image untouched) when the nonzero region has no variance.
bool normalize_intensity(Image& image);

struct Preprocessed {
  Image image;
  PreprocRecord record;
  bool degenerate = false;
};

/// Resample, pad/crop to `frame_size`, normalise.
Preprocessed preprocess(const Image& image, int frame_size = 400);
/// The framing and normalisation half of preprocess(). Training augments the
/// resampled image before this step so the pad region stays exactly zero.
Preprocessed preprocess_resampled(const Resampled& resampled, const Frame& source, int frame_size);

/// Maps every present landmark through `record` into the network frame.
LandmarkSet to_network_frame(const LandmarkSet& landmarks, const PreprocRecord& record);

}  // namespace cmrlm
