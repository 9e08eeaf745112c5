#include "cmrlm/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cmrlm/errors.hpp"
#include "cmrlm/rng.hpp"

namespace cmrlm {

Image::Image(int h, int w, double sr, double sc, float fill)
    : height(h), width(w), spacing_row(sr), spacing_col(sc), pixels(static_cast<std::size_t>(h) * w, fill) {}

double Image::mean() const {
  if (pixels.empty()) return 0.0;
  double s = 0;
  for (float v : pixels) s += v;
  return s / static_cast<double>(pixels.size());
}

void Image::validate() const {
  if (height < 1 || width < 1) throw ConfigError("image: empty extent");
  if (!(spacing_row > 0.0) || !(spacing_col > 0.0) || !std::isfinite(spacing_row) || !std::isfinite(spacing_col)) {
    throw ConfigError("image: pixel spacing must be positive");
  }
  if (pixels.size() != static_cast<std::size_t>(height) * width) {
    throw ConfigError("image: " + std::to_string(pixels.size()) + " pixels for a " + std::to_string(height) + "x" +
                      std::to_string(width) + " image");
  }
}

Point2 PreprocRecord::forward(const Point2& p) const {
  return {p.x * scale_col + offset_col, p.y * scale_row + offset_row};
}

Point2 PreprocRecord::inverse(const Point2& p) const {
  return {(p.x - offset_col) / scale_col, (p.y - offset_row) / scale_row};
}

Resampled resample_to_1mm(const Image& image) {
  image.validate();
  const int oh = std::max(1, static_cast<int>(std::lround(image.height * image.spacing_row)));
  const int ow = std::max(1, static_cast<int>(std::lround(image.width * image.spacing_col)));
  Resampled r{Image(oh, ow), image.spacing_row, image.spacing_col};
  if (image.spacing_row == 1.0 && image.spacing_col == 1.0) {
    r.image.pixels = image.pixels;
    return r;
  }
  // Column taps are shared by every row.
  std::vector<int> x0(ow), x1(ow);
  std::vector<double> fx(ow);
  for (int j = 0; j < ow; ++j) {
    const double sx = std::clamp(j / r.scale_col, 0.0, image.width - 1.0);
    x0[j] = static_cast<int>(std::floor(sx));
    x1[j] = std::min(x0[j] + 1, image.width - 1);
    fx[j] = sx - x0[j];
  }
  for (int i = 0; i < oh; ++i) {
    const double sy = std::clamp(i / r.scale_row, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (int j = 0; j < ow; ++j) {
      const double top = image.at(y0, x0[j]) * (1 - fx[j]) + image.at(y0, x1[j]) * fx[j];
      const double bot = image.at(y1, x0[j]) * (1 - fx[j]) + image.at(y1, x1[j]) * fx[j];
      r.image.at(i, j) = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
  return r;
}

Framed pad_crop(const Image& image, int size) {
  if (size < 1) throw ConfigError("pad_crop: frame size must be positive");
  Framed f{Image(size, size, image.spacing_row, image.spacing_col), (size - image.height) / 2,
           (size - image.width) / 2};
  for (int y = 0; y < image.height; ++y) {
    const int oy = y + f.offset_row;
    if (oy < 0 || oy >= size) continue;
    for (int x = 0; x < image.width; ++x) {
      const int ox = x + f.offset_col;
      if (ox >= 0 && ox < size) f.image.at(oy, ox) = image.at(y, x);
    }
  }
  return f;
}

namespace {

std::vector<double> gaussian_taps(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= s;
  return k;
}

// One separable pass along rows (horizontal) or columns. `replicate` clamps
// out-of-range taps to the border; otherwise they read zero.
void convolve_axis(std::vector<double>& data, int h, int w, const std::vector<double>& k, bool horizontal,
                   bool replicate) {
  const int radius = static_cast<int>(k.size() / 2);
  const int n = horizontal ? w : h;
  const int lines = horizontal ? h : w;
  std::vector<double> line(n), out(n);
  for (int l = 0; l < lines; ++l) {
    for (int i = 0; i < n; ++i) line[i] = horizontal ? data[static_cast<std::size_t>(l) * w + i]
                                                     : data[static_cast<std::size_t>(i) * w + l];
    for (int i = 0; i < n; ++i) {
      double acc = 0;
      const int lo = i - radius;
      for (int t = 0; t < static_cast<int>(k.size()); ++t) {
        int j = lo + t;
        if (j < 0 || j >= n) {
          if (!replicate) continue;
          j = std::clamp(j, 0, n - 1);
        }
        acc += k[t] * line[j];
      }
      out[i] = acc;
    }
    for (int i = 0; i < n; ++i) {
      (horizontal ? data[static_cast<std::size_t>(l) * w + i] : data[static_cast<std::size_t>(i) * w + l]) = out[i];
    }
  }
}

void smooth(std::vector<double>& data, int h, int w, double sigma, bool replicate) {
  const auto k = gaussian_taps(sigma);
  convolve_axis(data, h, w, k, true, replicate);
  convolve_axis(data, h, w, k, false, replicate);
}

}  // namespace

Image bias_correct(const Image& image, double sigma) {
  image.validate();
  if (!(sigma > 0)) throw ConfigError("bias_correct: sigma must be positive");
  const int h = image.height;
  const int w = image.width;
  const std::size_t n = image.size();
  const double cx = 0.5 * (w - 1);
  const double cy = 0.5 * (h - 1);

  // Gaussian-weighted local linear fit over the support (nonzero pixels). A plain
  // normalised convolution is pulled towards the interior near the edge of the
  // support; the first-order terms remove that bias, so a linear coil profile is
  // recovered exactly. Coordinates are in units of sigma for conditioning.
  enum { M, MX, MY, MXX, MXY, MYY, I0, IX, IY, kMoments };
  std::vector<std::vector<double>> mom(kMoments, std::vector<double>(n, 0.0));
  bool any = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double v = image.pixels[i];
      if (!(v > 0.0)) continue;
      any = true;
      const double u = (x - cx) / sigma;
      const double t = (y - cy) / sigma;
      mom[M][i] = 1;
      mom[MX][i] = u;
      mom[MY][i] = t;
      mom[MXX][i] = u * u;
      mom[MXY][i] = u * t;
      mom[MYY][i] = t * t;
      mom[I0][i] = v;
      mom[IX][i] = v * u;
      mom[IY][i] = v * t;
    }
  }
  if (!any) return image;
  for (auto& m : mom) smooth(m, h, w, sigma, false);

  std::vector<double> bias(n, 0.0);
  double bias_sum = 0;
  std::size_t support = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double s0 = mom[M][i];
      if (s0 <= 1e-12) continue;
      // Moments about this pixel.
      const double px = (x - cx) / sigma;
      const double py = (y - cy) / sigma;
      const double sx = mom[MX][i] - px * s0;
      const double sy = mom[MY][i] - py * s0;
      const double sxx = mom[MXX][i] - 2 * px * mom[MX][i] + px * px * s0;
      const double syy = mom[MYY][i] - 2 * py * mom[MY][i] + py * py * s0;
      const double sxy = mom[MXY][i] - px * mom[MY][i] - py * mom[MX][i] + px * py * s0;
      const double r0 = mom[I0][i];
      const double rx = mom[IX][i] - px * r0;
      const double ry = mom[IY][i] - py * r0;
      // Intercept of the 3x3 weighted least-squares system by Cramer's rule.
      const double det = s0 * (sxx * syy - sxy * sxy) - sx * (sx * syy - sxy * sy) + sy * (sx * sxy - sxx * sy);
      double a = r0 / s0;
      if (det > 1e-9 * s0 * s0 * s0) {
        a = (r0 * (sxx * syy - sxy * sxy) - sx * (rx * syy - sxy * ry) + sy * (rx * sxy - sxx * ry)) / det;
      }
      bias[i] = a;
      if (image.pixels[i] > 0.0f) {
        bias_sum += a;
        ++support;
      }
    }
  }
  const double floor = kBiasFloor * std::max(bias_sum / static_cast<double>(support), 0.0);

  Image out = image;
  double out_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double b = std::max(bias[i], floor);
    const double v = b > 0 ? image.pixels[i] / b : image.pixels[i];
    out.pixels[i] = static_cast<float>(v);
    out_sum += v;
  }
  const double in_mean = image.mean();
  const double ratio = out_sum > 0 ? in_mean * static_cast<double>(n) / out_sum : 1.0;
  for (float& v : out.pixels) v = static_cast<float>(v * ratio);
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0)) throw ConfigError("gaussian_blur: sigma must be positive");
  std::vector<double> data(image.pixels.begin(), image.pixels.end());
  smooth(data, image.height, image.width, sigma, true);
  Image out = image;
  for (std::size_t i = 0; i < data.size(); ++i) out.pixels[i] = static_cast<float>(data[i]);
  return out;
}

void AugmentConfig::validate() const {
  for (double p : {p_corrected, p_noise, p_blur}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augment: probabilities must lie in [0, 1]");
  }
  if (!(noise_lo >= 0.0 && noise_lo <= noise_hi)) throw ConfigError("augment: noise range must satisfy 0 <= lo <= hi");
  if (p_blur > 0 && blur_sigmas.empty()) throw ConfigError("augment: blur enabled with no sigmas");
  for (double s : blur_sigmas) {
    if (!(s > 0)) throw ConfigError("augment: blur sigmas must be positive");
  }
}

Image augment(const Image& image, const Image& corrected, const AugmentConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Image out = rng.bernoulli(config.p_corrected) ? corrected : image;
  if (rng.bernoulli(config.p_noise)) {
    const double sd = rng.uniform(config.noise_lo, config.noise_hi) * out.mean();
    for (float& v : out.pixels) v = static_cast<float>(v + sd * rng.normal());
  }
  if (rng.bernoulli(config.p_blur)) {
    out = gaussian_blur(out, config.blur_sigmas[rng.index(config.blur_sigmas.size())]);
  }
  return out;
}

Image augment(const Image& image, const AugmentConfig& config, std::uint64_t seed) {
  // Peek at the branch draw so the correction is only computed when used.
  Rng peek(seed);
  if (peek.bernoulli(config.p_corrected)) return augment(image, bias_correct(image), config, seed);
  return augment(image, image, config, seed);
}

bool normalize_intensity(Image& image) {
  double sum = 0, sq = 0;
  std::size_t count = 0;
  for (float v : image.pixels) {
    if (v == 0.0f) continue;
    sum += v;
    sq += static_cast<double>(v) * v;
    ++count;
  }
  if (count < 2) return false;
  const double mean = sum / static_cast<double>(count);
  const double var = std::max(0.0, sq / static_cast<double>(count) - mean * mean);
  if (!(var > 1e-12 * std::max(1.0, mean * mean))) return false;
  const double inv = 1.0 / std::sqrt(var);
  for (float& v : image.pixels) {
    if (v != 0.0f) v = static_cast<float>((v - mean) * inv);
  }
  return true;
}

Preprocessed preprocess_resampled(const Resampled& resampled, const Frame& source, int frame_size) {
  Framed f = pad_crop(resampled.image, frame_size);
  Preprocessed p;
  p.record.source = source;
  p.record.scale_row = resampled.scale_row;
  p.record.scale_col = resampled.scale_col;
  p.record.offset_row = f.offset_row;
  p.record.offset_col = f.offset_col;
  p.record.out_height = frame_size;
  p.record.out_width = frame_size;
  p.image = std::move(f.image);
  p.image.spacing_row = p.image.spacing_col = 1.0;
  p.degenerate = !normalize_intensity(p.image);
  return p;
}

Preprocessed preprocess(const Image& image, int frame_size) {
  image.validate();
  if (image.height < 16 || image.width < 16) {
    throw ConfigError("preprocess: image must be at least 16x16, got " + std::to_string(image.height) + "x" +
                      std::to_string(image.width));
  }
  return preprocess_resampled(resample_to_1mm(image), image.frame(), frame_size);
}

LandmarkSet to_network_frame(const LandmarkSet& landmarks, const PreprocRecord& record) {
  if (landmarks.frame.height != record.source.height || landmarks.frame.width != record.source.width) {
    throw UsageError("to_network_frame: landmarks are not in the record's source frame");
  }
  LandmarkSet out = landmarks;
  out.frame = record.output_frame();
  for (auto& p : out.points) {
    if (p) p = record.forward(*p);
  }
  return out;
}

}  // namespace cmrlm
