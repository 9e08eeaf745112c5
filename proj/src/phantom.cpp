#include "cmrlm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cmrlm/errors.hpp"

namespace cmrlm {

namespace fs = std::filesystem;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kLeafletMm = 1.5;
constexpr double kThinWallMm = 2.5;
constexpr int kSuper = 4;  // supersampling per axis
constexpr double kEdgeMarginMm = 8.0;

enum class Tissue { Air, Background, Myocardium, Blood };

bool in_ellipse(double u, double v, double cu, double cv, double su, double sv) {
  const double a = (u - cu) / su;
  const double b = (v - cv) / sv;
  return a * a + b * b <= 1.0;
}

// Wall-and-cavity ellipse: blood inside, a wall of `wall` mm around it.
std::optional<Tissue> chamber(double u, double v, double cu, double cv, double su, double sv, double wall) {
  if (in_ellipse(u, v, cu, cv, su, sv)) return Tissue::Blood;
  if (in_ellipse(u, v, cu, cv, su + wall, sv + wall)) return Tissue::Myocardium;
  return std::nullopt;
}

// Local frame: u along the rotation direction, v at +90 degrees (y up). World
// coordinates are mm with y pointing down the image rows.
struct Pose {
  double cx, cy, ax, ay, bx, by;

  explicit Pose(const PhantomParams& p) : cx(p.anchor_x_mm), cy(p.anchor_y_mm) {
    const double phi = p.rotation_deg * kDeg;
    ax = std::cos(phi);
    ay = -std::sin(phi);
    bx = -std::sin(phi);
    by = -std::cos(phi);
  }
  void to_local(double X, double Y, double& u, double& v) const {
    const double dx = X - cx, dy = Y - cy;
    u = dx * ax + dy * ay;
    v = dx * bx + dy * by;
  }
  Point2 to_pixel(const PhantomParams& p, double u, double v) const {
    return {(cx + u * ax + v * bx) / p.spacing_col, (cy + u * ay + v * by) / p.spacing_row};
  }
};

struct SaxSection {
  bool empty = true;
  double outer = 0.0;  // epicardial radius at this slice
  double inner = 0.0;  // endocardial radius, 0 in the apical cap
  double rv_width = 0.0;
};

double apex_cavity_length(const PhantomParams& p) { return p.lv_length_mm - 0.8 * p.wall_mm; }

SaxSection sax_section(const PhantomParams& p) {
  SaxSection s;
  const double L = p.lv_length_mm;
  if (p.slice_mm >= L) return s;
  s.empty = false;
  const double f = std::sqrt(1.0 - (p.slice_mm / L) * (p.slice_mm / L));
  s.outer = (p.cavity_radius_mm + p.wall_mm) * f;
  const double Lc = apex_cavity_length(p);
  if (p.slice_mm < Lc) s.inner = p.cavity_radius_mm * std::sqrt(1.0 - (p.slice_mm / Lc) * (p.slice_mm / Lc));
  s.rv_width = p.rv_width_mm * f;
  return s;
}

// Polar radius of the ellipse r(1+e), r(1-e) at angle psi.
double ellipse_radius(double r, double e, double psi) {
  const double a = r * (1 + e), b = r * (1 - e);
  const double c = std::cos(psi) / a, s = std::sin(psi) / b;
  return 1.0 / std::sqrt(c * c + s * s);
}

std::optional<Tissue> lax_tissue(const PhantomParams& p, double u, double v) {
  const double L = p.lv_length_mm, R = p.cavity_radius_mm, t = p.wall_mm;
  if (u >= 0) {
    if (in_ellipse(u, v, 0, 0, apex_cavity_length(p), R)) return Tissue::Blood;
    if (in_ellipse(u, v, 0, 0, L, R + t)) return Tissue::Myocardium;
  }
  if (u < 0 && u >= -kLeafletMm && std::abs(v) <= R) return Tissue::Myocardium;  // closed mitral leaflets

  const double a = p.la_length_mm, b = p.la_radius_mm;
  std::optional<Tissue> extra;
  switch (p.view) {
    case View::CH2:  // atrial appendage on the slot-0 side
      if (u < 0) extra = chamber(u, v, -0.5 * a, 0.72 * b + 5.0, 6.0, 4.0, 2.0);
      break;
    case View::CH3:  // outflow tract and aortic root on the slot-1 side
      if (u < 0) extra = chamber(u, v, -0.6 * a, -0.85 * R, 0.9 * a, 0.4 * R, 2.0);
      break;
    case View::CH4: {  // right heart on the slot-1 side
      const double rw = p.rv_width_mm;
      extra = chamber(u, v, 0.4 * L, -(R + t + 0.6 * rw), 0.5 * L, rw, kThinWallMm);
      if (!extra && u < 0) extra = chamber(u, v, -0.7 * a, -(R + t + 0.6 * rw), a, 0.8 * rw, kThinWallMm);
      break;
    }
    case View::SAX:
      break;
  }
  if (extra) return extra;
  if (u < 0) return chamber(u, v, -0.7 * a, 0, a, b, kThinWallMm);
  return std::nullopt;
}

std::optional<Tissue> sax_tissue(const PhantomParams& p, const SaxSection& s, double u, double v) {
  if (s.empty) return std::nullopt;
  const double e = p.ellipticity;
  if (s.inner > 0 && in_ellipse(u, v, 0, 0, s.inner * (1 + e), s.inner * (1 - e))) return Tissue::Blood;
  if (in_ellipse(u, v, 0, 0, s.outer * (1 + e), s.outer * (1 - e))) return Tissue::Myocardium;

  const double psi = std::atan2(v, u) / kDeg;
  const double span = p.rv_posterior_deg - p.rv_anterior_deg;
  const double frac = std::fmod(std::fmod(psi - p.rv_anterior_deg, 360.0) + 360.0, 360.0) / span;
  if (frac > 1.0) return std::nullopt;
  const double ro = ellipse_radius(s.outer, e, psi * kDeg);
  const double rho = std::hypot(u, v);
  const double cavity = s.rv_width * std::sin(std::numbers::pi * frac);
  if (rho <= ro + cavity) return Tissue::Blood;
  if (rho <= ro + cavity + kThinWallMm) return Tissue::Myocardium;
  return std::nullopt;
}

double intensity(const PhantomParams& p, Tissue t) {
  switch (t) {
    case Tissue::Air: return 0.0;
    case Tissue::Background: return p.background;
    case Tissue::Myocardium: return p.myocardium;
    case Tissue::Blood: return p.blood;
  }
  return 0.0;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ParameterError("phantom: " + what);
}

std::string patient_id(std::uint64_t seed, const std::string& tag) {
  return "phantom-" + std::to_string(seed) + "-" + tag;
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

ManifestSample manifest_entry(const PhantomSample& s, const std::string& image, const std::string& sequence,
                              const std::string& patient) {
  ManifestSample m;
  m.image = image;
  m.view = s.landmarks.view;
  m.sequence = sequence;
  m.patient_id = patient;
  m.spacing_row = s.image.spacing_row;
  m.spacing_col = s.image.spacing_col;
  m.points = s.landmarks.points;
  return m;
}

void write_dataset(DatasetManifest& manifest, const fs::path& out_dir) {
  try {
    fs::create_directories(out_dir / "images");
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create " + out_dir.string() + ": " + e.what());
  }
  manifest.root = out_dir;
  write_manifest(manifest, out_dir / "manifest.json");
}

}  // namespace

std::string sequence_name(Contrast c) { return c == Contrast::Cine ? "cine" : "LGE"; }

void PhantomParams::validate() const {
  const double values[] = {spacing_row, spacing_col, anchor_x_mm, anchor_y_mm, rotation_deg, lv_length_mm,
                           cavity_radius_mm, wall_mm, ellipticity, la_length_mm, la_radius_mm, rv_width_mm,
                           rv_anterior_deg, rv_posterior_deg, slice_mm, blood, myocardium, background,
                           body_rx_mm, body_ry_mm, bias_amplitude, bias_angle_deg, noise_sigma};
  for (double v : values) require(std::isfinite(v), "non-finite parameter");
  require(height >= 16 && width >= 16, "image must be at least 16x16");
  require(spacing_row > 0 && spacing_col > 0, "spacing must be positive");
  require(cavity_radius_mm > 0 && wall_mm > 0, "cavity radius and wall must be positive");
  require(apex_cavity_length(*this) > 0 && lv_length_mm > cavity_radius_mm,
          "LV length too short for its radius and wall");
  require(ellipticity >= 0 && ellipticity < 0.5, "ellipticity must lie in [0, 0.5)");
  require(la_length_mm > 0 && la_radius_mm > 0 && rv_width_mm > 0, "chamber sizes must be positive");
  require(rv_posterior_deg > rv_anterior_deg && rv_posterior_deg - rv_anterior_deg < 360,
          "RV insertion angles must span (0, 360) degrees");
  require(slice_mm >= 0, "slice offset must be non-negative");
  require(blood >= 0 && myocardium >= 0 && background >= 0, "intensities must be non-negative");
  require(body_rx_mm > 0 && body_ry_mm > 0, "body extent must be positive");
  require(bias_amplitude >= 0 && bias_amplitude < 1, "bias amplitude must lie in [0, 1)");
  require(noise_sigma >= 0, "noise sigma must be non-negative");
  const LandmarkSet set = landmarks();
  for (const auto& pt : set.points) {
    if (pt) require(set.frame.contains(*pt), "landmark falls outside the image");
  }
}

LandmarkSet PhantomParams::landmarks() const {
  LandmarkSet set;
  set.view = view;
  set.frame = {height, width, spacing_row, spacing_col};
  const Pose pose(*this);
  if (is_lax(view)) {
    set.points[0] = pose.to_pixel(*this, 0.0, cavity_radius_mm);
    set.points[1] = pose.to_pixel(*this, 0.0, -cavity_radius_mm);
    set.points[2] = pose.to_pixel(*this, lv_length_mm, 0.0);
    return set;
  }
  const SaxSection s = sax_section(*this);
  if (s.empty) return set;
  for (int k = 0; k < 2; ++k) {
    const double psi = (k == 0 ? rv_anterior_deg : rv_posterior_deg) * kDeg;
    const double r = ellipse_radius(s.outer, ellipticity, psi);
    set.points[k] = pose.to_pixel(*this, r * std::cos(psi), r * std::sin(psi));
  }
  set.points[2] = pose.to_pixel(*this, 0.0, 0.0);
  return set;
}

PhantomParams PhantomParams::random(View view, Contrast contrast, Rng& anatomy, Rng& pose) {
  PhantomParams p;
  p.view = view;
  p.contrast = contrast;

  // Anatomy: the same number of draws for every view so one patient stream
  // yields consistent hearts across views.
  p.cavity_radius_mm = anatomy.uniform(18.0, 24.0);
  p.wall_mm = anatomy.uniform(5.0, 8.0);
  p.lv_length_mm = anatomy.uniform(50.0, 62.0);
  p.ellipticity = anatomy.uniform(0.0, 0.06);
  p.la_length_mm = anatomy.uniform(16.0, 22.0);
  p.la_radius_mm = p.cavity_radius_mm * anatomy.uniform(0.9, 1.2);
  p.rv_width_mm = anatomy.uniform(11.0, 16.0);
  p.rv_anterior_deg = anatomy.uniform(100.0, 135.0);
  p.rv_posterior_deg = anatomy.uniform(215.0, 250.0);
  p.blood = anatomy.uniform(0.9, 1.1);
  p.myocardium = anatomy.uniform(0.2, 0.3);
  p.background = anatomy.uniform(0.45, 0.6);
  if (contrast == Contrast::Inverted) std::swap(p.blood, p.myocardium);

  const double fov_w = pose.uniform(112.0, 126.0);
  const double fov_h = pose.uniform(112.0, 126.0);
  const double spacing = pose.uniform(0.9, 1.5);
  p.spacing_row = p.spacing_col = spacing;
  p.width = static_cast<int>(std::lround(fov_w / spacing));
  p.height = static_cast<int>(std::lround(fov_h / spacing));
  const double mid_x = (p.width - 1) * spacing / 2, mid_y = (p.height - 1) * spacing / 2;
  p.body_rx_mm = fov_w / 2 * pose.uniform(0.95, 1.1);
  p.body_ry_mm = fov_h / 2 * pose.uniform(0.9, 1.0);
  p.bias_amplitude = pose.uniform(0.0, 0.3);
  p.bias_angle_deg = pose.uniform(0.0, 360.0);
  p.noise_sigma = pose.uniform(0.02, 0.05);
  const bool empty_slice = pose.bernoulli(kEmptySliceFraction);
  const double depth = pose.uniform(0.05, 0.45);
  p.slice_mm = view == View::SAX && empty_slice ? p.lv_length_mm + 5.0 + 15.0 * depth : p.lv_length_mm * depth;

  const double margin = kEdgeMarginMm / spacing;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double jx = pose.uniform(-6.0, 6.0), jy = pose.uniform(-6.0, 6.0);
    if (view == View::SAX) {
      p.rotation_deg = pose.uniform(-20.0, 20.0);
      p.anchor_x_mm = mid_x + jx;
      p.anchor_y_mm = mid_y + jy;
    } else {
      // Centre the valve-to-apex span (plus the atrium) in the field.
      p.rotation_deg = -45.0 + pose.uniform(-30.0, 30.0);
      const double uc = (p.lv_length_mm - p.la_length_mm) / 2;
      const double phi = p.rotation_deg * kDeg;
      p.anchor_x_mm = mid_x - uc * std::cos(phi) + jx;
      p.anchor_y_mm = mid_y + uc * std::sin(phi) + jy;
    }
    const LandmarkSet set = p.landmarks();
    bool ok = true;
    for (const auto& pt : set.points) {
      if (pt && (pt->x < margin || pt->y < margin || pt->x > p.width - 1 - margin || pt->y > p.height - 1 - margin)) {
        ok = false;
      }
    }
    if (ok) {
      p.validate();
      return p;
    }
  }
  throw ParameterError("phantom: could not place the heart inside the field of view");
}

PhantomSample gen_sample(const PhantomParams& p, std::uint64_t seed) {
  p.validate();
  Image img(p.height, p.width, p.spacing_row, p.spacing_col);
  const Pose pose(p);
  const SaxSection section = sax_section(p);
  const double mid_x = (p.width - 1) * p.spacing_col / 2, mid_y = (p.height - 1) * p.spacing_row / 2;
  const double half_extent = std::max(mid_x, mid_y);
  const double bc = std::cos(p.bias_angle_deg * kDeg), bs = std::sin(p.bias_angle_deg * kDeg);

  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double X = (x + (sx + 0.5) / kSuper - 0.5) * p.spacing_col;
          const double Y = (y + (sy + 0.5) / kSuper - 0.5) * p.spacing_row;
          double u, v;
          pose.to_local(X, Y, u, v);
          std::optional<Tissue> t = is_lax(p.view) ? lax_tissue(p, u, v) : sax_tissue(p, section, u, v);
          if (!t) t = in_ellipse(X, Y, mid_x, mid_y, p.body_rx_mm, p.body_ry_mm) ? Tissue::Background : Tissue::Air;
          acc += intensity(p, *t);
        }
      }
      const double X = x * p.spacing_col - mid_x, Y = y * p.spacing_row - mid_y;
      const double bias = 1.0 + p.bias_amplitude * (X * bc - Y * bs) / half_extent;
      img.at(y, x) = static_cast<float>(acc / (kSuper * kSuper) * bias);
    }
  }
  if (p.noise_sigma > 0) {
    // Magnitude images: Gaussian noise on the signal, then the modulus.
    Rng rng(seed);
    for (float& v : img.pixels) v = static_cast<float>(std::abs(v + p.noise_sigma * rng.normal()));
  }
  return {std::move(img), p.landmarks()};
}

std::vector<View> view_schedule(int n, const std::array<int, 4>& weights) {
  std::vector<View> cycle;
  for (std::size_t k = 0; k < 4; ++k) {
    if (weights[k] < 0) throw ConfigError("view weights must be non-negative");
    cycle.insert(cycle.end(), static_cast<std::size_t>(weights[k]), kAllViews[k]);
  }
  if (cycle.empty()) throw ConfigError("view weights must not all be zero");
  std::vector<View> out;
  for (int i = 0; i < n; ++i) out.push_back(cycle[static_cast<std::size_t>(i) % cycle.size()]);
  return out;
}

DatasetManifest gen_dataset(int n, const std::array<int, 4>& view_weights, Contrast contrast, std::uint64_t seed,
                            const fs::path& out_dir) {
  if (n < 1) throw ConfigError("phantom dataset needs n >= 1");
  const std::vector<View> views = view_schedule(n, view_weights);
  DatasetManifest manifest;
  write_dataset(manifest, out_dir);
  Rng master(seed);
  std::uint64_t anatomy_seed = 0;
  for (int i = 0; i < n; ++i) {
    if (i % 4 == 0) anatomy_seed = master.fork();
    Rng anatomy(anatomy_seed);
    Rng pose(master.fork());
    const std::uint64_t noise_seed = master.fork();
    const PhantomParams params = PhantomParams::random(views[static_cast<std::size_t>(i)], contrast, anatomy, pose);
    const PhantomSample s = gen_sample(params, noise_seed);
    const std::string rel = "images/" + zero_pad(i, 5) + ".f32";
    write_image(s.image, out_dir / rel);
    manifest.samples.push_back(manifest_entry(s, rel, sequence_name(contrast), patient_id(seed, zero_pad(i / 4, 4))));
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

std::vector<PhantomSample> gen_series(const PhantomParams& ed, int frames, double shortening, std::uint64_t seed) {
  if (!is_lax(ed.view)) throw ParameterError("phantom: cine series are long-axis only");
  if (frames < 2) throw ParameterError("phantom: a series needs at least 2 frames");
  if (!(shortening >= 0 && shortening < 0.5)) throw ParameterError("phantom: shortening must lie in [0, 0.5)");
  ed.validate();
  Rng rng(seed);
  std::vector<PhantomSample> out;
  const double phi = ed.rotation_deg * kDeg;
  for (int f = 0; f < frames; ++f) {
    const double k = (1.0 - std::cos(2.0 * std::numbers::pi * f / frames)) / 2.0;
    PhantomParams p = ed;
    p.lv_length_mm = ed.lv_length_mm * (1.0 - shortening * k);
    p.cavity_radius_mm = ed.cavity_radius_mm * (1.0 - 0.3 * shortening * k);
    p.wall_mm = ed.wall_mm * (1.0 + 0.5 * shortening * k);
    // Keep the apex fixed: the valve plane descends towards it.
    const double shift = ed.lv_length_mm - p.lv_length_mm;
    p.anchor_x_mm += shift * std::cos(phi);
    p.anchor_y_mm -= shift * std::sin(phi);
    out.push_back(gen_sample(p, rng.fork()));
  }
  return out;
}

DatasetManifest gen_series_dataset(int n_series, int frames, Contrast contrast, std::uint64_t seed,
                                   const fs::path& out_dir) {
  if (n_series < 1) throw ConfigError("phantom series dataset needs n >= 1");
  DatasetManifest manifest;
  write_dataset(manifest, out_dir);
  Rng master(seed);
  for (int s = 0; s < n_series; ++s) {
    Rng anatomy(master.fork());
    Rng pose(master.fork());
    const PhantomParams ed = PhantomParams::random(kAllViews[static_cast<std::size_t>(s % 3)], contrast, anatomy, pose);
    const double shortening = pose.uniform(0.12, 0.25);
    const auto series = gen_series(ed, frames, shortening, master.fork());
    const std::string tag = zero_pad(s, 3);
    for (int f = 0; f < frames; ++f) {
      const std::string rel = "images/s" + tag + "_f" + zero_pad(f, 2) + ".f32";
      write_image(series[static_cast<std::size_t>(f)].image, out_dir / rel);
      ManifestSample m =
          manifest_entry(series[static_cast<std::size_t>(f)], rel, sequence_name(contrast), patient_id(seed, "s" + tag));
      m.series_id = "series-" + tag;
      m.frame_index = f;
      manifest.samples.push_back(std::move(m));
    }
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace cmrlm
