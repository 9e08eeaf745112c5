#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmrlm/io.hpp"
#include "cmrlm/landmarks.hpp"
#include "cmrlm/preprocess.hpp"
#include "cmrlm/rng.hpp"

namespace cmrlm {

enum class Contrast { Cine, Inverted };

/// "cine" or "LGE"; the inverted phantom stands in for the LGE/T1 domain.
std::string sequence_name(Contrast c);

/// All lengths in mm, angles in degrees (math convention, y up). The anchor is
/// the valve-plane midpoint for long-axis views and the LV centre for SAX.
struct PhantomParams {
  View view = View::CH4;
  Contrast contrast = Contrast::Cine;

  int height = 128;
  int width = 128;
  double spacing_row = 1.0;
  double spacing_col = 1.0;

  double anchor_x_mm = 64.0;
  double anchor_y_mm = 40.0;
  // LAX: direction from the valve plane to the apex. SAX: rotation of the whole slice.
  double rotation_deg = -45.0;

  double lv_length_mm = 55.0;      // valve plane to epicardial apex
  double cavity_radius_mm = 20.0;  // endocardial half-width at the valve plane
  double wall_mm = 6.0;
  double ellipticity = 0.0;  // SAX cross-section: semi-axes r(1 +- e)

  double la_length_mm = 20.0;  // LAX atrium semi-axis along the long axis
  double la_radius_mm = 20.0;
  double rv_width_mm = 14.0;   // CH4 RV half-width, SAX crescent max width

  double rv_anterior_deg = 120.0;  // SAX insertion angles before rotation
  double rv_posterior_deg = 230.0;
  double slice_mm = 15.0;          // SAX offset from the base; past the apex -> empty slice

  double blood = 1.0;
  double myocardium = 0.25;
  double background = 0.55;
  double body_rx_mm = 64.0;  // body ellipse about the image centre, air outside
  double body_ry_mm = 60.0;

  double bias_amplitude = 0.0;  // multiplicative linear ramp 1 +- amplitude across the field
  double bias_angle_deg = 0.0;
  double noise_sigma = 0.0;

  void validate() const;  // ParameterError

  /// Landmarks implied by the geometry, in pixel coordinates.
  LandmarkSet landmarks() const;

  /// Anatomy draws come from `anatomy` (shared by one synthetic patient), pose,
  /// acquisition and noise level from `pose`.
  static PhantomParams random(View view, Contrast contrast, Rng& anatomy, Rng& pose);
  static PhantomParams random(View view, Contrast contrast, Rng& rng) { return random(view, contrast, rng, rng); }
};

/// Fraction of random SAX slices placed beyond the apex.
inline constexpr double kEmptySliceFraction = 0.15;

struct PhantomSample {
  Image image;
  LandmarkSet landmarks;
};

/// Deterministic in (params, seed); the seed drives the noise only.
PhantomSample gen_sample(const PhantomParams& params, std::uint64_t seed);

/// Round-robin view schedule from integer weights over CH2, CH3, CH4, SAX.
std::vector<View> view_schedule(int n, const std::array<int, 4>& weights);

/// Writes n samples under out_dir/images plus out_dir/manifest.json. Four
/// consecutive samples share one patient id and one anatomy.
DatasetManifest gen_dataset(int n, const std::array<int, 4>& view_weights, Contrast contrast, std::uint64_t seed,
                            const std::filesystem::path& out_dir);

/// A long-axis cine series: the apex stays put while the valve plane moves, with
/// a raised-cosine length profile (frame 0 = ED, frames/2 = ES).
std::vector<PhantomSample> gen_series(const PhantomParams& ed, int frames, double shortening, std::uint64_t seed);

/// n_series LAX series written like gen_dataset, each tagged with series_id and frame_index.
DatasetManifest gen_series_dataset(int n_series, int frames, Contrast contrast, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

}  // namespace cmrlm
