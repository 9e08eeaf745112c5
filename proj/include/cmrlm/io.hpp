#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmrlm/landmarks.hpp"
#include "cmrlm/preprocess.hpp"
#include "json.hpp"

namespace cmrlm {

/// Raw little-endian float32 pixels at `path` plus a JSON sidecar at
/// `path` + ".json": {"height", "width", "spacing_mm": [row, col]}.
void write_image(const Image& image, const std::filesystem::path& path);

/// Reads the raw format above, or binary PGM (P5, 8 or 16 bit, spacing 1 mm
/// unless a sidecar is present). Throws IoError.
Image read_image(const std::filesystem::path& path);

inline constexpr int kManifestSchema = 1;

struct ManifestSample {
  std::string image;  // relative to the manifest directory
  View view = View::CH2;
  std::string sequence = "cine";  // cine | LGE | T1
  std::string patient_id;
  double spacing_row = 1.0;
  double spacing_col = 1.0;
  /// Landmarks in original pixel coordinates; the frame extent comes from the image.
  std::array<std::optional<Point2>, kSlots> points{};
  std::string series_id;  // optional: frames of a cine series
  int frame_index = -1;

  bool operator==(const ManifestSample&) const = default;
};

struct DatasetManifest {
  int schema_version = kManifestSchema;
  std::vector<ManifestSample> samples;
  std::filesystem::path root;  // directory the image paths are relative to (not serialised)

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root = {});  // ConfigError
  void validate() const;                                                                   // ConfigError

  std::filesystem::path image_path(const ManifestSample& s) const { return root / s.image; }
  LandmarkSet landmarks(const ManifestSample& s, int height, int width) const;
};

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Converts a VIA export (either {"_via_img_metadata": {...}} or the bare
/// per-image map) into manifest samples for one view. Point regions only; each
/// region's "label" attribute names a slot (A_P, I_P, APEX, ... or hyphenated).
std::vector<ManifestSample> ingest_via(const nlohmann::json& via, View view, const std::string& image_dir,
                                       const std::string& sequence = "cine");

}  // namespace cmrlm
