#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmrlm/checkpoint.hpp"
#include "cmrlm/landmarks.hpp"
#include "cmrlm/preprocess.hpp"

namespace cmrlm {

/// preprocess -> eval forward -> decode -> original frame. Immutable after
/// construction, so one instance may serve many threads.
class LandmarkDetector {
 public:
  /// Frame size and tau come from the checkpoint settings (400 and 0.5 when absent).
  explicit LandmarkDetector(ModelCheckpoint checkpoint);

  LandmarkSet detect(const Image& image, View view) const;

  int frame_size() const { return frame_size_; }
  double tau() const { return tau_; }
  const ModelCheckpoint& checkpoint() const { return checkpoint_; }

 private:
  ModelCheckpoint checkpoint_;
  int frame_size_ = 400;
  double tau_ = 0.5;
};

/// ED = frame of maximum LV length, ES = minimum.
struct SeriesSummary {
  int frames = 0;           // frames seen
  int measured = 0;         // frames with a complete long-axis set
  int ed_frame = -1;
  int es_frame = -1;
  double ed_length_mm = 0.0;
  double es_length_mm = 0.0;
  double shortening_pct = 0.0;

  nlohmann::json to_json() const;
  static SeriesSummary from_json(const nlohmann::json& j);
  bool operator==(const SeriesSummary&) const = default;
};

class SeriesTracker {
 public:
  /// `length` is absent when the frame's landmarks were incomplete.
  void add(int frame_index, std::optional<double> length);
  /// Absent until at least one frame was measured.
  std::optional<SeriesSummary> summary() const;

 private:
  int frames_ = 0;
  std::map<int, double> lengths_;
};

/// LV length of a complete long-axis set; absent otherwise.
std::optional<double> maybe_lv_length(const LandmarkSet& set);

}  // namespace cmrlm
