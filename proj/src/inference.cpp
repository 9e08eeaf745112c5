#include "cmrlm/inference.hpp"

#include <algorithm>

#include "cmrlm/errors.hpp"
#include "cmrlm/heatmap.hpp"
#include "cmrlm/measure.hpp"

namespace cmrlm {

LandmarkDetector::LandmarkDetector(ModelCheckpoint checkpoint) : checkpoint_(std::move(checkpoint)) {
  const auto& s = checkpoint_.provenance.settings;
  frame_size_ = s.value("frame_size", 400);
  tau_ = s.value("tau", kDefaultTau);
  const ArchConfig& arch = checkpoint_.model.arch();
  if (arch.out_channels != kSlots + 1) throw ConfigError("detector: model does not emit heat maps");
  if (frame_size_ <= 0 || frame_size_ % arch.required_divisor() != 0) {
    throw ConfigError("detector: checkpoint frame size " + std::to_string(frame_size_) + " does not suit the arch");
  }
}

LandmarkSet LandmarkDetector::detect(const Image& image, View view) const {
  const Preprocessed p = preprocess(image, frame_size_);
  Tensor<float> input(Shape{1, 1, frame_size_, frame_size_}, p.image.pixels);
  const Tensor<float> probs = checkpoint_.model.predict_probs(input);
  return to_original_frame(decode(probs, view, tau_), p.record);
}

nlohmann::json SeriesSummary::to_json() const {
  return {{"frames", frames},
          {"measured", measured},
          {"ed_frame", ed_frame},
          {"es_frame", es_frame},
          {"ed_length_mm", ed_length_mm},
          {"es_length_mm", es_length_mm},
          {"shortening_pct", shortening_pct}};
}

SeriesSummary SeriesSummary::from_json(const nlohmann::json& j) {
  SeriesSummary s;
  s.frames = j.at("frames").get<int>();
  s.measured = j.at("measured").get<int>();
  s.ed_frame = j.at("ed_frame").get<int>();
  s.es_frame = j.at("es_frame").get<int>();
  s.ed_length_mm = j.at("ed_length_mm").get<double>();
  s.es_length_mm = j.at("es_length_mm").get<double>();
  s.shortening_pct = j.at("shortening_pct").get<double>();
  return s;
}

void SeriesTracker::add(int frame_index, std::optional<double> length) {
  ++frames_;
  if (length) lengths_[frame_index] = *length;
}

std::optional<SeriesSummary> SeriesTracker::summary() const {
  if (lengths_.empty()) return std::nullopt;
  SeriesSummary s;
  s.frames = frames_;
  s.measured = static_cast<int>(lengths_.size());
  // Ties go to the earliest frame.
  auto ed = lengths_.begin(), es = lengths_.begin();
  for (auto it = lengths_.begin(); it != lengths_.end(); ++it) {
    if (it->second > ed->second) ed = it;
    if (it->second < es->second) es = it;
  }
  s.ed_frame = ed->first;
  s.es_frame = es->first;
  s.ed_length_mm = ed->second;
  s.es_length_mm = es->second;
  s.shortening_pct = s.ed_length_mm > 0 ? longitudinal_shortening(s.ed_length_mm, s.es_length_mm) : 0.0;
  return s;
}

std::optional<double> maybe_lv_length(const LandmarkSet& set) {
  if (!is_lax(set.view) || set.present_count() != kSlots) return std::nullopt;
  return lv_length(set);
}

}  // namespace cmrlm
