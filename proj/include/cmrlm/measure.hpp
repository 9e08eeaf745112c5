#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmrlm/landmarks.hpp"
#include "json.hpp"

namespace cmrlm {

struct DetectionOutcome {
  bool success = true;
  std::vector<std::string> missed;    // present in truth, absent in prediction
  std::vector<std::string> spurious;  // absent in truth, present in prediction
};

/// Presence comparison only; coordinates are never consulted.
DetectionOutcome detection_outcome(const LandmarkSet& pred, const LandmarkSet& truth);
double detection_rate(const std::vector<DetectionOutcome>& outcomes);

/// Euclidean distance in mm with per-axis spacing.
double l2_mm(const Point2& a, const Point2& b, double spacing_row, double spacing_col);

/// Angle of C-LV -> A-RVI in mm coordinates, atan2(-drow, dcol), degrees in (-180, 180].
double a_rvi_angle(const LandmarkSet& sax);
/// a - b wrapped to (-180, 180].
double angle_diff(double a, double b);

/// Apex to the midpoint of the two valve points, in mm of the set's frame.
double lv_length(const LandmarkSet& lax);
/// 100 * (ed - es) / ed.
double longitudinal_shortening(double len_ed, double len_es);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Two-sided Welch unequal-variance t-test.
WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b);
/// Two-sided tail probability of Student's t with `df` degrees of freedom.
double student_t_two_sided(double t, double df);
/// Regularised incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);

struct SummaryStats {
  int n = 0;
  double mean = 0.0;
  std::optional<double> sd;  // sample sd; absent when n < 2
};

struct LandmarkStats {
  std::string name;
  SummaryStats l2_mm;
};

/// Derived geometric measure of a group: LV length (LAX) or A-RVI angle (SAX).
struct DerivedStats {
  std::string measure;
  SummaryStats difference;  // % of truth length, or wrapped angle difference in degrees
  std::optional<double> t;
  std::optional<double> p;  // Welch, prediction vs truth values; absent when degenerate
};

struct GroupReport {
  std::string sequence;
  View view = View::CH2;
  int n_tested = 0;
  int n_success = 0;
  double detection_rate = 0.0;
  std::vector<LandmarkStats> landmarks;
  DerivedStats derived;
};

struct MetricsReport {
  std::vector<GroupReport> groups;
  int n_tested = 0;
  int n_success = 0;
  double detection_rate = 0.0;

  nlohmann::json to_json() const;
  /// One row per group x landmark plus one per group's derived measure.
  std::string to_csv() const;
};

/// Groups are (sequence, view) in first-seen order. L2 statistics cover successful
/// detections only; distances use the truth frame's spacing.
MetricsReport build_report(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& truth,
                           const std::vector<std::string>& sequences);

/// Writes report.json and report.csv into `dir`.
void write_report(const MetricsReport& report, const std::filesystem::path& dir);

}  // namespace cmrlm
