#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace cmrlm {

enum class View { CH2, CH3, CH4, SAX };

inline constexpr std::array<View, 4> kAllViews{View::CH2, View::CH3, View::CH4, View::SAX};
inline constexpr int kSlots = 3;

std::string_view view_name(View v);
View parse_view(std::string_view name);  // throws ConfigError
bool is_lax(View v);

/// Slot names in channel order (channel k + 1 of a heat-map stack).
const std::array<std::string_view, kSlots>& slot_names(View v);
/// Index of `name` among the view's slots; accepts "A-RVI", "A_RVI" and "a-rvi". -1 if unknown.
int slot_index(View v, std::string_view name);

/// Pixel coordinates: x = column, y = row, pixel centres at integers.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

/// Coordinate frame of a set of points: pixel grid extent and spacing in mm.
struct Frame {
  int height = 0;
  int width = 0;
  double spacing_row = 1.0;
  double spacing_col = 1.0;
  bool operator==(const Frame&) const = default;

  bool contains(const Point2& p) const {
    return p.x >= 0.0 && p.y >= 0.0 && p.x <= width - 1.0 && p.y <= height - 1.0;
  }
};

struct LandmarkSet {
  View view = View::CH2;
  std::array<std::optional<Point2>, kSlots> points{};
  Frame frame;

  int present_count() const;
  bool same_presence(const LandmarkSet& other) const;
  /// Throws GeometryError when a present point falls outside the frame.
  void validate() const;
};

}  // namespace cmrlm
