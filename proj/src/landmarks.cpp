#include "cmrlm/landmarks.hpp"

#include <cctype>

#include "cmrlm/errors.hpp"

namespace cmrlm {

namespace {

constexpr std::array<std::string_view, kSlots> kCh2{"A-P", "I-P", "APEX"};
constexpr std::array<std::string_view, kSlots> kCh3{"IL-P", "AS-P", "APEX"};
constexpr std::array<std::string_view, kSlots> kCh4{"AL-P", "IS-P", "APEX"};
constexpr std::array<std::string_view, kSlots> kSax{"A-RVI", "P-RVI", "C-LV"};

std::string canonical(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '_' || c == ' ') c = '-';
    out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  return out;
}

}  // namespace

std::string_view view_name(View v) {
  switch (v) {
    case View::CH2: return "CH2";
    case View::CH3: return "CH3";
    case View::CH4: return "CH4";
    case View::SAX: return "SAX";
  }
  return "?";
}

View parse_view(std::string_view name) {
  const std::string c = canonical(name);
  for (View v : kAllViews) {
    if (c == view_name(v)) return v;
  }
  throw ConfigError("unknown view '" + std::string(name) + "' (expected CH2, CH3, CH4 or SAX)");
}

bool is_lax(View v) { return v != View::SAX; }

const std::array<std::string_view, kSlots>& slot_names(View v) {
  switch (v) {
    case View::CH2: return kCh2;
    case View::CH3: return kCh3;
    case View::CH4: return kCh4;
    case View::SAX: return kSax;
  }
  return kCh2;
}

int slot_index(View v, std::string_view name) {
  const std::string c = canonical(name);
  const auto& names = slot_names(v);
  for (int k = 0; k < kSlots; ++k) {
    if (c == names[k]) return k;
  }
  return -1;
}

int LandmarkSet::present_count() const {
  int n = 0;
  for (const auto& p : points) n += p.has_value();
  return n;
}

bool LandmarkSet::same_presence(const LandmarkSet& other) const {
  for (int k = 0; k < kSlots; ++k) {
    if (points[k].has_value() != other.points[k].has_value()) return false;
  }
  return true;
}

void LandmarkSet::validate() const {
  for (int k = 0; k < kSlots; ++k) {
    if (points[k] && !frame.contains(*points[k])) {
      throw GeometryError(std::string(slot_names(view)[k]) + " at (" + std::to_string(points[k]->x) + ", " +
                          std::to_string(points[k]->y) + ") lies outside the " + std::to_string(frame.height) +
                          "x" + std::to_string(frame.width) + " frame");
    }
  }
}

}  // namespace cmrlm
