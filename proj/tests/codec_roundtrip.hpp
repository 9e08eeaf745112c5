#pragma once

// decode(encode(L)) over random landmark placements.

#include <algorithm>
#include <cmath>

#include "cmrlm/heatmap.hpp"
#include "cmrlm/rng.hpp"

namespace cmrlm::testing {

// Present points are redrawn until every pair is at least `min_separation` apart.
inline LandmarkSet random_landmarks(Rng& rng, int size, double margin, double min_separation = 0.0) {
  LandmarkSet s;
  s.view = kAllViews[rng.index(4)];
  s.frame = {size, size, 1.0, 1.0};
  for (int k = 0; k < kSlots; ++k) {
    if (!rng.bernoulli(0.8)) continue;
    for (;;) {
      const Point2 p{rng.uniform(margin, size - 1 - margin), rng.uniform(margin, size - 1 - margin)};
      bool clear = true;
      for (int j = 0; j < k; ++j) {
        if (s.points[j] && std::hypot(p.x - s.points[j]->x, p.y - s.points[j]->y) < min_separation) clear = false;
      }
      if (clear) {
        s.points[k] = p;
        break;
      }
    }
  }
  return s;
}

struct RoundTripStats {
  int trials = 0;
  int presence_mismatches = 0;
  int points = 0;
  double mean_error = 0.0;
  double max_error = 0.0;
};

inline RoundTripStats codec_round_trip(std::uint64_t seed, int trials, int size, double margin, double sigma,
                                       double tau, double min_separation = 0.0) {
  Rng rng(seed);
  RoundTripStats st;
  double total = 0;
  for (int t = 0; t < trials; ++t) {
    const LandmarkSet truth = random_landmarks(rng, size, margin, min_separation);
    const LandmarkSet got = decode(encode(truth, size, size, sigma).probs, truth.view, tau, truth.frame);
    ++st.trials;
    if (!got.same_presence(truth)) {
      ++st.presence_mismatches;
      continue;
    }
    for (int k = 0; k < kSlots; ++k) {
      if (!truth.points[k]) continue;
      const double e = std::hypot(got.points[k]->x - truth.points[k]->x, got.points[k]->y - truth.points[k]->y);
      total += e;
      st.max_error = std::max(st.max_error, e);
      ++st.points;
    }
  }
  st.mean_error = st.points ? total / st.points : 0.0;
  return st;
}

}  // namespace cmrlm::testing
