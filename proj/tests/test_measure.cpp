#include <cmath>
#include <filesystem>
#include <fstream>

#include "cmrlm/errors.hpp"
#include "cmrlm/measure.hpp"
#include "cmrlm/rng.hpp"
#include "doctest.h"
#include "welch_oracle.hpp"

using namespace cmrlm;
using cmrlm::testing::boost_welch_p;

namespace {

LandmarkSet make(View v, std::optional<Point2> a, std::optional<Point2> b, std::optional<Point2> c,
                 double sr = 1.0, double sc = 1.0) {
  LandmarkSet s;
  s.view = v;
  s.frame = {512, 512, sr, sc};
  s.points = {a, b, c};
  return s;
}

}  // namespace

TEST_CASE("detection outcomes") {
  const Point2 p{10, 10};
  const auto full = make(View::SAX, p, p, p);
  CHECK(detection_outcome(full, full).success);
  const auto two = make(View::SAX, p, std::nullopt, p);
  const auto miss = detection_outcome(two, full);
  CHECK_FALSE(miss.success);
  REQUIRE(miss.missed.size() == 1);
  CHECK(miss.missed[0] == "P-RVI");
  CHECK(miss.spurious.empty());
  const auto empty = make(View::SAX, std::nullopt, std::nullopt, std::nullopt);
  const auto spur = detection_outcome(full, empty);
  CHECK_FALSE(spur.success);
  CHECK(spur.spurious.size() == 3);
  CHECK_THROWS_AS(detection_outcome(make(View::CH2, p, p, p), full), UsageError);

  std::vector<DetectionOutcome> outs(3008);
  for (int i = 2906; i < 3008; ++i) outs[i].success = false;
  CHECK(detection_rate(outs) * 100 == doctest::Approx(96.6).epsilon(5e-4));
  CHECK(detection_rate(std::vector<DetectionOutcome>(4)) == 1.0);
  std::vector<DetectionOutcome> half(2);
  half[1].success = false;
  CHECK(detection_rate(half) == 0.5);
  CHECK_THROWS_AS(detection_rate({}), UsageError);
}

TEST_CASE("l2_mm") {
  CHECK(l2_mm({3, 4}, {3, 4}, 1, 1) == 0.0);
  CHECK(l2_mm({0, 0}, {4, 3}, 1, 1) == 5.0);
  // (row, col) = (3, 4) at (2, 1) mm: sqrt(6^2 + 4^2).
  CHECK(std::abs(l2_mm({0, 0}, {4, 3}, 2, 1) - std::sqrt(52.0)) <= 1e-12);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Point2 a{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const Point2 b{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const Point2 c{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const double sr = rng.uniform(0.5, 2), sc = rng.uniform(0.5, 2);
    CHECK(l2_mm(a, b, sr, sc) == l2_mm(b, a, sr, sc));
    CHECK(l2_mm(a, c, sr, sc) <= l2_mm(a, b, sr, sc) + l2_mm(b, c, sr, sc) + 1e-12);
  }
}

TEST_CASE("A-RVI angle and wrap") {
  const Point2 c{100, 100};
  CHECK(a_rvi_angle(make(View::SAX, Point2{110, 100}, std::nullopt, c)) == 0.0);
  CHECK(a_rvi_angle(make(View::SAX, Point2{100, 90}, std::nullopt, c)) == 90.0);
  CHECK(std::abs(a_rvi_angle(make(View::SAX, Point2{105, 95}, std::nullopt, c)) - 45.0) <= 1e-12);
  CHECK(a_rvi_angle(make(View::SAX, Point2{90, 100}, std::nullopt, c)) == 180.0);
  CHECK_THROWS_AS(a_rvi_angle(make(View::SAX, c, std::nullopt, c)), GeometryError);
  CHECK_THROWS_AS(a_rvi_angle(make(View::SAX, std::nullopt, c, c)), UsageError);

  CHECK(std::abs(angle_diff(179, -179)) == 2.0);
  CHECK(angle_diff(-179, 179) == 2.0);
  CHECK(angle_diff(33.5, 33.5) == 0.0);
  CHECK(angle_diff(10, -10) == 20.0);
  CHECK(angle_diff(10, 350) == 20.0);
  CHECK(angle_diff(0, 180) == 180.0);
  CHECK(angle_diff(180, 0) == 180.0);

  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Point2 a{rng.uniform(0, 200), rng.uniform(0, 200)};
    const double k = rng.uniform(0.1, 5);
    const Point2 scaled{c.x + k * (a.x - c.x), c.y + k * (a.y - c.y)};
    if (a == c) continue;
    CHECK(std::abs(angle_diff(a_rvi_angle(make(View::SAX, a, std::nullopt, c)),
                              a_rvi_angle(make(View::SAX, scaled, std::nullopt, c)))) <= 1e-9);
    const double x = rng.uniform(-1000, 1000), y = rng.uniform(-1000, 1000);
    const double d = angle_diff(x, y);
    CHECK(d > -180.0);
    CHECK(d <= 180.0);
    CHECK(angle_diff(x, x) == 0.0);
  }
}

TEST_CASE("LV length and shortening") {
  CHECK(lv_length(make(View::CH2, Point2{100, 100}, Point2{140, 100}, Point2{120, 20})) == 80.0);
  CHECK(lv_length(make(View::CH4, Point2{100, 100}, Point2{140, 100}, Point2{120, 100})) == 0.0);
  CHECK(lv_length(make(View::CH3, Point2{0, 0}, Point2{0, 10}, Point2{24, 5})) == 24.0);
  CHECK_THROWS_AS(lv_length(make(View::CH2, Point2{0, 0}, std::nullopt, Point2{1, 1})), UsageError);

  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Point2 a{rng.uniform(0, 400), rng.uniform(0, 400)};
    const Point2 b{rng.uniform(0, 400), rng.uniform(0, 400)};
    const Point2 apex{rng.uniform(0, 400), rng.uniform(0, 400)};
    const double sr = rng.uniform(0.5, 2), sc = rng.uniform(0.5, 2);
    CHECK(lv_length(make(View::CH2, a, b, apex, sr, sc)) == lv_length(make(View::CH2, b, a, apex, sr, sc)));
  }

  CHECK(longitudinal_shortening(80, 60) == 25.0);
  CHECK(longitudinal_shortening(70, 70) == 0.0);
  CHECK(longitudinal_shortening(50, 60) < 0.0);
  CHECK_THROWS_AS(longitudinal_shortening(0, 10), UsageError);
}

TEST_CASE("Welch t-test") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 3, 4, 5, 6};
  const auto r = welch_t(a, b);
  CHECK(r.t == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(r.df == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(std::abs(r.p - 0.34659350708733) <= 1e-9);

  const auto same = welch_t(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);

  CHECK_THROWS_AS(welch_t({1}, {1, 2}), StatisticsError);
  CHECK_THROWS_AS(welch_t({1, 1, 1}, {2, 2}), StatisticsError);

  double prev = 2.0;
  for (double gap = 0; gap <= 5; gap += 0.25) {
    std::vector<double> shifted = a;
    for (double& x : shifted) x += gap;
    const double p = welch_t(a, shifted).p;
    CHECK(p < prev);
    prev = p;
  }

  Rng rng(4);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const int na = 2 + static_cast<int>(rng.index(40)), nb = 2 + static_cast<int>(rng.index(40));
    const double ma = rng.uniform(-3, 3), mb = rng.uniform(-3, 3);
    const double sa = rng.uniform(0.1, 4), sb = rng.uniform(0.1, 4);
    std::vector<double> x(na), y(nb);
    for (double& v : x) v = ma + sa * rng.normal();
    for (double& v : y) v = mb + sb * rng.normal();
    worst = std::max(worst, std::abs(welch_t(x, y).p - boost_welch_p(x, y)));
  }
  MESSAGE("max |p - oracle| = " << worst);
  CHECK(worst <= 1e-6);
}

TEST_CASE("incomplete beta edge values") {
  CHECK(incomplete_beta(2, 3, 0) == 0.0);
  CHECK(incomplete_beta(2, 3, 1) == 1.0);
  // I_x(1, 1) = x and I_x(a, 1) = x^a.
  CHECK(incomplete_beta(1, 1, 0.3) == doctest::Approx(0.3).epsilon(1e-13));
  CHECK(incomplete_beta(2.5, 1, 0.4) == doctest::Approx(std::pow(0.4, 2.5)).epsilon(1e-13));
  CHECK(student_t_two_sided(0, 7) == 1.0);
}

TEST_CASE("report") {
  std::vector<LandmarkSet> truth, pred;
  std::vector<std::string> seqs;
  Rng rng(5);
  for (const char* seq : {"cine", "LGE", "T1"}) {
    for (View v : kAllViews) {
      for (int i = 0; i < 4; ++i) {
        const Point2 a{rng.uniform(50, 100), rng.uniform(50, 100)};
        const Point2 b{rng.uniform(150, 200), rng.uniform(50, 100)};
        const Point2 c{rng.uniform(100, 150), rng.uniform(150, 250)};
        truth.push_back(make(v, a, b, c));
        pred.push_back(truth.back());
        seqs.emplace_back(seq);
      }
    }
  }
  const MetricsReport perfect = build_report(pred, truth, seqs);
  CHECK(perfect.groups.size() == 12);
  CHECK(perfect.detection_rate == 1.0);
  CHECK(perfect.groups[0].sequence == "cine");
  CHECK(perfect.groups[3].view == View::SAX);
  CHECK(perfect.groups[11].sequence == "T1");
  for (const auto& g : perfect.groups) {
    CHECK(g.detection_rate == 1.0);
    for (const auto& l : g.landmarks) CHECK(l.l2_mm.mean == 0.0);
    REQUIRE(g.derived.p.has_value());
    CHECK(*g.derived.p == 1.0);
  }

  // One failure: excluded from the L2 statistics of its group.
  pred[0].points[1].reset();
  pred[1].points[0] = Point2{pred[1].points[0]->x + 3, pred[1].points[0]->y + 4};
  const MetricsReport r = build_report(pred, truth, seqs);
  CHECK(r.groups[0].n_success == 3);
  CHECK(r.groups[0].detection_rate == 0.75);
  CHECK(r.groups[0].landmarks[0].l2_mm.n == 3);
  CHECK(r.groups[0].landmarks[0].l2_mm.mean == doctest::Approx(5.0 / 3));
  CHECK(r.n_success == 47);

  const auto dir = std::filesystem::temp_directory_path() / "cmrlm_report_test";
  write_report(r, dir);
  const auto js = nlohmann::json::parse(std::ifstream(dir / "report.json"));
  CHECK(js["groups"].size() == 12);
  CHECK(js["groups"][0]["n_success"] == 3);
  std::ifstream csv(dir / "report.csv");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 1 + 12 * 4);
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(build_report(pred, truth, {"cine"}), UsageError);
}
