#include <filesystem>
#include <fstream>

#include "cmrlm/errors.hpp"
#include "cmrlm/io.hpp"
#include "cmrlm/rng.hpp"
#include "doctest.h"

using namespace cmrlm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmrlm_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json via_record(const std::string& file, const std::vector<std::tuple<std::string, double, double>>& pts) {
  json regions = json::array();
  for (const auto& [label, x, y] : pts) {
    regions.push_back({{"shape_attributes", {{"name", "point"}, {"cx", x}, {"cy", y}}},
                       {"region_attributes", {{"label", label}}}});
  }
  return {{"filename", file}, {"size", 1234}, {"regions", regions}, {"file_attributes", json::object()}};
}

}  // namespace

TEST_CASE("raw image round trip is bit exact") {
  const fs::path dir = scratch("raw");
  Rng rng(3);
  Image img(17, 23, 1.25, 0.75);
  for (float& v : img.pixels) v = static_cast<float>(rng.normal());
  write_image(img, dir / "a.f32");
  const Image back = read_image(dir / "a.f32");
  CHECK(back.height == 17);
  CHECK(back.width == 23);
  CHECK(back.spacing_row == 1.25);
  CHECK(back.spacing_col == 0.75);
  CHECK(back.pixels == img.pixels);

  // A payload that disagrees with the sidecar is refused.
  std::ofstream(dir / "a.f32", std::ios::binary | std::ios::app) << "x";
  CHECK_THROWS_AS(read_image(dir / "a.f32"), IoError);
  CHECK_THROWS_AS(read_image(dir / "missing.f32"), IoError);
}

TEST_CASE("pgm ingest") {
  const fs::path dir = scratch("pgm");
  {
    std::ofstream out(dir / "a.pgm", std::ios::binary);
    out << "P5\n# comment\n3 2\n255\n";
    const unsigned char px[6] = {0, 1, 2, 3, 4, 255};
    out.write(reinterpret_cast<const char*>(px), 6);
  }
  const Image a = read_image(dir / "a.pgm");
  CHECK(a.height == 2);
  CHECK(a.width == 3);
  CHECK(a.at(1, 2) == 255.0f);
  CHECK(a.at(0, 1) == 1.0f);
  {
    std::ofstream out(dir / "b.pgm", std::ios::binary);
    out << "P5 1 1 65535\n";
    const unsigned char px[2] = {0x12, 0x34};
    out.write(reinterpret_cast<const char*>(px), 2);
    std::ofstream(dir / "b.pgm.json") << R"({"spacing_mm": 1.5})";
  }
  const Image b = read_image(dir / "b.pgm");
  CHECK(b.pixels[0] == 0x1234);
  CHECK(b.spacing_row == 1.5);
  CHECK(b.spacing_col == 1.5);
}

TEST_CASE("manifest write then read is identity") {
  const fs::path dir = scratch("manifest");
  Rng rng(9);
  DatasetManifest m;
  for (int i = 0; i < 40; ++i) {
    ManifestSample s;
    s.image = "img/" + std::to_string(i) + ".f32";
    s.view = kAllViews[rng.index(4)];
    s.sequence = i % 3 == 0 ? "LGE" : "cine";
    s.patient_id = "p" + std::to_string(i / 4);
    s.spacing_row = rng.uniform(0.8, 2.0);
    s.spacing_col = rng.uniform(0.8, 2.0);
    for (auto& p : s.points) {
      if (rng.bernoulli(0.7)) p = Point2{rng.uniform(0, 300), rng.uniform(0, 300)};
    }
    if (i % 5 == 0) {
      s.series_id = "s" + std::to_string(i);
      s.frame_index = i;
    }
    m.samples.push_back(s);
  }
  write_manifest(m, dir / "manifest.json");
  const DatasetManifest back = read_manifest(dir / "manifest.json");
  CHECK(back.root == dir);
  REQUIRE(back.samples.size() == m.samples.size());
  for (std::size_t i = 0; i < m.samples.size(); ++i) CHECK(back.samples[i] == m.samples[i]);
  CHECK(back.image_path(back.samples[0]) == dir / "img/0.f32");
}

TEST_CASE("manifest rejects foreign slots and empty patients") {
  json j = {{"schema_version", 1},
            {"samples", {{{"image", "a"}, {"view", "CH2"}, {"patient_id", "p"}, {"landmarks", {{"C_LV", nullptr}}}}}}};
  CHECK_THROWS_AS(DatasetManifest::from_json(j), ConfigError);
  j["samples"][0]["landmarks"] = json::object();
  j["samples"][0]["patient_id"] = "";
  CHECK_THROWS_AS(DatasetManifest::from_json(j), ConfigError);
  j["samples"][0]["patient_id"] = "p";
  j["schema_version"] = 7;
  CHECK_THROWS_AS(DatasetManifest::from_json(j), ConfigError);
}

TEST_CASE("VIA ingestion") {
  json via;
  via["_via_settings"] = {{"ui", json::object()}};
  via["_via_img_metadata"]["a.png1234"] =
      via_record("a.png", {{"A_P", 10, 20}, {"I_P", 30, 40}, {"APEX", 50, 60}});
  auto full = ingest_via(via, View::CH2, "imgs");
  REQUIRE(full.size() == 1);
  CHECK(full[0].image == "imgs/a.png");
  CHECK(full[0].patient_id == "a");
  CHECK(full[0].points[0] == Point2{10, 20});
  CHECK(full[0].points[1] == Point2{30, 40});
  CHECK(full[0].points[2] == Point2{50, 60});

  json empty;
  empty["top.png0"] = via_record("top.png", {});
  auto sax = ingest_via(empty, View::SAX, "");
  REQUIRE(sax.size() == 1);
  CHECK(sax[0].view == View::SAX);
  for (const auto& p : sax[0].points) CHECK_FALSE(p.has_value());

  json bad;
  bad["b.png0"] = via_record("b.png", {{"APX", 1, 1}});
  try {
    ingest_via(bad, View::CH2, "");
    FAIL("expected IngestionError");
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("b.png") != std::string::npos);
    CHECK(msg.find("APX") != std::string::npos);
    CHECK(msg.find("A_P, I_P, APEX") != std::string::npos);
  }

  json dup;
  dup["c.png0"] = via_record("c.png", {{"A_RVI", 1, 1}, {"a-rvi", 2, 2}});
  CHECK_THROWS_AS(ingest_via(dup, View::SAX, ""), IngestionError);
}
