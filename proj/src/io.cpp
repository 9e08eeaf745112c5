#include "cmrlm/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>

#include "cmrlm/errors.hpp"

namespace cmrlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path sidecar(const fs::path& p) { return fs::path(p.string() + ".json"); }

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(p.string() + ": invalid JSON: " + e.what());
  }
}

void read_spacing(const json& j, double& sr, double& sc) {
  if (!j.contains("spacing_mm")) return;
  const json& s = j["spacing_mm"];
  if (s.is_number()) {
    sr = sc = s.get<double>();
  } else {
    sr = s.at(0).get<double>();
    sc = s.at(1).get<double>();
  }
}

// Next whitespace-delimited PGM header token, skipping comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.get();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      if (!tok.empty()) return tok;
    } else if (c != EOF) {
      tok.push_back(static_cast<char>(c));
    }
  }
  return tok;
}

Image read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (pgm_token(in) != "P5") throw IoError(path.string() + ": only binary PGM (P5) is supported");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(pgm_token(in));
    h = std::stoi(pgm_token(in));
    maxval = std::stoi(pgm_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw IoError(path.string() + ": bad PGM dimensions");
  Image img(h, w);
  const int bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path.string() + ": truncated PGM");
  for (std::size_t i = 0; i < img.size(); ++i) {
    img.pixels[i] = bytes == 1 ? raw[i] : static_cast<float>(raw[2 * i] << 8 | raw[2 * i + 1]);  // PGM is big-endian
  }
  if (fs::exists(sidecar(path))) read_spacing(read_json_file(sidecar(path)), img.spacing_row, img.spacing_col);
  return img;
}

json point_json(const std::optional<Point2>& p) {
  return p ? json{{"x", p->x}, {"y", p->y}} : json(nullptr);
}

}  // namespace

void write_image(const Image& image, const fs::path& path) {
  image.validate();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  std::vector<unsigned char> bytes(image.size() * 4);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(image.pixels[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  std::ofstream meta(sidecar(path));
  meta << json{{"height", image.height},
               {"width", image.width},
               {"spacing_mm", {image.spacing_row, image.spacing_col}}}
              .dump()
       << "\n";
  if (!out || !meta) throw IoError("write failed: " + path.string());
}

Image read_image(const fs::path& path) {
  if (path.extension() == ".pgm") return read_pgm(path);
  const json meta = read_json_file(sidecar(path));
  Image img;
  try {
    img = Image(meta.at("height").get<int>(), meta.at("width").get<int>());
    read_spacing(meta, img.spacing_row, img.spacing_col);
  } catch (const json::exception& e) {
    throw IoError(sidecar(path).string() + ": " + e.what());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes(img.size() * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()) || in.peek() != EOF) {
    throw IoError(path.string() + ": pixel payload does not match " + std::to_string(img.height) + "x" +
                  std::to_string(img.width));
  }
  for (std::size_t i = 0; i < img.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t{bytes[4 * i + b]} << (8 * b);
    img.pixels[i] = std::bit_cast<float>(u);
  }
  try {
    img.validate();
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return img;
}

json DatasetManifest::to_json() const {
  json samples_json = json::array();
  for (const auto& s : samples) {
    json lms = json::object();
    for (int k = 0; k < kSlots; ++k) lms[std::string(slot_names(s.view)[k])] = point_json(s.points[k]);
    json j = {{"image", s.image},
              {"view", view_name(s.view)},
              {"sequence", s.sequence},
              {"patient_id", s.patient_id},
              {"spacing_mm", {s.spacing_row, s.spacing_col}},
              {"landmarks", lms}};
    if (!s.series_id.empty()) {
      j["series_id"] = s.series_id;
      j["frame_index"] = s.frame_index;
    }
    samples_json.push_back(std::move(j));
  }
  return {{"schema_version", schema_version}, {"samples", samples_json}};
}

DatasetManifest DatasetManifest::from_json(const json& j, fs::path root) {
  DatasetManifest m;
  m.root = std::move(root);
  try {
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kManifestSchema) {
      throw ConfigError("manifest: unsupported schema_version " + std::to_string(m.schema_version));
    }
    for (const auto& e : j.at("samples")) {
      ManifestSample s;
      s.image = e.at("image").get<std::string>();
      s.view = parse_view(e.at("view").get<std::string>());
      s.sequence = e.value("sequence", "cine");
      s.patient_id = e.at("patient_id").get<std::string>();
      read_spacing(e, s.spacing_row, s.spacing_col);
      if (e.contains("landmarks")) {
        for (const auto& [name, p] : e["landmarks"].items()) {
          const int k = slot_index(s.view, name);
          if (k < 0) {
            throw ConfigError("manifest: slot '" + name + "' does not belong to view " +
                              std::string(view_name(s.view)));
          }
          if (!p.is_null()) s.points[k] = Point2{p.at("x").get<double>(), p.at("y").get<double>()};
        }
      }
      s.series_id = e.value("series_id", "");
      s.frame_index = e.value("frame_index", -1);
      m.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

void DatasetManifest::validate() const {
  for (const auto& s : samples) {
    if (s.patient_id.empty()) throw ConfigError("manifest: empty patient id for " + s.image);
    if (s.image.empty()) throw ConfigError("manifest: sample without an image path");
    if (!(s.spacing_row > 0) || !(s.spacing_col > 0)) throw ConfigError("manifest: bad spacing for " + s.image);
  }
}

LandmarkSet DatasetManifest::landmarks(const ManifestSample& s, int height, int width) const {
  LandmarkSet l;
  l.view = s.view;
  l.points = s.points;
  l.frame = {height, width, s.spacing_row, s.spacing_col};
  return l;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.to_json().dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
  return DatasetManifest::from_json(read_json_file(path), path.parent_path());
}

std::vector<ManifestSample> ingest_via(const json& via, View view, const std::string& image_dir,
                                       const std::string& sequence) {
  const json& images = via.contains("_via_img_metadata") ? via["_via_img_metadata"] : via;
  if (!images.is_object()) throw IngestionError("VIA export: expected an object of image records");
  std::string valid;
  for (auto n : slot_names(view)) {
    std::string label(n);
    std::replace(label.begin(), label.end(), '-', '_');  // VIA labels use underscores
    valid += (valid.empty() ? "" : ", ") + label;
  }

  std::vector<ManifestSample> out;
  for (const auto& [key, rec] : images.items()) {
    if (!rec.is_object() || !rec.contains("filename")) continue;  // e.g. project settings blocks
    const std::string file = rec["filename"].get<std::string>();
    ManifestSample s;
    s.image = image_dir.empty() ? file : (fs::path(image_dir) / file).string();
    s.view = view;
    s.sequence = sequence;
    s.patient_id = fs::path(file).stem().string();
    if (rec.contains("file_attributes")) {
      const json& fa = rec["file_attributes"];
      if (fa.contains("patient_id")) s.patient_id = fa["patient_id"].get<std::string>();
      if (fa.contains("spacing_mm")) {
        const json& sp = fa["spacing_mm"];
        try {
          if (sp.is_string()) {
            s.spacing_row = s.spacing_col = std::stod(sp.get<std::string>());
          } else {
            read_spacing(fa, s.spacing_row, s.spacing_col);
          }
        } catch (const std::exception&) {
          throw IngestionError(file + ": unreadable spacing_mm attribute");
        }
      }
    }
    for (const auto& region : rec.value("regions", json::array())) {
      const json& shape = region.at("shape_attributes");
      const std::string kind = shape.value("name", "");
      if (kind != "point") throw IngestionError(file + ": unsupported region shape '" + kind + "' (points only)");
      const std::string label = region.value("region_attributes", json::object()).value("label", "");
      const int k = slot_index(view, label);
      if (k < 0) {
        throw IngestionError(file + ": unknown label '" + label + "' for view " + std::string(view_name(view)) +
                             " (valid: " + valid + ")");
      }
      if (s.points[k]) throw IngestionError(file + ": duplicate label '" + label + "'");
      s.points[k] = Point2{shape.at("cx").get<double>(), shape.at("cy").get<double>()};
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cmrlm
