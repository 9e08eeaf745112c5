#include "cmrlm/protocol.hpp"

#include <bit>
#include <cstring>

#include "cmrlm/errors.hpp"

namespace cmrlm {

using nlohmann::json;

namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} << 24 | std::uint32_t{p[1]} << 16 | std::uint32_t{p[2]} << 8 | p[3];
}

}  // namespace

Bytes encode_frame(std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) {
    throw ProtocolError("payload of " + std::to_string(payload.size()) + " bytes exceeds the 64 MiB limit");
  }
  Bytes out;
  out.reserve(payload.size() + 4);
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (pos_ > 0 && pos_ * 2 > buf_.size()) {  // compact once the consumed prefix dominates
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

std::optional<Bytes> FrameDecoder::next() {
  if (buffered() < 4) return std::nullopt;
  const std::size_t len = get_u32(buf_.data() + pos_);
  if (len > max_) throw ProtocolError("frame length " + std::to_string(len) + " exceeds the payload limit");
  if (buffered() < 4 + len) return std::nullopt;
  const auto begin = buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + 4);
  Bytes out(begin, begin + static_cast<std::ptrdiff_t>(len));
  pos_ += 4 + len;
  return out;
}

Bytes encode_message(const Message& m) {
  const std::string header = m.header.dump();
  Bytes out;
  out.reserve(4 + header.size() + m.body.size());
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), m.body.begin(), m.body.end());
  return out;
}

Message decode_message(std::span<const std::uint8_t> payload) {
  if (payload.size() < 4) throw ProtocolError("payload shorter than its header length field");
  const std::size_t hlen = get_u32(payload.data());
  if (hlen > payload.size() - 4) throw ProtocolError("header length runs past the payload");
  Message m;
  try {
    m.header = json::parse(payload.begin() + 4, payload.begin() + 4 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("header is not valid JSON: ") + e.what());
  }
  if (!m.header.is_object()) throw ProtocolError("header must be a JSON object");
  m.body.assign(payload.begin() + 4 + static_cast<std::ptrdiff_t>(hlen), payload.end());
  return m;
}

Message InlineFrameRequest::to_message() const {
  Message m;
  m.header = {{"type", "frame"},
              {"series_id", series_id},
              {"frame_index", frame_index},
              {"height", image.height},
              {"width", image.width},
              {"spacing_mm", {image.spacing_row, image.spacing_col}},
              {"view", view_name(view)},
              {"last_frame", last_frame}};
  m.body.resize(image.size() * 4);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(image.pixels[i]);
    for (int b = 0; b < 4; ++b) m.body[4 * i + b] = static_cast<std::uint8_t>(u >> (8 * b));
  }
  return m;
}

InlineFrameRequest InlineFrameRequest::from_message(const Message& m) {
  InlineFrameRequest r;
  try {
    const json& h = m.header;
    r.series_id = h.at("series_id").get<std::string>();
    r.frame_index = h.at("frame_index").get<int>();
    r.view = parse_view(h.at("view").get<std::string>());
    r.last_frame = h.value("last_frame", false);
    const int height = h.at("height").get<int>(), width = h.at("width").get<int>();
    if (height < 1 || width < 1) throw ProtocolError("image extents must be positive");
    const json& sp = h.at("spacing_mm");
    r.image = Image(height, width, sp.at(0).get<double>(), sp.at(1).get<double>());
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("bad frame header: ") + e.what());
  } catch (const ConfigError& e) {
    throw ProtocolError(std::string("bad frame header: ") + e.what());
  }
  if (m.body.size() != r.image.size() * 4) {
    throw ProtocolError("pixel payload is " + std::to_string(m.body.size()) + " bytes, expected " +
                        std::to_string(r.image.size() * 4));
  }
  for (std::size_t i = 0; i < r.image.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t{m.body[4 * i + b]} << (8 * b);
    r.image.pixels[i] = std::bit_cast<float>(u);
  }
  try {
    r.image.validate();
  } catch (const ConfigError& e) {
    throw ProtocolError(e.what());
  }
  return r;
}

json landmarks_to_json(const LandmarkSet& set) {
  json pts = json::object();
  for (int k = 0; k < kSlots; ++k) {
    const auto& p = set.points[k];
    pts[std::string(slot_names(set.view)[k])] = p ? json{{"x", p->x}, {"y", p->y}} : json(nullptr);
  }
  return {{"view", view_name(set.view)},
          {"frame",
           {{"height", set.frame.height},
            {"width", set.frame.width},
            {"spacing_mm", {set.frame.spacing_row, set.frame.spacing_col}}}},
          {"landmarks", pts}};
}

LandmarkSet landmarks_from_json(const json& j) {
  LandmarkSet set;
  set.view = parse_view(j.at("view").get<std::string>());
  const json& f = j.at("frame");
  set.frame = {f.at("height").get<int>(), f.at("width").get<int>(), f.at("spacing_mm").at(0).get<double>(),
               f.at("spacing_mm").at(1).get<double>()};
  for (const auto& [name, p] : j.at("landmarks").items()) {
    const int k = slot_index(set.view, name);
    if (k < 0) throw ConfigError("unknown slot '" + name + "' for view " + std::string(view_name(set.view)));
    if (!p.is_null()) set.points[k] = Point2{p.at("x").get<double>(), p.at("y").get<double>()};
  }
  return set;
}

Message InlineFrameResponse::to_message() const {
  Message m;
  m.header = {{"type", "result"}, {"series_id", series_id}, {"frame_index", frame_index}};
  if (error) {
    m.header["error"] = *error;
    return m;
  }
  m.header["result"] = landmarks_to_json(landmarks);
  m.header["lv_length_mm"] = lv_length_mm ? json(*lv_length_mm) : json(nullptr);
  if (series) m.header["series"] = series->to_json();
  return m;
}

InlineFrameResponse InlineFrameResponse::from_message(const Message& m) {
  InlineFrameResponse r;
  try {
    const json& h = m.header;
    r.series_id = h.value("series_id", "");
    r.frame_index = h.value("frame_index", -1);
    if (h.contains("error")) {
      r.error = h["error"].get<std::string>();
      return r;
    }
    r.landmarks = landmarks_from_json(h.at("result"));
    if (!h.at("lv_length_mm").is_null()) r.lv_length_mm = h["lv_length_mm"].get<double>();
    if (h.contains("series")) r.series = SeriesSummary::from_json(h["series"]);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("bad response header: ") + e.what());
  } catch (const ConfigError& e) {
    throw ProtocolError(std::string("bad response header: ") + e.what());
  }
  return r;
}

}  // namespace cmrlm
