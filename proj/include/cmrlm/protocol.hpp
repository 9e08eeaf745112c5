#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmrlm/inference.hpp"
#include "cmrlm/landmarks.hpp"
#include "cmrlm/preprocess.hpp"
#include "json.hpp"

namespace cmrlm {

// Wire format: u32 big-endian payload length, then the payload. A payload is a
// u32 big-endian JSON header length, the UTF-8 JSON header, and a raw body.

inline constexpr std::size_t kMaxPayload = 64u << 20;

using Bytes = std::vector<std::uint8_t>;

/// Length-prefixes `payload`; throws ProtocolError above kMaxPayload.
Bytes encode_frame(std::span<const std::uint8_t> payload);

/// Incremental splitter for a byte stream of frames; chunk boundaries are arbitrary.
class FrameDecoder {
 public:
  explicit FrameDecoder(std::size_t max_payload = kMaxPayload) : max_(max_payload) {}
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete payload, if any. Throws ProtocolError on an oversize length.
  std::optional<Bytes> next();
  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  std::size_t max_;
  Bytes buf_;
  std::size_t pos_ = 0;
};

struct Message {
  nlohmann::json header;
  Bytes body;
};

Bytes encode_message(const Message& m);
Message decode_message(std::span<const std::uint8_t> payload);  // ProtocolError

struct InlineFrameRequest {
  std::string series_id;
  int frame_index = 0;
  View view = View::CH4;
  bool last_frame = false;
  Image image;  // pixels travel as little-endian f32

  Message to_message() const;
  static InlineFrameRequest from_message(const Message& m);  // ProtocolError
};

struct InlineFrameResponse {
  std::string series_id;
  int frame_index = 0;
  std::optional<std::string> error;
  LandmarkSet landmarks;  // original frame coordinates
  std::optional<double> lv_length_mm;
  std::optional<SeriesSummary> series;  // on the last frame of a series

  Message to_message() const;
  static InlineFrameResponse from_message(const Message& m);  // ProtocolError
};

/// Landmark set <-> {"view", "frame": {...}, "landmarks": {slot: {x, y} | null}}.
nlohmann::json landmarks_to_json(const LandmarkSet& set);
LandmarkSet landmarks_from_json(const nlohmann::json& j);

}  // namespace cmrlm
