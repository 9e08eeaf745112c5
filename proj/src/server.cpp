#include "cmrlm/server.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstring>

#include "cmrlm/errors.hpp"

namespace cmrlm {

namespace {

constexpr int kPollMs = 100;

std::string errno_text() { return std::strerror(errno); }

bool write_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    done += static_cast<std::size_t>(n);
  }
  return true;
}

bool send_message(int fd, const Message& m) { return write_all(fd, encode_frame(encode_message(m))); }

}  // namespace

InlineFrameResponse handle_request(const LandmarkDetector& detector, const InlineFrameRequest& request,
                                   std::map<std::string, SeriesTracker>& trackers) {
  InlineFrameResponse r;
  r.series_id = request.series_id;
  r.frame_index = request.frame_index;
  for (float v : request.image.pixels) {
    if (!std::isfinite(v)) throw ConfigError("frame contains non-finite pixels");
  }
  r.landmarks = detector.detect(request.image, request.view);
  r.lv_length_mm = maybe_lv_length(r.landmarks);
  SeriesTracker& tracker = trackers[request.series_id];
  tracker.add(request.frame_index, r.lv_length_mm);
  if (request.last_frame) {
    r.series = tracker.summary();
    trackers.erase(request.series_id);
  }
  return r;
}

InferenceServer::InferenceServer(std::shared_ptr<const LandmarkDetector> detector, std::uint16_t port,
                                 const std::string& host)
    : detector_(std::move(detector)) {
  if (!detector_) throw UsageError("server: no detector");
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoError("socket: " + errno_text());
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw ConfigError("server: bad IPv4 address '" + host + "'");
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
    const std::string why = errno_text();
    ::close(listen_fd_);
    throw IoError("cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

InferenceServer::~InferenceServer() {
  stop();
  std::lock_guard lock(mu_);
  for (auto& t : workers_) {
    if (t.joinable()) t.join();
  }
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

void InferenceServer::run() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&p, 1, kPollMs);
    if (ready < 0 && errno != EINTR) throw IoError("poll: " + errno_text());
    if (ready <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(mu_);
    workers_.emplace_back([this, fd] { serve_connection(fd); });
  }
  std::lock_guard lock(mu_);
  for (auto& t : workers_) {
    if (t.joinable()) t.join();
  }
  workers_.clear();
}

void InferenceServer::serve_connection(int fd) {
  FrameDecoder decoder;
  std::map<std::string, SeriesTracker> trackers;  // confined to this connection
  std::map<std::string, std::chrono::steady_clock::time_point> started;
  std::vector<std::uint8_t> chunk(1 << 16);
  bool open = true;
  while (open && !stopping_) {
    pollfd p{fd, POLLIN, 0};
    const int ready = ::poll(&p, 1, kPollMs);
    if (ready < 0 && errno != EINTR) break;
    if (ready <= 0) continue;
    const ssize_t n = ::recv(fd, chunk.data(), chunk.size(), 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    decoder.feed({chunk.data(), static_cast<std::size_t>(n)});
    try {
      while (auto payload = decoder.next()) {
        const InlineFrameRequest req = InlineFrameRequest::from_message(decode_message(*payload));
        InlineFrameResponse resp;
        started.try_emplace(req.series_id, std::chrono::steady_clock::now());
        try {
          resp = handle_request(*detector_, req, trackers);
        } catch (const Error& e) {
          // A frame that parsed but could not be processed; the stream is still in sync.
          resp.series_id = req.series_id;
          resp.frame_index = req.frame_index;
          resp.error = e.what();
        }
        if (req.last_frame) {
          const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                      started[req.series_id])
                                .count();
          started.erase(req.series_id);
          if (log_) {
            char line[256];
            std::snprintf(line, sizeof line, "series %s: %d frames in %.1f ms", req.series_id.c_str(),
                          resp.series ? resp.series->frames : 0, ms);
            log_(line);
          }
        }
        if (!send_message(fd, resp.to_message())) {
          open = false;
          break;
        }
      }
    } catch (const ProtocolError& e) {
      InlineFrameResponse bad;
      bad.frame_index = -1;
      bad.error = std::string("protocol error: ") + e.what();
      send_message(fd, bad.to_message());
      open = false;
    }
  }
  ::close(fd);
}

InferenceClient::InferenceClient(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) {
    throw IoError("cannot resolve " + host);
  }
  fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  const bool ok = fd_ >= 0 && ::connect(fd_, res->ai_addr, res->ai_addrlen) == 0;
  ::freeaddrinfo(res);
  if (!ok) {
    const std::string why = errno_text();
    if (fd_ >= 0) ::close(fd_);
    throw IoError("cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
  }
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

InferenceClient::~InferenceClient() {
  if (fd_ >= 0) ::close(fd_);
}

void InferenceClient::send_raw(std::span<const std::uint8_t> bytes) {
  if (!write_all(fd_, bytes)) throw IoError("send failed: " + errno_text());
}

void InferenceClient::send(const InlineFrameRequest& request) {
  send_raw(encode_frame(encode_message(request.to_message())));
}

InlineFrameResponse InferenceClient::receive() {
  std::vector<std::uint8_t> chunk(1 << 16);
  for (;;) {
    if (auto payload = decoder_.next()) return InlineFrameResponse::from_message(decode_message(*payload));
    const ssize_t n = ::recv(fd_, chunk.data(), chunk.size(), 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw IoError("server closed the connection");
    decoder_.feed({chunk.data(), static_cast<std::size_t>(n)});
  }
}

}  // namespace cmrlm
