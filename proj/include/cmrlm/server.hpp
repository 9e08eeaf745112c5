#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cmrlm/inference.hpp"
#include "cmrlm/protocol.hpp"

namespace cmrlm {

/// Blocking TCP inference server. Each connection gets its own thread and its
/// own series trackers; the detector is shared read-only.
class InferenceServer {
 public:
  /// Port 0 picks an ephemeral port; see port().
  InferenceServer(std::shared_ptr<const LandmarkDetector> detector, std::uint16_t port,
                  const std::string& host = "127.0.0.1");
  ~InferenceServer();
  InferenceServer(const InferenceServer&) = delete;
  InferenceServer& operator=(const InferenceServer&) = delete;

  std::uint16_t port() const { return port_; }
  /// Accepts connections until stop(); joins connection threads before returning.
  void run();
  /// Safe to call from any thread or a signal-driven watcher.
  void stop() { stopping_ = true; }
  /// Receives one line per completed series (frame count and wall time). Set before run().
  void set_log(std::function<void(const std::string&)> log) { log_ = std::move(log); }

 private:
  void serve_connection(int fd);

  std::shared_ptr<const LandmarkDetector> detector_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::vector<std::thread> workers_;
  std::function<void(const std::string&)> log_;
};

/// Handles one request the way a server connection does (exposed for tests).
InlineFrameResponse handle_request(const LandmarkDetector& detector, const InlineFrameRequest& request,
                                   std::map<std::string, SeriesTracker>& trackers);

class InferenceClient {
 public:
  InferenceClient(const std::string& host, std::uint16_t port);  // IoError
  ~InferenceClient();
  InferenceClient(const InferenceClient&) = delete;
  InferenceClient& operator=(const InferenceClient&) = delete;

  void send_raw(std::span<const std::uint8_t> bytes);
  void send(const InlineFrameRequest& request);
  /// Blocks for the next response; throws IoError when the server closed the connection.
  InlineFrameResponse receive();
  InlineFrameResponse call(const InlineFrameRequest& request) {
    send(request);
    return receive();
  }

 private:
  int fd_ = -1;
  FrameDecoder decoder_;
};

}  // namespace cmrlm
