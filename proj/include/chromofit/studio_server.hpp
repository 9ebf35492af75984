#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "chromofit/chromophore.hpp"
#include "chromofit/pixelcore.hpp"
#include "chromofit/retouch.hpp"

namespace chromofit::studio {

inline constexpr std::size_t kMaxUploadBytes = 32u << 20;
inline constexpr int kPreviewContext = 16;

struct ServerConfig {
  std::string addr = "127.0.0.1";
  int port = 8080;
  std::filesystem::path static_dir;  // empty: no static mount
  std::chrono::seconds ttl{30 * 60};
  std::size_t max_upload = kMaxUploadBytes;
  RetouchConfig retouch;
  MixingMatrix mixing = default_mixing_matrix();
};

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Stored zip archive (no compression) with fixed timestamps, so identical
/// inputs give identical bytes.
std::vector<std::uint8_t> make_zip(const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& entries);

struct Session {
  std::string id;
  RgbImage8 image;  // never modified after creation
  FitCache fits;
  std::chrono::steady_clock::time_point last_used;
};

/// HTTP-independent request handling; every method is safe to call
/// concurrently. Bodies are the JSON documents of the HTTP API.
class StudioService {
 public:
  using Clock = std::chrono::steady_clock;

  explicit StudioService(ServerConfig cfg = {});

  Response create_session(std::string_view png_bytes);
  Response fit(const std::string& id, std::string_view body);
  Response preview(const std::string& id, std::string_view body);
  Response export_zip(const std::string& id, std::string_view body);
  Response healthz() const;

  std::size_t session_count() const;
  /// Drops sessions idle for longer than the TTL; returns how many.
  std::size_t evict_expired(Clock::time_point now = Clock::now());
  const ServerConfig& config() const { return cfg_; }

 private:
  std::shared_ptr<Session> find(const std::string& id);

  ServerConfig cfg_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
};

Response error_response(int status, std::string_view code, std::string_view message);

/// Owns an HTTP server bound to cfg.addr:cfg.port (port 0 picks a free one)
/// that dispatches to a StudioService.
class StudioServer {
 public:
  explicit StudioServer(ServerConfig cfg);
  ~StudioServer();
  StudioServer(const StudioServer&) = delete;
  StudioServer& operator=(const StudioServer&) = delete;

  /// Binds; throws IoError on failure. Returns the bound port.
  int bind();
  /// Serves until stop(); blocking.
  void listen();
  /// bind() plus listen() on a background thread.
  int start();
  void stop();

  StudioService& service();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace chromofit::studio
