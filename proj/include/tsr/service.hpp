#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tsr/infer.hpp"

namespace tsr {

/// Immutable set of generators keyed by id.
class ModelRegistry {
 public:
  /// Throws InferError for a non-generator or a duplicate id.
  void add(const std::string& id, ModelF generator);
  /// Every generator *.tsrw in `dir`; ids are file stems. Files holding other
  /// model kinds (discriminator checkpoints) are skipped.
  static ModelRegistry load_dir(const std::filesystem::path& dir);

  /// nullptr when unknown.
  std::shared_ptr<const ModelUpscaler> find(std::string_view id) const;
  std::vector<std::string> ids() const;
  bool empty() const noexcept { return models_.empty(); }
  /// Used when a request names no model: the first id in sorted order.
  const std::string& default_id() const;

 private:
  std::map<std::string, std::shared_ptr<const ModelUpscaler>, std::less<>> models_;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  /// 0 binds any free port.
  int port = 8080;
  std::size_t max_body_bytes = 32u << 20;
  int worker_threads = 8;
  std::string cors_origin = "*";
};

/// One length-prefixed message on /v1/stream:
///   u32 LE header length | JSON header | u32 LE payload length | payload.
/// Requests carry {"roi": "x,y,w,h", "model": id} (both optional) and a PNG.
/// Responses carry {"index", "model", "infer_ms", "width", "height"} and the
/// SR PNG, or {"index", "error": {"code", "message"}} and no payload.
struct StreamFrame {
  std::string header;
  std::vector<std::uint8_t> payload;
};

inline constexpr std::size_t kMaxStreamHeader = 64u << 10;

std::vector<std::uint8_t> encode_stream_frame(std::string_view header, std::span<const std::uint8_t> payload);

/// Incremental decoder; feed bytes as they arrive, pop complete frames.
class StreamFrameParser {
 public:
  /// Throws std::invalid_argument on an oversized header.
  void feed(std::span<const std::uint8_t> bytes);
  std::optional<StreamFrame> next();
  /// True when no partial frame is buffered.
  bool idle() const noexcept { return buffer_.size() == offset_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t offset_ = 0;
};

/// HTTP front end:
///   GET  /v1/health
///   GET  /v1/models
///   POST /v1/sr?model=&roi=x,y,w,h&tile=&depth=  PNG body -> SR PNG
///   POST /v1/stream                              framed PNGs -> framed SR PNGs
///   POST /v1/eval?period=&id=                    multipart "sr" + "hr" PNGs -> quality report
/// Errors are JSON {"error": {"code", "message"}} with 400, 404 or 413.
class SrService {
 public:
  /// Throws InferError when the registry is empty.
  SrService(ModelRegistry registry, ServiceConfig config);
  ~SrService();
  SrService(const SrService&) = delete;
  SrService& operator=(const SrService&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace tsr
