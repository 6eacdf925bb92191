#include "tsr/service.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstring>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "tsr/metrics.hpp"
#include "tsr/png_io.hpp"
#include "tsr/weights.hpp"

namespace tsr {

namespace {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string ms_str(double ms) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", ms);
  return buf;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

/// A request failure with its HTTP status and error code.
struct RequestError {
  int status;
  std::string code;
  std::string message;
};

json error_body(const std::string& code, const std::string& message) {
  return json{{"error", {{"code", code}, {"message", message}}}};
}

void send_error(httplib::Response& res, const RequestError& e) {
  res.status = e.status;
  res.set_content(error_body(e.code, e.message).dump(), "application/json");
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

ImageBuffer decode_or_400(std::span<const std::uint8_t> bytes) {
  try {
    return decode_png(bytes);
  } catch (const ImageIoError& e) {
    throw RequestError{400, "bad_image", e.what()};
  }
}

std::optional<Roi> parse_roi_or_400(const std::string& text) {
  if (text.empty()) return std::nullopt;
  try {
    return parse_roi(text);
  } catch (const std::invalid_argument& e) {
    throw RequestError{400, "bad_roi", e.what()};
  }
}

int int_param(const httplib::Request& req, const std::string& key, int fallback) {
  if (!req.has_param(key)) return fallback;
  const auto text = req.get_param_value(key);
  int v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || p != text.data() + text.size()) {
    throw RequestError{400, "bad_parameter", key + " must be an integer"};
  }
  return v;
}

struct SrOutcome {
  ImageBuffer image;
  double infer_ms = 0.0;
};

/// Crop (when an roi is given), then sr_patch or tiled sr_image.
SrOutcome run_sr(const ModelUpscaler& up, const ImageBuffer& image, const std::optional<Roi>& roi, int tile) {
  if (roi && !image.contains(*roi)) {
    throw RequestError{400, "roi_out_of_bounds",
                       "roi exceeds " + std::to_string(image.width()) + "x" + std::to_string(image.height()) + " image"};
  }
  try {
    const ImageBuffer input = roi ? image.crop(*roi) : image;
    const auto start = Clock::now();
    SrOutcome out;
    out.image = tile > 0 ? sr_image(up, input, tile) : up.upscale(input);
    out.infer_ms = ms_since(start);
    return out;
  } catch (const std::invalid_argument& e) {
    throw RequestError{400, "bad_request", e.what()};
  }
}

}  // namespace

void ModelRegistry::add(const std::string& id, ModelF generator) {
  if (id.empty()) throw InferError("model id must not be empty");
  if (models_.contains(id)) throw InferError("duplicate model id '" + id + "'");
  models_.emplace(id, std::make_shared<const ModelUpscaler>(id, std::make_shared<const ModelF>(std::move(generator))));
}

ModelRegistry ModelRegistry::load_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::directory_iterator it(dir, ec);
  if (ec) throw WeightFileError(WeightFileError::Kind::kIo, dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : it) {
    if (entry.is_regular_file() && entry.path().extension() == ".tsrw") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  ModelRegistry registry;
  for (const auto& f : files) {
    auto model = load_weights(f);
    if (std::holds_alternative<GeneratorSpec>(model.spec())) registry.add(f.stem().string(), std::move(model));
  }
  return registry;
}

std::shared_ptr<const ModelUpscaler> ModelRegistry::find(std::string_view id) const {
  const auto it = models_.find(id);
  return it == models_.end() ? nullptr : it->second;
}

std::vector<std::string> ModelRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : models_) out.push_back(id);
  return out;
}

const std::string& ModelRegistry::default_id() const {
  if (models_.empty()) throw InferError("no models loaded");
  return models_.begin()->first;
}

std::vector<std::uint8_t> encode_stream_frame(std::string_view header, std::span<const std::uint8_t> payload) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + header.size() + payload.size());
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

void StreamFrameParser::feed(std::span<const std::uint8_t> bytes) {
  if (offset_ > 0 && offset_ == buffer_.size()) {
    buffer_.clear();
    offset_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
  if (buffer_.size() - offset_ >= 4 && get_u32(buffer_.data() + offset_) > kMaxStreamHeader) {
    throw std::invalid_argument("stream frame header exceeds " + std::to_string(kMaxStreamHeader) + " bytes");
  }
}

std::optional<StreamFrame> StreamFrameParser::next() {
  const std::size_t avail = buffer_.size() - offset_;
  if (avail < 4) return std::nullopt;
  const std::uint8_t* p = buffer_.data() + offset_;
  const std::size_t header_len = get_u32(p);
  if (header_len > kMaxStreamHeader) {
    throw std::invalid_argument("stream frame header exceeds " + std::to_string(kMaxStreamHeader) + " bytes");
  }
  if (avail < 8 + header_len) return std::nullopt;
  const std::size_t payload_len = get_u32(p + 4 + header_len);
  if (avail < 8 + header_len + payload_len) return std::nullopt;
  StreamFrame frame;
  frame.header.assign(reinterpret_cast<const char*>(p + 4), header_len);
  frame.payload.assign(p + 8 + header_len, p + 8 + header_len + payload_len);
  offset_ += 8 + header_len + payload_len;
  return frame;
}

struct SrService::Impl {
  ModelRegistry registry;
  ServiceConfig config;
  httplib::Server server;
  std::thread listener;
  int bound_port = 0;
  std::mutex lifecycle;

  Impl(ModelRegistry r, ServiceConfig c) : registry(std::move(r)), config(std::move(c)) {
    const int threads = std::max(1, config.worker_threads);
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    server.set_payload_max_length(config.max_body_bytes);
    routes();
  }

  std::shared_ptr<const ModelUpscaler> model_for(const std::string& id) const {
    const auto& key = id.empty() ? registry.default_id() : id;
    auto up = registry.find(key);
    if (!up) throw RequestError{404, "unknown_model", "no model with id '" + key + "'"};
    return up;
  }

  template <typename F>
  static void guarded(httplib::Response& res, F&& body) {
    try {
      body();
    } catch (const RequestError& e) {
      send_error(res, e);
    }
  }

  void routes() {
    server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", config.cors_origin);
      res.set_header("Access-Control-Expose-Headers", "X-Infer-Ms, X-Total-Ms, X-Model-Id, X-Scale");
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      const std::string code = res.status == 413 ? "payload_too_large" : res.status == 404 ? "not_found" : "error";
      res.set_content(error_body(code, httplib::status_message(res.status)).dump(), "application/json");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      res.status = 500;
      res.set_content(error_body("internal", what).dump(), "application/json");
    });

    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"status", "ok"}, {"models", registry.ids().size()}}.dump(), "application/json");
    });

    server.Get("/v1/models", [this](const httplib::Request&, httplib::Response& res) {
      json list = json::array();
      for (const auto& id : registry.ids()) {
        const auto up = registry.find(id);
        const auto& spec = std::get<GeneratorSpec>(up->model().spec());
        list.push_back({{"id", id},
                        {"scale", spec.scale},
                        {"upsampler", std::string(to_string(spec.upsampler))},
                        {"use_bn", spec.use_bn},
                        {"base_channels", spec.base_channels},
                        {"n_res_blocks", spec.n_res_blocks},
                        {"parameters", parameter_count(up->model())}});
      }
      res.set_content(json{{"models", list}}.dump(), "application/json");
    });

    server.Post("/v1/sr", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto start = Clock::now();
        const auto up = model_for(req.get_param_value("model"));
        const auto roi = parse_roi_or_400(req.get_param_value("roi"));
        const int tile = int_param(req, "tile", 0);
        const int depth = int_param(req, "depth", 8);
        if (depth != 8 && depth != 16) throw RequestError{400, "bad_parameter", "depth must be 8 or 16"};
        const auto image = decode_or_400(as_bytes(req.body));
        const auto out = run_sr(*up, image, roi, tile);
        const auto png = encode_png(out.image, depth);
        res.set_content(std::string(png.begin(), png.end()), "image/png");
        res.set_header("X-Model-Id", up->label());
        res.set_header("X-Scale", std::to_string(up->scale()));
        res.set_header("X-Infer-Ms", ms_str(out.infer_ms));
        res.set_header("X-Total-Ms", ms_str(ms_since(start)));
      });
    });

    server.Post("/v1/stream", [this](const httplib::Request& req, httplib::Response& res,
                                     const httplib::ContentReader& reader) {
      guarded(res, [&] {
        const auto up_default = req.get_param_value("model");
        auto frames = std::make_shared<std::vector<StreamFrame>>();
        StreamFrameParser parser;
        try {
          reader([&](const char* data, std::size_t n) {
            parser.feed({reinterpret_cast<const std::uint8_t*>(data), n});
            while (auto f = parser.next()) frames->push_back(std::move(*f));
            return true;
          });
        } catch (const std::invalid_argument& e) {
          throw RequestError{400, "bad_frame", e.what()};
        }
        if (!parser.idle()) throw RequestError{400, "bad_frame", "stream ends inside a frame"};
        // Results are produced one frame at a time as the client reads them.
        auto next = std::make_shared<std::size_t>(0);
        res.set_chunked_content_provider(
            "application/octet-stream",
            [this, frames, next, up_default](std::size_t, httplib::DataSink& sink) {
              if (*next == frames->size()) {
                sink.done();
                return true;
              }
              const std::size_t index = (*next)++;
              const auto bytes = process_frame((*frames)[index], index, up_default);
              return sink.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
            });
      });
    });

    server.Post("/v1/eval", [](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.is_multipart_form_data() || !req.has_file("sr") || !req.has_file("hr")) {
          throw RequestError{400, "bad_request", "expected multipart fields 'sr' and 'hr'"};
        }
        const auto sr = decode_or_400(as_bytes(req.get_file_value("sr").content));
        const auto hr = decode_or_400(as_bytes(req.get_file_value("hr").content));
        const int period = int_param(req, "period", 4);
        try {
          const auto report = evaluate(sr, hr, period, req.get_param_value("id"));
          res.set_content(to_json_line(report), "application/json");
        } catch (const std::invalid_argument& e) {
          throw RequestError{400, "bad_request", e.what()};
        }
      });
    });
  }

  std::vector<std::uint8_t> process_frame(const StreamFrame& frame, std::size_t index,
                                          const std::string& default_model) const {
    try {
      json header;
      try {
        header = frame.header.empty() ? json::object() : json::parse(frame.header);
      } catch (const json::exception& e) {
        throw RequestError{400, "bad_frame", e.what()};
      }
      if (!header.is_object()) throw RequestError{400, "bad_frame", "frame header must be an object"};
      const auto up = model_for(header.value("model", default_model));
      const auto roi = parse_roi_or_400(header.value("roi", std::string{}));
      const auto image = decode_or_400(frame.payload);
      const auto out = run_sr(*up, image, roi, 0);
      const auto png = encode_png(out.image);
      const json reply{{"index", index},
                       {"model", up->label()},
                       {"infer_ms", out.infer_ms},
                       {"width", out.image.width()},
                       {"height", out.image.height()}};
      return encode_stream_frame(reply.dump(), png);
    } catch (const RequestError& e) {
      json reply = error_body(e.code, e.message);
      reply["index"] = index;
      return encode_stream_frame(reply.dump(), {});
    }
  }
};

SrService::SrService(ModelRegistry registry, ServiceConfig config) {
  if (registry.empty()) throw InferError("service needs at least one generator model");
  impl_ = std::make_unique<Impl>(std::move(registry), std::move(config));
}

SrService::~SrService() {
  if (impl_) stop();
}

int SrService::start() {
  std::lock_guard lock(impl_->lifecycle);
  if (impl_->listener.joinable()) return impl_->bound_port;
  auto& s = impl_->server;
  if (impl_->config.port == 0) {
    impl_->bound_port = s.bind_to_any_port(impl_->config.host);
  } else {
    impl_->bound_port = s.bind_to_port(impl_->config.host, impl_->config.port) ? impl_->config.port : -1;
  }
  if (impl_->bound_port <= 0) {
    throw std::runtime_error("cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  }
  impl_->listener = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return impl_->bound_port;
}

void SrService::run() {
  const auto& c = impl_->config;
  if (!impl_->server.listen(c.host, c.port)) {
    throw std::runtime_error("cannot listen on " + c.host + ":" + std::to_string(c.port));
  }
}

void SrService::stop() {
  std::lock_guard lock(impl_->lifecycle);
  impl_->server.stop();
  if (impl_->listener.joinable()) impl_->listener.join();
}

int SrService::port() const noexcept { return impl_->bound_port; }

}  // namespace tsr
