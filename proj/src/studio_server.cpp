#include "chromofit/studio_server.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <zlib.h>

#include "chromofit/errors.hpp"
#include "chromofit/png_io.hpp"

namespace chromofit::studio {

using nlohmann::json;

namespace {

void put16(std::vector<std::uint8_t>& v, std::uint16_t x) {
  v.push_back(static_cast<std::uint8_t>(x & 0xff));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
}

void put32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<std::uint8_t>((x >> (8 * i)) & 0xff));
}

// 1980-01-01 00:00, the DOS epoch.
constexpr std::uint16_t kDosTime = 0;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;

std::string new_session_id() {
  static std::mutex mu;
  static std::random_device rd;
  static std::mt19937_64 rng(rd());
  std::lock_guard lock(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return buf;
}

Roi roi_from(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ParameterError("roi must be [x, y, w, h]");
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ParameterError("roi entries must be integers");
  }
  return Roi{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

GainVector gains_from(const json& j) {
  if (!j.is_object()) throw ParameterError("gains must be an object {h, m, r}");
  auto get = [&](const char* k) {
    if (!j.contains(k)) return 0.0;
    if (!j.at(k).is_number()) throw ParameterError(std::string("gain ") + k + " must be a number");
    return j.at(k).get<double>();
  };
  GainVector g{get("h"), get("m"), get("r")};
  g.validate();
  return g;
}

json parse_body(std::string_view body) {
  json j = json::parse(body.begin(), body.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw std::invalid_argument("body must be a JSON object");
  return j;
}

// Builds the per-request config; sigma is optional and must be positive.
RetouchConfig config_for(const ServerConfig& base, const json& j) {
  RetouchConfig cfg = base.retouch;
  if (j.contains("sigma") && !j.at("sigma").is_null()) {
    if (!j.at("sigma").is_number()) throw ParameterError("sigma must be a number");
    const double s = j.at("sigma").get<double>();
    if (!(s > 0.0) || !std::isfinite(s)) throw ParameterError("sigma must be positive");
    cfg.sigma = s;
  }
  return cfg;
}

Response json_ok(int status, std::string body) { return Response{status, "application/json", std::move(body)}; }

template <class F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& ex) {
    return error_response(400, "bad_request", ex.what());
  } catch (const IoError& ex) {
    return error_response(400, "bad_image", ex.what());
  } catch (const Error& ex) {
    return error_response(422, "invalid_request", ex.what());
  } catch (const json::exception& ex) {
    return error_response(400, "bad_request", ex.what());
  } catch (const std::exception& ex) {
    return error_response(500, "internal", ex.what());
  }
}

}  // namespace

std::vector<std::uint8_t> make_zip(const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& entries) {
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> central;
  for (const auto& [name, data] : entries) {
    if (name.size() > 0xffff || data.size() > 0xffffffffu) throw ParameterError("zip entry too large");
    const auto crc = static_cast<std::uint32_t>(crc32(0L, data.data(), static_cast<uInt>(data.size())));
    const auto size = static_cast<std::uint32_t>(data.size());
    const auto offset = static_cast<std::uint32_t>(out.size());

    put32(out, 0x04034b50);
    put16(out, 20);
    put16(out, 0);
    put16(out, 0);  // stored
    put16(out, kDosTime);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, size);
    put32(out, size);
    put16(out, static_cast<std::uint16_t>(name.size()));
    put16(out, 0);
    out.insert(out.end(), name.begin(), name.end());
    out.insert(out.end(), data.begin(), data.end());

    put32(central, 0x02014b50);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, 0);
    put16(central, kDosTime);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, size);
    put32(central, size);
    put16(central, static_cast<std::uint16_t>(name.size()));
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central.insert(central.end(), name.begin(), name.end());
  }
  const auto cd_offset = static_cast<std::uint32_t>(out.size());
  const auto cd_size = static_cast<std::uint32_t>(central.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, 0x06054b50);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(entries.size()));
  put16(out, static_cast<std::uint16_t>(entries.size()));
  put32(out, cd_size);
  put32(out, cd_offset);
  put16(out, 0);
  return out;
}

Response error_response(int status, std::string_view code, std::string_view message) {
  json j;
  j["error"] = {{"code", std::string(code)}, {"message", std::string(message)}};
  return Response{status, "application/json", j.dump()};
}

StudioService::StudioService(ServerConfig cfg) : cfg_(std::move(cfg)) {}

std::shared_ptr<Session> StudioService::find(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  it->second->last_used = Clock::now();
  return it->second;
}

std::size_t StudioService::session_count() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

std::size_t StudioService::evict_expired(Clock::time_point now) {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_used > cfg_.ttl) {
      it = sessions_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

Response StudioService::create_session(std::string_view png_bytes) {
  if (png_bytes.size() > cfg_.max_upload) {
    return error_response(413, "payload_too_large", "image exceeds the upload limit");
  }
  evict_expired();
  return guarded([&] {
    auto s = std::make_shared<Session>();
    s->image = decode_png(std::span(reinterpret_cast<const std::uint8_t*>(png_bytes.data()), png_bytes.size()));
    s->id = new_session_id();
    s->last_used = Clock::now();
    json j;
    j["id"] = s->id;
    j["width"] = s->image.width;
    j["height"] = s->image.height;
    {
      std::lock_guard lock(mu_);
      sessions_.emplace(s->id, s);
    }
    return json_ok(201, j.dump());
  });
}

Response StudioService::fit(const std::string& id, std::string_view body) {
  evict_expired();
  auto s = find(id);
  if (!s) return error_response(404, "not_found", "unknown session");
  return guarded([&] {
    const json j = parse_body(body);
    if (!j.contains("roi")) throw ParameterError("roi is required");
    const Roi roi = roi_from(j.at("roi"));
    const RetouchConfig cfg = config_for(cfg_, j);
    validate_roi(roi, s->image.width, s->image.height);
    bool cached = false;
    const auto prepared = s->fits.get_or_compute(s->image, roi, cfg_.mixing, cfg, &cached);
    json out = json::parse(fit_report_json(*prepared));
    out["cached"] = cached;
    return json_ok(200, out.dump());
  });
}

Response StudioService::preview(const std::string& id, std::string_view body) {
  evict_expired();
  auto s = find(id);
  if (!s) return error_response(404, "not_found", "unknown session");
  return guarded([&] {
    const json j = parse_body(body);
    if (!j.contains("roi")) throw ParameterError("roi is required");
    const Roi roi = roi_from(j.at("roi"));
    const RetouchConfig cfg = config_for(cfg_, j);
    validate_roi(roi, s->image.width, s->image.height);
    const GainVector g = j.contains("alpha") ? gains_from(j.at("alpha")) : GainVector{};
    const auto prepared = s->fits.find(s->image, roi, cfg_.mixing, cfg);
    if (!prepared) return error_response(409, "not_fitted", "fit this roi before previewing");
    const Roi region = padded_roi(roi, kPreviewContext, s->image.width, s->image.height);
    const auto png = encode_png(render_region(s->image, *prepared, g, cfg_.mixing, cfg, region));
    return Response{200, "image/png", std::string(png.begin(), png.end())};
  });
}

Response StudioService::export_zip(const std::string& id, std::string_view body) {
  evict_expired();
  auto s = find(id);
  if (!s) return error_response(404, "not_found", "unknown session");
  return guarded([&] {
    const json j = parse_body(body);
    if (!j.contains("roi")) throw ParameterError("roi is required");
    const Roi roi = roi_from(j.at("roi"));
    const RetouchConfig cfg = config_for(cfg_, j);
    validate_roi(roi, s->image.width, s->image.height);
    if (!j.contains("schedule") || !j.at("schedule").is_array()) throw ParameterError("schedule must be a list");
    GainSchedule sched;
    for (const auto& g : j.at("schedule")) sched.gains.push_back(gains_from(g));
    if (j.contains("labels")) {
      for (const auto& l : j.at("labels")) sched.labels.push_back(l.get<std::string>());
    }
    sched.validate();
    if (!s->fits.find(s->image, roi, cfg_.mixing, cfg)) {
      return error_response(409, "not_fitted", "fit this roi before exporting");
    }
    const auto frames = simulate_fading(s->image, roi, sched, cfg_.mixing, cfg, &s->fits);
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> entries;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      entries.emplace_back(frame_name(i, frames.size()), encode_png(frames[i].image));
    }
    const std::string report = fade_report_json(roi, sched, frames) + "\n";
    entries.emplace_back("report.json", std::vector<std::uint8_t>(report.begin(), report.end()));
    const auto zip = make_zip(entries);
    return Response{200, "application/zip", std::string(zip.begin(), zip.end())};
  });
}

Response StudioService::healthz() const {
  json j;
  j["status"] = "ok";
  j["sessions"] = session_count();
  return json_ok(200, j.dump());
}

struct StudioServer::Impl {
  StudioService service;
  httplib::Server http;
  std::thread thread;
  int port = 0;

  explicit Impl(ServerConfig cfg) : service(std::move(cfg)) {}
};

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

}  // namespace

StudioServer::StudioServer(ServerConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {
  auto& http = impl_->http;
  auto& svc = impl_->service;
  // Let oversized uploads through to the service, which answers 413 itself.
  http.set_payload_max_length(svc.config().max_upload + (1u << 20));

  http.Post("/session", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.create_session(req.body));
  });
  http.Post(R"(/session/([^/]+)/fit)", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.fit(req.matches[1], req.body));
  });
  http.Post(R"(/session/([^/]+)/preview)", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.preview(req.matches[1], req.body));
  });
  http.Post(R"(/session/([^/]+)/export)", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.export_zip(req.matches[1], req.body));
  });
  http.Get("/healthz", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.healthz()); });

  http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    const char* code = res.status == 404 ? "not_found" : res.status == 413 ? "payload_too_large" : "error";
    const Response r = error_response(res.status, code, httplib::status_message(res.status));
    res.set_content(r.body, r.content_type);
    return httplib::Server::HandlerResponse::Handled;
  });

  const auto& dir = svc.config().static_dir;
  if (!dir.empty() && !http.set_mount_point("/", dir.string())) {
    throw IoError("static directory not found: " + dir.string());
  }
}

StudioServer::~StudioServer() { stop(); }

StudioService& StudioServer::service() { return impl_->service; }

int StudioServer::bind() {
  const auto& cfg = impl_->service.config();
  if (cfg.port == 0) {
    impl_->port = impl_->http.bind_to_any_port(cfg.addr);
  } else {
    impl_->port = impl_->http.bind_to_port(cfg.addr, cfg.port) ? cfg.port : -1;
  }
  if (impl_->port <= 0) {
    throw IoError("cannot bind " + cfg.addr + ":" + std::to_string(cfg.port));
  }
  return impl_->port;
}

void StudioServer::listen() { impl_->http.listen_after_bind(); }

int StudioServer::start() {
  const int port = bind();
  impl_->thread = std::thread([this] { listen(); });
  impl_->http.wait_until_ready();
  return port;
}

void StudioServer::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace chromofit::studio
