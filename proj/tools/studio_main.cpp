#include <csignal>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "chromofit/errors.hpp"
#include "chromofit/studio_server.hpp"

namespace {
chromofit::studio::StudioServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int main(int argc, char** argv) {
  chromofit::studio::ServerConfig cfg;
  int ttl_minutes = 30;
  std::string static_dir = CHROMOFIT_WEB_DIR;

  CLI::App app{"chromofit studio server"};
  app.add_option("--addr", cfg.addr, "Bind address")->capture_default_str();
  app.add_option("--port", cfg.port, "Port (0 picks a free one)")->capture_default_str()->check(CLI::Range(0, 65535));
  auto* static_opt = app.add_option("--static", static_dir, "Directory served at /")->capture_default_str();
  app.add_option("--ttl", ttl_minutes, "Idle session lifetime in minutes")->capture_default_str()->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  // The bundled placeholder is optional; an explicit --static must exist.
  if (static_opt->count() > 0 || std::filesystem::is_directory(static_dir)) cfg.static_dir = static_dir;
  cfg.ttl = std::chrono::minutes(ttl_minutes);
  try {
    chromofit::studio::StudioServer server(cfg);
    const int port = server.bind();
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "listening on http://" << cfg.addr << ":" << port << std::endl;
    server.listen();
    g_server = nullptr;
  } catch (const chromofit::Error& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 3;
  }
  return 0;
}
