#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "chromofit/cli.hpp"
#include "chromofit/errors.hpp"
#include "chromofit/png_io.hpp"
#include "chromofit/studio_server.hpp"
#include "fixtures.hpp"

// after Eigen: <resolv.h> defines _res
#include <httplib.h>

using namespace chromofit;
using namespace chromofit::studio;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Bitwise reflected CRC-32 (poly 0xEDB88320), independent of zlib.
std::uint32_t crc32_bitwise(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int b = 0; b < 8; ++b) c = (c >> 1) ^ (0xedb88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t le32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[at + i]);
  return v;
}
std::uint16_t le16(const std::string& s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<std::uint8_t>(s[at]) | (static_cast<std::uint8_t>(s[at + 1]) << 8));
}

struct ZipEntry {
  std::string name;
  std::string data;
  std::uint32_t crc;
};

// Walks the local headers of a stored-only archive and checks the end record.
std::vector<ZipEntry> read_zip(const std::string& z) {
  std::vector<ZipEntry> out;
  std::size_t at = 0;
  while (at + 4 <= z.size() && le32(z, at) == 0x04034b50u) {
    REQUIRE(le16(z, at + 8) == 0);
    const std::uint32_t crc = le32(z, at + 14);
    const std::uint32_t csize = le32(z, at + 18);
    REQUIRE(csize == le32(z, at + 22));
    const std::uint16_t nlen = le16(z, at + 26), xlen = le16(z, at + 28);
    const std::size_t data_at = at + 30 + nlen + xlen;
    out.push_back({z.substr(at + 30, nlen), z.substr(data_at, csize), crc});
    at = data_at + csize;
  }
  REQUIRE(z.size() >= 22);
  const std::size_t eocd = z.size() - 22;
  REQUIRE(le32(z, eocd) == 0x06054b50u);
  CHECK(le16(z, eocd + 10) == out.size());
  CHECK(le32(z, eocd + 16) == at);
  return out;
}

std::string png_string(const RgbImage8& img) {
  const auto b = encode_png(img);
  return {b.begin(), b.end()};
}

RgbImage8 decode(const std::string& s) {
  return decode_png(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

RgbImage8 fixture(std::uint64_t seed, double mx = 58.0, double my = 52.0) {
  testing::SceneSpec s;
  s.width = 112;
  s.height = 104;
  s.seed = seed;
  s.skin = Eigen::Vector3d(0.3 + 0.02 * static_cast<double>(seed % 5), 1.7, 0.1);
  s.blemishes.push_back({kChanM, 0.8, mx, my, 8.0, 6.0, 0.3});
  return testing::render_scene(s);
}

const json kRoiJson = json::array({26, 20, 64, 64});
const Roi kRoi{26, 20, 64, 64};

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("chromofit_srv_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "chromofit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return chromofit::cli::main_entry(static_cast<int>(argv.size()), argv.data(), out, err);
}

std::string session_of(StudioService& svc, const RgbImage8& img) {
  const Response r = svc.create_session(png_string(img));
  REQUIRE(r.status == 201);
  return json::parse(r.body).at("id").get<std::string>();
}

std::string error_code(const std::string& body) { return json::parse(body).at("error").at("code"); }

}  // namespace

TEST_CASE("zip writer against an independent reader") {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> entries;
  entries.emplace_back("empty.bin", std::vector<std::uint8_t>{});
  entries.emplace_back("abc.txt", std::vector<std::uint8_t>{'a', 'b', 'c'});
  std::vector<std::uint8_t> big(70000);
  std::mt19937 rng(5);
  for (auto& b : big) b = static_cast<std::uint8_t>(rng());
  entries.emplace_back("dir/big.bin", big);

  const auto zb = make_zip(entries);
  const std::string z(zb.begin(), zb.end());
  const auto got = read_zip(z);
  REQUIRE(got.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(got[i].name == entries[i].first);
    CHECK(got[i].data == std::string(entries[i].second.begin(), entries[i].second.end()));
    CHECK(got[i].crc == crc32_bitwise(entries[i].second.data(), entries[i].second.size()));
  }
  CHECK(crc32_bitwise(reinterpret_cast<const std::uint8_t*>("123456789"), 9) == 0xcbf43926u);
  CHECK(make_zip(entries) == zb);
}

TEST_CASE("service: session lifecycle and errors") {
  ServerConfig cfg;
  cfg.max_upload = 1 << 16;
  StudioService svc(cfg);

  CHECK(svc.create_session("not a png").status == 400);
  CHECK(svc.create_session(std::string(cfg.max_upload + 1, 'x')).status == 413);
  CHECK(svc.session_count() == 0);

  const std::string id = session_of(svc, fixture(1));
  CHECK(id.size() == 32);
  CHECK(svc.session_count() == 1);

  const std::string roi_body = json{{"roi", kRoiJson}}.dump();
  CHECK(svc.fit("nope", roi_body).status == 404);
  CHECK(error_code(svc.fit("nope", roi_body).body) == "not_found");
  CHECK(svc.fit(id, "{").status == 400);
  CHECK(svc.fit(id, R"({"roi":[100,100,64,64]})").status == 422);
  CHECK(svc.fit(id, R"({"roi":[0,0,64]})").status == 422);
  CHECK(svc.fit(id, R"({"roi":[26,20,64,64],"sigma":-1})").status == 422);

  const json preview_body{{"roi", kRoiJson}, {"alpha", {{"m", -1.0}}}};
  const Response early = svc.preview(id, preview_body.dump());
  CHECK(early.status == 409);
  CHECK(error_code(early.body) == "not_fitted");

  const Response f1 = svc.fit(id, roi_body);
  REQUIRE(f1.status == 200);
  const json fj = json::parse(f1.body);
  CHECK(fj.at("cached") == false);
  CHECK(fj.at("schema") == 1);
  CHECK(json::parse(svc.fit(id, roi_body).body).at("cached") == true);

  const Response pv = svc.preview(id, preview_body.dump());
  REQUIRE(pv.status == 200);
  CHECK(pv.content_type == "image/png");
  const RgbImage8 img = decode(pv.body);
  const Roi region = padded_roi(kRoi, kPreviewContext, 112, 104);
  CHECK(img.width == region.w);
  CHECK(img.height == region.h);

  CHECK(svc.preview(id, json{{"roi", kRoiJson}, {"alpha", {{"m", 9.0}}}}.dump()).status == 422);
  CHECK(svc.export_zip(id, json{{"roi", kRoiJson}, {"schedule", json::array()}}.dump()).status == 422);
  CHECK(svc.export_zip(id, json{{"roi", kRoiJson}, {"schedule", json::array({{{"m", 0}}})}, {"labels", {"a", "b"}}}
                               .dump())
            .status == 422);

  CHECK(json::parse(svc.healthz().body).at("status") == "ok");

  CHECK(svc.evict_expired(StudioService::Clock::now()) == 0);
  CHECK(svc.evict_expired(StudioService::Clock::now() + cfg.ttl + std::chrono::seconds(1)) == 1);
  CHECK(svc.fit(id, roi_body).status == 404);
}

TEST_CASE("service: sessions are isolated") {
  StudioService svc;
  const RgbImage8 a = fixture(1, 58, 52);
  const RgbImage8 b = fixture(2, 50, 60);
  const std::string ia = session_of(svc, a);
  const std::string ib = session_of(svc, b);
  CHECK(ia != ib);

  const std::string roi_body = json{{"roi", kRoiJson}}.dump();
  REQUIRE(svc.fit(ia, roi_body).status == 200);
  // a fit in one session does not unlock previews in another
  const json pbody{{"roi", kRoiJson}, {"alpha", {{"m", -1.0}}}};
  CHECK(svc.preview(ib, pbody.dump()).status == 409);
  REQUIRE(svc.fit(ib, roi_body).status == 200);

  const Roi region = padded_roi(kRoi, kPreviewContext, 112, 104);
  const GainVector g{0, -1, 0};
  for (const auto& [id, img] : {std::pair{ia, a}, std::pair{ib, b}}) {
    const RgbImage8 expect = crop(retouch_roi(img, kRoi, g, default_mixing_matrix()).image, region);
    CHECK(decode(svc.preview(id, pbody.dump()).body).data == expect.data);
  }
}

TEST_CASE("service: export matches the fading simulation") {
  StudioService svc;
  const RgbImage8 img = fixture(3);
  const std::string id = session_of(svc, img);
  const json sched = json::array({{{"m", 0.0}}, {{"m", -0.5}}, {{"h", 0.25}, {"m", -1.0}}});
  const json body{{"roi", kRoiJson}, {"schedule", sched}, {"labels", {"now", "mid", "end"}}};
  CHECK(svc.export_zip(id, body.dump()).status == 409);
  REQUIRE(svc.fit(id, json{{"roi", kRoiJson}}.dump()).status == 200);

  const Response r = svc.export_zip(id, body.dump());
  REQUIRE(r.status == 200);
  CHECK(r.content_type == "application/zip");
  const auto entries = read_zip(r.body);
  REQUIRE(entries.size() == 4);

  GainSchedule gs;
  gs.gains = {{0, 0, 0}, {0, -0.5, 0}, {0.25, -1.0, 0}};
  gs.labels = {"now", "mid", "end"};
  const auto frames = simulate_fading(img, kRoi, gs, default_mixing_matrix());
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(entries[i].name == frame_name(i, 3));
    CHECK(entries[i].data == png_string(frames[i].image));
    CHECK(entries[i].crc == crc32_bitwise(reinterpret_cast<const std::uint8_t*>(entries[i].data.data()),
                                          entries[i].data.size()));
  }
  CHECK(entries[0].data == png_string(img));
  CHECK(entries[3].name == "report.json");
  const json rep = json::parse(entries[3].data);
  CHECK(rep.at("frames").size() == 3);
  CHECK(rep.at("frames")[2].at("label") == "end");
  CHECK(svc.export_zip(id, body.dump()).body == r.body);
}

TEST_CASE("service: concurrent fits compute once") {
  StudioService svc;
  const std::string id = session_of(svc, fixture(4));
  const std::string body = json{{"roi", kRoiJson}}.dump();
  std::atomic<int> fresh{0}, ok{0};
  std::vector<std::thread> ts;
  for (int i = 0; i < 6; ++i) {
    ts.emplace_back([&] {
      const Response r = svc.fit(id, body);
      if (r.status == 200) {
        ++ok;
        if (!json::parse(r.body).at("cached").get<bool>()) ++fresh;
      }
    });
  }
  for (auto& t : ts) t.join();
  CHECK(ok == 6);
  CHECK(fresh == 1);
}

TEST_CASE("http: routes, errors, static files and CLI equivalence") {
  ServerConfig cfg;
  cfg.port = 0;
  cfg.static_dir = CHROMOFIT_WEB_DIR;
  StudioServer server(cfg);
  const int port = server.start();
  REQUIRE(port > 0);
  httplib::Client c("127.0.0.1", port);
  c.set_read_timeout(120, 0);

  auto health = c.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);

  auto root = c.Get("/");
  REQUIRE(root);
  CHECK(root->status == 200);
  CHECK(root->body.find("<html") != std::string::npos);

  auto missing = c.Get("/no/such/thing");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(error_code(missing->body) == "not_found");

  auto big = c.Post("/session", std::string(kMaxUploadBytes + 1, 'x'), "image/png");
  REQUIRE(big);
  CHECK(big->status == 413);
  CHECK(error_code(big->body) == "payload_too_large");

  auto bad = c.Post("/session", "garbage", "image/png");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  TempDir tmp;
  const std::string roi_arg = "26,20,64,64";
  for (std::uint64_t seed : {11u, 12u}) {
    const RgbImage8 img = fixture(seed, 54.0 + static_cast<double>(seed % 3), 50.0);
    const std::string in = tmp / ("in" + std::to_string(seed) + ".png");
    write_png(in, img);

    auto s = c.Post("/session", png_string(img), "image/png");
    REQUIRE(s);
    REQUIRE(s->status == 201);
    const std::string id = json::parse(s->body).at("id");

    auto nf = c.Post("/session/" + id + "/preview", json{{"roi", kRoiJson}}.dump(), "application/json");
    REQUIRE(nf);
    CHECK(nf->status == 409);

    auto f = c.Post("/session/" + id + "/fit", json{{"roi", kRoiJson}}.dump(), "application/json");
    REQUIRE(f);
    REQUIRE(f->status == 200);

    const std::string out = tmp / ("out" + std::to_string(seed) + ".png");
    REQUIRE(run_cli({"retouch", "--in", in, "--out", out, "--roi", roi_arg, "--alpha-m", "-0.75", "--alpha-h", "0.1"}) ==
            0);
    const json pb{{"roi", kRoiJson}, {"alpha", {{"h", 0.1}, {"m", -0.75}}}};
    auto p = c.Post("/session/" + id + "/preview", pb.dump(), "application/json");
    REQUIRE(p);
    REQUIRE(p->status == 200);
    CHECK(p->get_header_value("Content-Type") == "image/png");
    const Roi region = padded_roi(kRoi, kPreviewContext, img.width, img.height);
    CHECK(decode(p->body).data == crop(read_png(out), region).data);

    const std::string fade_dir = tmp / ("fade" + std::to_string(seed));
    REQUIRE(run_cli({"fade", "--in", in, "--out", fade_dir, "--roi", roi_arg, "--schedule", "0,-0.5,-1"}) == 0);
    const json eb{{"roi", kRoiJson}, {"schedule", json::array({{{"m", 0}}, {{"m", -0.5}}, {{"m", -1}}})}};
    auto e = c.Post("/session/" + id + "/export", eb.dump(), "application/json");
    REQUIRE(e);
    REQUIRE(e->status == 200);
    const auto entries = read_zip(e->body);
    REQUIRE(entries.size() == 4);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto bytes = read_file(fs::path(fade_dir) / frame_name(i, 3));
      CHECK(entries[i].data == std::string(bytes.begin(), bytes.end()));
    }
  }

  auto gone = c.Post("/session/ffff/fit", json{{"roi", kRoiJson}}.dump(), "application/json");
  REQUIRE(gone);
  CHECK(gone->status == 404);
  server.stop();
}
