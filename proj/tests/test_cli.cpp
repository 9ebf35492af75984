#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "chromofit/cli.hpp"
#include "chromofit/errors.hpp"
#include "chromofit/png_io.hpp"
#include "fixtures.hpp"

using namespace chromofit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("chromofit_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "chromofit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = chromofit::cli::main_entry(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::uint8_t> bytes_of(const std::string& p) { return read_file(p); }

nlohmann::json json_of(const std::string& p) {
  std::ifstream f(p);
  return nlohmann::json::parse(f);
}

void write_fixture(const std::string& path) {
  testing::SceneSpec s;
  s.width = 112;
  s.height = 104;
  s.blemishes.push_back({kChanM, 0.8, 58.0, 52.0, 8.0, 6.0, 0.3});
  write_png(path, testing::render_scene(s));
}

const char* kRoi = "26,20,64,64";

}  // namespace

TEST_CASE("argument helpers") {
  const GainSchedule s = cli::parse_schedule("0,-0.25,0.5:-1:0");
  REQUIRE(s.gains.size() == 3);
  CHECK(s.gains[1] == GainVector{0, -0.25, 0});
  CHECK(s.gains[2] == GainVector{0.5, -1, 0});
  CHECK(cli::parse_schedule("").gains.empty());
  CHECK_THROWS_AS(cli::parse_schedule("1:2"), ParameterError);
  CHECK_THROWS_AS(cli::parse_schedule("x"), ParameterError);
  CHECK(cli::parse_list("-1, 0,1.5") == std::vector<double>{-1.0, 0.0, 1.5});
  CHECK(cli::sidecar_path("out/b.png") == fs::path("out/b.retouch.json"));
  CHECK(cli::sidecar_path("b") == fs::path("b.retouch.json"));

  const RetouchConfig c = cli::config_from_json(R"({"sigma":3.5,"fit":{"max_gaussians":2,"lm":{"max_iter":50}}})");
  CHECK(c.sigma == 3.5);
  CHECK(c.fit.max_gaussians == 2);
  CHECK(c.fit.lm.max_iter == 50);
  CHECK(c.fit.rel_tol == FitConfig{}.rel_tol);
  CHECK_THROWS_AS(cli::config_from_json("[1]"), ParameterError);
  CHECK_THROWS_AS(cli::config_from_json("{bad"), ParameterError);
  CHECK_THROWS_AS(cli::config_from_json(R"({"reflectance_floor":2})"), ParameterError);
}

TEST_CASE("retouch writes image and sidecar") {
  TempDir dir;
  write_fixture(dir / "a.png");
  const Run r = invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "-1", "--out", dir / "b.png",
                     "--report", dir / "rep.json"});
  REQUIRE(r.code == 0);
  const RgbImage8 a = read_png(dir / "a.png"), b = read_png(dir / "b.png");
  CHECK(testing::outside_identical(a, b, parse_roi(kRoi)));
  CHECK_FALSE(a == b);
  const auto side = json_of(dir / "b.retouch.json");
  CHECK(side["schema"] == 1);
  CHECK(side["gains"]["m"] == -1.0);
  CHECK(side["contrast_drop"].get<double>() > 0.5);
  CHECK(json_of(dir / "rep.json") == side);

  // Library call gives the same pixels.
  const RetouchResult lib = retouch_roi(a, parse_roi(kRoi), GainVector{0, -1, 0}, default_mixing_matrix());
  CHECK(lib.image == b);
}

TEST_CASE("zero-gain retouch copies the input file") {
  TempDir dir;
  write_fixture(dir / "a.png");
  const Run r = invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "0", "--alpha-h", "0",
                     "--alpha-r", "0", "--out", dir / "z.png"});
  REQUIRE(r.code == 0);
  CHECK(bytes_of(dir / "a.png") == bytes_of(dir / "z.png"));
  CHECK(json_of(dir / "z.retouch.json")["short_circuit"] == true);
}

TEST_CASE("repeated invocations are byte-identical") {
  TempDir dir;
  write_fixture(dir / "a.png");
  for (const char* out : {"x.png", "y.png"}) {
    REQUIRE(invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "-0.5", "--alpha-h", "0.3",
                 "--seed", "7", "--out", dir / out})
                .code == 0);
  }
  CHECK(bytes_of(dir / "x.png") == bytes_of(dir / "y.png"));
  CHECK(bytes_of(dir / "x.retouch.json") == bytes_of(dir / "y.retouch.json"));
}

TEST_CASE("fade writes numbered frames and a report") {
  TempDir dir;
  write_fixture(dir / "a.png");
  const Run r = invoke({"fade", "--in", dir / "a.png", "--roi", kRoi, "--schedule", "0,-0.25,-0.5,-0.75,-1", "--labels",
                     "w0,w1,w2,w3,w4", "--out", dir / "frames"});
  REQUIRE(r.code == 0);
  for (int i = 0; i < 5; ++i) CHECK(fs::exists(dir / ("frames/frame_0" + std::to_string(i) + ".png")));
  const auto rep = json_of(dir / "frames/report.json");
  REQUIRE(rep["frames"].size() == 5);
  CHECK(rep["frames"][3]["label"] == "w3");
  CHECK(rep["frames"][3]["file"] == "frame_03.png");
  CHECK(read_png(dir / "frames/frame_00.png") == read_png(dir / "a.png"));
  double prev = 1e9;
  for (const auto& f : rep["frames"]) {
    const double c = f["contrast_after"]["total"].get<double>();
    CHECK(c <= prev);
    prev = c;
  }
}

TEST_CASE("matrix, fit, eval and estimate-ica") {
  TempDir dir;
  write_fixture(dir / "a.png");
  REQUIRE(invoke({"matrix", "--in", dir / "a.png", "--roi", kRoi, "--alphas-h", "-1,0,1", "--alphas-m", "-1,0",
               "--out", dir / "m.png", "--report", dir / "m.json"})
              .code == 0);
  const RgbImage8 grid = read_png(dir / "m.png");
  CHECK(grid.width == 2 * 64 + 3 * kGridSeparator);
  CHECK(grid.height == 3 * 64 + 4 * kGridSeparator);
  CHECK(json_of(dir / "m.json")["fit"]["schema"] == 1);

  const Run fit = invoke({"fit", "--in", dir / "a.png", "--roi", kRoi});
  REQUIRE(fit.code == 0);
  const auto fj = nlohmann::json::parse(fit.out);
  CHECK(fj["roi"] == nlohmann::json::array({26, 20, 64, 64}));
  CHECK(fj["channels"]["M"]["n"].get<int>() >= 1);
  const RgbImage8 a = read_png(dir / "a.png");
  CHECK(fit.out == fit_report_json(prepare_roi(a, parse_roi(kRoi), default_mixing_matrix(), {})) + "\n");

  REQUIRE(invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "-1", "--out", dir / "b.png"}).code == 0);
  const Run ev = invoke({"eval", "--in", dir / "a.png", "--ref", dir / "b.png", "--roi", kRoi});
  REQUIRE(ev.code == 0);
  const auto ej = nlohmann::json::parse(ev.out);
  CHECK(ej["psnr"].get<double>() > 20.0);
  CHECK(ej["contrast_ref"]["M"].get<double>() < ej["contrast"]["M"].get<double>());
  const Run same = invoke({"eval", "--in", dir / "a.png", "--ref", dir / "a.png"});
  CHECK(nlohmann::json::parse(same.out)["psnr"] == "inf");

  // Estimate on a scene with independent variation in all three chromophores.
  testing::SceneSpec s;
  s.width = s.height = 128;
  s.noise = 0.15;
  write_png(dir / "noisy.png", testing::render_scene(s));
  const Run ica = invoke({"estimate-ica", "--in", dir / "noisy.png", "--out", dir / "e.json", "--report", dir / "ica.json"});
  REQUIRE(ica.code == 0);
  std::ifstream ef(dir / "e.json");
  std::stringstream ss;
  ss << ef.rdbuf();
  CHECK_NOTHROW(MixingMatrix::from_json(ss.str()));
  CHECK(json_of(dir / "ica.json")["samples"].get<int>() > 1000);
  const Run retouch_e = invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "-1", "--mixing-matrix",
                             dir / "e.json", "--out", dir / "c.png"});
  CHECK(retouch_e.code == 0);
}

TEST_CASE("validation and io failures write nothing") {
  TempDir dir;
  write_fixture(dir / "a.png");
  auto nothing_written = [&] {
    return !fs::exists(dir / "q.png") && !fs::exists(dir / "q.retouch.json");
  };
  CHECK(invoke({"retouch", "--in", dir / "a.png", "--roi", "100,20,64,64", "--alpha-m", "-1", "--out", dir / "q.png"})
            .code == 2);
  CHECK(nothing_written());
  CHECK(invoke({"retouch", "--in", dir / "a.png", "--roi", "1,2,3", "--alpha-m", "-1", "--out", dir / "q.png"}).code == 2);
  CHECK(invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "-9", "--out", dir / "q.png"}).code == 2);
  CHECK(invoke({"retouch", "--in", dir / "missing.png", "--roi", kRoi, "--out", dir / "q.png"}).code == 2);
  CHECK(invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--sigma", "-1", "--alpha-m", "-1", "--out",
             dir / "q.png"})
            .code == 2);
  CHECK(invoke({"fade", "--in", dir / "a.png", "--roi", kRoi, "--schedule", "", "--out", dir / "fr"}).code == 2);
  CHECK(invoke({"bogus"}).code == 2);
  CHECK(invoke({"retouch", "--roi", kRoi}).code == 2);
  CHECK(nothing_written());
  CHECK_FALSE(fs::exists(dir / "fr"));

  CHECK(invoke({"retouch", "--in", dir / "a.png", "--roi", kRoi, "--alpha-m", "-1", "--out", dir / "no/dir/q.png"})
            .code == 3);
  {
    std::ofstream junk(dir / "junk.png");
    junk << "not a png";
  }
  CHECK(invoke({"retouch", "--in", dir / "junk.png", "--roi", kRoi, "--alpha-m", "-1", "--out", dir / "q.png"}).code == 3);
  CHECK(nothing_written());

  const Run help = invoke({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("retouch") != std::string::npos);
}
