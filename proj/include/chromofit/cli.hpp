#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "chromofit/pixelcore.hpp"
#include "chromofit/retouch.hpp"

namespace chromofit::cli {

enum class Command { EstimateIca, Fit, Retouch, Fade, Matrix, Eval };

std::string to_string(Command c);

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitIo = 3;

struct JobSpec {
  Command command = Command::Retouch;
  std::filesystem::path input;
  std::filesystem::path output;
  std::filesystem::path reference;  // eval
  std::optional<std::filesystem::path> report;
  std::optional<std::filesystem::path> mixing_matrix;
  std::optional<std::filesystem::path> config;
  std::optional<Roi> roi;
  GainVector gains;
  GainSchedule schedule;
  std::vector<double> alphas_h;
  std::vector<double> alphas_m;
  std::optional<double> sigma;
  std::optional<std::uint64_t> seed;
};

/// Parses argv (argv[0] is the program name). Throws CLI-level errors as
/// ParameterError; returns nullopt when help was printed to `out`.
std::optional<JobSpec> parse_args(int argc, const char* const* argv, std::ostream& out);

/// Executes a job. Validation errors return 2, I/O errors 3; messages go to err.
int run(const JobSpec& spec, std::ostream& out, std::ostream& err);

/// parse_args + run with the exit-code mapping.
int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Comma-separated gains: plain numbers are melanin gains, h:m:r gives all three.
GainSchedule parse_schedule(const std::string& text);
/// Comma-separated decimals.
std::vector<double> parse_list(const std::string& text);

/// Config file overrides (JSON): sigma, reflectance_floor, feather_px, fit_stride
/// and a "fit" object with FitConfig field names (including "lm").
RetouchConfig config_from_json(const std::string& text, RetouchConfig base = {});

/// "<stem>.retouch.json" next to the output image.
std::filesystem::path sidecar_path(const std::filesystem::path& output);

}  // namespace chromofit::cli
