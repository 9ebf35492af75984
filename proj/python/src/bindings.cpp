#include <optional>
#include <string>
#include <vector>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "chromofit/chromophore.hpp"
#include "chromofit/errors.hpp"
#include "chromofit/layers.hpp"
#include "chromofit/png_io.hpp"
#include "chromofit/retouch.hpp"
#include "chromofit/sog_fit.hpp"
#include "chromofit/studio_server.hpp"

namespace py = pybind11;
using namespace chromofit;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

RgbImage8 image_from(const U8Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ParameterError("expected an (H, W, 3) uint8 array");
  RgbImage8 img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

U8Array image_to(const RgbImage8& img) {
  U8Array out({img.height, img.width, 3});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

F64Array patch_to(const PixelPatch& p) {
  F64Array out({p.height, p.width, 3});
  auto v = out.mutable_unchecked<3>();
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x)
      for (int c = 0; c < 3; ++c) v(y, x, c) = p.at(c, x, y);
  return out;
}

Field field_from(const F64Array& a) {
  if (a.ndim() != 2) throw ParameterError("expected a 2-D float array");
  Field f(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), f.values.begin());
  return f;
}

F64Array field_to(const Field& f) {
  F64Array out({f.height, f.width});
  std::copy(f.values.begin(), f.values.end(), out.mutable_data());
  return out;
}

// A single-channel patch so the layer ops can run on plain 2-D arrays.
PixelPatch patch_from_field(const Field& f) {
  PixelPatch p(f.width, f.height, Space::Chromophore);
  for (auto& ch : p.channels) ch = f.values;
  return p;
}

Roi roi_from(const std::tuple<int, int, int, int>& t) {
  return Roi{std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)};
}

RetouchConfig config_with(std::optional<double> sigma) {
  RetouchConfig cfg;
  if (sigma) cfg.sigma = *sigma;
  return cfg;
}

const MixingMatrix& or_default(const std::optional<MixingMatrix>& e) {
  return e ? *e : default_mixing_matrix();
}

GainVector gains_from(const std::tuple<double, double, double>& t) {
  return GainVector{std::get<0>(t), std::get<1>(t), std::get<2>(t)};
}

py::dict gaussian_dict(const GaussianParams& g) {
  py::dict d;
  d["a"] = g.a;
  d["mu"] = py::make_tuple(g.mu.x(), g.mu.y());
  d["sigma_x"] = g.sigma_x;
  d["sigma_y"] = g.sigma_y;
  d["theta"] = g.theta;
  return d;
}

py::dict channel_fit_dict(const ChannelFit& f) {
  py::dict d;
  d["plane"] = py::make_tuple(f.plane.k.x(), f.plane.k.y(), f.plane.d);
  py::list gs;
  for (const auto& g : f.gaussians) gs.append(gaussian_dict(g));
  d["gaussians"] = gs;
  d["rms"] = f.rms;
  d["plane_rms"] = f.plane_rms;
  d["iterations"] = f.iterations;
  d["converged"] = f.converged;
  return d;
}

py::tuple response_tuple(const studio::Response& r) {
  return py::make_tuple(r.status, r.content_type, py::bytes(r.body));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Chromophore-space blemish fitting and retouching";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ParameterError>(m, "ParameterError", error.ptr());
  py::register_exception<RoiError>(m, "RoiError", error.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", error.ptr());
  py::register_exception<RankError>(m, "RankError", error.ptr());
  py::register_exception<DegenerateSamplesError>(m, "DegenerateSamplesError", error.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", error.ptr());
  py::register_exception<IoError>(m, "IoError", error.ptr());

  m.def("srgb_eotf", py::vectorize(srgb_eotf), py::arg("encoded"));
  m.def("srgb_oetf", py::vectorize(srgb_oetf), py::arg("linear"));

  m.def("read_png", [](const std::filesystem::path& p) { return image_to(read_png(p)); }, py::arg("path"));
  m.def(
      "write_png", [](const std::filesystem::path& p, const U8Array& a) { write_png(p, image_from(a)); },
      py::arg("path"), py::arg("image"));

  py::class_<MixingMatrix>(m, "MixingMatrix")
      .def(py::init<const Eigen::Matrix3d&, std::uint64_t>(), py::arg("matrix"), py::arg("seed") = 42)
      .def_property_readonly("matrix", &MixingMatrix::matrix)
      .def_property_readonly("inverse", &MixingMatrix::inverse)
      .def_property_readonly("seed", &MixingMatrix::seed)
      .def("condition_number", &MixingMatrix::condition_number)
      .def("to_json", &MixingMatrix::to_json)
      .def_static("from_json", &MixingMatrix::from_json)
      .def("__eq__", [](const MixingMatrix& a, const MixingMatrix& b) { return a == b; });

  m.def("default_mixing_matrix", &default_mixing_matrix, py::return_value_policy::copy);

  m.def(
      "estimate_mixing_matrix",
      [](const U8Array& a, std::uint64_t seed, std::size_t max_samples) {
        const RgbImage8 img = image_from(a);
        IcaConfig cfg;
        cfg.seed = seed;
        IcaReport rep;
        py::gil_scoped_release release;
        const auto samples = collect_samples(linear_to_log_absorption(srgb_to_linear(img)), max_samples);
        MixingMatrix e = estimate_mixing_matrix(samples, cfg, &rep);
        return std::make_tuple(e, rep.iterations, rep.whitening_error);
      },
      py::arg("image"), py::arg("seed") = 42, py::arg("max_samples") = 50000,
      "Returns (MixingMatrix, iterations, whitening_error).");

  m.def(
      "to_chromophore",
      [](const U8Array& a, const std::optional<MixingMatrix>& e) {
        const RgbImage8 img = image_from(a);
        return patch_to(to_chromophore(linear_to_log_absorption(srgb_to_linear(img)), or_default(e)));
      },
      py::arg("image"), py::arg("mixing") = py::none(), "(H, W, 3) concentrations in (H, M, r) order.");

  m.def("gaussian_kernel", &gaussian_kernel, py::arg("sigma"));
  m.def(
      "separate",
      [](const F64Array& a, double sigma) {
        const LayerPair lp = separate(patch_from_field(field_from(a)), sigma);
        return py::make_tuple(field_to(channel_field(lp.base, 0)), field_to(channel_field(lp.texture, 0)));
      },
      py::arg("field"), py::arg("sigma"), "Returns (base, texture) of a 2-D array.");

  m.def(
      "fit_field",
      [](const F64Array& a, int max_gaussians, int sample_stride) {
        const Field f = field_from(a);
        FitConfig cfg;
        cfg.max_gaussians = max_gaussians;
        cfg.sample_stride = sample_stride;
        ChannelFit fit;
        {
          py::gil_scoped_release release;
          fit = fit_incremental(f, cfg);
        }
        py::dict d = channel_fit_dict(fit);
        d["model"] = field_to(eval_model(fit.plane, fit.gaussians, f.width, f.height));
        return d;
      },
      py::arg("field"), py::arg("max_gaussians") = 5, py::arg("sample_stride") = 1);

  m.def(
      "retouch",
      [](const U8Array& a, const std::tuple<int, int, int, int>& roi, const std::tuple<double, double, double>& gains,
         std::optional<double> sigma, const std::optional<MixingMatrix>& e) {
        const RgbImage8 img = image_from(a);
        RetouchResult r;
        {
          py::gil_scoped_release release;
          r = retouch_roi(img, roi_from(roi), gains_from(gains), or_default(e), config_with(sigma));
        }
        return py::make_tuple(image_to(r.image), r.to_json());
      },
      py::arg("image"), py::arg("roi"), py::arg("gains"), py::arg("sigma") = py::none(),
      py::arg("mixing") = py::none(), "gains = (h, m, r). Returns (image, sidecar_json).");

  m.def(
      "simulate_fading",
      [](const U8Array& a, const std::tuple<int, int, int, int>& roi,
         const std::vector<std::tuple<double, double, double>>& schedule, std::optional<double> sigma,
         const std::optional<MixingMatrix>& e) {
        const RgbImage8 img = image_from(a);
        GainSchedule sched;
        for (const auto& g : schedule) sched.gains.push_back(gains_from(g));
        std::vector<RetouchResult> frames;
        {
          py::gil_scoped_release release;
          frames = simulate_fading(img, roi_from(roi), sched, or_default(e), config_with(sigma));
        }
        py::list out;
        for (const auto& f : frames) out.append(image_to(f.image));
        return out;
      },
      py::arg("image"), py::arg("roi"), py::arg("schedule"), py::arg("sigma") = py::none(),
      py::arg("mixing") = py::none());

  m.def(
      "blemish_contrast",
      [](const U8Array& a, const std::tuple<int, int, int, int>& roi, const std::optional<MixingMatrix>& e) {
        const ContrastReport c = blemish_contrast(image_from(a), roi_from(roi), or_default(e));
        return py::make_tuple(c.per_channel, c.total);
      },
      py::arg("image"), py::arg("roi"), py::arg("mixing") = py::none(), "Returns ((H, M, r), total).");

  m.def(
      "psnr", [](const U8Array& a, const U8Array& b) { return psnr(image_from(a), image_from(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "ssim", [](const U8Array& a, const U8Array& b) { return ssim(image_from(a), image_from(b)); }, py::arg("a"),
      py::arg("b"));

  py::class_<studio::StudioService>(m, "StudioService",
                                    "In-process studio API; methods return (status, content_type, body).")
      .def(py::init([] { return std::make_unique<studio::StudioService>(); }))
      .def(
          "create_session",
          [](studio::StudioService& s, const py::bytes& png) { return response_tuple(s.create_session(std::string(png))); },
          py::arg("png"))
      .def(
          "fit",
          [](studio::StudioService& s, const std::string& id, const std::string& body) {
            studio::Response r;
            {
              py::gil_scoped_release release;
              r = s.fit(id, body);
            }
            return response_tuple(r);
          },
          py::arg("id"), py::arg("body"))
      .def(
          "preview",
          [](studio::StudioService& s, const std::string& id, const std::string& body) {
            return response_tuple(s.preview(id, body));
          },
          py::arg("id"), py::arg("body"))
      .def(
          "export",
          [](studio::StudioService& s, const std::string& id, const std::string& body) {
            studio::Response r;
            {
              py::gil_scoped_release release;
              r = s.export_zip(id, body);
            }
            return response_tuple(r);
          },
          py::arg("id"), py::arg("body"))
      .def("healthz", [](const studio::StudioService& s) { return response_tuple(s.healthz()); })
      .def_property_readonly("session_count", &studio::StudioService::session_count);
}
