#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "maskveil/cli.hpp"
#include "maskveil/corpus.hpp"
#include "maskveil/errors.hpp"
#include "maskveil/evaluation.hpp"
#include "maskveil/image.hpp"
#include "maskveil/mask_template.hpp"
#include "maskveil/perturbation.hpp"
#include "maskveil/recognizer.hpp"
#include "maskveil/rng.hpp"

namespace py = pybind11;
using namespace maskveil;

namespace {

using Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

PixelImage from_array(const Array& a) {
  if (a.ndim() == 2) {
    const auto* p = a.data();
    return PixelImage(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), 1,
                      std::vector<std::uint8_t>(p, p + a.size()));
  }
  if (a.ndim() != 3) throw DomainError("expected an HxW or HxWxC uint8 array");
  const auto* p = a.data();
  return PixelImage(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(2)),
                    std::vector<std::uint8_t>(p, p + a.size()));
}

LandmarkSet to_landmarks(const std::map<std::string, std::pair<double, double>>& lm) {
  LandmarkSet set;
  for (const auto& [label, xy] : lm) {
    set.labels.push_back(label);
    set.points.push_back({xy.first, xy.second});
  }
  return set;
}

py::dict from_landmarks(const LandmarkSet& set) {
  py::dict d;
  for (std::size_t i = 0; i < set.size(); ++i) d[py::str(set.labels[i])] = py::make_tuple(set.points[i].x, set.points[i].y);
  return d;
}

Array to_array(const PixelImage& img) {
  Array out({img.height(), img.width(), img.channels()});
  std::copy(img.data().begin(), img.data().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_maskveil, m) {
  m.doc() = "Reversible mask-template image cloaking";

  auto base = py::register_exception<Error>(m, "MaskveilError", PyExc_RuntimeError);
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  auto format = py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ChecksumError>(m, "ChecksumError", format.ptr());
  py::register_exception<UnreachableTargetError>(m, "UnreachableTargetError", base.ptr());

  m.def("protection_rate", &protection_rate, py::arg("t_o"), py::arg("f_c"));
  m.def("derive_seed", &derive_seed, py::arg("master"), py::arg("name"));

  m.def("load_image", [](const std::filesystem::path& p) { return to_array(load_image(p)); }, py::arg("path"));
  m.def("save_png", [](const Array& a, const std::filesystem::path& p) { save_png(from_array(a), p); },
        py::arg("image"), py::arg("path"));
  m.def("normalize_canvas", [](const Array& a) { return to_array(normalize_canvas(from_array(a))); },
        py::arg("image"));
  m.def("dssim", [](const Array& a, const Array& b) { return dssim(from_array(a), from_array(b)); },
        py::arg("a"), py::arg("b"));
  m.def("image_digest", [](const Array& a) { return image_digest(from_array(a)); }, py::arg("image"));

  py::class_<Region>(m, "Region")
      .def(py::init([](int x, int y) { return Region{x, y, kRegionSize}; }), py::arg("x"), py::arg("y"))
      .def_readonly("x", &Region::origin_x)
      .def_readonly("y", &Region::origin_y)
      .def_readonly("size", &Region::size)
      .def("overlaps", &Region::overlaps)
      .def("__eq__", [](const Region& a, const Region& b) { return a == b; })
      .def("__repr__", [](const Region& r) {
        return "Region(" + std::to_string(r.origin_x) + ", " + std::to_string(r.origin_y) + ")";
      });

  py::class_<MaskTemplate>(m, "MaskTemplate")
      .def(py::init([](std::vector<Region> regions, std::vector<std::uint16_t> versions) {
             MaskTemplate t;
             t.source_versions = std::move(versions);
             t.priorities.assign(regions.size(), 1);
             t.regions = std::move(regions);
             t.validate();
             return t;
           }),
           py::arg("regions"), py::arg("source_versions") = std::vector<std::uint16_t>{0})
      .def_readonly("regions", &MaskTemplate::regions)
      .def_readonly("source_versions", &MaskTemplate::source_versions)
      .def_readonly("priorities", &MaskTemplate::priorities)
      .def("to_bytes", [](const MaskTemplate& t) {
        const auto b = serialize_template(t);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      });

  py::class_<CloakKey>(m, "CloakKey")
      .def(py::init([](const MaskTemplate& mask, const py::bytes& payloads) {
             CloakKey k;
             k.mask = mask;
             const std::string s = payloads;
             k.payloads.assign(s.begin(), s.end());
             k.validate();
             return k;
           }),
           py::arg("mask"), py::arg("payloads"))
      .def_readonly("mask", &CloakKey::mask)
      .def_property_readonly("payloads",
                             [](const CloakKey& k) {
                               return py::bytes(reinterpret_cast<const char*>(k.payloads.data()),
                                                k.payloads.size());
                             })
      .def("to_bytes", [](const CloakKey& k) {
        const auto b = serialize_key(k);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      })
      .def_static("from_bytes", [](const py::bytes& data) {
        const std::string s = data;
        const std::vector<std::uint8_t> bytes(s.begin(), s.end());
        auto v = deserialize_key_file(bytes);
        if (!std::holds_alternative<CloakKey>(v)) throw FormatError("template file carries no payload");
        return std::get<CloakKey>(v);
      });

  m.def("load_key", &load_key, py::arg("path"));
  m.def("save_key", &save_key, py::arg("key"), py::arg("path"));
  m.def("load_template", &load_template, py::arg("path"));
  m.def("superpose", [](const std::vector<MaskTemplate>& ts, const std::vector<int>& prio) {
          auto r = superpose(ts, prio);
          return py::make_tuple(r.value, r.warnings);
        },
        py::arg("templates"), py::arg("priorities") = std::vector<int>{});

  m.def("protect", [](const Array& a, const CloakKey& k) { return to_array(protect(from_array(a), k)); },
        py::arg("image"), py::arg("key"));
  m.def("restore", [](const Array& a, const CloakKey& k) { return to_array(restore(from_array(a), k)); },
        py::arg("image"), py::arg("key"));

  py::class_<RecognizerModel>(m, "RecognizerModel")
      .def_property_readonly("identities", [](const RecognizerModel& r) { return r.identities; })
      .def_property_readonly("k", &RecognizerModel::k)
      .def_property_readonly("version", [](const RecognizerModel& r) { return r.layout.version_id; });
  m.def("load_model", &load_model, py::arg("path"));
  using Landmarks = std::map<std::string, std::pair<double, double>>;
  m.def("recognize",
        [](const RecognizerModel& model, const Array& a, const Landmarks& lm) {
          const auto r = recognize(model, from_array(a), to_landmarks(lm));
          return py::make_tuple(model.identities[r.identity], r.confidence);
        },
        py::arg("model"), py::arg("image"), py::arg("landmarks"));
  m.def("embed",
        [](const RecognizerModel& model, const Array& a, const Landmarks& lm) {
          const Eigen::VectorXd e = embed(model, from_array(a), to_landmarks(lm));
          return std::vector<double>(e.data(), e.data() + e.size());
        },
        py::arg("model"), py::arg("image"), py::arg("landmarks"));

  m.def("synthesize_corpus",
        [](int identities, int images_per_identity, std::uint64_t seed) {
          py::list out;
          for (const auto& li : synthesize_corpus({identities, images_per_identity, seed}))
            out.append(py::make_tuple(li.name, li.identity, to_array(li.image), from_landmarks(li.landmarks)));
          return out;
        },
        py::arg("identities") = 20, py::arg("images_per_identity") = 6, py::arg("seed") = 2024,
        "Returns a list of (name, identity, image, landmarks) tuples.");

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = cli::run(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a command-line invocation; returns (exit code, stdout, stderr).");
}
