// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sdnia/commands.hpp"
#include "sdnia/errors.hpp"
#include "sdnia/evaluation.hpp"
#include "sdnia/imagery.hpp"
#include "sdnia/losses.hpp"
#include "sdnia/model.hpp"
#include "sdnia/nia.hpp"
#include "sdnia/stylizer.hpp"

namespace py = pybind11;
using namespace sdnia;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

Array to_array(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  Array out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), sizeof(float) * c.numel());
  return out;
}

py::list detections_to_list(const std::vector<detector::Detection>& dets) {
  py::list out;
  for (const auto& d : dets) {
    py::dict item;
    item["class_id"] = d.class_id;
    item["cx"] = d.box.cx;
    item["cy"] = d.box.cy;
    item["w"] = d.box.w;
    item["h"] = d.box.h;
    item["confidence"] = d.confidence;
    out.append(item);
  }
  return out;
}

class PyModel {
 public:
  explicit PyModel(const std::filesystem::path& checkpoint) : loaded_(load_model(checkpoint)) {
    image_size_ = loaded_.meta.contains("train_config") ? loaded_.meta["train_config"].value("image_size", 544) : 544;
  }

  int64_t image_size() const { return image_size_; }
  std::vector<std::string> class_names() const { return loaded_.class_names; }
  bool use_nia() { return loaded_.model->use_nia(); }

  /// [3,H,W] in [0,1] -> detections in normalized coordinates.
  py::list detect(const Array& image, std::optional<double> conf) {
    const auto input = resize_square(checked(image), image_size_).unsqueeze(0);
    return detections_to_list(loaded_.model->detect(input, conf)[0]);
  }

  Array adapt(const Array& image) {
    torch::NoGradGuard guard;
    loaded_.model->eval();
    return to_array(loaded_.model->adapt(checked(image).unsqueeze(0))[0]);
  }

 private:
  static torch::Tensor checked(const Array& image) {
    if (image.ndim() != 3 || image.shape(0) != 3) throw ArgumentError("expected a [3,H,W] image");
    return to_tensor(image);
  }

  LoadedModel loaded_;
  int64_t image_size_ = 544;
};

}  // namespace

PYBIND11_MODULE(_sdnia, m) {
  m.doc() = "sdnia C++ core";

  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  m.def("nia_parameter_count", [] {
    nia::NIANetwork net;
    return nia::parameter_count(*net);
  });

  m.def("synthesize_fog", [](const Array& image, double beta, double airlight) {
    return to_array(imagery::synthesize_fog(to_tensor(image), beta, airlight));
  }, py::arg("image"), py::arg("beta"), py::arg("airlight") = 0.9);

  m.def("synthesize_gamma", [](const Array& image, double gamma) {
    return to_array(imagery::synthesize_gamma(to_tensor(image), gamma));
  }, py::arg("image"), py::arg("gamma"));

  m.def("ms_ssim", [](const Array& a, const Array& b) {
    auto ta = to_tensor(a), tb = to_tensor(b);
    if (ta.dim() == 3) ta = ta.unsqueeze(0), tb = tb.unsqueeze(0);
    return losses::ms_ssim(ta.to(torch::kFloat64), tb.to(torch::kFloat64)).item<double>();
  }, py::arg("a"), py::arg("b"));

  m.def("stylize", [](const Array& content, const Array& style, double alpha) {
    stylizer::ProceduralBackend backend;
    imagery::LabeledImage c;
    c.image_id = "content";
    c.reference_id = "content";
    c.pixels = to_tensor(content);
    const stylizer::StyleImage s{"style", to_tensor(style)};
    return to_array(stylizer::stylize(backend, c, s, alpha).pixels);
  }, py::arg("content"), py::arg("style"), py::arg("alpha") = 1.0);

  m.def("evaluate_detections", [](const std::filesystem::path& manifest, const std::filesystem::path& detections) {
    const auto set = imagery::load_dataset(manifest, imagery::LoadOptions{false});
    auto report = evaluation::map_range(evaluation::pair_detections(set, evaluation::read_detections(detections)),
                                        set.class_names);
    report.test_set = set.name;
    return report.to_json().dump();
  });

  m.def("run_command", [](const std::string& command, const std::string& config) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = commands::run(command, nlohmann::json::parse(config), out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("command"), py::arg("config"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<std::filesystem::path>(), py::arg("checkpoint"))
      .def_property_readonly("image_size", &PyModel::image_size)
      .def_property_readonly("class_names", &PyModel::class_names)
      .def_property_readonly("use_nia", &PyModel::use_nia)
      .def("detect", &PyModel::detect, py::arg("image"), py::arg("conf_threshold") = std::nullopt)
      .def("adapt", &PyModel::adapt, py::arg("image"));
}
