#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <set>
#include <string>
#include <vector>

#include "coedg/coevolution.hpp"
#include "coedg/dip.hpp"
#include "coedg/error.hpp"
#include "coedg/geometry.hpp"
#include "coedg/json_io.hpp"
#include "coedg/losses.hpp"
#include "coedg/metrics.hpp"
#include "coedg/pseudo_label.hpp"

namespace py = pybind11;
using namespace coedg;

namespace {

PyObject* g_error_type = nullptr;

py::tuple loss_tuple(const LossValue& l) { return py::make_tuple(l.value, l.gradient); }

GeneratorCategorySet cat_set(const std::string& id, const std::vector<CategoryId>& cats) {
  return {id, std::set<CategoryId>(cats.begin(), cats.end())};
}

std::vector<ImageEval> to_images(const std::vector<std::pair<std::vector<Detection>, std::vector<GroundTruthBox>>>& in) {
  std::vector<ImageEval> out;
  out.reserve(in.size());
  for (const auto& [p, g] : in) out.push_back({p, g});
  return out;
}

ApInterpolation interp_from(const std::string& s) {
  if (s == "all") return ApInterpolation::kAllPoint;
  if (s == "11") return ApInterpolation::kElevenPoint;
  throw Error(ErrorKind::kInvalidArgument, "interpolation must be \"all\" or \"11\"");
}

WilcoxonMethod method_from(const std::string& s) {
  if (s == "auto") return WilcoxonMethod::kAuto;
  if (s == "exact") return WilcoxonMethod::kExact;
  if (s == "normal") return WilcoxonMethod::kNormal;
  throw Error(ErrorKind::kInvalidArgument, "method must be auto, exact or normal");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "coedg engine bindings";
  m.attr("__version__") = COEDG_VERSION;

  static py::exception<Error> err(m, "CoedgError", PyExc_RuntimeError);
  g_error_type = err.ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object inst = py::reinterpret_borrow<py::object>(g_error_type)(e.what());
      inst.attr("kind") = to_string(e.kind());
      PyErr_SetObject(g_error_type, inst.ptr());
    }
  });

  py::class_<BBox>(m, "BBox")
      .def(py::init<>())
      .def(py::init([](double x0, double y0, double x1, double y1) { return BBox{x0, y0, x1, y1}; }),
           py::arg("x0"), py::arg("y0"), py::arg("x1"), py::arg("y1"))
      .def_readwrite("x0", &BBox::x0)
      .def_readwrite("y0", &BBox::y0)
      .def_readwrite("x1", &BBox::x1)
      .def_readwrite("y1", &BBox::y1)
      .def_property_readonly("area", &BBox::area)
      .def("valid", &BBox::valid)
      .def(py::self == py::self)
      .def("__repr__", [](const BBox& b) {
        return "BBox(" + std::to_string(b.x0) + ", " + std::to_string(b.y0) + ", " + std::to_string(b.x1) + ", " +
               std::to_string(b.y1) + ")";
      });

  py::class_<Detection>(m, "Detection")
      .def(py::init([](CategoryId category, const BBox& box, double score, const std::string& source) {
             return Detection{category, box, score, source_from_string(source), false};
           }),
           py::arg("category"), py::arg("box"), py::arg("score") = 1.0, py::arg("source") = "student")
      .def_readwrite("category", &Detection::category)
      .def_readwrite("box", &Detection::box)
      .def_readwrite("score", &Detection::score)
      .def_property(
          "source", [](const Detection& d) { return std::string(to_string(d.source)); },
          [](Detection& d, const std::string& s) { d.source = source_from_string(s); })
      .def_readwrite("merged", &Detection::merged)
      .def(py::self == py::self)
      .def("__repr__", [](const Detection& d) {
        return "Detection(category=" + std::to_string(d.category) + ", score=" + std::to_string(d.score) +
               ", source=" + std::string(to_string(d.source)) + ")";
      });

  py::class_<GroundTruthBox>(m, "GroundTruthBox")
      .def(py::init([](CategoryId category, const BBox& box) { return GroundTruthBox{category, box}; }),
           py::arg("category"), py::arg("box"))
      .def_readwrite("category", &GroundTruthBox::category)
      .def_readwrite("box", &GroundTruthBox::box);

  py::class_<LocationEmbedding>(m, "LocationEmbedding")
      .def_readonly("q0", &LocationEmbedding::q0)
      .def_readonly("q1", &LocationEmbedding::q1)
      .def_readonly("q2", &LocationEmbedding::q2)
      .def_readonly("q3", &LocationEmbedding::q3)
      .def("as_tuple", [](const LocationEmbedding& l) { return py::make_tuple(l.q0, l.q1, l.q2, l.q3); });

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def(
      "nms", [](const std::vector<Detection>& d, double thr) { return nms(d, thr); }, py::arg("dets"),
      py::arg("iou_thr") = 0.5);
  m.def(
      "sa_nms",
      [](const std::vector<Detection>& t, const std::vector<Detection>& s, double thr) { return sa_nms(t, s, thr); },
      py::arg("teacher"), py::arg("student"), py::arg("iou_thr") = 0.5);

  m.def(
      "threshold_filter", [](const std::vector<Detection>& d, double tau) { return threshold_filter(d, tau); },
      py::arg("dets"), py::arg("tau") = 0.9);
  m.def(
      "gip_filter",
      [](const std::vector<Detection>& d, const std::vector<CategoryId>& cats) { return gip_filter(d, cat_set("", cats)); },
      py::arg("pseudo"), py::arg("gen_cats"));
  m.def(
      "loss_inclusion",
      [](const std::vector<Detection>& t, const std::vector<Detection>& s, const std::vector<CategoryId>& cats) {
        return loss_inclusion(t, s, cat_set("", cats));
      },
      py::arg("teacher"), py::arg("student"), py::arg("gen_cats"));
  m.def(
      "normal_case_detection",
      [](const std::vector<Detection>& d, double w, double h) { return normal_case_detection(d, w, h); },
      py::arg("dets"), py::arg("width"), py::arg("height"));
  m.def(
      "category_precision",
      [](const std::vector<Detection>& d, const std::vector<CategoryId>& present) {
        return category_precision(d, std::set<CategoryId>(present.begin(), present.end()));
      },
      py::arg("dets"), py::arg("present"));
  m.def(
      "assemble_pseudo_labels",
      [](const std::string& id, const std::vector<Detection>& t, const std::vector<Detection>& s,
         const std::vector<CategoryId>& cats, double tau, double iou_thr) {
        const auto p = assemble_pseudo_labels(id, t, s, cat_set(id, cats), {tau, iou_thr});
        return json(p).dump();
      },
      py::arg("sample_id"), py::arg("teacher"), py::arg("student"), py::arg("gen_cats"), py::arg("tau"),
      py::arg("iou_thr"));

  m.def("quantize_location", &quantize_location, py::arg("box"), py::arg("width"), py::arg("height"));

  m.def(
      "focal_loss",
      [](double p, int target, double alpha, double gamma) { return loss_tuple(focal_loss(p, target, {alpha, gamma})); },
      py::arg("p"), py::arg("target"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0);
  m.def(
      "smooth_l1",
      [](const std::vector<double>& p, const std::vector<double>& t, double beta) {
        return loss_tuple(smooth_l1(p, t, beta));
      },
      py::arg("pred"), py::arg("target"), py::arg("beta") = 1.0);
  m.def(
      "multilabel_cross_entropy",
      [](const std::vector<double>& p, const std::vector<int>& t) { return loss_tuple(multilabel_cross_entropy(p, t)); },
      py::arg("probs"), py::arg("target"));
  m.def(
      "report_nll", [](const std::vector<double>& p) { return loss_tuple(report_nll(p)); }, py::arg("token_probs"));

  m.def(
      "average_precision",
      [](const std::vector<Detection>& preds, const std::vector<GroundTruthBox>& gts, CategoryId c, double thr,
         const std::string& interp) { return average_precision(preds, gts, c, thr, interp_from(interp)); },
      py::arg("preds"), py::arg("gts"), py::arg("category"), py::arg("iou_thr"), py::arg("interpolation") = "all");
  m.def(
      "mean_ap",
      [](const std::vector<std::pair<std::vector<Detection>, std::vector<GroundTruthBox>>>& images,
         const std::vector<double>& thresholds) {
        const auto imgs = to_images(images);
        return mean_ap(imgs, thresholds).map;
      },
      py::arg("images"), py::arg("thresholds") = std::vector<double>{0.25, 0.5, 0.75});
  m.def("bleu", &bleu, py::arg("candidate"), py::arg("reference"), py::arg("n") = 4);
  m.def("rouge_l", &rouge_l, py::arg("candidate"), py::arg("reference"), py::arg("beta") = kRougeBeta);
  m.def(
      "roc_auc", [](const std::vector<double>& s, const std::vector<int>& l) { return roc_auc(s, l); },
      py::arg("scores"), py::arg("labels"));
  m.def("multilabel_auc", &multilabel_auc, py::arg("scores"), py::arg("labels"));
  m.def(
      "wilcoxon_signed_rank",
      [](const std::vector<double>& d, const std::string& method) { return wilcoxon_signed_rank(d, method_from(method)); },
      py::arg("paired_diffs"), py::arg("method") = "auto");

  m.def("validate_config", [](const std::string& text) {
    const auto c = config_from_json(json::parse(text));
    c.validate();
    return config_to_json(c).dump();
  });
  m.def(
      "run_coevolution",
      [](const std::string& text, const std::filesystem::path& out_dir, bool resume) {
        const auto c = config_from_json(json::parse(text));
        c.validate();
        RunOptions o;
        o.resume = resume;
        RunOutcome r;
        {
          py::gil_scoped_release release;
          r = run_coevolution(c, out_dir, o);
        }
        json log = json::array();
        for (const auto& l : r.log) log.push_back(to_json_value(l));
        return json{{"completed", r.completed}, {"trace_digest", r.trace_digest}, {"log", log}}.dump();
      },
      py::arg("config"), py::arg("out_dir"), py::arg("resume") = false);
  m.def(
      "sweep_tau",
      [](const std::string& text, const std::vector<double>& taus) {
        const auto c = config_from_json(json::parse(text));
        c.validate();
        std::vector<SweepRow> rows;
        {
          py::gil_scoped_release release;
          rows = sweep_tau(c, taus);
        }
        json out = json::array();
        for (const auto& r : rows) out.push_back({{"tau", r.tau}, {"map", r.map}});
        return out.dump();
      },
      py::arg("config"), py::arg("taus"));
}
