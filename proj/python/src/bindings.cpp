#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "acia/harness.hpp"
#include "acia/json_io.hpp"

namespace py = pybind11;
using namespace acia;
using nlohmann::json;

namespace {

// Configs cross the boundary as JSON text; the Python side wraps them in dicts.
harness::ExperimentConfig parse_config(const std::string& text) {
  return harness::config_from_json(json::parse(text, nullptr, true, true));
}

Box to_box(const py::handle& h) {
  auto t = h.cast<py::sequence>();
  if (t.size() < 4) throw py::value_error("box needs x1, y1, x2, y2[, class_id[, score]]");
  Box b{t[0].cast<double>(), t[1].cast<double>(), t[2].cast<double>(), t[3].cast<double>()};
  if (t.size() > 4) b.class_id = t[4].cast<int>();
  if (t.size() > 5) b.score = t[5].cast<double>();
  return b;
}

BoxSet to_boxes(const py::iterable& it) {
  BoxSet out;
  for (const auto& h : it) out.push_back(to_box(h));
  return out;
}

py::dict eval_dict(const eval::EvalResult& r) {
  py::dict d;
  d["map50"] = r.map50;
  d["per_class_ap"] = r.per_class_ap;
  d["valid"] = r.valid;
  d["separability"] = r.separability;
  d["n_images"] = r.n_images;
  return d;
}

py::dict sample_dict(const det::DetectionSample& s) {
  const int h = s.image.dim(1), w = s.image.dim(2);
  py::array_t<double> img({h, w, 3});
  auto m = img.mutable_unchecked<3>();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) m(y, x, c) = s.image.at(c, y, x);
    }
  }
  py::list boxes;
  for (const Box& b : s.boxes) boxes.append(py::make_tuple(b.x1, b.y1, b.x2, b.y2, b.class_id));
  py::dict d;
  d["image"] = img;
  d["boxes"] = boxes;
  d["domain_id"] = s.domain_id;
  d["image_id"] = s.image_id;
  d["labeled"] = s.is_labeled;
  return d;
}

}  // namespace

PYBIND11_MODULE(_acia, m) {
  m.doc() = "Native core: synthetic benchmark, training harness, evaluation";

  py::register_exception<harness::HarnessError>(m, "HarnessError", PyExc_RuntimeError);

  m.def("default_config", [] { return harness::to_json(harness::ExperimentConfig{}).dump(); });
  m.def("resolve_config", [](const std::string& text, const std::vector<std::string>& overrides) {
    auto cfg = harness::with_overrides(parse_config(text), overrides);
    cfg.validate();
    return harness::to_json(cfg).dump();
  }, py::arg("config"), py::arg("overrides") = std::vector<std::string>{});

  m.def("iou", [](const py::sequence& a, const py::sequence& b) { return iou(to_box(a), to_box(b)); });
  m.def("average_precision", [](const py::iterable& dets, const py::iterable& gts, double thr) {
    return eval::average_precision(to_boxes(dets), to_boxes(gts), thr);
  }, py::arg("detections"), py::arg("ground_truth"), py::arg("iou_thresh") = 0.5,
     "Single-image AP over class-filtered boxes given as (x1, y1, x2, y2, class_id[, score]).");

  m.def("imbalance_profile", &synth::imbalance_profile);

  m.def("generate_benchmark", [](const std::string& text) {
    const auto cfg = parse_config(text);
    synth::Benchmark b;
    {
      py::gil_scoped_release release;
      b = harness::load_or_generate(cfg);
    }
    py::dict out;
    py::list sources;
    for (const auto& d : b.sources) {
      py::list samples;
      for (const auto& s : d.samples) samples.append(sample_dict(s));
      sources.append(py::make_tuple(d.name, samples));
    }
    out["sources"] = sources;
    py::list tu, tt;
    for (const auto& s : b.target_unlabeled.samples) tu.append(sample_dict(s));
    for (const auto& s : b.target_test.samples) tt.append(sample_dict(s));
    out["target_unlabeled"] = tu;
    out["target_test"] = tt;
    return out;
  });

  m.def("save_benchmark", [](const std::string& text, const std::filesystem::path& dir) {
    const auto cfg = parse_config(text);
    py::gil_scoped_release release;
    synth::save_benchmark(dir, cfg.benchmark, synth::make_msda_benchmark(cfg.benchmark));
  });

  m.def("run_experiment", [](const std::string& text, const std::filesystem::path& out_dir) {
    auto cfg = parse_config(text);
    cfg.validate();
    harness::RunResult r;
    {
      py::gil_scoped_release release;
      r = harness::run_experiment(cfg, out_dir);
    }
    py::dict d;
    d["teacher"] = eval_dict(r.eval);
    d["source_only"] = eval_dict(r.source_only);
    d["seconds"] = r.seconds;
    return d;
  }, py::arg("config"), py::arg("out_dir") = std::filesystem::path{});

  m.def("ablation_suite", [](const std::string& text, const std::filesystem::path& out_dir,
                             const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& sections) {
    auto cfg = parse_config(text);
    harness::SuiteOptions opt;
    opt.seeds = seeds;
    if (!sections.empty()) {
      auto has = [&](const char* s) { return std::find(sections.begin(), sections.end(), s) != sections.end(); };
      opt.ladder = has("ladder");
      opt.merge_modes = has("merge");
      opt.target_variants = has("target");
      opt.imbalance = has("imbalance");
    }
    py::gil_scoped_release release;
    return harness::render_text_table(harness::ablation_suite(cfg, out_dir, opt));
  }, py::arg("config"), py::arg("out_dir"), py::arg("seeds") = std::vector<std::uint64_t>{0, 1, 2},
     py::arg("sections") = std::vector<std::string>{});

  m.def("suite_table", [](const std::filesystem::path& dir) {
    const auto t = harness::recompute_table(dir);
    py::list rows;
    for (const auto& r : t.rows) {
      py::dict d;
      d["section"] = r.section;
      d["name"] = r.name;
      d["run"] = r.run;
      d["map50"] = r.map_per_seed;
      d["per_class_ap"] = r.ap_per_seed;
      d["separability"] = r.separability_per_seed;
      d["heatmap_margin"] = r.heatmap_margin_per_seed;
      rows.append(d);
    }
    return rows;
  });

  m.def("report_plots", &harness::report_plots);
  m.def("comparison_plot", &harness::comparison_plot, py::arg("a"), py::arg("b"), py::arg("out_svg"),
        py::arg("label_a") = "baseline", py::arg("label_b") = "ACIA");
  m.def("pca_project", &harness::pca_project);
}
