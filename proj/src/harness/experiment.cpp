#include <bit>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "acia/harness.hpp"
#include "acia/json_io.hpp"

namespace acia::harness {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'A', 'C', 'I', 'A', 'C', 'K', 'P', '1'};

// init streams: detector and aligner parameters come from separate streams so
// the burn-in result does not depend on the alignment configuration
constexpr std::uint64_t kDetInit = 1, kAlignInit = 2, kBurnIn = 3, kMutual = 4, kSourceOrder = 5, kTargetOrder = 6;

align::AlignerShape aligner_shape(const ExperimentConfig& cfg) {
  align::AlignerShape s;
  s.num_sources = static_cast<int>(cfg.benchmark.sources.size());
  s.num_classes = cfg.benchmark.num_classes;
  s.feature_channels = cfg.detector.feature_channels();
  s.roi_size = cfg.detector.roi_size;
  s.roi_sampling = cfg.detector.roi_sampling;
  return s;
}

align::DomainAligner make_aligner(const ExperimentConfig& cfg) {
  align::AlignmentConfig a = cfg.alignment;
  a.merge_mode = cfg.effective_merge_mode();
  return align::DomainAligner(aligner_shape(cfg), a, cfg.ablation.include_target_in_cdis);
}

std::vector<std::vector<det::DetectionSample>> source_domains(const synth::Benchmark& data) {
  std::vector<std::vector<det::DetectionSample>> out;
  for (const auto& d : data.sources) out.push_back(d.samples);
  return out;
}

void check_finite(const mt::StepRecord& r) {
  const auto& l = r.losses;
  if (std::isfinite(l.total) && std::isfinite(l.sup) && std::isfinite(l.unsup) && std::isfinite(l.dis) &&
      std::isfinite(l.cdis)) {
    return;
  }
  throw NonFiniteLoss(r, "non-finite loss at step " + std::to_string(r.step) + " (" + r.phase + ")");
}

ordered_json eval_to_json(const eval::EvalResult& r) {
  auto nan_null = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? json(x) : json(nullptr));
    return a;
  };
  ordered_json j;
  j["map50"] = r.map50;
  j["per_class_ap"] = nan_null(r.per_class_ap);
  j["valid"] = r.valid;
  j["separability"] = nan_null(r.separability);
  j["n_images"] = r.n_images;
  return j;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& state) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  ordered_json header;
  header["format"] = "acia-checkpoint";
  header["dtype"] = "float32";
  header["step"] = state.step;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, var] : state.params()) {
    tensors.push_back({{"name", name}, {"shape", var.value().shape()}, {"offset", offset}});
    offset += var.value().numel();
  }
  header["tensors"] = tensors;
  header["numel"] = offset;
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw HarnessError("io", "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, var] : state.params()) {
    for (double v : var.value().data()) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
  if (!out) throw HarnessError("io", "failed writing checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw HarnessError("io", "cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw HarnessError("io", "not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 26)) throw HarnessError("io", "corrupt checkpoint header: " + path.string());
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  const json header = json::parse(h);
  ModelState s;
  s.step = header.at("step").get<std::int64_t>();
  for (const auto& t : header.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    Tensor v(shape);
    for (double& x : v.data()) {
      float f = 0;
      in.read(reinterpret_cast<char*>(&f), sizeof(f));
      x = f;
    }
    s.add(t.at("name").get<std::string>(), std::move(v));
  }
  if (!in) throw HarnessError("io", "truncated checkpoint: " + path.string());
  return s;
}

synth::Benchmark load_or_generate(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty()) return synth::make_msda_benchmark(cfg.benchmark);
  try {
    return synth::load_benchmark(cfg.data_dir);
  } catch (const std::exception& e) {
    throw HarnessError("io", std::string("loading benchmark: ") + e.what());
  }
}

ModelState burn_in(const ExperimentConfig& cfg, const synth::Benchmark& data,
                   const std::function<void(const mt::StepRecord&)>& on_step) {
  cfg.validate();
  det::Detector detector(cfg.detector);
  const align::DomainAligner aligner = make_aligner(cfg);
  ModelState student;
  Rng init(Rng::derive(cfg.seed, kDetInit));
  detector.init_params(student, init);
  mt::MeanTeacher trainer(detector, aligner, cfg.optimizer, cfg.weak_aug, cfg.strong_aug, {false, false},
                          Rng::derive(cfg.seed, kBurnIn));
  trainer.burn_in_phase(student, source_domains(data), cfg.burn_in_steps, [&](const mt::StepRecord& r) {
    check_finite(r);
    if (on_step) on_step(r);
  });
  return student;
}

eval::EvalResult evaluate_model(const det::Detector& detector, const ModelState& params,
                                std::span<const det::DetectionSample> test, int num_classes) {
  std::vector<eval::ImageResult> images;
  images.reserve(test.size());
  for (const auto& s : test) images.push_back({detector.detect(s.image, params), s.boxes});
  return eval::evaluate(images, num_classes);
}

Diagnostics compute_diagnostics(const ExperimentConfig& cfg, const synth::Benchmark& data, const ModelState& model) {
  nn::NoGradGuard no_grad;
  det::Detector detector(cfg.detector);
  const align::DomainAligner aligner = make_aligner(cfg);
  const int c = cfg.detector.feature_channels(), p = cfg.detector.roi_size;
  Diagnostics d;

  std::vector<const synth::Dataset*> splits;
  for (const auto& s : data.sources) splits.push_back(&s);
  splits.push_back(&data.target_test);

  std::vector<Tensor> crops;
  std::vector<int> crop_classes;
  for (const synth::Dataset* ds : splits) {
    const int n = std::min<int>(cfg.diag_images_per_domain, static_cast<int>(ds->samples.size()));
    for (int i = 0; i < n; ++i) {
      const auto& s = ds->samples[static_cast<std::size_t>(i)];
      if (s.boxes.empty()) continue;
      const det::FeatureMap fmap = detector.backbone_forward(s.image, model);
      const det::InstanceFeatures f = det::roi_pool(fmap, s.boxes, {p, cfg.detector.roi_sampling});
      const Tensor& v = f.data.value();
      for (int r = 0; r < f.count(); ++r) {
        eval::InstanceRecord rec;
        rec.class_id = s.boxes[static_cast<std::size_t>(r)].class_id;
        rec.domain_id = ds->domain_id;
        rec.feature.assign(static_cast<std::size_t>(c), 0.0);
        Tensor crop(Shape{1, c, p, p});
        for (int ch = 0; ch < c; ++ch) {
          double acc = 0;
          for (int k = 0; k < p * p; ++k) {
            const double x = v[(static_cast<std::size_t>(r) * c + ch) * p * p + k];
            acc += x;
            crop[static_cast<std::size_t>(ch) * p * p + k] = x;
          }
          rec.feature[static_cast<std::size_t>(ch)] = acc / (p * p);
        }
        d.instances.push_back(std::move(rec));
        crops.push_back(std::move(crop));
        crop_classes.push_back(d.instances.back().class_id);
      }
    }
  }
  eval::ProbeConfig probe;
  probe.seed = Rng::derive(cfg.seed, 0xD1A6);
  d.separability = eval::class_conditional_separability(d.instances, cfg.benchmark.num_classes, probe);

  if (model.contains("align.embed.table") && !crops.empty()) {
    Tensor all(Shape{static_cast<int>(crops.size()), c, p, p});
    for (std::size_t i = 0; i < crops.size(); ++i) {
      std::copy(crops[i].data().begin(), crops[i].data().end(), all.data().begin() + static_cast<std::ptrdiff_t>(i * crops[i].numel()));
    }
    det::InstanceFeatures feats;
    feats.data = nn::Var(std::move(all));
    feats.boxes.resize(crops.size());
    d.heatmap = aligner.embedding_activation_heatmap(feats, crop_classes, model, true);
  }
  return d;
}

RunResult run_experiment(const ExperimentConfig& cfg_in, const std::filesystem::path& out_dir,
                         const synth::Benchmark* data_in, const ModelState* burned_in) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  Timer timer;
  std::optional<synth::Benchmark> owned;
  if (!data_in) owned = load_or_generate(cfg);
  const synth::Benchmark& data = data_in ? *data_in : *owned;
  if (static_cast<int>(data.sources.size()) != static_cast<int>(cfg.benchmark.sources.size())) {
    throw HarnessError("config", "benchmark data and config disagree on the number of sources");
  }

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream snap(out_dir / "config.json");
    snap << to_json(cfg).dump(2) << '\n';
    log.open(out_dir / "log.ndjson");
  }
  mt::StepRecord last;
  auto record = [&](const mt::StepRecord& r, int total) {
    last = r;
    check_finite(r);
    if (log.is_open() && (r.step % cfg.log_every == 0 || r.step + 1 == total)) mt::write_step_record(log, r);
  };

  det::Detector detector(cfg.detector);
  const align::DomainAligner aligner = make_aligner(cfg);

  ModelState det_state;
  try {
    det_state = burned_in ? burned_in->clone() : burn_in(cfg, data, [&](const mt::StepRecord& r) { record(r, cfg.burn_in_steps); });
  } catch (const NonFiniteLoss& e) {
    if (!out_dir.empty()) {
      std::ofstream dump(out_dir / "nan_dump.json");
      mt::write_step_record(dump, e.last());
    }
    throw;
  }

  RunResult result;
  result.source_only = evaluate_model(detector, det_state, data.target_test.samples, cfg.benchmark.num_classes);

  ModelState student = det_state.clone();
  student.step = 0;
  Rng align_init(Rng::derive(cfg.seed, kAlignInit));
  aligner.init_params(student, align_init);
  ModelState teacher = mt::make_teacher(student);

  mt::MeanTeacher trainer(detector, aligner, cfg.optimizer, cfg.weak_aug, cfg.strong_aug,
                          {cfg.ablation.image_align, cfg.ablation.instance_align}, Rng::derive(cfg.seed, kMutual));
  const auto sources = source_domains(data);
  const std::vector<std::vector<det::DetectionSample>> target{data.target_unlabeled.samples};
  try {
    for (int step = 0; step < cfg.mutual_steps; ++step) {
      const auto src = mt::round_robin_batch(sources, step, Rng::derive(cfg.seed, kSourceOrder));
      std::vector<det::DetectionSample> tgt;
      for (int j = 0; j < cfg.target_batch; ++j) {
        auto one = mt::round_robin_batch(target, static_cast<std::int64_t>(step) * cfg.target_batch + j,
                                         Rng::derive(cfg.seed, kTargetOrder));
        tgt.push_back(std::move(one.front()));
      }
      mt::StepRecord r = trainer.mutual_learning_step(student, teacher, src, tgt);
      r.step += cfg.burn_in_steps;
      record(r, cfg.burn_in_steps + cfg.mutual_steps);
      result.last_losses = r.losses;
    }
  } catch (const NonFiniteLoss& e) {
    if (!out_dir.empty()) {
      std::ofstream dump(out_dir / "nan_dump.json");
      mt::write_step_record(dump, e.last());
    }
    throw;
  }

  result.eval = evaluate_model(detector, teacher, data.target_test.samples, cfg.benchmark.num_classes);
  result.diagnostics = compute_diagnostics(cfg, data, teacher);
  result.eval.separability = result.diagnostics.separability;
  result.seconds = timer.seconds();

  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "teacher.ckpt", teacher);
    save_checkpoint(out_dir / "student.ckpt", student);
    write_run_artifacts(out_dir, cfg, result);
  }
  return result;
}

void write_run_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg, const RunResult& r) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  for (int k = 0; k < cfg.benchmark.num_classes; ++k) names.push_back(synth::shape_name(k));
  eval::write_eval_csv(dir / "eval.csv", r.eval, names);

  ordered_json j;
  j["teacher"] = eval_to_json(r.eval);
  j["source_only"] = eval_to_json(r.source_only);
  j["mean_separability"] = std::isfinite(eval::finite_mean(r.diagnostics.separability))
                               ? json(eval::finite_mean(r.diagnostics.separability))
                               : json(nullptr);
  j["last_losses"] = {{"sup", r.last_losses.sup},
                      {"unsup", r.last_losses.unsup},
                      {"dis", r.last_losses.dis},
                      {"cdis", r.last_losses.cdis},
                      {"total", r.last_losses.total}};
  j["seed"] = cfg.seed;
  {
    std::ofstream out(dir / "eval.json");
    out << j.dump(2) << '\n';
  }
  {
    // wall clock kept apart so eval.json is reproducible byte for byte
    std::ofstream out(dir / "timing.json");
    out << ordered_json{{"seconds", r.seconds}}.dump() << '\n';
  }

  const Tensor& hm = r.diagnostics.heatmap.activation;
  if (!hm.empty()) {
    std::ofstream out(dir / "heatmap.csv");
    out.precision(10);
    out << "class";
    for (int k = 0; k < hm.dim(1); ++k) out << ',' << names[static_cast<std::size_t>(k)];
    out << '\n';
    for (int i = 0; i < hm.dim(0); ++i) {
      out << names[static_cast<std::size_t>(i)];
      for (int k = 0; k < hm.dim(1); ++k) out << ',' << hm.at(i, k);
      out << '\n';
    }
  }

  // deterministic subsample for the projection plot
  const auto& inst = r.diagnostics.instances;
  std::vector<std::size_t> idx(inst.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(Rng::derive(cfg.seed, 0x9A0));
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(0, cfg.projection_points))));
  std::sort(idx.begin(), idx.end());
  std::vector<std::vector<double>> feats;
  for (std::size_t i : idx) feats.push_back(inst[i].feature);
  const auto proj = pca_project(feats);
  std::ofstream out(dir / "instances.csv");
  out.precision(10);
  out << "x,y,class_id,domain_id\n";
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out << proj[i][0] << ',' << proj[i][1] << ',' << inst[idx[i]].class_id << ',' << inst[idx[i]].domain_id << '\n';
  }
}

}  // namespace acia::harness
