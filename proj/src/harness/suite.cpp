#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "acia/harness.hpp"
#include "acia/json_io.hpp"

namespace acia::harness {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct Variant {
  std::string run;
  bool imbalance = false;
  AblationFlags flags;
  align::MergeMode merge = align::MergeMode::attention;
};

struct RowSpec {
  std::string section, name, run;
};

std::vector<RowSpec> row_specs(const SuiteOptions& opt) {
  std::vector<RowSpec> rows;
  if (opt.ladder) {
    rows.push_back({"ladder", "source only", "source_only"});
    rows.push_back({"ladder", "none", "mean_teacher"});
    rows.push_back({"ladder", "+image", "image"});
    rows.push_back({"ladder", "+instance", "instance"});
    rows.push_back({"ladder", "+class-cond", "acia"});
  }
  if (opt.merge_modes) {
    rows.push_back({"merge", "concat", "concat"});
    rows.push_back({"merge", "multiply", "multiply"});
    rows.push_back({"merge", "attention", "acia"});
  }
  if (opt.target_variants) {
    rows.push_back({"target", "without target", "acia"});
    rows.push_back({"target", "with target", "acia_target"});
  }
  if (opt.imbalance) {
    rows.push_back({"imbalance", "class-agnostic", "imb_agnostic"});
    rows.push_back({"imbalance", "class-cond", "imb_acia"});
  }
  return rows;
}

std::map<std::string, Variant> variants() {
  std::map<std::string, Variant> v;
  v["mean_teacher"] = {"mean_teacher", false, {false, false, false, false}};
  v["image"] = {"image", false, {true, false, false, false}};
  v["instance"] = {"instance", false, {true, true, false, false}};
  v["acia"] = {"acia", false, {true, true, true, false}};
  v["concat"] = {"concat", false, {true, true, true, false}, align::MergeMode::concat};
  v["multiply"] = {"multiply", false, {true, true, true, false}, align::MergeMode::multiply};
  v["acia_target"] = {"acia_target", false, {true, true, true, true}};
  v["imb_agnostic"] = {"imb_agnostic", true, {true, true, false, false}};
  v["imb_acia"] = {"imb_acia", true, {true, true, true, false}};
  return v;
}

ExperimentConfig imbalance_config(const ExperimentConfig& base, const std::string& profile) {
  ExperimentConfig c = base;
  const std::vector<double> freq = synth::imbalance_profile(profile);
  const int k = static_cast<int>(freq.size());
  synth::BenchmarkConfig b = synth::default_benchmark(k, base.benchmark.seed);
  b.images_per_domain = base.benchmark.images_per_domain;
  b.test_images = base.benchmark.test_images;
  b.min_objects = base.benchmark.min_objects;
  b.max_objects = base.benchmark.max_objects;
  b.min_size = base.benchmark.min_size;
  b.max_size = base.benchmark.max_size;
  b.image_size = base.benchmark.image_size;
  b.max_iou = base.benchmark.max_iou;
  b.class_frequency = freq;
  // balanced test split so every class' AP is measured on the same footing
  b.test_class_frequency.assign(static_cast<std::size_t>(k), 1.0 / k);
  c.benchmark = b;
  c.data_dir.clear();
  c.resolve();
  return c;
}

double heatmap_margin(const align::Heatmap& h) {
  const Tensor& a = h.activation;
  if (a.empty()) return std::nan("");
  double diag = 0, off = 0;
  int nd = 0, no = 0;
  for (int i = 0; i < a.dim(0); ++i) {
    if (!h.present[static_cast<std::size_t>(i)]) continue;
    for (int j = 0; j < a.dim(1); ++j) {
      if (i == j) {
        diag += a.at(i, j);
        ++nd;
      } else {
        off += a.at(i, j);
        ++no;
      }
    }
  }
  if (nd == 0 || no == 0) return std::nan("");
  return diag / nd - off / no;
}

std::string seed_dir(std::uint64_t s) { return "seed" + std::to_string(s); }

std::vector<double> read_ap(const json& j) {
  std::vector<double> out;
  for (const auto& v : j) out.push_back(v.is_null() ? std::nan("") : v.get<double>());
  return out;
}

}  // namespace

double SuiteRow::mean() const {
  if (map_per_seed.empty()) return std::nan("");
  return std::accumulate(map_per_seed.begin(), map_per_seed.end(), 0.0) / static_cast<double>(map_per_seed.size());
}

double SuiteRow::stddev() const {
  if (map_per_seed.size() < 2) return 0.0;
  const double m = mean();
  double s = 0;
  for (double v : map_per_seed) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(map_per_seed.size() - 1));
}

const SuiteRow& SuiteTable::row(const std::string& section, const std::string& name) const {
  for (const SuiteRow& r : rows) {
    if (r.section == section && r.name == name) return r;
  }
  throw std::out_of_range("no suite row " + section + "/" + name);
}

SuiteTable ablation_suite(const ExperimentConfig& base_in, const std::filesystem::path& out_dir, const SuiteOptions& opt) {
  ExperimentConfig base = base_in;
  base.validate();
  if (opt.seeds.empty()) throw HarnessError("config", "ablation suite needs at least one seed");
  const std::vector<RowSpec> specs = row_specs(opt);
  const auto all_variants = variants();
  auto say = [&](const std::string& m) {
    if (opt.progress) opt.progress(m);
  };

  std::filesystem::create_directories(out_dir / "runs");
  {
    std::ofstream out(out_dir / "base_config.json");
    out << to_json(base).dump(2) << '\n';
    ordered_json rows = json::array();
    for (const RowSpec& r : specs) rows.push_back({{"section", r.section}, {"name", r.name}, {"run", r.run}});
    ordered_json meta;
    meta["seeds"] = opt.seeds;
    meta["rows"] = rows;
    meta["imbalance_profile"] = opt.imbalance_profile;
    std::ofstream m(out_dir / "suite.json");
    m << meta.dump(2) << '\n';
  }

  // which variants are needed, grouped by benchmark
  std::vector<std::string> needed;
  for (const RowSpec& r : specs) {
    if (r.run != "source_only" && std::find(needed.begin(), needed.end(), r.run) == needed.end()) needed.push_back(r.run);
  }
  const bool need_main = std::any_of(specs.begin(), specs.end(), [&](const RowSpec& r) {
    return r.run == "source_only" || (all_variants.count(r.run) && !all_variants.at(r.run).imbalance);
  });
  const bool need_imb = std::any_of(needed.begin(), needed.end(), [&](const std::string& n) { return all_variants.at(n).imbalance; });

  std::optional<synth::Benchmark> main_data, imb_data;
  ExperimentConfig imb_base;
  if (need_main) main_data = load_or_generate(base);
  if (need_imb) {
    imb_base = imbalance_config(base, opt.imbalance_profile);
    imb_data = synth::make_msda_benchmark(imb_base.benchmark);
  }

  for (std::uint64_t seed : opt.seeds) {
    for (int group = 0; group < 2; ++group) {
      const bool imb = group == 1;
      if ((imb && !need_imb) || (!imb && !need_main)) continue;
      ExperimentConfig cfg = imb ? imb_base : base;
      cfg.seed = seed;
      const synth::Benchmark& data = imb ? *imb_data : *main_data;

      const std::string bdir = (imb ? "burn_in_imbalance/" : "burn_in/") + seed_dir(seed);
      say("burn-in " + bdir);
      std::filesystem::create_directories(out_dir / "runs" / bdir);
      std::ofstream blog(out_dir / "runs" / bdir / "log.ndjson");
      const ModelState burned = burn_in(cfg, data, [&](const mt::StepRecord& r) {
        if (r.step % cfg.log_every == 0 || r.step + 1 == cfg.burn_in_steps) mt::write_step_record(blog, r);
      });
      save_checkpoint(out_dir / "runs" / bdir / "detector.ckpt", burned);

      if (!imb) {
        // source-only row: the burn-in detector evaluated directly
        det::Detector detector(cfg.detector);
        RunResult so;
        so.eval = evaluate_model(detector, burned, data.target_test.samples, cfg.benchmark.num_classes);
        so.source_only = so.eval;
        so.diagnostics = compute_diagnostics(cfg, data, burned);
        so.eval.separability = so.diagnostics.separability;
        const auto dir = out_dir / "runs" / "source_only" / seed_dir(seed);
        std::filesystem::create_directories(dir);
        std::ofstream snap(dir / "config.json");
        ExperimentConfig so_cfg = cfg;
        so_cfg.mutual_steps = 0;
        so_cfg.ablation = {false, false, false, false};
        snap << to_json(so_cfg).dump(2) << '\n';
        write_run_artifacts(dir, so_cfg, so);
      }

      for (const std::string& name : needed) {
        const Variant& v = all_variants.at(name);
        if (v.imbalance != imb) continue;
        ExperimentConfig vc = cfg;
        vc.ablation = v.flags;
        if (v.flags.class_conditioning) vc.alignment.merge_mode = v.merge;
        const auto dir = out_dir / "runs" / name / seed_dir(seed);
        say("run " + name + " seed " + std::to_string(seed));
        const RunResult r = run_experiment(vc, dir, &data, &burned);
        say("  map50=" + std::to_string(r.eval.map50) + " (" + std::to_string(r.seconds) + " s)");
      }
    }
  }

  SuiteTable t = recompute_table(out_dir);
  write_suite_table(out_dir, t);
  return t;
}

SuiteTable recompute_table(const std::filesystem::path& out_dir) {
  std::ifstream in(out_dir / "suite.json");
  if (!in) throw HarnessError("io", "no suite.json in " + out_dir.string());
  const json meta = json::parse(in);
  SuiteTable t;
  t.seeds = meta.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& r : meta.at("rows")) {
    SuiteRow row;
    row.section = r.at("section").get<std::string>();
    row.name = r.at("name").get<std::string>();
    row.run = r.at("run").get<std::string>();
    for (std::uint64_t s : t.seeds) {
      const auto dir = out_dir / "runs" / row.run / seed_dir(s);
      std::ifstream ev(dir / "eval.json");
      if (!ev) throw HarnessError("io", "missing " + (dir / "eval.json").string());
      const json j = json::parse(ev);
      const json& teacher = j.at("teacher");
      row.map_per_seed.push_back(teacher.at("map50").get<double>());
      row.ap_per_seed.push_back(read_ap(teacher.at("per_class_ap")));
      row.separability_per_seed.push_back(j.at("mean_separability").is_null() ? std::nan("") : j.at("mean_separability").get<double>());
      double margin = std::nan("");
      std::ifstream hm(dir / "heatmap.csv");
      if (hm) {
        std::string line;
        std::getline(hm, line);
        std::vector<std::vector<double>> m;
        while (std::getline(hm, line)) {
          std::stringstream ss(line);
          std::string cell;
          std::getline(ss, cell, ',');
          std::vector<double> vals;
          while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
          m.push_back(vals);
        }
        align::Heatmap h{Tensor(Shape{static_cast<int>(m.size()), static_cast<int>(m.size())}),
                         std::vector<bool>(m.size(), false)};
        for (std::size_t i = 0; i < m.size(); ++i) {
          double rs = 0;
          for (std::size_t k = 0; k < m[i].size(); ++k) {
            h.activation.at(static_cast<int>(i), static_cast<int>(k)) = m[i][k];
            rs += m[i][k];
          }
          h.present[i] = rs > 0;
        }
        margin = heatmap_margin(h);
      }
      row.heatmap_margin_per_seed.push_back(margin);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string render_text_table(const SuiteTable& t) {
  std::ostringstream out;
  out << std::left << std::setw(11) << "section" << std::setw(16) << "row" << std::right << std::setw(16) << "mAP50 (x100)";
  for (std::uint64_t s : t.seeds) out << std::setw(9) << ("s" + std::to_string(s));
  out << '\n' << std::string(43 + 9 * t.seeds.size(), '-') << '\n';
  std::string prev;
  for (const SuiteRow& r : t.rows) {
    if (!prev.empty() && r.section != prev) out << '\n';
    prev = r.section;
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(1) << 100 * r.mean() << " +- " << 100 * r.stddev();
    out << std::left << std::setw(11) << r.section << std::setw(16) << r.name << std::right << std::setw(16) << cell.str();
    for (double v : r.map_per_seed) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(1) << 100 * v;
      out << std::setw(9) << c.str();
    }
    out << '\n';
  }
  return out.str();
}

void write_suite_table(const std::filesystem::path& out_dir, const SuiteTable& t) {
  std::ofstream csv(out_dir / "ablation.csv");
  if (!csv) throw HarnessError("io", "cannot write ablation.csv");
  csv.precision(10);
  csv << "section,row,run,map50_mean,map50_std";
  for (std::uint64_t s : t.seeds) csv << ",map50_seed" << s;
  csv << '\n';
  for (const SuiteRow& r : t.rows) {
    csv << r.section << ',' << r.name << ',' << r.run << ',' << r.mean() << ',' << r.stddev();
    for (double v : r.map_per_seed) csv << ',' << v;
    csv << '\n';
  }
  std::ofstream txt(out_dir / "ablation.txt");
  txt << render_text_table(t);
}

}  // namespace acia::harness
