#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <sstream>

#include "acia/harness.hpp"
#include "doctest.h"

using namespace acia;
using namespace acia::harness;
using nlohmann::json;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("acia_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.benchmark = synth::default_benchmark(3, 11);
  c.benchmark.images_per_domain = 6;
  c.benchmark.test_images = 6;
  c.benchmark.image_size = 48;
  c.benchmark.min_size = 10;
  c.benchmark.max_size = 18;
  c.benchmark.max_objects = 3;
  c.detector.backbone_channels = {8, 16, 16};
  c.detector.rpn_channels = 16;
  c.detector.head_hidden = 32;
  c.alignment.d_e = 16;
  c.alignment.num_heads = 2;
  c.burn_in_steps = 4;
  c.mutual_steps = 3;
  c.log_every = 1;
  c.diag_images_per_domain = 6;
  c.projection_points = 25;
  c.seed = 3;
  c.resolve();
  return c;
}

std::vector<std::vector<double>> read_numeric_csv(const std::filesystem::path& p, bool skip_first_col) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> r;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (!(first && skip_first_col)) r.push_back(std::stod(cell));
      first = false;
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST_CASE("config json round trip and overrides") {
  const ExperimentConfig c = tiny_config();
  const ExperimentConfig back = config_from_json(json(to_json(c)));
  CHECK(to_json(back).dump() == to_json(c).dump());

  const ExperimentConfig o = with_overrides(c, {"alignment.gamma_w=0.5", "ablation.image_align=false",
                                                "benchmark.sources.1.illumination=0.7", "alignment.merge_mode=concat"});
  CHECK(o.alignment.gamma_w == 0.5);
  CHECK_FALSE(o.ablation.image_align);
  CHECK(o.benchmark.sources[1].illumination == 0.7);
  CHECK(o.alignment.merge_mode == align::MergeMode::concat);

  // benchmark size drags the detector along
  const ExperimentConfig s = with_overrides(c, {"benchmark.image_size=64"});
  CHECK(s.detector.image_size == 64);
  s.validate();

  CHECK_THROWS_AS(with_overrides(c, {"alignment.gama=1"}), HarnessError);
  CHECK_THROWS_AS(with_overrides(c, {"novalue"}), HarnessError);
  CHECK_THROWS_AS(with_overrides(c, {"benchmark.sources.7.noise_sigma=0"}), HarnessError);
  CHECK_THROWS_AS(config_from_json(json{{"burn_in", 3}}), HarnessError);
}

TEST_CASE("config invariants") {
  ExperimentConfig c = tiny_config();
  c.ablation = {true, false, true, false};
  CHECK_THROWS_AS(c.validate(), HarnessError);
  c.ablation = {true, false, false, true};
  CHECK_THROWS_AS(c.validate(), HarnessError);
  c.ablation = {true, true, false, false};
  c.validate();
  CHECK(c.effective_merge_mode() == align::MergeMode::agnostic);
  CHECK_FALSE(ExperimentConfig{}.ablation.include_target_in_cdis);
}

TEST_CASE("checkpoint round trip") {
  const ExperimentConfig c = tiny_config();
  det::Detector detector(c.detector);
  ModelState s;
  Rng rng(9);
  detector.init_params(s, rng);
  s.step = 17;
  const auto dir = scratch_dir("ckpt");
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", s);
  const ModelState back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.step == 17);
  REQUIRE(back.params().size() == s.params().size());
  for (const auto& [name, var] : s.params()) {
    const Tensor& a = var.value();
    const Tensor& b = back.params().at(name).value();
    REQUIRE(a.shape() == b.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(b.data()[i] == static_cast<double>(static_cast<float>(a.data()[i])));
  }
  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), HarnessError);
}

TEST_CASE("run_experiment is deterministic and writes its artifacts") {
  const ExperimentConfig c = tiny_config();
  const auto d1 = scratch_dir("run1"), d2 = scratch_dir("run2");
  const RunResult a = run_experiment(c, d1);
  const RunResult b = run_experiment(c, d2);
  CHECK(a.eval.per_class_ap.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    const double x = a.eval.per_class_ap[k], y = b.eval.per_class_ap[k];
    CHECK(((std::isnan(x) && std::isnan(y)) || x == y));
  }
  CHECK(a.eval.map50 == b.eval.map50);
  for (const char* f : {"config.json", "log.ndjson", "teacher.ckpt", "student.ckpt", "eval.csv", "eval.json", "heatmap.csv",
                        "instances.csv"}) {
    CHECK_MESSAGE(std::filesystem::exists(d1 / f), f);
    CHECK_MESSAGE(slurp(d1 / f) == slurp(d2 / f), f);
  }
  // the snapshot alone reproduces the run
  const RunResult again = run_experiment(load_config(d1 / "config.json"), {});
  CHECK(again.eval.map50 == a.eval.map50);

  // log covers burn-in and mutual steps with the offset step index
  std::ifstream log(d1 / "log.ndjson");
  std::string line, last;
  int n = 0;
  while (std::getline(log, line)) {
    last = line;
    ++n;
  }
  CHECK(n == c.burn_in_steps + c.mutual_steps);
  const json lj = json::parse(last);
  CHECK(lj.at("step").get<int>() == c.burn_in_steps + c.mutual_steps - 1);
  CHECK(lj.at("phase").get<std::string>() == "mutual");
}

TEST_CASE("all alignment off is a plain mean teacher run") {
  ExperimentConfig c = tiny_config();
  c.ablation = {false, false, false, false};
  const RunResult r = run_experiment(c, {});
  CHECK(r.last_losses.dis == 0);
  CHECK(r.last_losses.cdis == 0);
  CHECK(std::isfinite(r.last_losses.total));
  CHECK(r.diagnostics.heatmap.activation.empty());
}

TEST_CASE("non-finite loss aborts with a dump") {
  ExperimentConfig c = tiny_config();
  c.optimizer.lr = 1e300;
  const auto dir = scratch_dir("nan");
  bool thrown = false;
  try {
    run_experiment(c, dir);
  } catch (const NonFiniteLoss& e) {
    thrown = true;
    CHECK(e.kind() == "non_finite_loss");
    CHECK_FALSE(std::isfinite(e.last().losses.total));
  }
  CHECK(thrown);
  REQUIRE(std::filesystem::exists(dir / "nan_dump.json"));
  const json j = json::parse(slurp(dir / "nan_dump.json"));
  CHECK(j.contains("sup"));
  CHECK(j.contains("step"));
}

TEST_CASE("ablation suite rows, order and recomputation") {
  ExperimentConfig c = tiny_config();
  c.mutual_steps = 2;
  c.burn_in_steps = 2;
  const auto dir = scratch_dir("suite");
  SuiteOptions opt;
  opt.seeds = {0, 1, 2};
  opt.imbalance = false;
  const SuiteTable t = ablation_suite(c, dir, opt);
  const std::vector<std::pair<std::string, std::string>> expected{
      {"ladder", "source only"}, {"ladder", "none"},    {"ladder", "+image"},    {"ladder", "+instance"},
      {"ladder", "+class-cond"}, {"merge", "concat"},   {"merge", "multiply"},   {"merge", "attention"},
      {"target", "without target"}, {"target", "with target"}};
  REQUIRE(t.rows.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(t.rows[i].section == expected[i].first);
    CHECK(t.rows[i].name == expected[i].second);
    CHECK(t.rows[i].map_per_seed.size() == 3);
  }
  // shared runs report the same numbers
  CHECK(t.row("merge", "attention").map_per_seed == t.row("ladder", "+class-cond").map_per_seed);

  // every cell comes back from the stored per-seed files
  const SuiteTable re = recompute_table(dir);
  for (std::size_t i = 0; i < t.rows.size(); ++i) CHECK(re.rows[i].map_per_seed == t.rows[i].map_per_seed);
  for (const SuiteRow& r : t.rows) {
    for (std::size_t s = 0; s < 3; ++s) {
      const json ev = json::parse(slurp(dir / "runs" / r.run / ("seed" + std::to_string(s)) / "eval.json"));
      CHECK(ev.at("teacher").at("map50").get<double>() == r.map_per_seed[s]);
    }
  }

  std::ifstream in(dir / "ablation.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "section,row,run,map50_mean,map50_std,map50_seed0,map50_seed1,map50_seed2");
  int n = 0;
  while (std::getline(in, line)) ++n;
  CHECK(n == static_cast<int>(expected.size()));
  const std::string txt = render_text_table(t);
  CHECK(txt.find("+class-cond") != std::string::npos);
  CHECK(txt.find("with target") != std::string::npos);

  SuiteOptions bad;
  bad.seeds = {};
  CHECK_THROWS_AS(ablation_suite(c, scratch_dir("suite_bad"), bad), HarnessError);
}

TEST_CASE("plots match their csv files") {
  const ExperimentConfig c = tiny_config();
  const auto dir = scratch_dir("plots");
  run_experiment(c, dir);
  const auto written = report_plots(dir);
  CHECK(written.size() == 2);

  const std::string svg = slurp(dir / "heatmap.svg");
  const auto hm = read_numeric_csv(dir / "heatmap.csv", true);
  const std::regex cell(R"re(data-row="(\d+)" data-col="(\d+)" data-value="([^"]+)")re");
  int cells = 0;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), cell); it != std::sregex_iterator(); ++it) {
    const int i = std::stoi((*it)[1]), j = std::stoi((*it)[2]);
    CHECK(std::stod((*it)[3]) == hm.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(j)));
    ++cells;
  }
  CHECK(cells == 9);

  const auto inst = read_numeric_csv(dir / "instances.csv", false);
  CHECK(inst.size() > 0);
  CHECK(inst.size() <= 25);
  const std::string proj = slurp(dir / "projection.svg");
  const std::regex pt(R"re(class="pt")re");
  CHECK(std::distance(std::sregex_iterator(proj.begin(), proj.end(), pt), std::sregex_iterator()) ==
        static_cast<long>(inst.size()));

  // re-rendering is byte-identical
  report_plots(dir);
  CHECK(slurp(dir / "projection.svg") == proj);

  const auto cmp = comparison_plot(dir, dir, dir / "cmp.svg", "a", "b");
  const std::string cs = slurp(cmp);
  CHECK(std::distance(std::sregex_iterator(cs.begin(), cs.end(), pt), std::sregex_iterator()) ==
        2 * static_cast<long>(inst.size()));
}

TEST_CASE("pca projection") {
  // points on a line along (1,1,0): one dominant axis, second ~0
  std::vector<std::vector<double>> f;
  for (int i = 0; i < 10; ++i) f.push_back({double(i), double(i), 0.0});
  const auto p = pca_project(f);
  for (int i = 0; i < 10; ++i) {
    CHECK(p[static_cast<std::size_t>(i)][0] == doctest::Approx((i - 4.5) * std::sqrt(2.0)).epsilon(1e-9));
    CHECK(std::abs(p[static_cast<std::size_t>(i)][1]) < 1e-9);
  }
}
