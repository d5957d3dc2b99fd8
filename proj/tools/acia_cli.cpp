// acia: data generation, training, ablation suites, evaluation and plots.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "acia/harness.hpp"
#include "acia/json_io.hpp"

namespace fs = std::filesystem;
using namespace acia;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::int64_t seed = -1;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c, bool need_out = true) {
  app->add_option("--config", c.config, "JSON config file");
  app->add_option("--seed", c.seed, "Seed (overrides the config)");
  auto* o = app->add_option("--out", c.out, "Output directory");
  if (need_out) o->required();
  app->add_option("--override", c.overrides, "key=value, dotted key path (repeatable)");
}

harness::ExperimentConfig build_config(const Common& c) {
  harness::ExperimentConfig cfg;
  if (!c.config.empty()) cfg = harness::load_config(c.config);
  cfg = harness::with_overrides(cfg, c.overrides);
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  cfg.validate();
  return cfg;
}

// verbatim copy of the user's config next to the resolved snapshot
void copy_input_config(const Common& c, const fs::path& out) {
  if (c.config.empty()) return;
  fs::create_directories(out);
  fs::copy_file(c.config, out / "config.input.json", fs::copy_options::overwrite_existing);
}

int exit_code(const std::string& kind) {
  if (kind == "usage") return 64;
  if (kind == "config") return 2;
  if (kind == "io") return 3;
  if (kind == "non_finite_loss") return 4;
  return 1;
}

int fail(const std::string& verb, const std::string& kind, const std::string& msg, const std::string& out_dir,
         const json& extra = json::object()) {
  json rec = {{"status", "error"}, {"verb", verb}, {"kind", kind}, {"message", msg}, {"exit_code", exit_code(kind)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) rec[it.key()] = it.value();
  std::cerr << rec.dump() << '\n';
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream f(fs::path(out_dir) / "error.json");
    if (f) f << rec.dump(2) << '\n';
  }
  return exit_code(kind);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw harness::HarnessError("usage", "bad seed list: " + s);
    }
  }
  if (out.empty()) throw harness::HarnessError("usage", "empty seed list");
  return out;
}

void print_eval(const eval::EvalResult& r, int k) {
  std::cout << "map50 " << r.map50 << '\n';
  for (int c = 0; c < k; ++c) std::cout << "  " << synth::shape_name(c) << " ap50 " << r.per_class_ap[static_cast<std::size_t>(c)] << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-conditioned multi-source domain adaptation for detection"};
  app.require_subcommand(1);

  Common gen, train, ablate, ev, plot;

  auto* gen_cmd = app.add_subcommand("gen-data", "Generate and save the synthetic benchmark");
  add_common(gen_cmd, gen);

  auto* train_cmd = app.add_subcommand("train", "Burn-in, mutual learning and teacher evaluation");
  add_common(train_cmd, train);
  bool no_plots = false;
  train_cmd->add_flag("--no-plots", no_plots, "Skip SVG figures");

  auto* ablate_cmd = app.add_subcommand("ablate", "Run the ablation suite over several seeds");
  add_common(ablate_cmd, ablate);
  std::string seeds = "0,1,2";
  std::vector<std::string> sections;
  std::string profile = "highly_imbalanced";
  ablate_cmd->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  ablate_cmd->add_option("--sections", sections, "Subset of ladder,merge,target,imbalance")
      ->check(CLI::IsMember({"ladder", "merge", "target", "imbalance"}))
      ->delimiter(',');
  ablate_cmd->add_option("--profile", profile, "Imbalance profile")->capture_default_str();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the target test split");
  add_common(eval_cmd, ev);
  std::string run_dir, checkpoint;
  eval_cmd->add_option("--run", run_dir, "Run directory (uses its config.json and teacher.ckpt)");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file (default <run>/teacher.ckpt)");

  auto* plot_cmd = app.add_subcommand("plot", "Render heatmap/projection figures for a run");
  add_common(plot_cmd, plot, false);
  std::string plot_run, compare;
  std::vector<std::string> labels{"baseline", "ACIA"};
  plot_cmd->add_option("--run", plot_run, "Run directory")->required();
  plot_cmd->add_option("--compare", compare, "Second run directory for a side-by-side projection");
  plot_cmd->add_option("--labels", labels, "Panel labels for --compare")->expected(2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(argc > 1 ? argv[1] : "", "usage", e.what(), "");
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  std::string out_dir;
  try {
    if (verb == "gen-data") {
      out_dir = gen.out;
      harness::ExperimentConfig cfg = build_config(gen);
      if (gen.seed >= 0) cfg.benchmark.seed = static_cast<std::uint64_t>(gen.seed);
      const synth::Benchmark b = synth::make_msda_benchmark(cfg.benchmark);
      synth::save_benchmark(gen.out, cfg.benchmark, b);
      std::size_t n = b.target_unlabeled.samples.size() + b.target_test.samples.size();
      for (const auto& s : b.sources) n += s.samples.size();
      std::cout << "wrote " << n << " images to " << gen.out << '\n';
    } else if (verb == "train") {
      out_dir = train.out;
      const harness::ExperimentConfig cfg = build_config(train);
      copy_input_config(train, train.out);
      const harness::RunResult r = harness::run_experiment(cfg, train.out);
      if (!no_plots) harness::report_plots(train.out);
      std::cout << "source-only ";
      print_eval(r.source_only, cfg.benchmark.num_classes);
      std::cout << "teacher ";
      print_eval(r.eval, cfg.benchmark.num_classes);
      std::cout << "seconds " << r.seconds << '\n';
    } else if (verb == "ablate") {
      out_dir = ablate.out;
      const harness::ExperimentConfig cfg = build_config(ablate);
      copy_input_config(ablate, ablate.out);
      harness::SuiteOptions opt;
      opt.seeds = parse_seeds(seeds);
      opt.imbalance_profile = profile;
      if (!sections.empty()) {
        auto has = [&](const char* s) { return std::find(sections.begin(), sections.end(), s) != sections.end(); };
        opt.ladder = has("ladder");
        opt.merge_modes = has("merge");
        opt.target_variants = has("target");
        opt.imbalance = has("imbalance");
      }
      opt.progress = [](const std::string& m) { std::cerr << m << std::endl; };
      const harness::SuiteTable t = harness::ablation_suite(cfg, ablate.out, opt);
      const fs::path runs = fs::path(ablate.out) / "runs";
      const std::string s0 = "seed" + std::to_string(opt.seeds.front());
      for (const char* name : {"image", "acia"}) {
        if (fs::exists(runs / name / s0)) harness::report_plots(runs / name / s0);
      }
      if (fs::exists(runs / "image" / s0) && fs::exists(runs / "acia" / s0)) {
        harness::comparison_plot(runs / "image" / s0, runs / "acia" / s0, fs::path(ablate.out) / "comparison.svg",
                                 "no instance alignment", "class-conditioned (attention)");
      }
      std::cout << harness::render_text_table(t);
    } else if (verb == "eval") {
      out_dir = ev.out;
      harness::ExperimentConfig cfg;
      if (!run_dir.empty()) {
        cfg = harness::load_config(fs::path(run_dir) / "config.json");
        if (checkpoint.empty()) checkpoint = (fs::path(run_dir) / "teacher.ckpt").string();
        cfg = harness::with_overrides(cfg, ev.overrides);
        if (!ev.config.empty()) throw harness::HarnessError("usage", "--config and --run are exclusive");
      } else {
        cfg = build_config(ev);
      }
      if (checkpoint.empty()) throw harness::HarnessError("usage", "eval needs --run or --checkpoint");
      cfg.validate();
      const synth::Benchmark data = harness::load_or_generate(cfg);
      const ModelState params = harness::load_checkpoint(checkpoint);
      det::Detector detector(cfg.detector);
      harness::RunResult r;
      r.eval = harness::evaluate_model(detector, params, data.target_test.samples, cfg.benchmark.num_classes);
      r.source_only = r.eval;
      r.diagnostics = harness::compute_diagnostics(cfg, data, params);
      r.eval.separability = r.diagnostics.separability;
      fs::create_directories(ev.out);
      harness::write_run_artifacts(ev.out, cfg, r);
      print_eval(r.eval, cfg.benchmark.num_classes);
    } else if (verb == "plot") {
      out_dir = plot.out;
      std::vector<fs::path> written = harness::report_plots(plot_run);
      if (!compare.empty()) {
        const fs::path dest = plot.out.empty() ? fs::path(plot_run) / "comparison.svg" : fs::path(plot.out) / "comparison.svg";
        written.push_back(harness::comparison_plot(plot_run, compare, dest, labels.at(0), labels.at(1)));
      }
      if (written.empty()) throw harness::HarnessError("io", "no diagnostics found in " + plot_run);
      for (const auto& p : written) std::cout << p.string() << '\n';
    }
  } catch (const harness::NonFiniteLoss& e) {
    const auto& l = e.last().losses;
    return fail(verb, e.kind(), e.what(), out_dir,
                {{"step", e.last().step},
                 {"phase", e.last().phase},
                 {"losses", {{"sup", l.sup}, {"unsup", l.unsup}, {"dis", l.dis}, {"cdis", l.cdis}, {"total", l.total}}}});
  } catch (const harness::HarnessError& e) {
    return fail(verb, e.kind(), e.what(), out_dir);
  } catch (const std::invalid_argument& e) {
    return fail(verb, "config", e.what(), out_dir);
  } catch (const std::exception& e) {
    return fail(verb, "internal", e.what(), out_dir);
  }
  return 0;
}
