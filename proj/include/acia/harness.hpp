#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "acia/alignment.hpp"
#include "acia/detector.hpp"
#include "acia/eval.hpp"
#include "acia/mean_teacher.hpp"
#include "acia/synth.hpp"

// Experiment orchestration: configs, single runs, ablation suites, artifacts.
namespace acia::harness {

struct AblationFlags {
  bool image_align = true;
  bool instance_align = true;
  bool class_conditioning = true;  // false with instance_align: class-agnostic instance alignment
  bool include_target_in_cdis = false;
};

struct ExperimentConfig {
  synth::BenchmarkConfig benchmark = synth::default_benchmark();
  std::string data_dir;  // load a saved benchmark instead of generating one
  det::DetectorConfig detector;
  align::AlignmentConfig alignment;
  mt::OptimizerConfig optimizer;
  mt::WeakAugConfig weak_aug;
  mt::StrongAugConfig strong_aug;
  int burn_in_steps = 1500;
  int mutual_steps = 1000;
  int target_batch = 1;
  int log_every = 50;
  int diag_images_per_domain = 60;  // images whose GT instances feed the diagnostics
  int projection_points = 400;
  std::uint64_t seed = 0;
  AblationFlags ablation;

  // The detector's class count and input size follow the benchmark.
  void resolve();
  void validate() const;
  // Merge mode actually used by the aligner under the ablation flags.
  align::MergeMode effective_merge_mode() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// key=value with a dotted key into the JSON form; the value is parsed as JSON
// when it is valid JSON, else taken as a string. Unknown keys are rejected.
void apply_override(nlohmann::json& j, const std::string& assignment);
ExperimentConfig with_overrides(const ExperimentConfig& cfg, const std::vector<std::string>& overrides);

// Errors carrying a machine-readable kind for the CLI.
class HarnessError : public std::runtime_error {
 public:
  HarnessError(std::string kind, const std::string& msg) : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

// Raised when a loss turns non-finite; the last breakdown is attached.
class NonFiniteLoss : public HarnessError {
 public:
  NonFiniteLoss(const mt::StepRecord& last, const std::string& msg) : HarnessError("non_finite_loss", msg), last_(last) {}
  const mt::StepRecord& last() const { return last_; }

 private:
  mt::StepRecord last_;
};

// Float32 little-endian checkpoint: magic, header length, JSON header
// (names, shapes, offsets, step), raw data.
void save_checkpoint(const std::filesystem::path& path, const ModelState& state);
ModelState load_checkpoint(const std::filesystem::path& path);

synth::Benchmark load_or_generate(const ExperimentConfig& cfg);

// Detector-only parameters after burn-in; shared by every variant with the
// same seed, data, detector and optimizer settings.
ModelState burn_in(const ExperimentConfig& cfg, const synth::Benchmark& data,
                   const std::function<void(const mt::StepRecord&)>& on_step = {});

struct Diagnostics {
  std::vector<double> separability;  // per class, pooled ROI features over all domains
  align::Heatmap heatmap;            // empty unless class-conditioned
  std::vector<eval::InstanceRecord> instances;
};

struct RunResult {
  eval::EvalResult eval;          // teacher on the target test split
  eval::EvalResult source_only;   // burn-in model on the same split
  mt::LossBreakdown last_losses;
  Diagnostics diagnostics;
  double seconds = 0;
};

eval::EvalResult evaluate_model(const det::Detector& detector, const ModelState& params,
                                std::span<const det::DetectionSample> test, int num_classes);

Diagnostics compute_diagnostics(const ExperimentConfig& cfg, const synth::Benchmark& data, const ModelState& model);

// Burn-in, teacher init, mutual learning, teacher evaluation. Writes the
// config snapshot, log, checkpoints, eval and diagnostics to out_dir when it
// is non-empty. A prebuilt benchmark and burn-in state may be supplied.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                         const synth::Benchmark* data = nullptr, const ModelState* burned_in = nullptr);

// Writes eval.csv, eval.json, heatmap.csv and instances.csv for a result.
void write_run_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg, const RunResult& r);

struct SuiteOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool ladder = true;
  bool merge_modes = true;
  bool target_variants = true;
  bool imbalance = true;
  std::string imbalance_profile = "highly_imbalanced";
  std::function<void(const std::string&)> progress;
};

struct SuiteRow {
  std::string section;
  std::string name;
  std::string run;  // directory under runs/
  std::vector<double> map_per_seed;
  std::vector<std::vector<double>> ap_per_seed;  // [seed][class]
  std::vector<double> separability_per_seed;
  std::vector<double> heatmap_margin_per_seed;  // diagonal mean minus off-diagonal mean

  double mean() const;
  double stddev() const;  // sample standard deviation
};

struct SuiteTable {
  std::vector<SuiteRow> rows;
  std::vector<std::uint64_t> seeds;

  const SuiteRow& row(const std::string& section, const std::string& name) const;
};

// Rows in order: ladder (source only, none, +image, +instance, +class-cond),
// merge (concat, multiply, attention), target (without, with), imbalance
// (class-agnostic, class-conditioned).
SuiteTable ablation_suite(const ExperimentConfig& base, const std::filesystem::path& out_dir, const SuiteOptions& opt = {});

// CSV with mean/std and per-seed values, and an aligned text rendering.
void write_suite_table(const std::filesystem::path& out_dir, const SuiteTable& t);
std::string render_text_table(const SuiteTable& t);
// Rebuilds the table from the per-run eval.json files under out_dir/runs.
SuiteTable recompute_table(const std::filesystem::path& out_dir);

// SVG figures: heatmap.svg, projection.svg per run and a side-by-side
// comparison. Returns written paths.
std::vector<std::filesystem::path> report_plots(const std::filesystem::path& run_dir);
std::filesystem::path comparison_plot(const std::filesystem::path& a, const std::filesystem::path& b,
                                      const std::filesystem::path& out_svg, const std::string& label_a = "baseline",
                                      const std::string& label_b = "ACIA");

// Deterministic 2-D PCA projection of instance features.
std::vector<std::array<double, 2>> pca_project(const std::vector<std::vector<double>>& features);

}  // namespace acia::harness
