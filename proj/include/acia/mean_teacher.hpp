#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <vector>

#include "acia/alignment.hpp"

// Mean-teacher self-training: augmentations, pseudo-labels, EMA teacher,
// the optimizer, and the burn-in / mutual-learning steps.
namespace acia::mt {

using det::DetectionSample;

struct WeakAugConfig {
  double flip_prob = 0.5;
  double min_scale = 0.8;
  double max_scale = 1.2;
  double min_box_side = 2.0;  // boxes smaller than this after cropping are dropped
};

struct StrongAugConfig {
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double gray_prob = 0.2;
  double blur_prob = 0.5;
  double min_blur_sigma = 0.1;
  double max_blur_sigma = 1.5;
  double cutout_prob = 0.7;
  int max_cutouts = 3;
  double min_cutout_frac = 0.05;  // side length relative to the image
  double max_cutout_frac = 0.2;
  double cutout_fill = 0.0;

  static StrongAugConfig disabled();
};

// Geometric building blocks. Boxes follow the image.
DetectionSample hflip(const DetectionSample& s);
// Scales content about the top-left corner, keeping the canvas size; the
// uncovered area is zero. Boxes are scaled, clipped and filtered.
DetectionSample rescale(const DetectionSample& s, double factor, double min_box_side = 2.0);
DetectionSample weak_augment(const DetectionSample& s, Rng& rng, const WeakAugConfig& cfg = {});

// Photometric building blocks on [3,H,W] images in [0,1].
Tensor color_jitter(const Tensor& image, double brightness_factor, double contrast_factor, double saturation_factor);
Tensor to_grayscale(const Tensor& image);
Tensor gaussian_blur(const Tensor& image, double sigma);
Tensor cutout(const Tensor& image, int x0, int y0, int w, int h, double fill);
Tensor strong_augment(const Tensor& image, Rng& rng, const StrongAugConfig& cfg = {});

struct PseudoLabelSet {
  BoxSet boxes;
  int source_image_id = 0;
  double tau_used = 0.7;
};

// Detections with score >= tau, order kept.
BoxSet filter_by_score(const BoxSet& detections, double tau);
// Runs the teacher on an (already weak-augmented) target image and keeps
// confident detections. No graph is built.
PseudoLabelSet generate_pseudo_labels(const det::Detector& detector, const ModelState& teacher,
                                      const DetectionSample& sample, double tau);

// Detection losses of the student on the strong view against pseudo boxes;
// a constant zero for an empty set.
nn::Var unsupervised_loss(const det::Detector& detector, const ModelState& student, const Tensor& strong_image,
                          const PseudoLabelSet& pseudo, int domain_id, std::uint64_t seed);

struct LossBreakdown {
  double sup = 0;
  double unsup = 0;
  double dis = 0;
  double cdis = 0;
  double total = 0;
};

// total = sup + alpha*unsup + beta*dis + gamma_w*cdis
LossBreakdown total_loss(const LossBreakdown& parts, const align::AlignmentConfig& cfg);

struct LossParts {
  nn::Var sup, unsup, dis, cdis;
};
nn::Var weighted_total(const LossParts& parts, const align::AlignmentConfig& cfg);

// teacher <- delta*teacher + (1-delta)*student, then teacher.step += 1.
void ema_update(ModelState& teacher, const ModelState& student, double delta);

// Teacher initialization: an exact copy that never receives gradients.
ModelState make_teacher(const ModelState& student);

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double clip_norm = 10.0;  // global gradient norm cap; 0 disables
};

// SGD with momentum over every parameter that received a gradient.
class SgdMomentum {
 public:
  explicit SgdMomentum(OptimizerConfig cfg) : cfg_(cfg) {}
  // Returns the pre-clipping gradient norm.
  double step(ModelState& params);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor> velocity_;
};

struct StepFlags {
  bool image_align = true;
  bool instance_align = true;
};

struct StepRecord {
  std::int64_t step = 0;
  std::string phase;
  LossBreakdown losses;
  int n_pseudo = 0;
  double grad_norm = 0;
};

// One NDJSON object per line.
void write_step_record(std::ostream& out, const StepRecord& r);

// Owns the per-run training machinery. Sources are domains 0..N-1, the
// target is domain N. Each step draws its randomness from streams derived
// from (seed, step), so a step is reproducible in isolation.
class MeanTeacher {
 public:
  MeanTeacher(const det::Detector& detector, const align::DomainAligner& aligner, OptimizerConfig opt,
              WeakAugConfig weak, StrongAugConfig strong, StepFlags flags, std::uint64_t seed);

  // Supervised step on one sample per source; alignment parameters are frozen.
  StepRecord burn_in_step(ModelState& student, std::span<const DetectionSample> source_batch);
  // Full objective, optimizer step on the student, then EMA into the teacher.
  StepRecord mutual_learning_step(ModelState& student, ModelState& teacher,
                                  std::span<const DetectionSample> source_batch,
                                  std::span<const DetectionSample> target_batch);

  // Runs `steps` burn-in steps with round-robin source sampling.
  void burn_in_phase(ModelState& student, const std::vector<std::vector<DetectionSample>>& sources, int steps,
                     const std::function<void(const StepRecord&)>& on_step = {});

  std::int64_t steps_taken() const { return step_; }
  void reset_optimizer() { opt_ = SgdMomentum(opt_.config()); }

 private:
  std::vector<DetectionSample> augment_sources(std::span<const DetectionSample> batch, std::uint64_t stream) const;

  const det::Detector& detector_;
  const align::DomainAligner& aligner_;
  SgdMomentum opt_;
  WeakAugConfig weak_;
  StrongAugConfig strong_;
  StepFlags flags_;
  std::uint64_t seed_;
  std::int64_t step_ = 0;
};

// One sample per domain. Each domain is visited in a fresh seeded order
// every pass over it.
std::vector<DetectionSample> round_robin_batch(const std::vector<std::vector<DetectionSample>>& domains,
                                               std::int64_t step, std::uint64_t seed);

}  // namespace acia::mt
