#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "acia/box.hpp"

// AP50 evaluation and the class-conditional domain separability probe.
namespace acia::eval {

// Detections and ground truth of one image (all classes mixed).
struct ImageResult {
  BoxSet detections;  // scored
  BoxSet ground_truth;
};

// All-point interpolated AP for one class over many images. Detections are
// visited by descending score (ties: image order, then input order); each
// matches the unmatched same-image GT of highest IoU if that IoU >= thresh.
// Precision/recall are only read at score-group boundaries, so tied scores
// count as one threshold. Returns NaN when the class has no GT.
double average_precision(std::span<const ImageResult> images, int class_id, double iou_thresh = 0.5);

// Single-image form over already class-filtered boxes.
double average_precision(const BoxSet& dets, const BoxSet& gts, double iou_thresh = 0.5);

// Mean over valid entries; throws when none is valid.
double mean_ap(std::span<const double> per_class, const std::vector<bool>& valid);

struct EvalResult {
  std::vector<double> per_class_ap;  // NaN where no GT
  std::vector<bool> valid;
  double map50 = 0;
  std::vector<double> separability;  // NaN where invalid or not computed
  int n_images = 0;
};

EvalResult evaluate(std::span<const ImageResult> images, int num_classes, double iou_thresh = 0.5);

struct InstanceRecord {
  std::vector<double> feature;
  int class_id = 0;
  int domain_id = 0;
};

struct ProbeConfig {
  int folds = 5;
  int iterations = 200;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

// Held-out balanced accuracy of a multinomial logistic probe predicting the
// domain, rescaled so chance is 0 and perfect is 1 (clamped below at 0).
// Requires >= 2 domains; throws otherwise.
double domain_separability(std::span<const InstanceRecord> records, const ProbeConfig& cfg = {});

// Per class; NaN where a class lacks two domains or has fewer than
// `min_per_domain` instances in some domain.
std::vector<double> class_conditional_separability(std::span<const InstanceRecord> records, int num_classes,
                                                   const ProbeConfig& cfg = {}, int min_per_domain = 5);

// Mean over finite entries; NaN if none.
double finite_mean(std::span<const double> v);

// class,ap50,separability rows then a summary line.
void write_eval_csv(const std::filesystem::path& path, const EvalResult& r, const std::vector<std::string>& class_names = {});

}  // namespace acia::eval
