#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "acia/box.hpp"
#include "acia/model_state.hpp"
#include "acia/ops.hpp"
#include "acia/rng.hpp"

// Compact two-stage detector: conv backbone, single-level anchor RPN,
// ROI-align, and a two-layer box head with focal / smooth-L1 losses.
namespace acia::det {

struct DetectionSample {
  Tensor image;  // [3,H,W], values in [0,1]
  int domain_id = 0;
  std::vector<Box> boxes;
  bool is_labeled = false;
  int image_id = 0;
};

struct FeatureMap {
  nn::Var data;  // [C,H',W']
  int stride = 8;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// A batch of ROI features, one [C,P,P] slice per box.
struct InstanceFeatures {
  nn::Var data;  // [R,C,P,P]
  std::vector<Box> boxes;
  std::vector<int> domain_ids;

  int count() const { return static_cast<int>(boxes.size()); }
};

struct DetectorConfig {
  int num_classes = 4;  // K; background is index K
  int image_size = 128;
  std::vector<int> backbone_channels{16, 32, 64, 64};  // 2x pooling after all but the last
  int rpn_channels = 64;
  std::vector<double> anchor_sizes{12.0, 20.0, 32.0};
  int roi_size = 4;      // P
  int roi_sampling = 2;  // sample points per bin side
  int head_hidden = 128;

  int rpn_batch = 64;
  double rpn_positive_fraction = 0.5;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;
  int rpn_pre_nms_top_k = 300;
  double rpn_nms_iou = 0.7;
  int train_proposals = 64;
  int test_proposals = 48;

  int roi_batch = 48;
  double roi_positive_fraction = 0.25;
  double roi_positive_iou = 0.5;
  double roi_negative_iou = 0.4;

  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double smooth_l1_beta = 1.0;
  std::array<double, 4> roi_box_weights{10.0, 10.0, 5.0, 5.0};

  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_detections = 50;

  int stride() const;
  int feature_channels() const { return backbone_channels.back(); }
  int num_anchors() const { return static_cast<int>(anchor_sizes.size()); }
  void validate() const;
};

// Delta parameterization (dx/w, dy/h, log dw, log dh), each scaled by a weight.
struct BoxCoder {
  std::array<double, 4> weights{1.0, 1.0, 1.0, 1.0};

  std::array<double, 4> encode(const Box& reference, const Box& target) const;
  Box decode(const Box& reference, std::span<const double> deltas) const;
};

struct RpnOutput {
  nn::Var objectness;  // [A_total] logits, ordered by anchor index
  nn::Var deltas;      // [A_total, 4]
  std::vector<Box> anchors;
};

struct HeadOutput {
  nn::Var class_logits;  // [R, K+1]
  nn::Var box_deltas;    // [R, 4]
};

struct LossTerm {
  nn::Var value;       // rank-0; constant zero when empty
  bool empty = false;  // no instances contributed
};

struct DetectionLosses {
  LossTerm rpn_cls;
  LossTerm rpn_reg;
  LossTerm roi_cls;
  LossTerm roi_reg;

  nn::Var cls() const;
  nn::Var reg() const;
  nn::Var total() const;
};

// Anchor labels for one image: sampled anchor indices with 0/1 objectness
// targets and regression targets for the positive ones.
struct AnchorTargets {
  std::vector<int> sampled;
  std::vector<double> labels;
  std::vector<int> positives;
  Tensor regression;  // [positives, 4]
};

// Second-stage training ROIs (proposals plus GT) with class labels, background = K.
struct RoiTargets {
  std::vector<Box> rois;
  std::vector<int> labels;
  std::vector<int> positive_rows;  // rows of rois with a foreground label
  Tensor regression;               // [positive_rows, 4], weighted deltas
};

struct RoiAlignOptions {
  int output_size = 4;
  int sampling_ratio = 2;
};

LossTerm zero_loss();

// Softmax focal loss, mean over rows: -alpha (1 - p_t)^gamma log p_t.
LossTerm focal_loss(const nn::Var& logits, std::span<const int> targets, double gamma, double alpha);
// Mean over all elements of pred - target.
LossTerm smooth_l1(const nn::Var& pred, const Tensor& target, double beta);

// Bilinear ROI-align with half-pixel alignment. Throws on zero-area boxes or
// boxes outside the feature map's image extent.
InstanceFeatures roi_pool(const FeatureMap& fmap, std::span<const Box> boxes, const RoiAlignOptions& opts);

// Per-class NMS over decoded head outputs. Scores descending.
BoxSet decode_detections(std::span<const Box> proposals, const Tensor& deltas, const Tensor& logits,
                         double score_thresh, double nms_iou, const BoxCoder& coder, int max_detections,
                         double image_w, double image_h);

class Detector {
 public:
  explicit Detector(DetectorConfig cfg);

  const DetectorConfig& config() const { return cfg_; }
  void init_params(ModelState& state, Rng& rng) const;

  FeatureMap backbone_forward(const Tensor& image, const ModelState& params) const;
  RpnOutput rpn_forward(const FeatureMap& fmap, const ModelState& params) const;
  std::vector<Box> anchors(int feat_h, int feat_w) const;
  std::vector<Box> generate_proposals(const RpnOutput& rpn, int image_h, int image_w, int top_k) const;
  std::vector<Box> generate_proposals(const FeatureMap& fmap, const ModelState& params, int top_k) const;
  HeadOutput detection_heads(const InstanceFeatures& feats, const ModelState& params) const;

  AnchorTargets assign_anchors(std::span<const Box> anchors, std::span<const Box> gt, Rng& rng) const;
  RoiTargets sample_rois(std::span<const Box> proposals, std::span<const Box> gt, Rng& rng) const;

  // Full first- and second-stage losses for one image whose features are given.
  DetectionLosses detection_losses(const FeatureMap& fmap, int image_h, int image_w, std::span<const Box> gt,
                                   const ModelState& params, Rng& rng) const;
  // Sum over samples of cls + reg losses. Sampling for sample i uses a stream
  // derived from (seed, domain_id, image_id), so the sum does not depend on
  // the order of the batch.
  nn::Var supervised_loss(std::span<const DetectionSample> batch, const ModelState& params,
                          std::uint64_t seed) const;

  BoxSet detect(const Tensor& image, const ModelState& params) const;
  BoxSet detect(const FeatureMap& fmap, int image_h, int image_w, const ModelState& params) const;

  BoxCoder rpn_coder() const { return BoxCoder{}; }
  BoxCoder roi_coder() const { return BoxCoder{cfg_.roi_box_weights}; }

 private:
  DetectorConfig cfg_;
};

std::uint64_t sample_stream(std::uint64_t seed, int domain_id, int image_id);

}  // namespace acia::det
