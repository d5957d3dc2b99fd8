#pragma once

#include "json.hpp"

#include "acia/alignment.hpp"
#include "acia/detector.hpp"
#include "acia/mean_teacher.hpp"
#include "acia/synth.hpp"

// JSON mapping of every config struct. Missing keys keep their defaults.
namespace acia::synth {

inline void to_json(nlohmann::json& j, Texture t) { j = to_string(t); }
inline void from_json(const nlohmann::json& j, Texture& t) { t = parse_texture(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DomainSpec, name, palette, background, background_alt, illumination,
                                                noise_sigma, blur_sigma, color_jitter, background_texture, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BenchmarkConfig, num_classes, sources, target, images_per_domain,
                                                test_images, class_frequency, test_class_frequency, min_objects,
                                                max_objects, min_size, max_size, image_size, max_iou, seed)

inline nlohmann::json to_json(const BenchmarkConfig& cfg) { return cfg; }
inline BenchmarkConfig benchmark_from_json(const nlohmann::json& j) { return j.get<BenchmarkConfig>(); }

}  // namespace acia::synth

namespace acia::det {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DetectorConfig, num_classes, image_size, backbone_channels,
                                                rpn_channels, anchor_sizes, roi_size, roi_sampling, head_hidden,
                                                rpn_batch, rpn_positive_fraction, rpn_positive_iou, rpn_negative_iou,
                                                rpn_pre_nms_top_k, rpn_nms_iou, train_proposals, test_proposals,
                                                roi_batch, roi_positive_fraction, roi_positive_iou, roi_negative_iou,
                                                focal_gamma, focal_alpha, smooth_l1_beta, roi_box_weights,
                                                score_thresh, nms_iou, max_detections)

}  // namespace acia::det

namespace acia::align {

inline void to_json(nlohmann::json& j, MergeMode m) { j = to_string(m); }
inline void from_json(const nlohmann::json& j, MergeMode& m) { m = parse_merge_mode(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AlignmentConfig, alpha, beta, gamma_w, delta_ema, tau, lambda_grl,
                                                merge_mode, num_heads, d_e)

}  // namespace acia::align

namespace acia::mt {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WeakAugConfig, flip_prob, min_scale, max_scale, min_box_side)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StrongAugConfig, jitter_prob, brightness, contrast, saturation,
                                                gray_prob, blur_prob, min_blur_sigma, max_blur_sigma, cutout_prob,
                                                max_cutouts, min_cutout_frac, max_cutout_frac, cutout_fill)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, lr, momentum, weight_decay, clip_norm)

}  // namespace acia::mt
