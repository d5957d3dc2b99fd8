#pragma once

#include <span>
#include <string>
#include <vector>

#include "acia/detector.hpp"

// Adversarial domain alignment: an image-level multi-domain discriminator
// over backbone features and a class-conditioned instance-level aligner.
namespace acia::align {

using det::DetectionSample;
using det::FeatureMap;
using det::InstanceFeatures;

// How class identity is merged into an ROI feature before the instance
// discriminator. `agnostic` ignores the class (plain instance alignment).
enum class MergeMode { attention, concat, multiply, agnostic };

MergeMode parse_merge_mode(const std::string& name);
std::string to_string(MergeMode mode);

struct AlignmentConfig {
  double alpha = 1.0;     // unsupervised weight
  double beta = 0.1;      // image-level weight
  double gamma_w = 0.3;   // instance-level weight
  double delta_ema = 0.9996;
  double tau = 0.7;
  double lambda_grl = 1.0;
  MergeMode merge_mode = MergeMode::attention;
  int num_heads = 4;
  int d_e = 64;  // embedding and fused width

  void validate() const;
};

// Everything the alignment heads need to know about the surrounding model.
struct AlignerShape {
  int num_sources = 2;  // N; the target domain id is N
  int num_classes = 4;  // K
  int feature_channels = 64;
  int roi_size = 4;
  int roi_sampling = 2;
  int image_hidden = 64;
  std::vector<int> instance_hidden{128, 64};
};

// Output of multi-head attention with per-head weight matrices [Lq, Lk].
struct AttentionOutput {
  nn::Var output;
  std::vector<nn::Var> weights;
};

// softmax(Q_h K_h^T / sqrt(l_K)) V_h per head, heads concatenated along
// columns. Q[Lq,d], K[Lk,d], V[Lk,dv]; d and dv divisible by num_heads.
AttentionOutput multi_head_attention(const nn::Var& q, const nn::Var& k, const nn::Var& v, int num_heads);

// Batched class-keyed attention over ROI tokens. For instance r and head h the
// class key k_r scores each of its T tokens q_{r,t}; the softmax runs over
// the tokens, and the output is the weighted sum of the value tokens.
// q, v: [R*T, d]; k: [R, d]. Returns [R, d] and, if weights_out is given,
// the [R, heads, T] weights.
nn::Var class_attention(const nn::Var& q, const nn::Var& k, const nn::Var& v, int tokens, int num_heads,
                        Tensor* weights_out = nullptr);

// Mean cross-entropy over all pixels of a [D,H,W] logit map against one domain.
nn::Var image_alignment_loss(const nn::Var& pred, int domain_id);
// Mean cross-entropy of [R,D] logits against a single domain label.
nn::Var instance_domain_ce(const nn::Var& logits, int domain_id);

struct Heatmap {
  Tensor activation;          // [K,K], rows softmax-normalized
  std::vector<bool> present;  // false rows are zero (no crops of that class)
};

class DomainAligner {
 public:
  DomainAligner(AlignerShape shape, AlignmentConfig cfg, bool include_target_in_cdis = false);

  const AlignerShape& shape() const { return shape_; }
  const AlignmentConfig& config() const { return cfg_; }
  int target_domain() const { return shape_.num_sources; }
  int instance_domains() const { return shape_.num_sources + (include_target_ ? 1 : 0); }
  bool include_target() const { return include_target_; }

  void init_params(ModelState& state, Rng& rng) const;

  // [N+1,H',W'] logits; fully convolutional, spatial size preserved.
  nn::Var image_discriminator(const nn::Var& features, const ModelState& params) const;
  // CE of the discriminator applied to GRL(features).
  nn::Var image_level_loss(const FeatureMap& fmap, int domain_id, const ModelState& params) const;

  // [R, d_e] class-aware instance features.
  nn::Var fuse_class(const InstanceFeatures& feats, std::span<const int> class_ids, const ModelState& params,
                     Tensor* attention_weights = nullptr) const;
  // [R, N] (or [R, N+1] with target inclusion) logits.
  nn::Var instance_discriminator(const nn::Var& fused, const ModelState& params) const;

  // Mean CE over this image's boxes of D_I(GRL(fuse(ROI(fmap, box), class))).
  // Returns a constant zero when there are no boxes or the domain does not
  // take part (target without target inclusion).
  nn::Var instance_level_loss(const FeatureMap& fmap, std::span<const Box> boxes, int domain_id,
                              const ModelState& params) const;
  // Sum of instance_level_loss over samples using their own boxes.
  nn::Var instance_alignment_loss(std::span<const DetectionSample> samples, const det::Detector& detector,
                                  const ModelState& params) const;

  // Row k: softmax over j of the mean activation between class-k crops and
  // class embedding j. `projected` scores in attention space (mean over tokens
  // of q_t . W_k e_j / sqrt(l_K)); otherwise the raw pooled feature is dotted
  // with the raw embedding row.
  Heatmap embedding_activation_heatmap(const InstanceFeatures& crops, std::span<const int> class_ids,
                                       const ModelState& params, bool projected = true) const;

 private:
  nn::Var pooled(const InstanceFeatures& feats) const;     // [R, C]
  nn::Var tokens(const InstanceFeatures& feats) const;     // [R*P*P, C]
  nn::Var embeddings(std::span<const int> class_ids, const ModelState& params) const;  // [R, d_e]

  AlignerShape shape_;
  AlignmentConfig cfg_;
  bool include_target_;
};

// Gradient reversal with the configured strength.
nn::Var grl(const nn::Var& x, double lambda);

struct ParamCount {
  std::size_t total = 0;
  std::size_t domain_scaling = 0;  // final domain-classification layers only
};

// Counts all parameters and those in the two discriminators' output layers.
// Throws if the image discriminator output is not N+1 wide.
ParamCount count_domain_dependent_params(const ModelState& model, int num_sources);

}  // namespace acia::align
