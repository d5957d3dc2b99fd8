#include "acia/alignment.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace acia::align {

using nn::Var;

namespace {

Var fc(const Var& x, const ModelState& p, const std::string& name) {
  return nn::linear(x, p.get(name + ".w"), p.get(name + ".b"));
}

Var ln(const Var& x, const ModelState& p, const std::string& name) {
  return nn::layer_norm(x, p.get(name + ".g"), p.get(name + ".b"));
}

void add_linear(ModelState& s, const std::string& name, int out, int in, Rng& rng) {
  s.add(name + ".w", fan_in_uniform({out, in}, in, rng));
  s.add(name + ".b", fan_in_uniform({out}, in, rng));
}

void add_ln(ModelState& s, const std::string& name, int width) {
  s.add(name + ".g", Tensor(Shape{width}, 1.0));
  s.add(name + ".b", Tensor(Shape{width}));
}

}  // namespace

MergeMode parse_merge_mode(const std::string& name) {
  if (name == "attention") return MergeMode::attention;
  if (name == "concat") return MergeMode::concat;
  if (name == "multiply") return MergeMode::multiply;
  if (name == "agnostic") return MergeMode::agnostic;
  throw std::invalid_argument("unknown merge mode: " + name);
}

std::string to_string(MergeMode mode) {
  switch (mode) {
    case MergeMode::attention: return "attention";
    case MergeMode::concat: return "concat";
    case MergeMode::multiply: return "multiply";
    case MergeMode::agnostic: return "agnostic";
  }
  return "?";
}

void AlignmentConfig::validate() const {
  if (!(tau > 0 && tau < 1)) throw std::invalid_argument("alignment: tau must be in (0,1)");
  if (!(delta_ema > 0 && delta_ema < 1)) throw std::invalid_argument("alignment: delta_ema must be in (0,1)");
  if (lambda_grl < 0) throw std::invalid_argument("alignment: lambda_grl must be >= 0");
  if (num_heads < 1 || d_e % num_heads != 0) throw std::invalid_argument("alignment: num_heads must divide d_e");
}

Var grl(const Var& x, double lambda) { return nn::grad_reverse(x, lambda); }

AttentionOutput multi_head_attention(const Var& q, const Var& k, const Var& v, int num_heads) {
  if (q.value().rank() != 2 || k.value().rank() != 2 || v.value().rank() != 2) {
    throw std::invalid_argument("attention: Q, K, V must be rank 2");
  }
  const int d = q.dim(1);
  if (k.dim(1) != d || v.dim(0) != k.dim(0)) throw std::invalid_argument("attention: Q/K/V shape mismatch");
  if (num_heads < 1 || d % num_heads != 0 || v.dim(1) % num_heads != 0) {
    throw std::invalid_argument("attention: num_heads must divide the projection widths");
  }
  const int lk = d / num_heads;
  const int lv = v.dim(1) / num_heads;
  AttentionOutput out;
  std::vector<Var> heads;
  for (int h = 0; h < num_heads; ++h) {
    Var scores = nn::scale(nn::matmul(nn::slice_cols(q, h * lk, lk), nn::transpose(nn::slice_cols(k, h * lk, lk))),
                           1.0 / std::sqrt(static_cast<double>(lk)));
    Var w = nn::softmax_rows(scores);
    out.weights.push_back(w);
    heads.push_back(nn::matmul(w, nn::slice_cols(v, h * lv, lv)));
  }
  out.output = heads[0];
  for (int h = 1; h < num_heads; ++h) out.output = nn::concat_cols(out.output, heads[static_cast<std::size_t>(h)]);
  return out;
}

Var class_attention(const Var& q, const Var& k, const Var& v, int tokens, int num_heads, Tensor* weights_out) {
  const int r_count = k.dim(0);
  const int d = k.dim(1);
  if (tokens < 1 || q.dim(0) != r_count * tokens || v.dim(0) != r_count * tokens || q.dim(1) != d || v.dim(1) != d) {
    throw std::invalid_argument("class_attention: expected q,v [R*T,d] and k [R,d]");
  }
  if (num_heads < 1 || d % num_heads != 0) throw std::invalid_argument("class_attention: num_heads must divide d");
  const int lk = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(lk));

  auto weights = std::make_shared<Tensor>(Shape{r_count, num_heads, tokens});
  Tensor out(Shape{r_count, d});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  std::vector<double> s(static_cast<std::size_t>(tokens));
  for (int r = 0; r < r_count; ++r) {
    for (int h = 0; h < num_heads; ++h) {
      const int c0 = h * lk;
      double mx = -INFINITY;
      for (int t = 0; t < tokens; ++t) {
        double acc = 0;
        for (int c = c0; c < c0 + lk; ++c) acc += qv.at(r * tokens + t, c) * kv.at(r, c);
        s[static_cast<std::size_t>(t)] = acc * inv_sqrt;
        mx = std::max(mx, s[static_cast<std::size_t>(t)]);
      }
      double z = 0;
      for (int t = 0; t < tokens; ++t) z += (s[static_cast<std::size_t>(t)] = std::exp(s[static_cast<std::size_t>(t)] - mx));
      double* w = weights->ptr() + (static_cast<std::size_t>(r) * num_heads + h) * tokens;
      for (int t = 0; t < tokens; ++t) w[t] = s[static_cast<std::size_t>(t)] / z;
      for (int c = c0; c < c0 + lk; ++c) {
        double acc = 0;
        for (int t = 0; t < tokens; ++t) acc += w[t] * vv.at(r * tokens + t, c);
        out.at(r, c) = acc;
      }
    }
  }
  if (weights_out) *weights_out = *weights;

  return nn::make_op(std::move(out), {q, k, v}, [weights, r_count, tokens, num_heads, lk, inv_sqrt](nn::Node& n) {
    const Tensor& qv = n.inputs[0]->value;
    const Tensor& kv = n.inputs[1]->value;
    const Tensor& vv = n.inputs[2]->value;
    const int d = kv.dim(1);
    Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
    std::vector<double> ds(static_cast<std::size_t>(tokens));
    for (int r = 0; r < r_count; ++r) {
      for (int h = 0; h < num_heads; ++h) {
        const int c0 = h * lk;
        const double* w = weights->ptr() + (static_cast<std::size_t>(r) * num_heads + h) * tokens;
        double dot = 0;
        for (int t = 0; t < tokens; ++t) {
          double da = 0;
          for (int c = c0; c < c0 + lk; ++c) {
            const double go = n.grad[static_cast<std::size_t>(r) * d + c];
            da += go * vv.at(r * tokens + t, c);
            gv.at(r * tokens + t, c) += w[t] * go;
          }
          ds[static_cast<std::size_t>(t)] = da;
          dot += w[t] * da;
        }
        for (int t = 0; t < tokens; ++t) {
          const double g = w[t] * (ds[static_cast<std::size_t>(t)] - dot) * inv_sqrt;
          for (int c = c0; c < c0 + lk; ++c) {
            gq.at(r * tokens + t, c) += g * kv.at(r, c);
            gk.at(r, c) += g * qv.at(r * tokens + t, c);
          }
        }
      }
    }
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(gq);
    if (n.inputs[1]->requires_grad) n.inputs[1]->accumulate(gk);
    if (n.inputs[2]->requires_grad) n.inputs[2]->accumulate(gv);
  });
}

Var image_alignment_loss(const Var& pred, int domain_id) {
  if (pred.value().rank() != 3) throw std::invalid_argument("image_alignment_loss: expected [D,H,W] logits");
  const int domains = pred.dim(0);
  if (domain_id < 0 || domain_id >= domains) throw std::invalid_argument("image_alignment_loss: domain id out of range");
  Var rows = nn::spatial_to_rows(pred);
  std::vector<int> labels(static_cast<std::size_t>(rows.dim(0)), domain_id);
  return nn::scale(nn::mean(nn::gather_cols(nn::log_softmax_rows(rows), labels)), -1.0);
}

Var instance_domain_ce(const Var& logits, int domain_id) {
  if (logits.value().rank() != 2) throw std::invalid_argument("instance_domain_ce: expected [R,D] logits");
  if (domain_id < 0 || domain_id >= logits.dim(1)) throw std::invalid_argument("instance_domain_ce: domain id out of range");
  if (logits.dim(0) == 0) return Var(Tensor::scalar(0.0));
  std::vector<int> labels(static_cast<std::size_t>(logits.dim(0)), domain_id);
  return nn::scale(nn::mean(nn::gather_cols(nn::log_softmax_rows(logits), labels)), -1.0);
}

DomainAligner::DomainAligner(AlignerShape shape, AlignmentConfig cfg, bool include_target_in_cdis)
    : shape_(std::move(shape)), cfg_(cfg), include_target_(include_target_in_cdis) {
  cfg_.validate();
  if (shape_.num_sources < 1) throw std::invalid_argument("aligner: need at least one source domain");
  if (shape_.instance_hidden.size() != 2) throw std::invalid_argument("aligner: instance discriminator has two hidden layers");
}

void DomainAligner::init_params(ModelState& s, Rng& rng) const {
  const int c = shape_.feature_channels;
  const int hid = shape_.image_hidden;
  s.add("align.img.conv1.w", fan_in_uniform({hid, c, 3, 3}, c * 9, rng));
  s.add("align.img.conv1.b", Tensor(Shape{hid}));
  s.add("align.img.conv2.w", fan_in_uniform({hid, hid, 3, 3}, hid * 9, rng));
  s.add("align.img.conv2.b", Tensor(Shape{hid}));
  s.add("align.img.out.w", fan_in_uniform({shape_.num_sources + 1, hid, 1, 1}, hid, rng));
  s.add("align.img.out.b", Tensor(Shape{shape_.num_sources + 1}));

  const int de = cfg_.d_e;
  if (cfg_.merge_mode != MergeMode::agnostic) s.add("align.embed.table", normal_init({shape_.num_classes, de}, 1.0, rng));
  switch (cfg_.merge_mode) {
    case MergeMode::attention:
      add_linear(s, "align.fuse.q", de, c, rng);
      add_linear(s, "align.fuse.k", de, de, rng);
      add_linear(s, "align.fuse.v", de, c, rng);
      break;
    case MergeMode::concat:
      add_linear(s, "align.fuse.proj", de, c + de, rng);
      break;
    case MergeMode::multiply:
      add_linear(s, "align.fuse.roi", de, c, rng);
      add_linear(s, "align.fuse.cls", de, de, rng);
      break;
    case MergeMode::agnostic:
      add_linear(s, "align.fuse.roi", de, c, rng);
      break;
  }
  add_ln(s, "align.fuse.ln", de);

  const int h1 = shape_.instance_hidden[0];
  const int h2 = shape_.instance_hidden[1];
  add_linear(s, "align.inst.fc1", h1, de, rng);
  add_ln(s, "align.inst.ln1", h1);
  add_linear(s, "align.inst.fc2", h2, h1, rng);
  add_ln(s, "align.inst.ln2", h2);
  add_linear(s, "align.inst.out", instance_domains(), h2, rng);
}

Var DomainAligner::image_discriminator(const Var& x, const ModelState& p) const {
  Var h = nn::leaky_relu(nn::conv2d(x, p.get("align.img.conv1.w"), p.get("align.img.conv1.b"), 1, 1), 0.1);
  h = nn::leaky_relu(nn::conv2d(h, p.get("align.img.conv2.w"), p.get("align.img.conv2.b"), 1, 1), 0.1);
  return nn::conv2d(h, p.get("align.img.out.w"), p.get("align.img.out.b"), 1, 0);
}

Var DomainAligner::image_level_loss(const FeatureMap& fmap, int domain_id, const ModelState& params) const {
  return image_alignment_loss(image_discriminator(grl(fmap.data, cfg_.lambda_grl), params), domain_id);
}

Var DomainAligner::tokens(const InstanceFeatures& feats) const {
  // [R,C,P,P] -> [R*P*P, C]
  const int r = feats.count();
  const int c = shape_.feature_channels;
  const int t = shape_.roi_size * shape_.roi_size;
  std::vector<Var> per;
  per.reserve(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int row[] = {i};
    per.push_back(nn::transpose(nn::reshape(nn::select_rows(feats.data, row), {c, t})));
  }
  return nn::concat_rows(per);
}

Var DomainAligner::pooled(const InstanceFeatures& feats) const {
  const int r = feats.count();
  const int c = shape_.feature_channels;
  const int t = shape_.roi_size * shape_.roi_size;
  // mean over the P*P cells: [R*C, T] x [T, 1]
  Var ones(Tensor(Shape{t, 1}, 1.0 / t));
  return nn::reshape(nn::matmul(nn::reshape(feats.data, {r * c, t}), ones), {r, c});
}

Var DomainAligner::embeddings(std::span<const int> class_ids, const ModelState& params) const {
  for (int k : class_ids) {
    if (k < 0 || k >= shape_.num_classes) throw std::invalid_argument("fuse_class: class id out of range");
  }
  return nn::select_rows(params.get("align.embed.table"), class_ids);
}

Var DomainAligner::fuse_class(const InstanceFeatures& feats, std::span<const int> class_ids, const ModelState& params,
                              Tensor* attention_weights) const {
  const int r = feats.count();
  if (static_cast<int>(class_ids.size()) != r) throw std::invalid_argument("fuse_class: one class id per instance");
  if (r > 0 && (feats.data.dim(1) != shape_.feature_channels || feats.data.dim(2) != shape_.roi_size)) {
    throw std::invalid_argument("fuse_class: ROI feature shape " + shape_str(feats.data.shape()));
  }
  if (r == 0) return Var(Tensor(Shape{0, cfg_.d_e}));
  Var fused;
  switch (cfg_.merge_mode) {
    case MergeMode::attention: {
      Var x = tokens(feats);
      Var q = fc(x, params, "align.fuse.q");
      Var v = fc(x, params, "align.fuse.v");
      Var k = fc(embeddings(class_ids, params), params, "align.fuse.k");
      fused = class_attention(q, k, v, shape_.roi_size * shape_.roi_size, cfg_.num_heads, attention_weights);
      break;
    }
    case MergeMode::concat:
      fused = fc(nn::concat_cols(pooled(feats), embeddings(class_ids, params)), params, "align.fuse.proj");
      break;
    case MergeMode::multiply:
      fused = nn::mul(fc(pooled(feats), params, "align.fuse.roi"),
                      fc(embeddings(class_ids, params), params, "align.fuse.cls"));
      break;
    case MergeMode::agnostic:
      fused = fc(pooled(feats), params, "align.fuse.roi");
      break;
  }
  return ln(fused, params, "align.fuse.ln");
}

Var DomainAligner::instance_discriminator(const Var& fused, const ModelState& p) const {
  Var h = nn::gelu(ln(fc(fused, p, "align.inst.fc1"), p, "align.inst.ln1"));
  h = nn::gelu(ln(fc(h, p, "align.inst.fc2"), p, "align.inst.ln2"));
  return fc(h, p, "align.inst.out");
}

Var DomainAligner::instance_level_loss(const FeatureMap& fmap, std::span<const Box> boxes, int domain_id,
                                       const ModelState& params) const {
  if (domain_id < 0 || domain_id > shape_.num_sources) throw std::invalid_argument("instance_level_loss: bad domain id");
  if (boxes.empty() || domain_id >= instance_domains()) return Var(Tensor::scalar(0.0));
  InstanceFeatures feats = det::roi_pool(fmap, boxes, det::RoiAlignOptions{shape_.roi_size, shape_.roi_sampling});
  std::vector<int> classes;
  for (const Box& b : boxes) classes.push_back(b.class_id);
  Var fused = fuse_class(feats, classes, params);
  return instance_domain_ce(instance_discriminator(grl(fused, cfg_.lambda_grl), params), domain_id);
}

Var DomainAligner::instance_alignment_loss(std::span<const DetectionSample> samples, const det::Detector& detector,
                                           const ModelState& params) const {
  std::vector<Var> terms;
  for (const auto& s : samples) {
    if (s.boxes.empty() || s.domain_id >= instance_domains()) continue;
    FeatureMap fmap = detector.backbone_forward(s.image, params);
    terms.push_back(instance_level_loss(fmap, s.boxes, s.domain_id, params));
  }
  if (terms.empty()) return Var(Tensor::scalar(0.0));
  return nn::add_n(terms);
}

Heatmap DomainAligner::embedding_activation_heatmap(const InstanceFeatures& crops, std::span<const int> class_ids,
                                                    const ModelState& params, bool projected) const {
  nn::NoGradGuard no_grad;
  const int k = shape_.num_classes;
  if (!params.contains("align.embed.table")) throw std::invalid_argument("heatmap: model has no class embeddings");
  if (static_cast<int>(class_ids.size()) != crops.count()) throw std::invalid_argument("heatmap: one class id per crop");
  const bool use_attention = projected && cfg_.merge_mode == MergeMode::attention;
  const Tensor& table = params.get("align.embed.table").value();

  // per-crop activation with every embedding: [R, K]
  Tensor act(Shape{crops.count(), k});
  if (crops.count() > 0) {
    if (use_attention) {
      const int t = shape_.roi_size * shape_.roi_size;
      const int lk = cfg_.d_e / cfg_.num_heads;
      Tensor q = fc(tokens(crops), params, "align.fuse.q").value();
      Tensor keys = fc(params.get("align.embed.table"), params, "align.fuse.k").value();
      for (int r = 0; r < crops.count(); ++r) {
        for (int j = 0; j < k; ++j) {
          double acc = 0;
          for (int tt = 0; tt < t; ++tt) {
            for (int c = 0; c < cfg_.d_e; ++c) acc += q.at(r * t + tt, c) * keys.at(j, c);
          }
          act.at(r, j) = acc / (t * cfg_.num_heads * std::sqrt(static_cast<double>(lk)));
        }
      }
    } else {
      if (shape_.feature_channels != cfg_.d_e) throw std::invalid_argument("heatmap: raw space needs d_e == C");
      Tensor p = pooled(crops).value();
      for (int r = 0; r < crops.count(); ++r) {
        for (int j = 0; j < k; ++j) {
          double acc = 0;
          for (int c = 0; c < cfg_.d_e; ++c) acc += p.at(r, c) * table.at(j, c);
          act.at(r, j) = acc;
        }
      }
    }
  }

  Heatmap out{Tensor(Shape{k, k}), std::vector<bool>(static_cast<std::size_t>(k), false)};
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  Tensor mean(Shape{k, k});
  for (int r = 0; r < crops.count(); ++r) {
    const int cls = class_ids[static_cast<std::size_t>(r)];
    if (cls < 0 || cls >= k) throw std::invalid_argument("heatmap: class id out of range");
    ++count[static_cast<std::size_t>(cls)];
    for (int j = 0; j < k; ++j) mean.at(cls, j) += act.at(r, j);
  }
  for (int i = 0; i < k; ++i) {
    if (count[static_cast<std::size_t>(i)] == 0) continue;
    out.present[static_cast<std::size_t>(i)] = true;
    double mx = -INFINITY;
    for (int j = 0; j < k; ++j) mx = std::max(mx, mean.at(i, j) /= count[static_cast<std::size_t>(i)]);
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(mean.at(i, j) - mx);
    for (int j = 0; j < k; ++j) out.activation.at(i, j) = std::exp(mean.at(i, j) - mx) / z;
  }
  return out;
}

ParamCount count_domain_dependent_params(const ModelState& model, int num_sources) {
  if (!model.contains("align.img.out.b") || model.get("align.img.out.b").dim(0) != num_sources + 1) {
    throw std::invalid_argument("count_domain_dependent_params: model was not built for N = " +
                                std::to_string(num_sources));
  }
  ParamCount out;
  out.total = model.numel();
  out.domain_scaling = model.numel("align.img.out.") + model.numel("align.inst.out.");
  return out;
}

}  // namespace acia::align
