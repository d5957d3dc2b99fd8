#include "acia/detector.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>

namespace acia::det {

using nn::Var;

namespace {

constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

std::string pname(const std::string& a, int i, const char* leaf) {
  return a + std::to_string(i) + "." + leaf;
}

// First n entries of a seeded shuffle of v.
std::vector<int> take_random(std::vector<int> v, std::size_t n, Rng& rng) {
  n = std::min(n, v.size());
  for (std::size_t i = 0; i < n; ++i) {
    const int j = rng.uniform_int(static_cast<int>(i), static_cast<int>(v.size()) - 1);
    std::swap(v[i], v[static_cast<std::size_t>(j)]);
  }
  v.resize(n);
  return v;
}

Var conv(const Var& x, const ModelState& p, const std::string& name, int pad) {
  return nn::conv2d(x, p.get(name + ".w"), p.get(name + ".b"), 1, pad);
}

Var fc(const Var& x, const ModelState& p, const std::string& name) {
  return nn::linear(x, p.get(name + ".w"), p.get(name + ".b"));
}

}  // namespace

int DetectorConfig::stride() const { return 1 << (static_cast<int>(backbone_channels.size()) - 1); }

void DetectorConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("detector: num_classes must be >= 1");
  if (backbone_channels.size() < 2) throw std::invalid_argument("detector: backbone needs >= 2 conv blocks");
  if (anchor_sizes.empty()) throw std::invalid_argument("detector: no anchor sizes");
  if (roi_size < 1 || roi_sampling < 1) throw std::invalid_argument("detector: bad ROI-align geometry");
  if (focal_gamma < 0) throw std::invalid_argument("detector: focal gamma must be >= 0");
  if (smooth_l1_beta <= 0) throw std::invalid_argument("detector: smooth-L1 beta must be > 0");
  if (image_size < stride()) throw std::invalid_argument("detector: image too small");
}

std::array<double, 4> BoxCoder::encode(const Box& reference, const Box& target) const {
  const double pw = reference.width();
  const double ph = reference.height();
  return {weights[0] * (target.center_x() - reference.center_x()) / pw,
          weights[1] * (target.center_y() - reference.center_y()) / ph,
          weights[2] * std::log(target.width() / pw), weights[3] * std::log(target.height() / ph)};
}

Box BoxCoder::decode(const Box& reference, std::span<const double> d) const {
  const double pw = reference.width();
  const double ph = reference.height();
  const double dw = std::min(d[2] / weights[2], kMaxLogScale);
  const double dh = std::min(d[3] / weights[3], kMaxLogScale);
  const double cx = reference.center_x() + d[0] / weights[0] * pw;
  const double cy = reference.center_y() + d[1] / weights[1] * ph;
  const double w = pw * std::exp(dw);
  const double h = ph * std::exp(dh);
  Box out = reference;
  out.x1 = cx - 0.5 * w;
  out.x2 = cx + 0.5 * w;
  out.y1 = cy - 0.5 * h;
  out.y2 = cy + 0.5 * h;
  return out;
}

Var DetectionLosses::cls() const { return nn::add(rpn_cls.value, roi_cls.value); }
Var DetectionLosses::reg() const { return nn::add(rpn_reg.value, roi_reg.value); }
Var DetectionLosses::total() const {
  const Var parts[] = {rpn_cls.value, rpn_reg.value, roi_cls.value, roi_reg.value};
  return nn::add_n(parts);
}

LossTerm zero_loss() { return LossTerm{Var(Tensor::scalar(0.0)), true}; }

LossTerm focal_loss(const Var& logits, std::span<const int> targets, double gamma, double alpha) {
  if (gamma < 0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  if (logits.value().rank() != 2) throw std::invalid_argument("focal_loss: logits must be [R, K+1]");
  if (static_cast<int>(targets.size()) != logits.dim(0)) throw std::invalid_argument("focal_loss: target count");
  if (targets.empty()) return zero_loss();
  Var log_pt = nn::gather_cols(nn::log_softmax_rows(logits), targets);
  Var per_row = log_pt;
  if (gamma != 0) {
    Var one_minus_pt = nn::add_scalar(nn::scale(nn::exp(log_pt), -1.0), 1.0);
    per_row = nn::mul(nn::pow(one_minus_pt, gamma), log_pt);
  }
  return LossTerm{nn::scale(nn::mean(per_row), -alpha), false};
}

LossTerm smooth_l1(const Var& pred, const Tensor& target, double beta) {
  if (beta <= 0) throw std::invalid_argument("smooth_l1: beta must be > 0");
  if (pred.value().numel() != target.numel()) throw std::invalid_argument("smooth_l1: shape mismatch");
  if (target.numel() == 0) return zero_loss();
  Var d = nn::sub(pred, Var(target.reshaped(pred.shape())));
  return LossTerm{nn::mean(nn::smooth_l1_elementwise(d, beta)), false};
}

InstanceFeatures roi_pool(const FeatureMap& fmap, std::span<const Box> boxes, const RoiAlignOptions& opts) {
  const int c = fmap.channels();
  const int h = fmap.height();
  const int w = fmap.width();
  const int p = opts.output_size;
  const int grid = opts.sampling_ratio;
  if (p < 1 || grid < 1) throw std::invalid_argument("roi_pool: output size and sampling ratio must be >= 1");
  const double scale = 1.0 / fmap.stride;
  const double extent_w = static_cast<double>(w) * fmap.stride;
  const double extent_h = static_cast<double>(h) * fmap.stride;
  constexpr double tol = 1e-6;

  struct Tap {
    int pos;
    double weight;
  };
  const int r_count = static_cast<int>(boxes.size());
  auto taps = std::make_shared<std::vector<std::vector<Tap>>>(static_cast<std::size_t>(r_count) * p * p);
  for (int r = 0; r < r_count; ++r) {
    const Box& b = boxes[static_cast<std::size_t>(r)];
    if (!(b.width() > 0) || !(b.height() > 0)) throw std::invalid_argument("roi_pool: degenerate box");
    if (b.x1 < -tol || b.y1 < -tol || b.x2 > extent_w + tol || b.y2 > extent_h + tol) {
      throw std::invalid_argument("roi_pool: box outside image bounds");
    }
    const double start_x = b.x1 * scale - 0.5;
    const double start_y = b.y1 * scale - 0.5;
    const double bin_w = b.width() * scale / p;
    const double bin_h = b.height() * scale / p;
    const double inv_count = 1.0 / (grid * grid);
    for (int ph = 0; ph < p; ++ph) {
      for (int pw = 0; pw < p; ++pw) {
        auto& bin = (*taps)[(static_cast<std::size_t>(r) * p + ph) * p + pw];
        for (int iy = 0; iy < grid; ++iy) {
          double y = start_y + ph * bin_h + (iy + 0.5) * bin_h / grid;
          for (int ix = 0; ix < grid; ++ix) {
            double x = start_x + pw * bin_w + (ix + 0.5) * bin_w / grid;
            if (y < -1.0 || y > h || x < -1.0 || x > w) continue;
            double yy = std::max(y, 0.0);
            double xx = std::max(x, 0.0);
            int y_lo = static_cast<int>(yy);
            int x_lo = static_cast<int>(xx);
            int y_hi;
            int x_hi;
            if (y_lo >= h - 1) {
              y_lo = y_hi = h - 1;
              yy = y_lo;
            } else {
              y_hi = y_lo + 1;
            }
            if (x_lo >= w - 1) {
              x_lo = x_hi = w - 1;
              xx = x_lo;
            } else {
              x_hi = x_lo + 1;
            }
            const double ly = yy - y_lo;
            const double lx = xx - x_lo;
            const double hy = 1.0 - ly;
            const double hx = 1.0 - lx;
            bin.push_back({y_lo * w + x_lo, hy * hx * inv_count});
            bin.push_back({y_lo * w + x_hi, hy * lx * inv_count});
            bin.push_back({y_hi * w + x_lo, ly * hx * inv_count});
            bin.push_back({y_hi * w + x_hi, ly * lx * inv_count});
          }
        }
      }
    }
  }

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t pp = static_cast<std::size_t>(p) * p;
  Tensor out(Shape{r_count, c, p, p});
  const Tensor& f = fmap.data.value();
  for (int r = 0; r < r_count; ++r) {
    for (int ci = 0; ci < c; ++ci) {
      const Scalar* src = f.ptr() + ci * plane;
      Scalar* dst = out.ptr() + (static_cast<std::size_t>(r) * c + ci) * pp;
      for (std::size_t bi = 0; bi < pp; ++bi) {
        Scalar acc = 0;
        for (const Tap& t : (*taps)[r * pp + bi]) acc += t.weight * src[t.pos];
        dst[bi] = acc;
      }
    }
  }

  InstanceFeatures result;
  result.boxes.assign(boxes.begin(), boxes.end());
  result.data = nn::make_op(std::move(out), {fmap.data}, [taps, r_count, c, plane, pp](nn::Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for (int r = 0; r < r_count; ++r) {
      for (int ci = 0; ci < c; ++ci) {
        Scalar* dst = g.ptr() + ci * plane;
        const Scalar* src = n.grad.ptr() + (static_cast<std::size_t>(r) * c + ci) * pp;
        for (std::size_t bi = 0; bi < pp; ++bi) {
          for (const Tap& t : (*taps)[r * pp + bi]) dst[t.pos] += t.weight * src[bi];
        }
      }
    }
  });
  return result;
}

BoxSet decode_detections(std::span<const Box> proposals, const Tensor& deltas, const Tensor& logits,
                         double score_thresh, double nms_iou, const BoxCoder& coder, int max_detections,
                         double image_w, double image_h) {
  const int r_count = static_cast<int>(proposals.size());
  if (r_count == 0) return {};
  if (deltas.rank() != 2 || deltas.dim(0) != r_count || deltas.dim(1) != 4) {
    throw std::invalid_argument("decode_detections: deltas must be [R,4]");
  }
  if (logits.rank() != 2 || logits.dim(0) != r_count) throw std::invalid_argument("decode_detections: logits rows");
  const int k = logits.dim(1) - 1;

  std::vector<BoxSet> per_class(static_cast<std::size_t>(k));
  for (int r = 0; r < r_count; ++r) {
    double mx = logits.at(r, 0);
    for (int j = 1; j <= k; ++j) mx = std::max(mx, logits.at(r, j));
    double z = 0;
    for (int j = 0; j <= k; ++j) z += std::exp(logits.at(r, j) - mx);
    Box decoded = clip_box(coder.decode(proposals[static_cast<std::size_t>(r)],
                                        std::span<const double>(deltas.ptr() + 4 * r, 4)),
                           image_w, image_h);
    if (!decoded.valid()) continue;
    for (int cls = 0; cls < k; ++cls) {
      const double prob = std::exp(logits.at(r, cls) - mx) / z;
      if (prob < score_thresh) continue;
      Box b = decoded;
      b.class_id = cls;
      b.score = prob;
      per_class[static_cast<std::size_t>(cls)].push_back(b);
    }
  }

  BoxSet kept;
  for (auto& cand : per_class) {
    std::vector<double> scores;
    for (const auto& b : cand) scores.push_back(*b.score);
    BoxSet sorted;
    for (int i : argsort_desc(scores)) sorted.push_back(cand[static_cast<std::size_t>(i)]);
    for (int i : nms_sorted(sorted, nms_iou)) kept.push_back(sorted[static_cast<std::size_t>(i)]);
  }
  std::vector<double> scores;
  for (const auto& b : kept) scores.push_back(*b.score);
  BoxSet out;
  for (int i : argsort_desc(scores)) {
    if (static_cast<int>(out.size()) >= max_detections) break;
    out.push_back(kept[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::uint64_t sample_stream(std::uint64_t seed, int domain_id, int image_id) {
  return Rng::derive(Rng::derive(seed, static_cast<std::uint64_t>(domain_id)), static_cast<std::uint64_t>(image_id));
}

Detector::Detector(DetectorConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void Detector::init_params(ModelState& state, Rng& rng) const {
  int in = 3;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const int out = cfg_.backbone_channels[i];
    state.add(pname("det.backbone.conv", static_cast<int>(i), "w"), he_uniform({out, in, 3, 3}, in * 9, rng));
    state.add(pname("det.backbone.conv", static_cast<int>(i), "b"), Tensor(Shape{out}));
    in = out;
  }
  const int a = cfg_.num_anchors();
  const int c = cfg_.feature_channels();
  state.add("det.rpn.conv.w", he_uniform({cfg_.rpn_channels, c, 3, 3}, c * 9, rng));
  state.add("det.rpn.conv.b", Tensor(Shape{cfg_.rpn_channels}));
  state.add("det.rpn.cls.w", normal_init({a, cfg_.rpn_channels, 1, 1}, 0.01, rng));
  state.add("det.rpn.cls.b", Tensor(Shape{a}));
  state.add("det.rpn.box.w", normal_init({4 * a, cfg_.rpn_channels, 1, 1}, 0.01, rng));
  state.add("det.rpn.box.b", Tensor(Shape{4 * a}));

  const int flat = c * cfg_.roi_size * cfg_.roi_size;
  const int hid = cfg_.head_hidden;
  state.add("det.head.fc1.w", he_uniform({hid, flat}, flat, rng));
  state.add("det.head.fc1.b", Tensor(Shape{hid}));
  state.add("det.head.fc2.w", he_uniform({hid, hid}, hid, rng));
  state.add("det.head.fc2.b", Tensor(Shape{hid}));
  state.add("det.head.cls.w", normal_init({cfg_.num_classes + 1, hid}, 0.01, rng));
  state.add("det.head.cls.b", Tensor(Shape{cfg_.num_classes + 1}));
  state.add("det.head.box.w", normal_init({4, hid}, 0.001, rng));
  state.add("det.head.box.b", Tensor(Shape{4}));
}

FeatureMap Detector::backbone_forward(const Tensor& image, const ModelState& params) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size) {
    throw std::invalid_argument("backbone_forward: expected image [3," + std::to_string(cfg_.image_size) + "," +
                                std::to_string(cfg_.image_size) + "], got " + shape_str(image.shape()));
  }
  Var x(image);
  const int blocks = static_cast<int>(cfg_.backbone_channels.size());
  for (int i = 0; i < blocks; ++i) {
    x = nn::relu(conv(x, params, "det.backbone.conv" + std::to_string(i), 1));
    if (i + 1 < blocks) x = nn::max_pool2d(x, 2);
  }
  return FeatureMap{x, cfg_.stride()};
}

RpnOutput Detector::rpn_forward(const FeatureMap& fmap, const ModelState& params) const {
  const int a = cfg_.num_anchors();
  const int hw = fmap.height() * fmap.width();
  Var hidden = nn::relu(conv(fmap.data, params, "det.rpn.conv", 1));
  Var cls = conv(hidden, params, "det.rpn.cls", 0);  // [A,H,W]
  Var box = conv(hidden, params, "det.rpn.box", 0);  // [4A,H,W]
  RpnOutput out;
  out.objectness = nn::reshape(nn::transpose(nn::reshape(cls, {a, hw})), {hw * a});
  out.deltas = nn::reshape(nn::transpose(nn::reshape(box, {4 * a, hw})), {hw * a, 4});
  out.anchors = anchors(fmap.height(), fmap.width());
  return out;
}

std::vector<Box> Detector::anchors(int feat_h, int feat_w) const {
  const double s = cfg_.stride();
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(feat_h) * feat_w * cfg_.anchor_sizes.size());
  for (int y = 0; y < feat_h; ++y) {
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * s;
      const double cy = (y + 0.5) * s;
      for (double size : cfg_.anchor_sizes) {
        out.push_back(Box{cx - 0.5 * size, cy - 0.5 * size, cx + 0.5 * size, cy + 0.5 * size, 0, std::nullopt});
      }
    }
  }
  return out;
}

std::vector<Box> Detector::generate_proposals(const RpnOutput& rpn, int image_h, int image_w, int top_k) const {
  if (top_k < 1) throw std::invalid_argument("generate_proposals: top_k must be >= 1");
  const Tensor& logits = rpn.objectness.value();
  const Tensor& deltas = rpn.deltas.value();
  const std::vector<int> order = argsort_desc(logits.data());
  const BoxCoder coder = rpn_coder();
  std::vector<Box> candidates;
  const std::size_t limit = std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg_.rpn_pre_nms_top_k));
  for (std::size_t i = 0; i < limit; ++i) {
    const int a = order[i];
    Box b = clip_box(coder.decode(rpn.anchors[static_cast<std::size_t>(a)],
                                  std::span<const double>(deltas.ptr() + 4 * a, 4)),
                     image_w, image_h);
    if (!(b.width() >= 1.0 && b.height() >= 1.0)) continue;  // also drops NaN boxes
    b.class_id = 0;
    const double l = logits[static_cast<std::size_t>(a)];
    b.score = 1.0 / (1.0 + std::exp(-l));
    candidates.push_back(b);
  }
  std::vector<Box> out;
  for (int i : nms_sorted(candidates, cfg_.rpn_nms_iou)) {
    if (static_cast<int>(out.size()) >= top_k) break;
    out.push_back(candidates[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<Box> Detector::generate_proposals(const FeatureMap& fmap, const ModelState& params, int top_k) const {
  nn::NoGradGuard no_grad;
  RpnOutput rpn = rpn_forward(fmap, params);
  return generate_proposals(rpn, fmap.height() * fmap.stride, fmap.width() * fmap.stride, top_k);
}

HeadOutput Detector::detection_heads(const InstanceFeatures& feats, const ModelState& params) const {
  const int r = feats.count();
  const int flat = cfg_.feature_channels() * cfg_.roi_size * cfg_.roi_size;
  Var x = r == 0 ? Var(Tensor(Shape{0, flat})) : nn::reshape(feats.data, {r, flat});
  x = nn::relu(fc(x, params, "det.head.fc1"));
  x = nn::relu(fc(x, params, "det.head.fc2"));
  return HeadOutput{fc(x, params, "det.head.cls"), fc(x, params, "det.head.box")};
}

AnchorTargets Detector::assign_anchors(std::span<const Box> anchor_boxes, std::span<const Box> gt, Rng& rng) const {
  const std::size_t n = anchor_boxes.size();
  std::vector<int> label(n, 0);
  std::vector<int> match(n, -1);
  if (!gt.empty()) {
    std::vector<double> best_for_gt(gt.size(), 0.0);
    std::vector<double> best_iou(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double v = iou(anchor_boxes[i], gt[g]);
        if (v > best_iou[i]) {
          best_iou[i] = v;
          match[i] = static_cast<int>(g);
        }
        best_for_gt[g] = std::max(best_for_gt[g], v);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (best_iou[i] >= cfg_.rpn_positive_iou) {
        label[i] = 1;
      } else if (best_iou[i] >= cfg_.rpn_negative_iou) {
        label[i] = -1;
      }
    }
    // every GT keeps its best-overlapping anchors as positives
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (best_for_gt[g] <= 0) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if (iou(anchor_boxes[i], gt[g]) == best_for_gt[g]) {
          label[i] = 1;
          match[i] = static_cast<int>(g);
        }
      }
    }
  }
  std::vector<int> pos;
  std::vector<int> neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] == 1) pos.push_back(static_cast<int>(i));
    if (label[i] == 0) neg.push_back(static_cast<int>(i));
  }
  const auto max_pos = static_cast<std::size_t>(cfg_.rpn_batch * cfg_.rpn_positive_fraction);
  pos = take_random(std::move(pos), max_pos, rng);
  neg = take_random(std::move(neg), static_cast<std::size_t>(cfg_.rpn_batch) - pos.size(), rng);

  AnchorTargets t;
  t.positives = pos;
  t.regression = Tensor(Shape{static_cast<int>(pos.size()), 4});
  const BoxCoder coder = rpn_coder();
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto d = coder.encode(anchor_boxes[static_cast<std::size_t>(pos[i])],
                                gt[static_cast<std::size_t>(match[static_cast<std::size_t>(pos[i])])]);
    for (int j = 0; j < 4; ++j) t.regression.at(static_cast<int>(i), j) = d[static_cast<std::size_t>(j)];
  }
  t.sampled = pos;
  t.labels.assign(pos.size(), 1.0);
  t.sampled.insert(t.sampled.end(), neg.begin(), neg.end());
  t.labels.insert(t.labels.end(), neg.size(), 0.0);
  return t;
}

RoiTargets Detector::sample_rois(std::span<const Box> proposals, std::span<const Box> gt, Rng& rng) const {
  std::vector<Box> candidates(proposals.begin(), proposals.end());
  for (Box b : gt) {
    b.score.reset();
    candidates.push_back(b);
  }
  const int background = cfg_.num_classes;
  std::vector<int> pos;
  std::vector<int> neg;
  std::vector<int> match(candidates.size(), -1);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(candidates[i], gt[g]);
      if (v > best) {
        best = v;
        match[i] = static_cast<int>(g);
      }
    }
    if (best >= cfg_.roi_positive_iou) {
      pos.push_back(static_cast<int>(i));
    } else if (best < cfg_.roi_negative_iou) {
      neg.push_back(static_cast<int>(i));
    }
  }
  const auto max_pos = static_cast<std::size_t>(cfg_.roi_batch * cfg_.roi_positive_fraction);
  pos = take_random(std::move(pos), max_pos, rng);
  neg = take_random(std::move(neg), static_cast<std::size_t>(cfg_.roi_batch) - pos.size(), rng);

  RoiTargets t;
  t.regression = Tensor(Shape{static_cast<int>(pos.size()), 4});
  const BoxCoder coder = roi_coder();
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const Box& roi = candidates[static_cast<std::size_t>(pos[i])];
    const Box& g = gt[static_cast<std::size_t>(match[static_cast<std::size_t>(pos[i])])];
    t.rois.push_back(roi);
    t.labels.push_back(g.class_id);
    t.positive_rows.push_back(static_cast<int>(i));
    const auto d = coder.encode(roi, g);
    for (int j = 0; j < 4; ++j) t.regression.at(static_cast<int>(i), j) = d[static_cast<std::size_t>(j)];
  }
  for (int i : neg) {
    t.rois.push_back(candidates[static_cast<std::size_t>(i)]);
    t.labels.push_back(background);
  }
  return t;
}

DetectionLosses Detector::detection_losses(const FeatureMap& fmap, int image_h, int image_w,
                                           std::span<const Box> gt, const ModelState& params, Rng& rng) const {
  for (const Box& b : gt) {
    if (b.class_id < 0 || b.class_id >= cfg_.num_classes) throw std::invalid_argument("detection_losses: bad class id");
  }
  DetectionLosses out;
  RpnOutput rpn = rpn_forward(fmap, params);
  AnchorTargets at = assign_anchors(rpn.anchors, gt, rng);
  out.rpn_cls = at.sampled.empty()
                    ? zero_loss()
                    : LossTerm{nn::bce_with_logits(nn::select_rows(rpn.objectness, at.sampled), at.labels), false};
  out.rpn_reg = at.positives.empty()
                    ? zero_loss()
                    : smooth_l1(nn::select_rows(rpn.deltas, at.positives), at.regression, cfg_.smooth_l1_beta);

  std::vector<Box> proposals = generate_proposals(rpn, image_h, image_w, cfg_.train_proposals);
  RoiTargets rt = sample_rois(proposals, gt, rng);
  if (rt.rois.empty()) {
    out.roi_cls = zero_loss();
    out.roi_reg = zero_loss();
    return out;
  }
  InstanceFeatures feats = roi_pool(fmap, rt.rois, RoiAlignOptions{cfg_.roi_size, cfg_.roi_sampling});
  HeadOutput head = detection_heads(feats, params);
  out.roi_cls = focal_loss(head.class_logits, rt.labels, cfg_.focal_gamma, cfg_.focal_alpha);
  out.roi_reg = rt.positive_rows.empty()
                    ? zero_loss()
                    : smooth_l1(nn::select_rows(head.box_deltas, rt.positive_rows), rt.regression,
                                cfg_.smooth_l1_beta);
  return out;
}

Var Detector::supervised_loss(std::span<const DetectionSample> batch, const ModelState& params,
                              std::uint64_t seed) const {
  std::vector<Var> terms;
  for (const auto& s : batch) {
    if (!s.is_labeled) throw std::invalid_argument("supervised_loss: unlabeled sample in batch");
    FeatureMap fmap = backbone_forward(s.image, params);
    Rng rng(sample_stream(seed, s.domain_id, s.image_id));
    terms.push_back(detection_losses(fmap, s.image.dim(1), s.image.dim(2), s.boxes, params, rng).total());
  }
  if (terms.empty()) return Var(Tensor::scalar(0.0));
  return nn::add_n(terms);
}

BoxSet Detector::detect(const Tensor& image, const ModelState& params) const {
  nn::NoGradGuard no_grad;
  FeatureMap fmap = backbone_forward(image, params);
  return detect(fmap, image.dim(1), image.dim(2), params);
}

BoxSet Detector::detect(const FeatureMap& fmap, int image_h, int image_w, const ModelState& params) const {
  nn::NoGradGuard no_grad;
  RpnOutput rpn = rpn_forward(fmap, params);
  std::vector<Box> proposals = generate_proposals(rpn, image_h, image_w, cfg_.test_proposals);
  if (proposals.empty()) return {};
  InstanceFeatures feats = roi_pool(fmap, proposals, RoiAlignOptions{cfg_.roi_size, cfg_.roi_sampling});
  HeadOutput head = detection_heads(feats, params);
  return decode_detections(proposals, head.box_deltas.value(), head.class_logits.value(), cfg_.score_thresh,
                           cfg_.nms_iou, roi_coder(), cfg_.max_detections, image_w, image_h);
}

}  // namespace acia::det
