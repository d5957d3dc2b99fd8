#include "acia/mean_teacher.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace acia::mt {

using nn::Var;

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

Var zero() { return Var(Tensor::scalar(0.0)); }

Var sum_or_zero(const std::vector<Var>& terms) { return terms.empty() ? zero() : nn::add_n(terms); }

// Detection losses of one image whose features are already computed.
Var pseudo_detection_loss(const det::Detector& detector, const det::FeatureMap& fmap, int h, int w,
                          const BoxSet& boxes, const ModelState& params, std::uint64_t stream) {
  if (boxes.empty()) return zero();
  Rng rng(stream);
  return detector.detection_losses(fmap, h, w, boxes, params, rng).total();
}

}  // namespace

StrongAugConfig StrongAugConfig::disabled() {
  StrongAugConfig c;
  c.jitter_prob = c.gray_prob = c.blur_prob = c.cutout_prob = 0.0;
  return c;
}

DetectionSample hflip(const DetectionSample& s) {
  DetectionSample out = s;
  const int c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.image.at(ci, y, x) = s.image.at(ci, y, w - 1 - x);
    }
  }
  for (Box& b : out.boxes) {
    const double x1 = w - b.x2;
    b.x2 = w - b.x1;
    b.x1 = x1;
  }
  return out;
}

DetectionSample rescale(const DetectionSample& s, double factor, double min_box_side) {
  if (!(factor > 0)) throw std::invalid_argument("rescale: factor must be > 0");
  DetectionSample out = s;
  if (factor == 1.0) return out;
  const int c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  out.image.fill(0.0);
  for (int y = 0; y < h; ++y) {
    const double sy = (y + 0.5) / factor - 0.5;
    if (sy < -0.5 || sy > h - 0.5) continue;
    const double cy = std::min(std::max(sy, 0.0), h - 1.0);
    const int y0 = std::min(static_cast<int>(cy), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ly = cy - y0;
    for (int x = 0; x < w; ++x) {
      const double sx = (x + 0.5) / factor - 0.5;
      if (sx < -0.5 || sx > w - 0.5) continue;
      const double cx = std::min(std::max(sx, 0.0), w - 1.0);
      const int x0 = std::min(static_cast<int>(cx), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double lx = cx - x0;
      for (int ci = 0; ci < c; ++ci) {
        out.image.at(ci, y, x) = (1 - ly) * ((1 - lx) * s.image.at(ci, y0, x0) + lx * s.image.at(ci, y0, x1)) +
                                 ly * ((1 - lx) * s.image.at(ci, y1, x0) + lx * s.image.at(ci, y1, x1));
      }
    }
  }
  out.boxes.clear();
  for (Box b : s.boxes) {
    b.x1 *= factor;
    b.y1 *= factor;
    b.x2 *= factor;
    b.y2 *= factor;
    b = clip_box(b, w, h);
    if (b.width() >= min_box_side && b.height() >= min_box_side) out.boxes.push_back(b);
  }
  return out;
}

DetectionSample weak_augment(const DetectionSample& s, Rng& rng, const WeakAugConfig& cfg) {
  const bool flip = rng.bernoulli(cfg.flip_prob);
  const double factor = rng.uniform(cfg.min_scale, cfg.max_scale);
  DetectionSample out = flip ? hflip(s) : s;
  return rescale(out, factor, cfg.min_box_side);
}

Tensor color_jitter(const Tensor& image, double fb, double fc, double fs) {
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out = image;
  for (double& v : out.data()) v = clamp01(v * fb);
  double mean_gray = 0;
  for (std::size_t i = 0; i < plane; ++i) mean_gray += 0.299 * out[i] + 0.587 * out[plane + i] + 0.114 * out[2 * plane + i];
  mean_gray /= static_cast<double>(plane);
  for (double& v : out.data()) v = clamp01((v - mean_gray) * fc + mean_gray);
  for (std::size_t i = 0; i < plane; ++i) {
    const double g = 0.299 * out[i] + 0.587 * out[plane + i] + 0.114 * out[2 * plane + i];
    for (int c = 0; c < 3; ++c) out[c * plane + i] = clamp01(g + (out[c * plane + i] - g) * fs);
  }
  return out;
}

Tensor to_grayscale(const Tensor& image) {
  const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  Tensor out = image;
  for (std::size_t i = 0; i < plane; ++i) {
    const double g = 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i];
    out[i] = out[plane + i] = out[2 * plane + i] = g;
  }
  return out;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  if (!(sigma > 0)) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double z = 0;
  for (int i = -radius; i <= radius; ++i) z += (k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= z;
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Tensor tmp(image.shape()), out(image.shape());
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * image.at(ci, y, reflect(x + i, w));
        tmp.at(ci, y, x) = acc;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(ci, reflect(y + i, h), x);
        out.at(ci, y, x) = clamp01(acc);
      }
    }
  }
  return out;
}

Tensor cutout(const Tensor& image, int x0, int y0, int w, int h, double fill) {
  Tensor out = image;
  const int ye = std::min(image.dim(1), y0 + h), xe = std::min(image.dim(2), x0 + w);
  for (int c = 0; c < image.dim(0); ++c) {
    for (int y = std::max(0, y0); y < ye; ++y) {
      for (int x = std::max(0, x0); x < xe; ++x) out.at(c, y, x) = fill;
    }
  }
  return out;
}

Tensor strong_augment(const Tensor& image, Rng& rng, const StrongAugConfig& cfg) {
  Tensor out = image;
  if (rng.bernoulli(cfg.jitter_prob)) {
    const double fb = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness);
    const double fc = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast);
    const double fs = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation);
    out = color_jitter(out, fb, fc, fs);
  }
  if (rng.bernoulli(cfg.gray_prob)) out = to_grayscale(out);
  if (rng.bernoulli(cfg.blur_prob)) out = gaussian_blur(out, rng.uniform(cfg.min_blur_sigma, cfg.max_blur_sigma));
  if (rng.bernoulli(cfg.cutout_prob)) {
    const int n = rng.uniform_int(1, std::max(1, cfg.max_cutouts));
    const int h = image.dim(1), w = image.dim(2);
    for (int i = 0; i < n; ++i) {
      const int cw = std::max(1, static_cast<int>(w * rng.uniform(cfg.min_cutout_frac, cfg.max_cutout_frac)));
      const int ch = std::max(1, static_cast<int>(h * rng.uniform(cfg.min_cutout_frac, cfg.max_cutout_frac)));
      const int x0 = rng.uniform_int(0, w - cw);
      const int y0 = rng.uniform_int(0, h - ch);
      out = cutout(out, x0, y0, cw, ch, cfg.cutout_fill);
    }
  }
  return out;
}

BoxSet filter_by_score(const BoxSet& detections, double tau) {
  BoxSet out;
  for (const Box& b : detections) {
    if (b.score && *b.score >= tau) out.push_back(b);
  }
  return out;
}

PseudoLabelSet generate_pseudo_labels(const det::Detector& detector, const ModelState& teacher,
                                      const DetectionSample& sample, double tau) {
  nn::NoGradGuard no_grad;
  PseudoLabelSet out;
  out.boxes = filter_by_score(detector.detect(sample.image, teacher), tau);
  out.source_image_id = sample.image_id;
  out.tau_used = tau;
  return out;
}

Var unsupervised_loss(const det::Detector& detector, const ModelState& student, const Tensor& strong_image,
                      const PseudoLabelSet& pseudo, int domain_id, std::uint64_t seed) {
  if (pseudo.boxes.empty()) return zero();
  det::FeatureMap fmap = detector.backbone_forward(strong_image, student);
  return pseudo_detection_loss(detector, fmap, strong_image.dim(1), strong_image.dim(2), pseudo.boxes, student,
                               det::sample_stream(seed, domain_id, pseudo.source_image_id));
}

LossBreakdown total_loss(const LossBreakdown& p, const align::AlignmentConfig& cfg) {
  LossBreakdown out = p;
  out.total = p.sup + cfg.alpha * p.unsup + cfg.beta * p.dis + cfg.gamma_w * p.cdis;
  return out;
}

Var weighted_total(const LossParts& p, const align::AlignmentConfig& cfg) {
  const Var terms[] = {p.sup, nn::scale(p.unsup, cfg.alpha), nn::scale(p.dis, cfg.beta), nn::scale(p.cdis, cfg.gamma_w)};
  return nn::add_n(terms);
}

void ema_update(ModelState& teacher, const ModelState& student, double delta) {
  if (!(delta > 0 && delta < 1)) throw std::invalid_argument("ema_update: delta must be in (0,1)");
  if (!teacher.same_layout(student)) throw std::invalid_argument("ema_update: teacher and student layouts differ");
  auto s = student.params().begin();
  for (const auto& [name, _] : teacher.params()) {
    Tensor& t = teacher.get_mut(name).mutable_value();
    const Tensor& w = s->second.value();
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = delta * t[i] + (1 - delta) * w[i];
    ++s;
  }
  ++teacher.step;
}

ModelState make_teacher(const ModelState& student) {
  ModelState t = student.clone();
  t.set_requires_grad("", false);
  return t;
}

double SgdMomentum::step(ModelState& params) {
  double sq = 0;
  for (const auto& [_, v] : params.params()) {
    if (!v.requires_grad() || !v.has_grad()) continue;
    for (double g : v.node()->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
  for (const auto& name : params.names()) {
    nn::Var& p = params.get_mut(name);
    if (!p.requires_grad() || !p.has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.node()->grad;
    auto [it, fresh] = velocity_.try_emplace(name, w.shape());
    Tensor& vel = it->second;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double d = clip * g[i] + cfg_.weight_decay * w[i];
      vel[i] = cfg_.momentum * vel[i] + d;
      w[i] -= cfg_.lr * vel[i];
    }
  }
  ++params.step;
  return norm;
}

void write_step_record(std::ostream& out, const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  j["sup"] = r.losses.sup;
  j["unsup"] = r.losses.unsup;
  j["dis"] = r.losses.dis;
  j["cdis"] = r.losses.cdis;
  j["total"] = r.losses.total;
  j["n_pseudo"] = r.n_pseudo;
  j["grad_norm"] = r.grad_norm;
  out << j.dump() << '\n';
}

std::vector<DetectionSample> round_robin_batch(const std::vector<std::vector<DetectionSample>>& domains,
                                               std::int64_t step, std::uint64_t seed) {
  std::vector<DetectionSample> out;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const auto& dom = domains[d];
    if (dom.empty()) throw std::invalid_argument("round_robin_batch: empty domain");
    const auto n = static_cast<std::int64_t>(dom.size());
    const auto pass = static_cast<std::uint64_t>(step / n);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(Rng::derive(seed, d), pass));
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
    out.push_back(dom[static_cast<std::size_t>(order[static_cast<std::size_t>(step % n)])]);
  }
  return out;
}

MeanTeacher::MeanTeacher(const det::Detector& detector, const align::DomainAligner& aligner, OptimizerConfig opt,
                         WeakAugConfig weak, StrongAugConfig strong, StepFlags flags, std::uint64_t seed)
    : detector_(detector), aligner_(aligner), opt_(opt), weak_(weak), strong_(strong), flags_(flags), seed_(seed) {}

std::vector<DetectionSample> MeanTeacher::augment_sources(std::span<const DetectionSample> batch,
                                                          std::uint64_t stream) const {
  std::vector<DetectionSample> out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].is_labeled) throw std::invalid_argument("source batch contains an unlabeled sample");
    if (batch[i].domain_id >= aligner_.target_domain()) throw std::invalid_argument("source batch contains the target domain");
    Rng rng(Rng::derive(stream, i));
    out.push_back(weak_augment(batch[i], rng, weak_));
  }
  return out;
}

StepRecord MeanTeacher::burn_in_step(ModelState& student, std::span<const DetectionSample> source_batch) {
  const std::uint64_t step_seed = Rng::derive(seed_, static_cast<std::uint64_t>(step_));
  std::vector<DetectionSample> srcs = augment_sources(source_batch, Rng::derive(step_seed, 1));
  student.zero_grad();
  Var sup = detector_.supervised_loss(srcs, student, step_seed);
  sup.backward();
  StepRecord r;
  r.step = step_;
  r.phase = "burn_in";
  r.losses.sup = r.losses.total = sup.item();
  r.grad_norm = opt_.step(student);
  student.zero_grad();
  ++step_;
  return r;
}

StepRecord MeanTeacher::mutual_learning_step(ModelState& student, ModelState& teacher,
                                             std::span<const DetectionSample> source_batch,
                                             std::span<const DetectionSample> target_batch) {
  const align::AlignmentConfig& cfg = aligner_.config();
  const int target_id = aligner_.target_domain();
  const std::uint64_t step_seed = Rng::derive(seed_, static_cast<std::uint64_t>(step_));
  std::vector<DetectionSample> srcs = augment_sources(source_batch, Rng::derive(step_seed, 1));

  student.zero_grad();
  std::vector<Var> sup, unsup, dis, cdis;
  for (const auto& s : srcs) {
    det::FeatureMap fmap = detector_.backbone_forward(s.image, student);
    Rng rng(det::sample_stream(step_seed, s.domain_id, s.image_id));
    sup.push_back(detector_.detection_losses(fmap, s.image.dim(1), s.image.dim(2), s.boxes, student, rng).total());
    if (flags_.image_align) dis.push_back(aligner_.image_level_loss(fmap, s.domain_id, student));
    if (flags_.instance_align) cdis.push_back(aligner_.instance_level_loss(fmap, s.boxes, s.domain_id, student));
  }

  int n_pseudo = 0;
  const std::uint64_t target_stream = Rng::derive(step_seed, 2);
  for (std::size_t i = 0; i < target_batch.size(); ++i) {
    const DetectionSample& t = target_batch[i];
    if (t.domain_id != target_id) throw std::invalid_argument("target batch contains a non-target sample");
    Rng rng(Rng::derive(target_stream, i));
    DetectionSample weak = weak_augment(t, rng, weak_);
    weak.boxes.clear();
    PseudoLabelSet pseudo = generate_pseudo_labels(detector_, teacher, weak, cfg.tau);
    n_pseudo += static_cast<int>(pseudo.boxes.size());
    const Tensor strong = strong_augment(weak.image, rng, strong_);
    det::FeatureMap fmap = detector_.backbone_forward(strong, student);
    unsup.push_back(pseudo_detection_loss(detector_, fmap, strong.dim(1), strong.dim(2), pseudo.boxes, student,
                                          det::sample_stream(step_seed, target_id, t.image_id)));
    if (flags_.image_align) dis.push_back(aligner_.image_level_loss(fmap, target_id, student));
    if (flags_.instance_align && aligner_.include_target()) {
      cdis.push_back(aligner_.instance_level_loss(fmap, pseudo.boxes, target_id, student));
    }
  }

  LossParts parts{sum_or_zero(sup), sum_or_zero(unsup), sum_or_zero(dis), sum_or_zero(cdis)};
  Var total = weighted_total(parts, cfg);
  total.backward();

  StepRecord r;
  r.step = step_;
  r.phase = "mutual";
  r.losses = total_loss({parts.sup.item(), parts.unsup.item(), parts.dis.item(), parts.cdis.item(), 0.0}, cfg);
  r.n_pseudo = n_pseudo;
  r.grad_norm = opt_.step(student);
  student.zero_grad();
  ema_update(teacher, student, cfg.delta_ema);
  ++step_;
  return r;
}

void MeanTeacher::burn_in_phase(ModelState& student, const std::vector<std::vector<DetectionSample>>& sources,
                                int steps, const std::function<void(const StepRecord&)>& on_step) {
  for (int i = 0; i < steps; ++i) {
    std::vector<DetectionSample> batch = round_robin_batch(sources, step_, Rng::derive(seed_, 0xB0B));
    StepRecord r = burn_in_step(student, batch);
    if (on_step) on_step(r);
  }
}

}  // namespace acia::mt
