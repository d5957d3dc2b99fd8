#include <algorithm>
#include <cmath>
#include <numeric>

#include "acia/detector.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace acia;
using namespace acia::det;
using acia::nn::Var;
using acia::testing::gradcheck;
using acia::testing::random_tensor;

namespace {

DetectorConfig small_config() {
  DetectorConfig cfg;
  cfg.image_size = 32;
  cfg.backbone_channels = {4, 6, 8};
  cfg.rpn_channels = 8;
  cfg.head_hidden = 16;
  cfg.num_classes = 3;
  return cfg;
}

DetectionSample toy_sample(int image_id, int domain, Rng& rng) {
  DetectionSample s;
  s.image = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  s.domain_id = domain;
  s.image_id = image_id;
  s.is_labeled = true;
  s.boxes = {Box{4, 6, 16, 18, 0, std::nullopt}, Box{18, 10, 30, 28, 2, std::nullopt}};
  return s;
}

double ce_oracle(const Tensor& logits, const std::vector<int>& targets) {
  double total = 0;
  for (int r = 0; r < logits.dim(0); ++r) {
    double z = 0;
    for (int c = 0; c < logits.dim(1); ++c) z += std::exp(logits.at(r, c));
    total += -(logits.at(r, targets[static_cast<std::size_t>(r)]) - std::log(z));
  }
  return total / logits.dim(0);
}

std::vector<Box> brute_force_nms(std::vector<Box> boxes, double thresh) {
  // keep a box iff no higher-scored kept box overlaps it beyond thresh
  std::stable_sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) { return *a.score > *b.score; });
  std::vector<Box> kept;
  for (const Box& b : boxes) {
    bool suppressed = false;
    for (const Box& k : kept) suppressed = suppressed || iou(k, b) > thresh;
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

}  // namespace

TEST_CASE("backbone output shape, determinism and finiteness") {
  Detector det(DetectorConfig{});
  ModelState params;
  Rng rng(7);
  det.init_params(params, rng);
  Tensor zero(Shape{3, 128, 128});
  FeatureMap f = det.backbone_forward(zero, params);
  CHECK(f.data.shape() == Shape{64, 16, 16});
  CHECK(f.stride == 8);
  CHECK(f.data.value().all_finite());
  Tensor img = random_tensor({3, 128, 128}, rng, 0, 1);
  CHECK(det.backbone_forward(img, params).data.value().data()[123] ==
        det.backbone_forward(img, params).data.value().data()[123]);
  CHECK_THROWS_AS(det.backbone_forward(Tensor(Shape{3, 64, 64}), params), std::invalid_argument);
}

TEST_CASE("proposals with tied objectness follow anchor order") {
  DetectorConfig cfg = small_config();
  Detector det(cfg);
  RpnOutput rpn;
  rpn.anchors = det.anchors(4, 4);
  const int n = static_cast<int>(rpn.anchors.size());
  rpn.objectness = Var(Tensor(Shape{n}));
  rpn.deltas = Var(Tensor(Shape{n, 4}));
  auto props = det.generate_proposals(rpn, 32, 32, 1000);
  // all anchors clipped; NMS at 0.7 drops heavy overlaps but survivors keep anchor order
  std::vector<Box> expected;
  for (const Box& a : rpn.anchors) {
    Box c = clip_box(a, 32, 32);
    bool dropped = false;
    for (const Box& k : expected) dropped = dropped || iou(k, c) > cfg.rpn_nms_iou;
    if (!dropped) expected.push_back(c);
  }
  REQUIRE(props.size() == expected.size());
  for (std::size_t i = 0; i < props.size(); ++i) {
    CHECK(props[i].x1 == expected[i].x1);
    CHECK(props[i].y2 == expected[i].y2);
    CHECK(props[i].inside(32, 32));
  }
  CHECK(det.generate_proposals(rpn, 32, 32, 1).size() <= 1);
  CHECK_THROWS_AS(det.generate_proposals(rpn, 32, 32, 0), std::invalid_argument);
}

TEST_CASE("roi_pool identity on grid-aligned full box") {
  Rng rng(11);
  FeatureMap f{Var(random_tensor({3, 4, 4}, rng)), 8};
  const Box full{0, 0, 32, 32, 0, std::nullopt};
  InstanceFeatures out = roi_pool(f, std::span(&full, 1), RoiAlignOptions{4, 1});
  REQUIRE(out.data.shape() == Shape{1, 3, 4, 4});
  for (std::size_t i = 0; i < 48; ++i) CHECK(out.data.value()[i] == doctest::Approx(f.data.value()[i]).epsilon(1e-12));
}

TEST_CASE("roi_pool of constant map is constant; degenerate boxes rejected") {
  FeatureMap f{Var(Tensor(Shape{2, 5, 5}, 0.37)), 8};
  std::vector<Box> boxes = {{1.5, 2.25, 13.0, 37.0, 0, std::nullopt}, {0, 0, 40, 40, 1, std::nullopt}};
  InstanceFeatures out = roi_pool(f, boxes, RoiAlignOptions{3, 2});
  for (double v : out.data.value().data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  const Box flat{3, 3, 3, 9, 0, std::nullopt};
  CHECK_THROWS_AS(roi_pool(f, std::span(&flat, 1), RoiAlignOptions{}), std::invalid_argument);
  const Box outside{3, 3, 50, 9, 0, std::nullopt};
  CHECK_THROWS_AS(roi_pool(f, std::span(&outside, 1), RoiAlignOptions{}), std::invalid_argument);
}

TEST_CASE("roi_pool gradient matches finite differences") {
  Rng rng(12);
  std::vector<Box> boxes = {{3.3, 1.7, 27.1, 20.9, 0, std::nullopt}, {0.0, 10.0, 12.5, 40.0, 0, std::nullopt}};
  Tensor w = random_tensor({2, 2, 3, 3}, rng);
  double err = gradcheck(
      [&](const std::vector<Var>& v) {
        FeatureMap f{v[0], 8};
        return nn::sum(nn::mul(roi_pool(f, boxes, RoiAlignOptions{3, 2}).data, Var(w)));
      },
      {random_tensor({2, 5, 5}, rng)});
  CHECK(err < 1e-4);
}

TEST_CASE("detection heads handle empty and repeated inputs") {
  DetectorConfig cfg = small_config();
  Detector det(cfg);
  ModelState params;
  Rng rng(5);
  det.init_params(params, rng);
  InstanceFeatures none;
  HeadOutput h0 = det.detection_heads(none, params);
  CHECK(h0.class_logits.shape() == Shape{0, 4});
  CHECK(h0.box_deltas.shape() == Shape{0, 4});

  FeatureMap f{Var(random_tensor({8, 4, 4}, rng)), 8};
  std::vector<Box> same(2, Box{2, 2, 20, 20, 0, std::nullopt});
  HeadOutput h = det.detection_heads(roi_pool(f, same, RoiAlignOptions{}), params);
  for (int c = 0; c < 4; ++c) CHECK(h.class_logits.value().at(0, c) == h.class_logits.value().at(1, c));
  CHECK(h.class_logits.value().all_finite());
}

TEST_CASE("focal loss special cases and cross-entropy reduction") {
  Var confident(Tensor(Shape{2, 3}, std::vector<double>{1000, 0, 0, 0, 0, 1000}));
  const int confident_t[] = {0, 2};
  CHECK(focal_loss(confident, confident_t, 2.0, 0.25).value.item() == 0.0);

  Var uniform(Tensor(Shape{3, 2}, 0.4));
  const int ut[] = {0, 1, 1};
  CHECK(focal_loss(uniform, ut, 0.0, 1.0).value.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({6, 5}, rng, -4, 4);
    std::vector<int> t(6);
    for (auto& v : t) v = rng.uniform_int(0, 4);
    const double got = focal_loss(Var(logits), t, 0.0, 1.0).value.item();
    CHECK(std::abs(got - ce_oracle(logits, t)) < 1e-6);
    CHECK(focal_loss(Var(logits), t, 2.0, 0.25).value.item() >= 0.0);
  }
  LossTerm empty = focal_loss(Var(Tensor(Shape{0, 3})), std::span<const int>{}, 2.0, 0.25);
  CHECK(empty.empty);
  CHECK(empty.value.item() == 0.0);
  CHECK_THROWS_AS(focal_loss(uniform, ut, -1.0, 1.0), std::invalid_argument);
  CHECK(gradcheck(
            [&](auto& v) {
              const int tt[] = {1, 0, 4};
              return focal_loss(v[0], tt, 2.0, 0.25).value;
            },
            {random_tensor({3, 5}, rng, -2, 2)}) < 1e-6);
}

TEST_CASE("smooth L1 matches the piecewise scalar oracle") {
  Rng rng(22);
  const double beta = 0.8;
  Tensor pred = random_tensor({5, 4}, rng, -3, 3);
  Tensor target = random_tensor({5, 4}, rng, -3, 3);
  Var d = nn::sub(Var(pred), Var(target));
  Tensor per = nn::smooth_l1_elementwise(d, beta).value();
  double sum = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const double x = std::abs(pred[i] - target[i]);
    const double oracle = x < beta ? 0.5 * x * x / beta : x - 0.5 * beta;
    CHECK(std::abs(per[i] - oracle) < 1e-7);
    sum += oracle;
  }
  CHECK(std::abs(smooth_l1(Var(pred), target, beta).value.item() - sum / 20) < 1e-7);
  CHECK(smooth_l1(Var(pred), pred, beta).value.item() == 0.0);
  Tensor ones(Shape{2, 4}, beta);
  CHECK(smooth_l1(Var(ones), Tensor(Shape{2, 4}), beta).value.item() == doctest::Approx(beta / 2));
  CHECK(smooth_l1(Var(Tensor(Shape{0, 4})), Tensor(Shape{0, 4}), beta).empty);
  CHECK(gradcheck([&](auto& v) { return smooth_l1(v[0], target, beta).value; }, {pred}) < 1e-6);
}

TEST_CASE("decode with zero deltas is identity on proposals") {
  std::vector<Box> props = {{1.25, 2.5, 10.75, 20.0, 0, 0.9}, {5, 5, 30, 12, 0, 0.8}};
  Tensor deltas(Shape{2, 4});
  Tensor logits(Shape{2, 3}, std::vector<double>{5, 0, 0, 0, 5, 0});
  BoxSet out = decode_detections(props, deltas, logits, 0.5, 0.5, BoxCoder{{10, 10, 5, 5}}, 10, 32, 32);
  REQUIRE(out.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(out[i].x1 == doctest::Approx(props[i].x1).epsilon(1e-12));
    CHECK(out[i].y1 == doctest::Approx(props[i].y1).epsilon(1e-12));
    CHECK(out[i].x2 == doctest::Approx(props[i].x2).epsilon(1e-12));
    CHECK(out[i].y2 == doctest::Approx(props[i].y2).epsilon(1e-12));
    CHECK(out[i].class_id == static_cast<int>(i));
  }
}

TEST_CASE("duplicate same-class boxes collapse to one") {
  std::vector<Box> props(2, Box{4, 4, 14, 14, 0, std::nullopt});
  Tensor logits(Shape{2, 2}, std::vector<double>{3, 0, 2, 0});
  BoxSet out = decode_detections(props, Tensor(Shape{2, 4}), logits, 0.1, 0.5, BoxCoder{}, 10, 32, 32);
  REQUIRE(out.size() == 1);
  CHECK(*out[0].score == doctest::Approx(1 / (1 + std::exp(-3.0))));
}

TEST_CASE("per-class NMS equals brute-force oracle on random boxes") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const int r = 20;
    std::vector<Box> props;
    for (int i = 0; i < r; ++i) {
      const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
      props.push_back({x, y, x + rng.uniform(4, 24), y + rng.uniform(4, 24), 0, std::nullopt});
    }
    Tensor logits = random_tensor({r, 3}, rng, -2, 2);
    Tensor deltas = random_tensor({r, 4}, rng, -0.5, 0.5);
    const BoxCoder coder{{10, 10, 5, 5}};
    BoxSet got = decode_detections(props, deltas, logits, 0.2, 0.4, coder, 1000, 64, 64);

    std::vector<Box> expected;
    for (int cls = 0; cls < 2; ++cls) {
      std::vector<Box> cand;
      for (int i = 0; i < r; ++i) {
        double z = 0;
        for (int c = 0; c < 3; ++c) z += std::exp(logits.at(i, c));
        const double p = std::exp(logits.at(i, cls)) / z;
        Box b = clip_box(coder.decode(props[static_cast<std::size_t>(i)], std::span<const double>(deltas.ptr() + 4 * i, 4)), 64, 64);
        if (p < 0.2 || !b.valid()) continue;
        b.class_id = cls;
        b.score = p;
        cand.push_back(b);
      }
      for (const Box& b : brute_force_nms(cand, 0.4)) expected.push_back(b);
    }
    std::stable_sort(expected.begin(), expected.end(), [](const Box& a, const Box& b) { return *a.score > *b.score; });
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].x1 == expected[i].x1);
      CHECK(got[i].y1 == expected[i].y1);
      CHECK(got[i].x2 == expected[i].x2);
      CHECK(got[i].y2 == expected[i].y2);
      CHECK(got[i].class_id == expected[i].class_id);
      CHECK(*got[i].score == doctest::Approx(*expected[i].score).epsilon(1e-12));
    }
    for (std::size_t i = 1; i < got.size(); ++i) CHECK(*got[i - 1].score >= *got[i].score);
  }
}

TEST_CASE("box coder round trip") {
  const Box ref{3, 4, 19, 14, 0, std::nullopt};
  const Box tgt{5, 2, 25, 18, 0, std::nullopt};
  const BoxCoder coder{{10, 10, 5, 5}};
  auto d = coder.encode(ref, tgt);
  Box back = coder.decode(ref, d);
  CHECK(back.x1 == doctest::Approx(tgt.x1));
  CHECK(back.y2 == doctest::Approx(tgt.y2));
}

TEST_CASE("supervised loss: permutation invariance, additivity, errors") {
  Detector det(small_config());
  ModelState params;
  Rng rng(41);
  det.init_params(params, rng);
  std::vector<DetectionSample> batch = {toy_sample(0, 0, rng), toy_sample(1, 1, rng), toy_sample(2, 0, rng)};
  const double forward = det.supervised_loss(batch, params, 9).item();
  std::vector<DetectionSample> shuffled = {batch[2], batch[0], batch[1]};
  CHECK(det.supervised_loss(shuffled, params, 9).item() == doctest::Approx(forward).epsilon(1e-12));

  std::vector<DetectionSample> d0 = {batch[0], batch[2]}, d1 = {batch[1]};
  CHECK(det.supervised_loss(d0, params, 9).item() + det.supervised_loss(d1, params, 9).item() ==
        doctest::Approx(forward).epsilon(1e-12));

  batch[1].is_labeled = false;
  CHECK_THROWS_AS(det.supervised_loss(batch, params, 9), std::invalid_argument);
}

TEST_CASE("supervised loss decomposes into separately computed terms") {
  DetectorConfig cfg = small_config();
  Detector det(cfg);
  ModelState params;
  Rng rng(42);
  det.init_params(params, rng);
  DetectionSample s = toy_sample(5, 1, rng);
  const double total = det.supervised_loss(std::span(&s, 1), params, 3).item();

  // replay the sampling stream and rebuild each term from the loss primitives
  Rng replay(sample_stream(3, 1, 5));
  FeatureMap f = det.backbone_forward(s.image, params);
  RpnOutput rpn = det.rpn_forward(f, params);
  AnchorTargets at = det.assign_anchors(rpn.anchors, s.boxes, replay);
  double rpn_cls = 0;
  for (std::size_t i = 0; i < at.sampled.size(); ++i) {
    const double l = rpn.objectness.value()[static_cast<std::size_t>(at.sampled[i])];
    const double p = 1 / (1 + std::exp(-l));
    rpn_cls += -(at.labels[i] * std::log(p) + (1 - at.labels[i]) * std::log(1 - p));
  }
  rpn_cls /= static_cast<double>(at.sampled.size());
  const double rpn_reg = smooth_l1(nn::select_rows(rpn.deltas, at.positives), at.regression, 1.0).value.item();
  auto props = det.generate_proposals(rpn, 32, 32, cfg.train_proposals);
  RoiTargets rt = det.sample_rois(props, s.boxes, replay);
  HeadOutput head = det.detection_heads(roi_pool(f, rt.rois, RoiAlignOptions{cfg.roi_size, cfg.roi_sampling}), params);
  double focal = 0;
  for (std::size_t r = 0; r < rt.labels.size(); ++r) {
    const Tensor& lg = head.class_logits.value();
    double z = 0;
    for (int c = 0; c < lg.dim(1); ++c) z += std::exp(lg.at(static_cast<int>(r), c));
    const double pt = std::exp(lg.at(static_cast<int>(r), rt.labels[r])) / z;
    focal += -0.25 * (1 - pt) * (1 - pt) * std::log(pt);
  }
  focal /= static_cast<double>(rt.labels.size());
  const double roi_reg =
      smooth_l1(nn::select_rows(head.box_deltas, rt.positive_rows), rt.regression, 1.0).value.item();
  CHECK(total == doctest::Approx(rpn_cls + rpn_reg + focal + roi_reg).epsilon(1e-10));
  CHECK_FALSE(rt.positive_rows.empty());
}

TEST_CASE("teacher-forced perfect predictions give zero loss") {
  const int labels[] = {0, 2, 3};
  Tensor logits(Shape{3, 4}, -1000.0);
  logits.at(0, 0) = logits.at(1, 2) = logits.at(2, 3) = 1000.0;
  Tensor deltas = Tensor(Shape{2, 4}, 0.3);
  const double l = focal_loss(Var(logits), labels, 2.0, 0.25).value.item() + smooth_l1(Var(deltas), deltas, 1.0).value.item();
  CHECK(l == 0.0);
}

TEST_CASE("supervised loss gradient on head parameters matches finite differences") {
  DetectorConfig cfg = small_config();
  cfg.head_hidden = 4;
  Detector det(cfg);
  ModelState params;
  Rng rng(43);
  det.init_params(params, rng);
  DetectionSample s = toy_sample(1, 0, rng);
  const std::vector<std::string> names = {"det.head.cls.w", "det.head.box.w", "det.head.fc2.b"};
  std::vector<Tensor> init;
  for (const auto& n : names) init.push_back(params.get(n).value());
  const double err = gradcheck(
      [&](const std::vector<Var>& v) {
        ModelState p = params.clone();
        for (std::size_t i = 0; i < names.size(); ++i) p.get_mut(names[i]) = v[i];
        return det.supervised_loss(std::span(&s, 1), p, 17);
      },
      init);
  CHECK(err < 1e-3);
}
