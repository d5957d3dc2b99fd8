#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "acia/eval.hpp"
#include "acia/rng.hpp"
#include "doctest.h"

using namespace acia;
using namespace acia::eval;

namespace {

Box mk(double x1, double y1, double x2, double y2, int cls = 0, std::optional<double> score = std::nullopt) {
  return Box{x1, y1, x2, y2, cls, score};
}

// AP recomputed from scratch: for every distinct score threshold, rematch the
// detections above it, then take the best precision reachable at each recall
// level.
double brute_force_ap(const std::vector<ImageResult>& images, int cls, double thr) {
  int n_gt = 0;
  std::vector<double> scores;
  for (const auto& im : images) {
    for (const Box& g : im.ground_truth) n_gt += g.class_id == cls;
    for (const Box& d : im.detections) {
      if (d.class_id == cls) scores.push_back(*d.score);
    }
  }
  if (n_gt == 0) return std::nan("");
  std::sort(scores.begin(), scores.end(), std::greater<>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());

  std::vector<std::pair<int, int>> pr;  // (tp, n) per threshold
  for (double t : scores) {
    struct D {
      double s;
      int im, j;
    };
    std::vector<D> ds;
    for (std::size_t i = 0; i < images.size(); ++i) {
      for (std::size_t j = 0; j < images[i].detections.size(); ++j) {
        const Box& d = images[i].detections[j];
        if (d.class_id == cls && *d.score >= t) ds.push_back({*d.score, static_cast<int>(i), static_cast<int>(j)});
      }
    }
    std::stable_sort(ds.begin(), ds.end(), [](const D& a, const D& b) { return a.s > b.s; });
    std::vector<std::vector<bool>> used(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) used[i].assign(images[i].ground_truth.size(), false);
    int tp = 0;
    for (const D& d : ds) {
      const Box& db = images[static_cast<std::size_t>(d.im)].detections[static_cast<std::size_t>(d.j)];
      const auto& gts = images[static_cast<std::size_t>(d.im)].ground_truth;
      int best = -1;
      double bv = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || used[static_cast<std::size_t>(d.im)][g]) continue;
        const double v = iou(db, gts[g]);
        if (v >= thr && v > bv) {
          bv = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(d.im)][static_cast<std::size_t>(best)] = true;
        ++tp;
      }
    }
    pr.emplace_back(tp, static_cast<int>(ds.size()));
  }
  const int max_tp = pr.empty() ? 0 : pr.back().first;
  double acc = 0;
  for (int level = 1; level <= max_tp; ++level) {
    double best = 0;
    for (const auto& [tp, n] : pr) {
      if (tp >= level) best = std::max(best, static_cast<double>(tp) / n);
    }
    acc += best;
  }
  return acc / n_gt;
}

std::vector<ImageResult> random_instance(Rng& rng, bool allow_ties) {
  std::vector<ImageResult> images(static_cast<std::size_t>(rng.uniform_int(1, 3)));
  for (auto& im : images) {
    const int g = rng.uniform_int(0, 4);
    for (int i = 0; i < g; ++i) {
      const int x = rng.uniform_int(0, 12), y = rng.uniform_int(0, 12), w = rng.uniform_int(2, 6), h = rng.uniform_int(2, 6);
      im.ground_truth.push_back(mk(x, y, x + w, y + h, rng.uniform_int(0, 1)));
    }
  }
  int total = 0;
  for (auto& im : images) {
    const int r = rng.uniform_int(0, 4);
    for (int i = 0; i < r && total < 10; ++i, ++total) {
      Box d;
      if (!im.ground_truth.empty() && rng.bernoulli(0.6)) {
        d = im.ground_truth[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(im.ground_truth.size()) - 1))];
        d.x1 += rng.uniform_int(-1, 1);
        d.y1 += rng.uniform_int(-1, 1);
        d.x2 += rng.uniform_int(0, 2);
        if (rng.bernoulli(0.2)) d.class_id = 1 - d.class_id;
      } else {
        const int x = rng.uniform_int(0, 12), y = rng.uniform_int(0, 12);
        d = mk(x, y, x + rng.uniform_int(2, 6), y + rng.uniform_int(2, 6), rng.uniform_int(0, 1));
      }
      d.score = allow_ties ? rng.uniform_int(1, 4) / 4.0 : rng.uniform();
      im.detections.push_back(d);
    }
  }
  return images;
}

}  // namespace

TEST_CASE("iou analytic cases and symmetry") {
  CHECK(iou(mk(0, 0, 2, 2), mk(0, 0, 2, 2)) == 1.0);
  CHECK(iou(mk(0, 0, 2, 2), mk(3, 3, 4, 4)) == 0.0);
  CHECK(iou(mk(0, 0, 2, 2), mk(1, 1, 3, 3)) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const Box a = mk(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(6, 10), rng.uniform(6, 10));
    const Box b = mk(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(6, 10), rng.uniform(6, 10));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) < 1.0);
  }
}

TEST_CASE("average precision trivial cases") {
  CHECK(average_precision({mk(0, 0, 4, 4, 0, 0.9)}, {mk(0, 0, 4, 4)}) == 1.0);
  CHECK(average_precision(BoxSet{}, {mk(0, 0, 4, 4)}) == 0.0);
  CHECK(std::isnan(average_precision({mk(0, 0, 4, 4, 0, 0.9)}, BoxSet{})));
  // duplicate detections of one object: the second is a false positive
  CHECK(average_precision({mk(0, 0, 4, 4, 0, 0.9), mk(0, 0, 4, 4, 0, 0.8)}, {mk(0, 0, 4, 4)}) == 1.0);
  // TP, FP, TP over two GTs: envelope 1 at r=.5, 2/3 at r=1
  const double ap = average_precision({mk(0, 0, 4, 4, 0, 0.9), mk(20, 20, 24, 24, 0, 0.8), mk(10, 10, 14, 14, 0, 0.7)},
                                      {mk(0, 0, 4, 4), mk(10, 10, 14, 14)});
  CHECK(ap == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("average precision equals the brute-force PR oracle on random tiny instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const auto images = random_instance(rng, trial % 2 == 1);
    for (int cls = 0; cls < 2; ++cls) {
      const double got = average_precision(images, cls, 0.5);
      const double want = brute_force_ap(images, cls, 0.5);
      if (std::isnan(want)) {
        CHECK(std::isnan(got));
      } else {
        CHECK(got == want);
        CHECK(got >= 0.0);
        CHECK(got <= 1.0);
      }
    }
  }
}

TEST_CASE("average precision is invariant to strictly monotone score maps") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    auto images = random_instance(rng, trial % 3 == 0);
    const double before = average_precision(images, 0, 0.5);
    for (auto& im : images) {
      for (Box& d : im.detections) d.score = std::exp(3.0 * *d.score) + 1.0;
    }
    const double after = average_precision(images, 0, 0.5);
    if (std::isnan(before)) {
      CHECK(std::isnan(after));
    } else {
      CHECK(before == after);
    }
  }
}

TEST_CASE("a false positive above every detection cannot raise AP") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    auto images = random_instance(rng, false);
    const double before = average_precision(images, 0, 0.5);
    if (std::isnan(before)) continue;
    images[0].detections.push_back(mk(100, 100, 104, 104, 0, 2.0));
    CHECK(average_precision(images, 0, 0.5) <= before);
  }
}

TEST_CASE("mean AP over valid classes") {
  const std::vector<double> a{1.0, 1.0};
  CHECK(mean_ap(a, {true, true}) == 1.0);
  const std::vector<double> b{0.5, 0.7};
  CHECK(mean_ap(b, {true, true}) == doctest::Approx(0.6).epsilon(1e-15));
  const std::vector<double> c{0.2, 0.9, std::nan(""), 0.4};
  const std::vector<double> c_perm{0.4, std::nan(""), 0.2, 0.9};
  CHECK(mean_ap(c, {true, true, false, true}) == doctest::Approx(mean_ap(c_perm, {true, false, true, true})).epsilon(1e-15));
  CHECK_THROWS(mean_ap(b, {false, false}));
}

TEST_CASE("evaluate excludes classes without ground truth and decomposes mAP") {
  std::vector<ImageResult> images(2);
  images[0].ground_truth = {mk(0, 0, 4, 4, 0), mk(10, 10, 16, 16, 1)};
  images[0].detections = {mk(0, 0, 4, 4, 0, 0.9), mk(10, 10, 16, 16, 0, 0.85), mk(30, 30, 34, 34, 2, 0.5)};
  images[1].ground_truth = {mk(5, 5, 9, 9, 1)};
  images[1].detections = {mk(5, 5, 9, 9, 1, 0.6)};
  const EvalResult r = evaluate(images, 3);
  CHECK(r.n_images == 2);
  CHECK(r.valid == std::vector<bool>{true, true, false});
  CHECK(r.per_class_ap[0] == 1.0);
  CHECK(r.per_class_ap[1] == 0.5);
  CHECK(std::isnan(r.per_class_ap[2]));
  CHECK(r.map50 == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(r.map50 == mean_ap(r.per_class_ap, r.valid));
}

TEST_CASE("separability probe: identical distributions near zero, one-hot domains at one") {
  Rng rng(11);
  std::vector<InstanceRecord> same, onehot;
  for (int i = 0; i < 600; ++i) {
    const int d = i % 3;
    InstanceRecord r;
    r.domain_id = d;
    for (int j = 0; j < 6; ++j) r.feature.push_back(rng.normal());
    same.push_back(r);
    InstanceRecord h;
    h.domain_id = d;
    h.feature = {0, 0, 0};
    h.feature[static_cast<std::size_t>(d)] = 1.0;
    onehot.push_back(h);
  }
  CHECK(domain_separability(same) <= 0.1);
  CHECK(domain_separability(onehot) == 1.0);
  CHECK_THROWS(domain_separability(std::vector<InstanceRecord>(3, InstanceRecord{{1.0}, 0, 0})));
}

TEST_CASE("class-conditional separability marks classes missing a domain") {
  Rng rng(12);
  std::vector<InstanceRecord> recs;
  for (int i = 0; i < 200; ++i) {
    InstanceRecord r;
    r.class_id = i % 2;
    r.domain_id = r.class_id == 0 ? (i / 2) % 2 : 0;
    r.feature = {rng.normal() + 4.0 * r.domain_id, rng.normal()};
    recs.push_back(r);
  }
  const auto sep = class_conditional_separability(recs, 3);
  CHECK(sep[0] > 0.9);
  CHECK(std::isnan(sep[1]));
  CHECK(std::isnan(sep[2]));
  CHECK(class_conditional_separability(recs, 3)[0] == sep[0]);
  CHECK(finite_mean(sep) == sep[0]);
}

TEST_CASE("eval CSV lists every class and the summary") {
  EvalResult r;
  r.per_class_ap = {0.5, std::nan("")};
  r.valid = {true, false};
  r.map50 = 0.5;
  r.separability = {0.25, std::nan("")};
  r.n_images = 3;
  const auto path = std::filesystem::temp_directory_path() / "acia_eval_test.csv";
  write_eval_csv(path, r, {"disk", "square"});
  std::ifstream in(path);
  std::string l1, l2, l3, l4;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  std::getline(in, l4);
  CHECK(l1 == "class,ap50,separability");
  CHECK(l2 == "disk,0.5,0.25");
  CHECK(l3 == "square,,");
  CHECK(l4.find("map50=0.5") != std::string::npos);
  std::filesystem::remove(path);
}
