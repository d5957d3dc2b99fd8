#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "acia/eval.hpp"
#include "acia/json_io.hpp"
#include "acia/synth.hpp"
#include "doctest.h"

using namespace acia;
using namespace acia::synth;

namespace {

DomainSpec plain_domain() {
  DomainSpec d = default_benchmark(4).sources[0];
  d.noise_sigma = 0;
  d.blur_sigma = 0;
  d.color_jitter = 0;
  return d;
}

BenchmarkConfig small_benchmark(int images) {
  BenchmarkConfig cfg = default_benchmark(4, 5);
  cfg.images_per_domain = images;
  cfg.test_images = images / 2;
  cfg.image_size = 64;
  cfg.min_size = 8;
  cfg.max_size = 20;
  return cfg;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("acia_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool differs(const Tensor& img, int x, int y, const Rgb& bg) {
  for (int c = 0; c < 3; ++c) {
    if (std::abs(img.at(c, y, x) - std::round(bg[static_cast<std::size_t>(c)] * 255) / 255) > 1e-12) return true;
  }
  return false;
}

int foreground_in(const Tensor& img, const Rgb& bg, int x1, int y1, int x2, int y2) {
  int n = 0;
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x) n += differs(img, x, y, bg);
  }
  return n;
}

}  // namespace

TEST_CASE("every shape mask is nonempty and classes differ") {
  for (int s : {3, 8, 13, 32}) {
    std::vector<std::vector<std::uint8_t>> masks;
    for (int k = 0; k < kNumShapes; ++k) {
      masks.push_back(shape_mask(k, s));
      int on = 0;
      for (auto v : masks.back()) on += v;
      CHECK(on > 0);
    }
    if (s >= 8) {
      for (int a = 0; a < kNumShapes; ++a) {
        for (int b = a + 1; b < kNumShapes; ++b) CHECK(masks[static_cast<std::size_t>(a)] != masks[static_cast<std::size_t>(b)]);
      }
    }
  }
  CHECK_THROWS(shape_mask(0, 2));
}

TEST_CASE("noise-free renders with the same seed are bit-identical") {
  const DomainSpec d = plain_domain();
  const std::vector<ObjectSpec> objs{{0, 5, 5, 20}, {1, 40, 40, 16}, {2, 70, 10, 25}};
  Rng r1(42), r2(42);
  const DetectionSample a = render_image(d, objs, r1);
  const DetectionSample b = render_image(d, objs, r2);
  CHECK(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
  CHECK(a.boxes == b.boxes);

  DomainSpec noisy = default_benchmark(4).target;
  Rng r3(9), r4(9);
  const DetectionSample c = render_image(noisy, objs, r3);
  const DetectionSample e = render_image(noisy, objs, r4);
  CHECK(std::equal(c.image.data().begin(), c.image.data().end(), e.image.data().begin()));
}

TEST_CASE("GT boxes contain foreground and are tight") {
  const DomainSpec d = plain_domain();
  Rng rng(3);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ObjectSpec> objs;
    for (int i = 0; i < 5; ++i) {
      ObjectSpec o;
      o.class_id = rng.uniform_int(0, 3);
      o.size = rng.uniform_int(8, 30);
      o.x = rng.uniform_int(0, 128 - o.size);
      o.y = rng.uniform_int(0, 128 - o.size);
      objs.push_back(o);
    }
    const DetectionSample s = render_image(d, objs, rng);
    CHECK_FALSE(s.boxes.empty());
    for (const Box& b : s.boxes) {
      CHECK(b.inside(128, 128));
      const int x1 = static_cast<int>(b.x1), y1 = static_cast<int>(b.y1), x2 = static_cast<int>(b.x2), y2 = static_cast<int>(b.y2);
      const int all = foreground_in(s.image, d.background, x1, y1, x2, y2);
      CHECK(all > 0);
      // each edge row/column carries foreground, so shrinking by 2 loses some
      CHECK(foreground_in(s.image, d.background, x1 + 2, y1 + 2, x2 - 2, y2 - 2) < all);
      CHECK(foreground_in(s.image, d.background, x1, y1, x2, y1 + 1) > 0);
      CHECK(foreground_in(s.image, d.background, x1, y2 - 1, x2, y2) > 0);
      CHECK(foreground_in(s.image, d.background, x1, y1, x1 + 1, y2) > 0);
      CHECK(foreground_in(s.image, d.background, x2 - 1, y1, x2, y2) > 0);
      ++checked;
    }
  }
  CHECK(checked > 40);
}

TEST_CASE("overlapping objects are moved or dropped") {
  const DomainSpec d = plain_domain();
  Rng rng(4);
  const std::vector<ObjectSpec> same_spot(4, ObjectSpec{0, 10, 10, 20});
  const DetectionSample s = render_image(d, same_spot, rng);
  CHECK(s.boxes.size() == 4);
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    for (std::size_t j = i + 1; j < s.boxes.size(); ++j) CHECK(iou(s.boxes[i], s.boxes[j]) == 0.0);
  }
  // two 100-px squares cannot coexist in 128 px without overlap
  const std::vector<ObjectSpec> huge(2, ObjectSpec{1, 0, 0, 100});
  CHECK(render_image(d, huge, rng).boxes.size() == 1);
  CHECK_THROWS(render_image(d, std::vector<ObjectSpec>{{0, 0, 0, 200}}, rng));
}

TEST_CASE("illumination scales mean foreground intensity") {
  DomainSpec bright = default_benchmark(4).sources[0];
  bright.noise_sigma = 0.02;
  bright.color_jitter = 0;
  DomainSpec dim = bright;
  dim.illumination = 0.5;
  double sb = 0, sd = 0;
  Rng layout(5);
  for (int i = 0; i < 100; ++i) {
    ObjectSpec o{layout.uniform_int(0, 3), layout.uniform_int(0, 100), layout.uniform_int(0, 100), 24};
    Rng r1(static_cast<std::uint64_t>(i)), r2(static_cast<std::uint64_t>(i));
    const auto a = render_image(bright, std::span<const ObjectSpec>(&o, 1), r1);
    const auto b = render_image(dim, std::span<const ObjectSpec>(&o, 1), r2);
    const auto mask = shape_mask(o.class_id, o.size);
    for (int j = 0; j < o.size; ++j) {
      for (int k = 0; k < o.size; ++k) {
        if (!mask[static_cast<std::size_t>(j * o.size + k)]) continue;
        for (int c = 0; c < 3; ++c) {
          sb += a.image.at(c, o.y + j, o.x + k);
          sd += b.image.at(c, o.y + j, o.x + k);
        }
      }
    }
  }
  CHECK(sd / sb == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("benchmark splits, counts and uniform class frequencies") {
  const BenchmarkConfig cfg = small_benchmark(300);
  const Benchmark b = make_msda_benchmark(cfg);
  REQUIRE(b.sources.size() == 2);
  for (std::size_t d = 0; d < b.sources.size(); ++d) {
    CHECK(b.sources[d].samples.size() == 300);
    CHECK(b.sources[d].domain_id == static_cast<int>(d));
    for (const auto& s : b.sources[d].samples) CHECK(s.is_labeled);
  }
  CHECK(b.target_unlabeled.samples.size() == 300);
  CHECK(b.target_test.samples.size() == 150);
  CHECK(b.target_unlabeled.domain_id == 2);
  CHECK(b.target_test.domain_id == 2);
  for (const auto& s : b.target_unlabeled.samples) CHECK_FALSE(s.is_labeled);

  std::size_t objects = 0;
  for (const auto& s : b.sources[0].samples) objects += s.boxes.size();
  CHECK(objects >= 1000);
  for (const auto* ds : {&b.sources[0], &b.sources[1], &b.target_unlabeled}) {
    const auto f = class_frequency_profile(ds->samples, 4);
    for (double v : f) CHECK(std::abs(v - 0.25) <= 0.02);
  }
}

TEST_CASE("highly imbalanced profile is reproduced") {
  BenchmarkConfig cfg = default_benchmark(9, 2);
  cfg.image_size = 64;
  cfg.min_size = 8;
  cfg.max_size = 16;
  cfg.images_per_domain = 400;
  cfg.test_images = 10;
  cfg.class_frequency = imbalance_profile("highly_imbalanced");
  const Benchmark b = make_msda_benchmark(cfg);
  double total = 0;
  for (double f : cfg.class_frequency) total += f;
  for (const auto& ds : b.sources) {
    const auto f = class_frequency_profile(ds.samples, 9);
    for (std::size_t k = 0; k < 9; ++k) CHECK(std::abs(f[k] - cfg.class_frequency[k] / total) <= 0.02);
    CHECK(std::max_element(f.begin(), f.end()) - f.begin() == 2);
  }
  CHECK(imbalance_profile("highly_imbalanced")[2] == 0.578);
}

TEST_CASE("invalid benchmark configs are rejected") {
  BenchmarkConfig cfg = small_benchmark(10);
  cfg.class_frequency = {0, 0, 0, 0};
  CHECK_THROWS(make_msda_benchmark(cfg));
  cfg.class_frequency = {0.5, -0.1, 0.3, 0.3};
  CHECK_THROWS(make_msda_benchmark(cfg));
  cfg = small_benchmark(10);
  cfg.sources.pop_back();
  CHECK_THROWS(make_msda_benchmark(cfg));
  CHECK_THROWS(imbalance_profile("nope"));
}

TEST_CASE("class frequency profile") {
  std::vector<DetectionSample> ds(2);
  ds[0].boxes = {Box{0, 0, 1, 1, 0, {}}, Box{0, 0, 1, 1, 2, {}}};
  ds[1].boxes = {Box{0, 0, 1, 1, 1, {}}, Box{0, 0, 1, 1, 2, {}}};
  CHECK(class_frequency_profile(ds, 3) == std::vector<double>{0.25, 0.25, 0.5});
  std::swap(ds[0], ds[1]);
  CHECK(class_frequency_profile(ds, 3) == std::vector<double>{0.25, 0.25, 0.5});
  CHECK_THROWS(class_frequency_profile(std::vector<DetectionSample>(2), 3));
}

TEST_CASE("saved benchmark round-trips and is byte-identical across generations") {
  const BenchmarkConfig cfg = small_benchmark(12);
  const Benchmark b1 = make_msda_benchmark(cfg);
  const Benchmark b2 = make_msda_benchmark(cfg);
  const auto d1 = scratch_dir("bench1"), d2 = scratch_dir("bench2");
  save_benchmark(d1, cfg, b1);
  save_benchmark(d2, cfg, b2);
  int files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), d1);
    CHECK(slurp(e.path()) == slurp(d2 / rel));
    ++files;
  }
  CHECK(files == 1 + 4 + 12 * 3 + 6);

  BenchmarkConfig loaded_cfg;
  const Benchmark l = load_benchmark(d1, &loaded_cfg);
  CHECK(to_json(loaded_cfg) == to_json(cfg));
  REQUIRE(l.sources.size() == 2);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto& a = b1.sources[1].samples[i];
    const auto& c = l.sources[1].samples[i];
    CHECK(a.boxes == c.boxes);
    CHECK(std::equal(a.image.data().begin(), a.image.data().end(), c.image.data().begin()));
  }
  CHECK_FALSE(l.target_unlabeled.samples[0].is_labeled);

  // class profile agrees with a count over the serialized annotations
  std::vector<double> counts(4, 0.0);
  double total = 0;
  std::ifstream ann(d1 / b1.sources[0].name / "annotations.jsonl");
  std::string line;
  while (std::getline(ann, line)) {
    const nlohmann::json rec = nlohmann::json::parse(line);
    for (const auto& c : rec.at("class_ids")) {
      counts[c.get<std::size_t>()] += 1;
      total += 1;
    }
  }
  for (double& c : counts) c /= total;
  const auto profile = class_frequency_profile(b1.sources[0].samples, 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(profile[k] == counts[k]);
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("a linear probe on raw pixels separates every pair of domains") {
  const Benchmark b = make_msda_benchmark(small_benchmark(60));
  std::vector<const Dataset*> all{&b.sources[0], &b.sources[1], &b.target_unlabeled};
  auto features = [](const Tensor& img) {
    // 4x4 block means per channel
    std::vector<double> f;
    const int n = img.dim(1), blk = n / 4;
    for (int c = 0; c < 3; ++c) {
      for (int by = 0; by < 4; ++by) {
        for (int bx = 0; bx < 4; ++bx) {
          double s = 0;
          for (int y = by * blk; y < (by + 1) * blk; ++y) {
            for (int x = bx * blk; x < (bx + 1) * blk; ++x) s += img.at(c, y, x);
          }
          f.push_back(s / (blk * blk));
        }
      }
    }
    return f;
  };
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      std::vector<eval::InstanceRecord> recs;
      for (const auto* ds : {all[i], all[j]}) {
        for (const auto& s : ds->samples) recs.push_back({features(s.image), 0, ds->domain_id});
      }
      const double score = eval::domain_separability(recs);
      const double balanced_acc = 0.5 + 0.5 * score;
      CHECK(balanced_acc > 0.9);
    }
  }
}
