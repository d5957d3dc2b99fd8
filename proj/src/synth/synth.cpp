#include "acia/synth.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "acia/json_io.hpp"
#include "acia/mean_teacher.hpp"

namespace acia::synth {

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double quantize(double v) { return std::round(clamp01(v) * 255.0) / 255.0; }

// Intersection over union of two integer squares.
double square_iou(const ObjectSpec& a, const ObjectSpec& b) {
  const int ix = std::max(0, std::min(a.x + a.size, b.x + b.size) - std::max(a.x, b.x));
  const int iy = std::max(0, std::min(a.y + a.size, b.y + b.size) - std::max(a.y, b.y));
  const long long inter = static_cast<long long>(ix) * iy;
  const long long uni = static_cast<long long>(a.size) * a.size + static_cast<long long>(b.size) * b.size - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Rgb background_at(const DomainSpec& spec, int x, int y, int size, const std::vector<double>& blotch, int grid) {
  double t = 0;
  switch (spec.background_texture) {
    case Texture::flat: t = 0; break;
    case Texture::gradient: t = size > 1 ? static_cast<double>(y) / (size - 1) : 0.0; break;
    case Texture::stripes: t = ((x + y) / 6) % 2 ? 1.0 : 0.0; break;
    case Texture::checker: t = ((x / 8) + (y / 8)) % 2 ? 1.0 : 0.0; break;
    case Texture::blotches: {
      // bilinear value noise on a coarse grid
      const double gx = static_cast<double>(x) * (grid - 1) / std::max(1, size - 1);
      const double gy = static_cast<double>(y) * (grid - 1) / std::max(1, size - 1);
      const int x0 = std::min(grid - 2, static_cast<int>(gx)), y0 = std::min(grid - 2, static_cast<int>(gy));
      const double fx = gx - x0, fy = gy - y0;
      auto g = [&](int i, int j) { return blotch[static_cast<std::size_t>(j * grid + i)]; };
      t = (1 - fy) * ((1 - fx) * g(x0, y0) + fx * g(x0 + 1, y0)) + fy * ((1 - fx) * g(x0, y0 + 1) + fx * g(x0 + 1, y0 + 1));
      break;
    }
  }
  Rgb out;
  for (int c = 0; c < 3; ++c) out[c] = (1 - t) * spec.background[c] + t * spec.background_alt[c];
  return out;
}

// Largest-remainder split of n items by frequency.
std::vector<int> quotas(int n, const std::vector<double>& freq) {
  const double total = std::accumulate(freq.begin(), freq.end(), 0.0);
  std::vector<int> q(freq.size());
  std::vector<std::pair<double, int>> rem;
  int used = 0;
  for (std::size_t k = 0; k < freq.size(); ++k) {
    const double exact = n * freq[k] / total;
    q[k] = static_cast<int>(std::floor(exact));
    used += q[k];
    rem.emplace_back(exact - q[k], static_cast<int>(k));
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; used < n; ++i, ++used) ++q[static_cast<std::size_t>(rem[static_cast<std::size_t>(i)].second)];
  return q;
}

std::vector<double> normalized_frequency(const std::vector<double>& freq, int k) {
  if (freq.empty()) return std::vector<double>(static_cast<std::size_t>(k), 1.0 / k);
  if (static_cast<int>(freq.size()) != k) throw std::invalid_argument("class_frequency must have one entry per class");
  double total = 0;
  for (double f : freq) {
    if (!(f >= 0) || !std::isfinite(f)) throw std::invalid_argument("class_frequency must be nonnegative");
    total += f;
  }
  if (!(total > 0)) throw std::invalid_argument("class_frequency is all zero");
  std::vector<double> out = freq;
  for (double& f : out) f /= total;
  return out;
}

Dataset make_split(const BenchmarkConfig& cfg, const DomainSpec& spec, int domain_id, std::uint64_t stream,
                   int count, const std::vector<double>& freq, bool labeled, const std::string& name) {
  const std::uint64_t split_seed = Rng::derive(Rng::derive(cfg.seed, stream), spec.seed);
  Rng plan(split_seed);
  std::vector<int> per_image(static_cast<std::size_t>(count));
  for (int& n : per_image) n = plan.uniform_int(cfg.min_objects, cfg.max_objects);
  const int total = std::accumulate(per_image.begin(), per_image.end(), 0);
  std::vector<int> classes;
  const std::vector<int> q = quotas(total, freq);
  for (std::size_t k = 0; k < q.size(); ++k) classes.insert(classes.end(), static_cast<std::size_t>(q[k]), static_cast<int>(k));
  for (int i = total - 1; i > 0; --i) std::swap(classes[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(plan.uniform_int(0, i))]);

  RenderOptions opt;
  opt.image_size = cfg.image_size;
  opt.max_iou = cfg.max_iou;
  Dataset ds;
  ds.name = name;
  ds.domain_id = domain_id;
  ds.labeled = labeled;
  ds.samples.reserve(static_cast<std::size_t>(count));
  std::size_t next = 0;
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::derive(split_seed, static_cast<std::uint64_t>(i) + 1));
    std::vector<ObjectSpec> objs;
    for (int j = 0; j < per_image[static_cast<std::size_t>(i)]; ++j) {
      ObjectSpec o;
      o.class_id = classes[next++];
      o.size = rng.uniform_int(cfg.min_size, cfg.max_size);
      o.x = rng.uniform_int(0, cfg.image_size - o.size);
      o.y = rng.uniform_int(0, cfg.image_size - o.size);
      objs.push_back(o);
    }
    DetectionSample s = render_image(spec, objs, rng, opt);
    s.domain_id = domain_id;
    s.image_id = i;
    s.is_labeled = labeled;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 360.0) / 60.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Rgb rgb{0, 0, 0};
  const int sector = static_cast<int>(hp);
  switch (sector) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (double& ch : rgb) ch += m;
  return rgb;
}

}  // namespace

Texture parse_texture(const std::string& name) {
  if (name == "flat") return Texture::flat;
  if (name == "gradient") return Texture::gradient;
  if (name == "stripes") return Texture::stripes;
  if (name == "checker") return Texture::checker;
  if (name == "blotches") return Texture::blotches;
  throw std::invalid_argument("unknown texture: " + name);
}

std::string to_string(Texture t) {
  switch (t) {
    case Texture::flat: return "flat";
    case Texture::gradient: return "gradient";
    case Texture::stripes: return "stripes";
    case Texture::checker: return "checker";
    case Texture::blotches: return "blotches";
  }
  return "flat";
}

std::string shape_name(int class_id) {
  static const char* names[kNumShapes] = {"disk", "square", "triangle", "plus", "ring",
                                          "diamond", "frame", "x", "hourglass"};
  return names[((class_id % kNumShapes) + kNumShapes) % kNumShapes];
}

std::vector<std::uint8_t> shape_mask(int class_id, int s) {
  if (s < 3) throw std::invalid_argument("shape_mask: size must be at least 3");
  std::vector<std::uint8_t> m(static_cast<std::size_t>(s) * s, 0);
  const int shape = ((class_id % kNumShapes) + kNumShapes) % kNumShapes;
  for (int j = 0; j < s; ++j) {
    for (int i = 0; i < s; ++i) {
      // doubled coordinates centered on the square, range [-(s-1), s-1]
      const int u = 2 * i + 1 - s, v = 2 * j + 1 - s;
      const int au = std::abs(u), av = std::abs(v);
      const long long r2 = static_cast<long long>(u) * u + static_cast<long long>(v) * v;
      const long long s2 = static_cast<long long>(s) * s;
      bool on = false;
      switch (shape) {
        case 0: on = r2 <= s2; break;
        case 1: on = true; break;
        case 2: on = au <= j + 1; break;
        case 3: on = 3 * au <= s || 3 * av <= s; break;
        case 4: on = r2 <= s2 && 100 * r2 >= 30 * s2; break;
        case 5: on = au + av <= s; break;
        case 6: on = 2 * std::max(au, av) >= s; break;
        case 7: on = 3 * std::abs(au - av) <= s; break;
        case 8: on = au <= av + 1; break;
      }
      m[static_cast<std::size_t>(j) * s + i] = on ? 1 : 0;
    }
  }
  return m;
}

DetectionSample render_image(const DomainSpec& spec, std::span<const ObjectSpec> objects, Rng& rng,
                             const RenderOptions& opt) {
  const int n = opt.image_size;
  if (n < 8) throw std::invalid_argument("render_image: image too small");

  // placement: resolve overlaps first so drawing is order-only
  std::vector<ObjectSpec> placed;
  for (ObjectSpec o : objects) {
    if (o.size < 3 || o.size > n) throw std::invalid_argument("render_image: object does not fit");
    if (spec.palette.empty()) throw std::invalid_argument("render_image: empty palette");
    o.x = std::clamp(o.x, 0, n - o.size);
    o.y = std::clamp(o.y, 0, n - o.size);
    bool ok = false;
    for (int attempt = 0; attempt <= opt.max_retries; ++attempt) {
      if (attempt > 0) {
        o.x = rng.uniform_int(0, n - o.size);
        o.y = rng.uniform_int(0, n - o.size);
      }
      ok = std::all_of(placed.begin(), placed.end(), [&](const ObjectSpec& p) {
        const double v = square_iou(o, p);
        return opt.max_iou > 0 ? v <= opt.max_iou : v == 0.0;
      });
      if (ok) break;
    }
    if (ok) placed.push_back(o);
  }

  const int grid = 6;
  std::vector<double> blotch(static_cast<std::size_t>(grid * grid));
  for (double& b : blotch) b = rng.uniform();

  Tensor img({3, n, n});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const Rgb bg = background_at(spec, x, y, n, blotch, grid);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = bg[c];
    }
  }

  std::vector<int> owner(static_cast<std::size_t>(n) * n, -1);
  for (std::size_t idx = 0; idx < placed.size(); ++idx) {
    const ObjectSpec& o = placed[idx];
    Rgb color = spec.palette[static_cast<std::size_t>(o.class_id) % spec.palette.size()];
    for (double& ch : color) ch = clamp01(ch + (spec.color_jitter > 0 ? rng.uniform(-spec.color_jitter, spec.color_jitter) : 0.0));
    const std::vector<std::uint8_t> mask = shape_mask(o.class_id, o.size);
    for (int j = 0; j < o.size; ++j) {
      for (int i = 0; i < o.size; ++i) {
        if (!mask[static_cast<std::size_t>(j) * o.size + i]) continue;
        const int x = o.x + i, y = o.y + j;
        owner[static_cast<std::size_t>(y) * n + x] = static_cast<int>(idx);
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[static_cast<std::size_t>(c)];
      }
    }
  }

  for (double& v : img.data()) v *= spec.illumination;
  if (spec.blur_sigma > 0) img = mt::gaussian_blur(img, spec.blur_sigma);
  if (spec.noise_sigma > 0) {
    for (double& v : img.data()) v += spec.noise_sigma * rng.normal();
  }
  for (double& v : img.data()) v = quantize(v);

  DetectionSample out;
  out.image = std::move(img);
  out.is_labeled = true;
  std::vector<std::array<int, 4>> bounds(placed.size(), {n, n, -1, -1});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int o = owner[static_cast<std::size_t>(y) * n + x];
      if (o < 0) continue;
      auto& b = bounds[static_cast<std::size_t>(o)];
      b[0] = std::min(b[0], x);
      b[1] = std::min(b[1], y);
      b[2] = std::max(b[2], x);
      b[3] = std::max(b[3], y);
    }
  }
  for (std::size_t idx = 0; idx < placed.size(); ++idx) {
    const auto& b = bounds[idx];
    if (b[2] < 0) continue;
    Box box;
    box.x1 = b[0];
    box.y1 = b[1];
    box.x2 = b[2] + 1;
    box.y2 = b[3] + 1;
    box.class_id = placed[idx].class_id;
    out.boxes.push_back(box);
  }
  return out;
}

void BenchmarkConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  if (sources.size() < 2) throw std::invalid_argument("at least two source domains are required");
  if (images_per_domain < 1 || test_images < 0) throw std::invalid_argument("image counts must be positive");
  if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("bad objects_per_image range");
  if (min_size < 3 || max_size < min_size || max_size > image_size) throw std::invalid_argument("bad object size range");
  normalized_frequency(class_frequency, num_classes);
  normalized_frequency(test_class_frequency.empty() ? class_frequency : test_class_frequency, num_classes);
  for (const DomainSpec& d : sources) {
    if (static_cast<int>(d.palette.size()) < num_classes) throw std::invalid_argument("palette shorter than class count: " + d.name);
  }
  if (static_cast<int>(target.palette.size()) < num_classes) throw std::invalid_argument("target palette shorter than class count");
}

Benchmark make_msda_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  const std::vector<double> freq = normalized_frequency(cfg.class_frequency, cfg.num_classes);
  const std::vector<double> test_freq =
      normalized_frequency(cfg.test_class_frequency.empty() ? cfg.class_frequency : cfg.test_class_frequency, cfg.num_classes);
  const int n = static_cast<int>(cfg.sources.size());
  Benchmark b;
  for (int d = 0; d < n; ++d) {
    const DomainSpec& spec = cfg.sources[static_cast<std::size_t>(d)];
    b.sources.push_back(make_split(cfg, spec, d, static_cast<std::uint64_t>(d), cfg.images_per_domain, freq, true,
                                   spec.name.empty() ? "source" + std::to_string(d) : spec.name));
  }
  const std::string tname = cfg.target.name.empty() ? "target" : cfg.target.name;
  b.target_unlabeled = make_split(cfg, cfg.target, n, static_cast<std::uint64_t>(n), cfg.images_per_domain, freq, false,
                                  tname + "_train");
  b.target_test = make_split(cfg, cfg.target, n, static_cast<std::uint64_t>(n) + 1, cfg.test_images, test_freq, true,
                             tname + "_test");
  return b;
}

std::vector<double> class_frequency_profile(std::span<const DetectionSample> samples, int num_classes) {
  std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
  double total = 0;
  for (const DetectionSample& s : samples) {
    for (const Box& box : s.boxes) {
      if (box.class_id < 0 || box.class_id >= num_classes) throw std::out_of_range("class id outside [0, K)");
      counts[static_cast<std::size_t>(box.class_id)] += 1;
      total += 1;
    }
  }
  if (total == 0) throw std::invalid_argument("class_frequency_profile: no objects");
  for (double& c : counts) c /= total;
  return counts;
}

std::vector<double> imbalance_profile(const std::string& name) {
  if (name == "uniform4") return {0.25, 0.25, 0.25, 0.25};
  if (name == "mostly_balanced") return {0.25, 0.50, 0.10, 0.15};
  if (name == "slightly_imbalanced") return {0.046, 0.092, 0.018, 0.596, 0.028, 0.220};
  if (name == "mostly_imbalanced") return {0.012, 0.024, 0.005, 0.154, 0.007, 0.328, 0.423, 0.057};
  if (name == "highly_imbalanced") return {0.005, 0.010, 0.578, 0.002, 0.065, 0.003, 0.134, 0.178, 0.024};
  throw std::invalid_argument("unknown imbalance profile: " + name);
}

BenchmarkConfig default_benchmark(int num_classes, std::uint64_t seed) {
  if (num_classes < 1 || num_classes > kNumShapes) throw std::invalid_argument("default_benchmark: 1..9 classes");
  BenchmarkConfig cfg;
  cfg.num_classes = num_classes;
  cfg.seed = seed;
  const int k = num_classes;
  // same hue order in every domain; the shift rotates hue and fades saturation/value
  auto palette = [k](double rot, double s, double v) {
    std::vector<Rgb> p;
    for (int c = 0; c < k; ++c) p.push_back(hsv(360.0 * c / k + 15.0 + rot, s, v));
    return p;
  };
  DomainSpec a;
  a.name = "clear";
  a.palette = palette(0.0, 0.75, 0.9);
  a.background = {0.45, 0.45, 0.45};
  a.background_alt = {0.35, 0.35, 0.38};
  a.noise_sigma = 0.02;
  a.color_jitter = 0.05;
  a.background_texture = Texture::flat;
  a.seed = 11;

  DomainSpec b;
  b.name = "overcast";
  b.palette = palette(20.0, 0.65, 0.85);
  b.background = {0.40, 0.45, 0.50};
  b.background_alt = {0.25, 0.30, 0.35};
  b.illumination = 0.85;
  b.noise_sigma = 0.03;
  b.blur_sigma = 0.5;
  b.color_jitter = 0.05;
  b.background_texture = Texture::gradient;
  b.seed = 23;

  DomainSpec t;
  t.name = "dusk";
  t.palette = palette(40.0, 0.5, 0.8);
  t.background = {0.30, 0.25, 0.35};
  t.background_alt = {0.15, 0.12, 0.20};
  t.illumination = 0.6;
  t.noise_sigma = 0.05;
  t.blur_sigma = 0.8;
  t.color_jitter = 0.05;
  t.background_texture = Texture::blotches;
  t.seed = 37;

  cfg.sources = {a, b};
  cfg.target = t;
  return cfg;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_png: expected [3,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<png_byte>(std::lround(clamp01(image.at(c, y, x)) * 255.0));
      }
    }
  }
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(w);
  pi.height = static_cast<png_uint_32>(h);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: " + path.string() + ": " + pi.message);
  }
}

Tensor read_png(const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str())) {
    throw std::runtime_error("read_png: " + path.string() + ": " + pi.message);
  }
  pi.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
    throw std::runtime_error("read_png: " + path.string() + ": " + pi.message);
  }
  const int h = static_cast<int>(pi.height), w = static_cast<int>(pi.width);
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    }
  }
  return img;
}

namespace {

void save_split(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot write " + (dir / "annotations.jsonl").string());
  for (const DetectionSample& s : ds.samples) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", s.image_id);
    write_png(dir / name, s.image);
    nlohmann::ordered_json j;
    j["image_id"] = s.image_id;
    j["file"] = name;
    j["domain_id"] = s.domain_id;
    j["labeled"] = s.is_labeled;
    nlohmann::json boxes = nlohmann::json::array(), classes = nlohmann::json::array();
    for (const Box& b : s.boxes) {
      boxes.push_back({b.x1, b.y1, b.x2, b.y2});
      classes.push_back(b.class_id);
    }
    j["boxes"] = boxes;
    j["class_ids"] = classes;
    ann << j.dump() << '\n';
  }
}

Dataset load_split(const std::filesystem::path& dir, const std::string& name, bool labeled) {
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot read " + (dir / "annotations.jsonl").string());
  Dataset ds;
  ds.name = name;
  ds.labeled = labeled;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    DetectionSample s;
    s.image_id = j.at("image_id").get<int>();
    s.domain_id = j.at("domain_id").get<int>();
    s.is_labeled = j.value("labeled", labeled);
    s.image = read_png(dir / j.at("file").get<std::string>());
    const auto& boxes = j.at("boxes");
    const auto& classes = j.at("class_ids");
    if (boxes.size() != classes.size()) throw std::runtime_error("annotation boxes/class_ids length mismatch");
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      Box b;
      b.x1 = boxes[i].at(0).get<double>();
      b.y1 = boxes[i].at(1).get<double>();
      b.x2 = boxes[i].at(2).get<double>();
      b.y2 = boxes[i].at(3).get<double>();
      b.class_id = classes[i].get<int>();
      s.boxes.push_back(b);
    }
    ds.domain_id = s.domain_id;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

void save_benchmark(const std::filesystem::path& dir, const BenchmarkConfig& cfg, const Benchmark& bench) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "acia-shapes-1";
  manifest["seed"] = cfg.seed;
  manifest["config"] = to_json(cfg);
  nlohmann::json splits = nlohmann::json::array();
  for (const Dataset& d : bench.sources) {
    save_split(dir / d.name, d);
    splits.push_back({{"name", d.name}, {"role", "source"}, {"domain_id", d.domain_id}, {"images", d.samples.size()}});
  }
  save_split(dir / bench.target_unlabeled.name, bench.target_unlabeled);
  splits.push_back({{"name", bench.target_unlabeled.name}, {"role", "target_unlabeled"},
                    {"domain_id", bench.target_unlabeled.domain_id}, {"images", bench.target_unlabeled.samples.size()}});
  save_split(dir / bench.target_test.name, bench.target_test);
  splits.push_back({{"name", bench.target_test.name}, {"role", "target_test"},
                    {"domain_id", bench.target_test.domain_id}, {"images", bench.target_test.samples.size()}});
  manifest["splits"] = splits;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Benchmark load_benchmark(const std::filesystem::path& dir, BenchmarkConfig* cfg_out) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(in);
  if (cfg_out) *cfg_out = benchmark_from_json(manifest.at("config"));
  Benchmark b;
  for (const auto& split : manifest.at("splits")) {
    const std::string name = split.at("name").get<std::string>();
    const std::string role = split.at("role").get<std::string>();
    if (role == "source") {
      b.sources.push_back(load_split(dir / name, name, true));
    } else if (role == "target_unlabeled") {
      b.target_unlabeled = load_split(dir / name, name, false);
    } else if (role == "target_test") {
      b.target_test = load_split(dir / name, name, true);
    } else {
      throw std::runtime_error("unknown split role: " + role);
    }
  }
  return b;
}

}  // namespace acia::synth
