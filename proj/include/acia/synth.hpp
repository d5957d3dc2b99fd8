#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "acia/detector.hpp"
#include "acia/rng.hpp"

// Deterministic multi-domain shape datasets. Geometry is integer-valued;
// only the photometric stage (illumination, noise, blur) touches floats.
namespace acia::synth {

using det::DetectionSample;
using Rgb = std::array<double, 3>;

enum class Texture { flat, gradient, stripes, checker, blotches };

Texture parse_texture(const std::string& name);
std::string to_string(Texture t);

// Shape drawn for class k is shape_name(k % kNumShapes).
inline constexpr int kNumShapes = 9;
std::string shape_name(int class_id);

struct DomainSpec {
  std::string name;
  std::vector<Rgb> palette;  // per-class base colors
  Rgb background{0.5, 0.5, 0.5};
  Rgb background_alt{0.4, 0.4, 0.4};  // second texture color
  double illumination = 1.0;
  double noise_sigma = 0.0;
  double blur_sigma = 0.0;
  double color_jitter = 0.0;  // per-object uniform offset on each channel
  Texture background_texture = Texture::flat;
  std::uint64_t seed = 0;
};

struct ObjectSpec {
  int class_id = 0;
  int x = 0;  // top-left of the shape's bounding square
  int y = 0;
  int size = 16;
};

struct RenderOptions {
  int image_size = 128;
  double max_iou = 0.0;  // between the squares of any two placed objects
  int max_retries = 30;
};

// Draws the objects in order, moving any that overlap an earlier one beyond
// max_iou to a fresh random position (dropped after max_retries). GT boxes
// are the bounds of each object's visible pixels.
DetectionSample render_image(const DomainSpec& spec, std::span<const ObjectSpec> objects, Rng& rng,
                             const RenderOptions& opt = {});

// Boolean mask of a shape in an s-by-s square, row-major.
std::vector<std::uint8_t> shape_mask(int class_id, int size);

struct BenchmarkConfig {
  int num_classes = 4;
  std::vector<DomainSpec> sources;
  DomainSpec target;
  int images_per_domain = 200;
  int test_images = 200;
  std::vector<double> class_frequency;       // empty = uniform
  std::vector<double> test_class_frequency;  // empty = class_frequency
  int min_objects = 2;
  int max_objects = 6;
  int min_size = 12;
  int max_size = 32;
  int image_size = 128;
  double max_iou = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  std::string name;
  int domain_id = 0;
  bool labeled = true;
  std::vector<DetectionSample> samples;
};

struct Benchmark {
  std::vector<Dataset> sources;
  Dataset target_unlabeled;  // boxes kept only for diagnostics, is_labeled=false
  Dataset target_test;
};

Benchmark make_msda_benchmark(const BenchmarkConfig& cfg);

// Normalized per-class object counts. Throws on zero objects.
std::vector<double> class_frequency_profile(std::span<const DetectionSample> samples, int num_classes);

// Named profiles. "highly_imbalanced" has nine classes.
std::vector<double> imbalance_profile(const std::string& name);

// Shapes with cross-domain palettes: each domain permutes a shared set of
// hues, so color is a domain-specific class cue while shape is not.
BenchmarkConfig default_benchmark(int num_classes = 4, std::uint64_t seed = 0);

// PNG (8-bit RGB) round trip. Values are quantized to multiples of 1/255.
void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);

// One directory per domain with PNGs and annotations.jsonl, plus
// manifest.json holding the config and seed.
void save_benchmark(const std::filesystem::path& dir, const BenchmarkConfig& cfg, const Benchmark& bench);
Benchmark load_benchmark(const std::filesystem::path& dir, BenchmarkConfig* cfg_out = nullptr);

}  // namespace acia::synth
