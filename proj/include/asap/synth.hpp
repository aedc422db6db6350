#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "asap/labels.hpp"
#include "asap/tensor.hpp"

namespace asap::synth {

class LabelError : public Error {
 public:
  using Error::Error;
};

enum SceneClass : std::int32_t { background = 0, road = 1, pole = 2, wall = 3, blob = 4 };
inline constexpr std::size_t kSceneClasses = 5;

/// Planar 3 x H x W image with values in [0, 1].
struct Image {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<real> data;

  Image() = default;
  Image(std::size_t h_, std::size_t w_, real fill = 0) : h(h_), w(w_), data(3 * h_ * w_, fill) {}
  real& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * h + y) * w + x]; }
  real at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * h + y) * w + x]; }
  bool operator==(const Image&) const = default;
};

struct Sample {
  Image image;
  LabelMap labels;  // n = 1
};

struct SceneSpec {
  std::size_t width = 128;
  std::size_t height = 64;
  std::size_t n_classes = kSceneClasses;
  // Target visible pixel fraction of road, pole, wall, blob; background
  // takes the remainder.
  std::array<double, 4> densities{0.22, 0.05, 0.15, 0.08};
  // Per-pixel Gaussian noise on every channel.
  double noise = 0.08;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Deterministic in (spec.seed, index). Shapes are painted front to back:
/// poles, blobs, walls, road band, so each visible pixel is labelled by the
/// frontmost shape covering it.
Sample generate_scene(const SceneSpec& spec, std::uint64_t index);

struct AugmentConfig {
  double hflip_prob = 0.5;
  std::vector<double> scales{0.75, 1.0, 1.5, 1.75, 2.0};
  double brightness = 0.2;
  double contrast = 0.2;
  bool center_crop = false;

  static AugmentConfig identity();
};

/// Joint flip and rescale (bilinear image, nearest labels), crop or pad back
/// to the input size (padded labels are ignore), then jitter the image only.
Sample augment(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng);

Sample hflip(const Sample& in);
Sample rescale(const Sample& in, double scale);
Sample crop_or_pad(const Sample& in, std::size_t h, std::size_t w, std::size_t off_y,
                   std::size_t off_x);

// PPM (P6) / PGM (P5) with maxval 255. Image values are quantized to 1/255.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& path, std::size_t n_classes);

/// Writes <root>/<split>/<name>.ppm|.pgm and the sorted manifest
/// <root>/<split>.txt listing image paths relative to root.
void write_split(const std::filesystem::path& root, const std::string& split,
                 const std::vector<Sample>& samples);
std::vector<Sample> read_split(const std::filesystem::path& root, const std::string& split,
                               std::size_t n_classes);
std::vector<std::string> read_manifest(const std::filesystem::path& root, const std::string& split);

/// Pixel count per class; ignore pixels are not counted.
std::vector<std::uint64_t> class_histogram(const std::vector<Sample>& samples,
                                           std::size_t n_classes);

/// Batches samples into an [N,3,H,W] tensor and an N x H x W label map.
std::pair<Tensor, LabelMap> make_batch(const std::vector<Sample>& samples);

std::string class_name(std::size_t k);

}  // namespace asap::synth
