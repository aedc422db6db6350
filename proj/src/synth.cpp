#include "asap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "asap/layers.hpp"

namespace asap::synth {

namespace {

using Color = std::array<double, 3>;

constexpr std::array<Color, kSceneClasses> kBaseColors{{
    {0.55, 0.60, 0.70},  // background
    {0.30, 0.30, 0.33},  // road
    {0.62, 0.66, 0.62},  // pole: weak contrast against background
    {0.62, 0.45, 0.35},  // wall
    {0.25, 0.60, 0.30},  // blob
}};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + index + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Painter {
 public:
  Painter(std::size_t h, std::size_t w, std::mt19937_64& rng)
      : h_(h), w_(w), rng_(rng), labels_(1, h, w, background), claimed_(h * w, 0),
        tint_(h * w, Color{0, 0, 0}) {}

  // Paints the unclaimed subset of `pixels` if the class budget allows it.
  // Accepting while count + new/2 < target keeps the expected coverage
  // centred on the target.
  bool try_paint(const std::vector<std::size_t>& pixels, SceneClass cls, double target,
                 std::size_t& count) {
    std::vector<std::size_t> fresh;
    for (auto p : pixels)
      if (!claimed_[p]) fresh.push_back(p);
    if (fresh.empty()) return true;
    if (static_cast<double>(count) + static_cast<double>(fresh.size()) / 2.0 >= target) {
      return false;
    }
    std::uniform_real_distribution<double> tint(-0.05, 0.05);
    const Color t{tint(rng_), tint(rng_), tint(rng_)};
    for (auto p : fresh) {
      claimed_[p] = 1;
      labels_.data[p] = cls;
      tint_[p] = t;
    }
    count += fresh.size();
    return true;
  }

  bool claimed(std::size_t y, std::size_t x) const { return claimed_[y * w_ + x] != 0; }
  const LabelMap& labels() const { return labels_; }
  const std::vector<Color>& tint() const { return tint_; }

 private:
  std::size_t h_, w_;
  std::mt19937_64& rng_;
  LabelMap labels_;
  std::vector<std::uint8_t> claimed_;
  std::vector<Color> tint_;
};

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

real clamp01(double v) { return static_cast<real>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

void SceneSpec::validate() const {
  if (width == 0 || height == 0 || width % 32 != 0 || height % 32 != 0) {
    throw ContractError("scene size must be a positive multiple of 32");
  }
  if (n_classes != kSceneClasses) {
    throw ContractError("synthetic scenes use exactly 5 classes");
  }
  double total = 0;
  for (double d : densities) {
    if (d < 0) throw ContractError("class densities must be >= 0");
    total += d;
  }
  if (total > 1.0) throw ContractError("class densities sum above 1");
  if (noise < 0) throw ContractError("noise must be >= 0");
}

Sample generate_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width;
  std::mt19937_64 rng(mix_seed(spec.seed, index));
  Painter painter(H, W, rng);
  const double area = static_cast<double>(H * W);
  constexpr int kAttempts = 400;

  // Poles: 1-3 px wide, at least H/2 tall and 5x taller than wide, with a
  // free column on each side so neighbouring poles never merge.
  {
    const double target = spec.densities[1] * area;
    std::size_t count = 0;
    std::vector<std::uint8_t> used(W, 0);
    for (int a = 0; a < kAttempts; ++a) {
      const std::size_t pw = uniform_int(rng, 1, 3);
      const std::size_t min_h = std::max(H / 2, 5 * pw);
      const std::size_t ph = uniform_int(rng, min_h, std::max(min_h, H * 7 / 8));
      const std::size_t x0 = uniform_int(rng, 0, W - pw);
      const std::size_t y0 = uniform_int(rng, 0, H - ph);
      bool free = true;
      for (std::size_t x = (x0 ? x0 - 1 : 0); x <= std::min(W - 1, x0 + pw); ++x)
        free = free && !used[x];
      if (!free) continue;
      std::vector<std::size_t> px;
      for (std::size_t y = y0; y < y0 + ph; ++y)
        for (std::size_t x = x0; x < x0 + pw; ++x) px.push_back(y * W + x);
      if (!painter.try_paint(px, pole, target, count)) break;
      for (std::size_t x = x0; x < x0 + pw; ++x) used[x] = 1;
    }
  }
  // Blobs: axis-aligned ellipses.
  {
    const double target = spec.densities[3] * area;
    std::size_t count = 0;
    for (int a = 0; a < kAttempts; ++a) {
      const double ry = static_cast<double>(uniform_int(rng, 3, std::max<std::size_t>(3, H / 6)));
      const double rx = static_cast<double>(uniform_int(rng, 3, std::max<std::size_t>(3, W / 10)));
      const double cy = static_cast<double>(uniform_int(rng, 0, H - 1));
      const double cx = static_cast<double>(uniform_int(rng, 0, W - 1));
      std::vector<std::size_t> px;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dy = (static_cast<double>(y) - cy) / ry;
          const double dx = (static_cast<double>(x) - cx) / rx;
          if (dx * dx + dy * dy <= 1.0) px.push_back(y * W + x);
        }
      if (!painter.try_paint(px, blob, target, count)) break;
    }
  }
  // Walls: wide rectangles.
  {
    const double target = spec.densities[2] * area;
    std::size_t count = 0;
    for (int a = 0; a < kAttempts; ++a) {
      const std::size_t rw = uniform_int(rng, std::max<std::size_t>(4, W / 8), W / 3);
      const std::size_t rh = uniform_int(rng, H / 4, H / 2);
      const std::size_t x0 = uniform_int(rng, 0, W - rw);
      const std::size_t y0 = uniform_int(rng, 0, H - rh);
      std::vector<std::size_t> px;
      for (std::size_t y = y0; y < y0 + rh; ++y)
        for (std::size_t x = x0; x < x0 + rw; ++x) px.push_back(y * W + x);
      if (!painter.try_paint(px, wall, target, count)) break;
    }
  }
  // Road: horizontal band grown upward from the bottom row.
  {
    const double target = spec.densities[0] * area;
    std::size_t count = 0;
    for (std::size_t y = H; y-- > 0;) {
      std::vector<std::size_t> px;
      for (std::size_t x = 0; x < W; ++x) px.push_back(y * W + x);
      if (!painter.try_paint(px, road, target, count)) break;
    }
  }

  Sample s;
  s.labels = painter.labels();
  s.image = Image(H, W);
  std::normal_distribution<double> noise(0.0, spec.noise > 0 ? spec.noise : 1.0);
  const auto& tint = painter.tint();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = y * W + x;
      const auto cls = static_cast<std::size_t>(s.labels.data[p]);
      for (std::size_t c = 0; c < 3; ++c) {
        const double n = spec.noise > 0 ? noise(rng) : 0.0;
        s.image.at(c, y, x) = clamp01(kBaseColors[cls][c] + tint[p][c] + n);
      }
    }
  return s;
}

// ---------------------------------------------------------------- augmentation

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.hflip_prob = 0;
  c.scales = {1.0};
  c.brightness = 0;
  c.contrast = 0;
  c.center_crop = true;
  return c;
}

Sample hflip(const Sample& in) {
  Sample out = in;
  const std::size_t H = in.image.h, W = in.image.w;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.image.at(c, y, x) = in.image.at(c, y, W - 1 - x);
      out.labels.at(0, y, x) = in.labels.at(0, y, W - 1 - x);
    }
  return out;
}

Sample rescale(const Sample& in, double scale) {
  if (!(scale > 0)) throw ContractError("rescale factor must be positive");
  const std::size_t H = in.image.h, W = in.image.w;
  const auto nh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(H * scale)));
  const auto nw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(W * scale)));
  Sample out;
  {
    NoGradGuard no_grad;
    const Tensor t = Tensor::from(Shape{1, 3, H, W}, in.image.data);
    const Tensor r = resize(t, nh, nw, ResizeMode::bilinear);
    out.image.h = nh;
    out.image.w = nw;
    out.image.data.assign(r.data().begin(), r.data().end());
  }
  out.labels = LabelMap(1, nh, nw);
  for (std::size_t y = 0; y < nh; ++y) {
    const auto sy = std::min(H - 1, static_cast<std::size_t>((y + 0.5) * H / nh));
    for (std::size_t x = 0; x < nw; ++x) {
      const auto sx = std::min(W - 1, static_cast<std::size_t>((x + 0.5) * W / nw));
      out.labels.at(0, y, x) = in.labels.at(0, sy, sx);
    }
  }
  return out;
}

Sample crop_or_pad(const Sample& in, std::size_t h, std::size_t w, std::size_t off_y,
                   std::size_t off_x) {
  // Per axis: a larger source is cropped starting at `off`; a smaller
  // source is placed at `off` inside the destination.
  auto source_of = [](std::size_t d, std::size_t src, std::size_t dst,
                      std::size_t off) -> std::ptrdiff_t {
    if (src >= dst) return static_cast<std::ptrdiff_t>(d + off);
    if (d < off || d - off >= src) return -1;
    return static_cast<std::ptrdiff_t>(d - off);
  };
  Sample out;
  out.image = Image(h, w, 0);
  out.labels = LabelMap(1, h, w, kIgnoreLabel);
  for (std::size_t y = 0; y < h; ++y) {
    const auto sy = source_of(y, in.image.h, h, off_y);
    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in.image.h)) continue;
    for (std::size_t x = 0; x < w; ++x) {
      const auto sx = source_of(x, in.image.w, w, off_x);
      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(in.image.w)) continue;
      for (std::size_t c = 0; c < 3; ++c)
        out.image.at(c, y, x) = in.image.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      out.labels.at(0, y, x) = in.labels.at(0, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
    }
  }
  return out;
}

Sample augment(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (cfg.scales.empty()) throw ContractError("augment: no scales configured");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Fixed number of draws per call keeps the stream aligned across configs.
  const double flip_u = u01(rng);
  const double scale_u = u01(rng);
  const double off_y_u = u01(rng);
  const double off_x_u = u01(rng);
  const double bright_u = u01(rng);
  const double contrast_u = u01(rng);

  const std::size_t H = in.image.h, W = in.image.w;
  Sample s = flip_u < cfg.hflip_prob ? hflip(in) : in;
  const auto idx = std::min(cfg.scales.size() - 1,
                            static_cast<std::size_t>(scale_u * static_cast<double>(cfg.scales.size())));
  if (cfg.scales[idx] != 1.0) s = rescale(s, cfg.scales[idx]);
  if (s.image.h != H || s.image.w != W) {
    auto offset = [&](std::size_t src, std::size_t dst, double u) -> std::size_t {
      const std::size_t slack = src > dst ? src - dst : dst - src;
      if (cfg.center_crop) return slack / 2;
      return std::min(slack, static_cast<std::size_t>(u * static_cast<double>(slack + 1)));
    };
    s = crop_or_pad(s, H, W, offset(s.image.h, H, off_y_u), offset(s.image.w, W, off_x_u));
  }

  const double b = 1.0 + cfg.brightness * (2.0 * bright_u - 1.0);
  const double c = 1.0 + cfg.contrast * (2.0 * contrast_u - 1.0);
  if (b != 1.0 || c != 1.0) {
    double m = 0;
    for (auto v : s.image.data) m += v * b;
    m /= static_cast<double>(s.image.data.size());
    for (auto& v : s.image.data) v = clamp01((v * b - m) * c + m);
  }
  return s;
}

// ---------------------------------------------------------------- IO

namespace {

std::size_t read_header_int(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  while (is >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(is, rest);
      continue;
    }
    try {
      std::size_t used = 0;
      const auto v = std::stoul(tok, &used);
      if (used != tok.size()) break;
      return v;
    } catch (const std::exception&) {
      break;
    }
  }
  throw FormatError("malformed header in " + path.string());
}

struct Netpbm {
  std::size_t w, h;
  std::vector<std::uint8_t> bytes;
};

Netpbm read_netpbm(const std::filesystem::path& path, const std::string& magic,
                   std::size_t channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IOError("cannot open " + path.string());
  std::string m;
  is >> m;
  if (m != magic) throw FormatError("expected " + magic + " header in " + path.string());
  Netpbm img;
  img.w = read_header_int(is, path);
  img.h = read_header_int(is, path);
  const std::size_t maxval = read_header_int(is, path);
  if (img.w == 0 || img.h == 0 || maxval != 255) {
    throw FormatError("unsupported dimensions or maxval in " + path.string());
  }
  if (is.get() == EOF) throw FormatError("truncated header in " + path.string());
  img.bytes.resize(img.w * img.h * channels);
  is.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.bytes.size()) {
    throw FormatError("truncated payload in " + path.string());
  }
  return img;
}

void write_netpbm(const std::filesystem::path& path, const std::string& magic, std::size_t w,
                  std::size_t h, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot write " + path.string());
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IOError("write failed for " + path.string());
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(3 * image.h * image.w);
  for (std::size_t y = 0; y < image.h; ++y)
    for (std::size_t x = 0; x < image.w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        bytes[(y * image.w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  write_netpbm(path, "P6", image.w, image.h, bytes);
}

Image read_ppm(const std::filesystem::path& path) {
  const Netpbm n = read_netpbm(path, "P6", 3);
  Image img(n.h, n.w);
  for (std::size_t y = 0; y < n.h; ++y)
    for (std::size_t x = 0; x < n.w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<real>(n.bytes[(y * n.w + x) * 3 + c]) / real(255);
  return img;
}

void write_pgm(const std::filesystem::path& path, const LabelMap& labels) {
  if (labels.n != 1) throw ContractError("write_pgm expects a single label map");
  std::vector<std::uint8_t> bytes(labels.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto v = labels.data[i];
    if (v < 0 || v > 255) throw LabelError("label " + std::to_string(v) + " not representable");
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  write_netpbm(path, "P5", labels.w, labels.h, bytes);
}

LabelMap read_pgm(const std::filesystem::path& path, std::size_t n_classes) {
  const Netpbm n = read_netpbm(path, "P5", 1);
  LabelMap labels(1, n.h, n.w);
  for (std::size_t i = 0; i < n.bytes.size(); ++i) {
    const std::int32_t v = n.bytes[i];
    if (v != kIgnoreLabel && static_cast<std::size_t>(v) >= n_classes) {
      throw LabelError("class index " + std::to_string(v) + " out of range in " + path.string());
    }
    labels.data[i] = v;
  }
  return labels;
}

void write_split(const std::filesystem::path& root, const std::string& split,
                 const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / split, ec);
  if (ec) throw IOError("cannot create " + (root / split).string() + ": " + ec.message());
  std::vector<std::string> entries;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << "scene_" << std::setfill('0') << std::setw(6) << i;
    write_ppm(root / split / (name.str() + ".ppm"), samples[i].image);
    write_pgm(root / split / (name.str() + ".pgm"), samples[i].labels);
    entries.push_back(split + "/" + name.str() + ".ppm");
  }
  std::sort(entries.begin(), entries.end());
  std::ofstream os(root / (split + ".txt"));
  if (!os) throw IOError("cannot write manifest for split " + split);
  for (const auto& e : entries) os << e << '\n';
}

std::vector<std::string> read_manifest(const std::filesystem::path& root, const std::string& split) {
  std::ifstream is(root / (split + ".txt"));
  if (!is) throw IOError("missing manifest " + (root / (split + ".txt")).string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<Sample> read_split(const std::filesystem::path& root, const std::string& split,
                               std::size_t n_classes) {
  std::vector<Sample> out;
  for (const auto& rel : read_manifest(root, split)) {
    std::filesystem::path image_path = root / rel;
    std::filesystem::path label_path = image_path;
    label_path.replace_extension(".pgm");
    Sample s{read_ppm(image_path), read_pgm(label_path, n_classes)};
    if (s.image.h != s.labels.h || s.image.w != s.labels.w) {
      throw FormatError("image/label size mismatch for " + rel);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::uint64_t> class_histogram(const std::vector<Sample>& samples,
                                           std::size_t n_classes) {
  std::vector<std::uint64_t> h(n_classes, 0);
  for (const auto& s : samples)
    for (auto v : s.labels.data)
      if (v >= 0 && static_cast<std::size_t>(v) < n_classes) ++h[static_cast<std::size_t>(v)];
  return h;
}

std::pair<Tensor, LabelMap> make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t H = samples[0].image.h, W = samples[0].image.w, N = samples.size();
  std::vector<real> data;
  data.reserve(N * 3 * H * W);
  LabelMap labels(N, H, W);
  for (std::size_t b = 0; b < N; ++b) {
    const auto& s = samples[b];
    if (s.image.h != H || s.image.w != W) throw ShapeError("make_batch: mixed sample sizes");
    data.insert(data.end(), s.image.data.begin(), s.image.data.end());
    std::copy(s.labels.data.begin(), s.labels.data.end(), labels.data.begin() + b * H * W);
  }
  return {Tensor::from(Shape{N, 3, H, W}, std::move(data)), std::move(labels)};
}

std::string class_name(std::size_t k) {
  static const char* names[] = {"background", "road", "pole", "wall", "blob"};
  return k < kSceneClasses ? names[k] : "class" + std::to_string(k);
}

}  // namespace asap::synth
