#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sgfnet/random.hpp"
#include "sgfnet/tensor.hpp"

namespace sgfnet {

/// 8-bit raster with interleaved channels (1 for PGM, 3 for PPM).
struct Image {
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), pixels(c * h * w, 0) {}
  bool operator==(const Image&) const = default;
};

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      if (!tok.empty()) return tok;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

inline std::size_t header_number(std::istream& in, const char* what) {
  const std::string tok = next_token(in);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }) || tok.size() > 9) {
    throw FormatError(std::string("netpbm: bad ") + what + " '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace detail

/// Parses binary P5 (grayscale) or P6 (color) with maxval 255.
inline Image read_netpbm(std::istream& in) {
  const std::string magic = detail::next_token(in);
  std::size_t channels;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw FormatError("netpbm: unsupported magic '" + magic + "'");
  const std::size_t w = detail::header_number(in, "width");
  const std::size_t h = detail::header_number(in, "height");
  const std::size_t maxval = detail::header_number(in, "maxval");
  if (maxval != 255) throw FormatError("netpbm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (w == 0 || h == 0) throw FormatError("netpbm: empty image");
  Image img(channels, h, w);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) throw FormatError("netpbm: truncated payload");
  return img;
}

inline void write_netpbm(std::ostream& out, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw DimensionError("netpbm: images need 1 or 3 channels");
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw Error("netpbm: write failed");
}

inline Image read_image_file(const std::filesystem::path& path, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Image img = read_netpbm(in);
  if (img.channels != channels) {
    throw FormatError(path.string() + ": expected " + (channels == 1 ? std::string("P5") : std::string("P6")) + " image");
  }
  return img;
}

inline Image read_ppm(const std::filesystem::path& path) { return read_image_file(path, 3); }
inline Image read_pgm(const std::filesystem::path& path) { return read_image_file(path, 1); }

inline void write_image_file(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_netpbm(out, img);
}

/// One RGB-thermal pair with its label map. Values are planar and lie in [0,1].
struct SegSample {
  std::size_t height = 0, width = 0;
  std::vector<float> rgb;       // [3,H,W]
  std::vector<float> thermal;   // [1,H,W]
  std::vector<std::uint8_t> labels;  // [H,W]

  bool operator==(const SegSample&) const = default;
};

enum class Visibility { rgb_only, thermal_only, both };

struct DatasetMeta {
  std::size_t n = 0, height = 0, width = 0, classes = 0;
  std::uint64_t seed = 0;
};

inline constexpr double kNoiseSigma = 0.02;
inline constexpr float kThermalBackground = 0.3f;

inline std::array<float, 3> class_color(std::size_t c, std::size_t k) {
  if (c == 0) return {0.45f, 0.45f, 0.45f};
  // Evenly spaced hues at fixed saturation and value.
  const double hue = 6.0 * static_cast<double>(c - 1) / static_cast<double>(k - 1);
  const double s = 0.75, v = 0.9;
  const double f = hue - std::floor(hue);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r, g, b;
  switch (static_cast<int>(hue) % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

inline float class_temperature(std::size_t c, std::size_t k) {
  return c == 0 ? kThermalBackground : static_cast<float>(0.3 + 0.6 * static_cast<double>(c) / static_cast<double>(k - 1));
}

inline float quantize8(double v) {
  return static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

/// One painted shape, in pixel-center coordinates.
struct ShapeSpec {
  std::size_t cls = 0;
  Visibility visibility = Visibility::both;
  bool disk = false;
  double cy = 0, cx = 0, radius = 0, half_h = 0, half_w = 0;

  bool contains(std::size_t y, std::size_t x) const {
    const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
    return disk ? dy * dy + dx * dx <= radius * radius : std::abs(dy) <= half_h && std::abs(dx) <= half_w;
  }
};

/// Sample `index` of the dataset for `seed`; independent of the dataset size.
/// Shapes are painted in order, later ones on top; `layout` receives them.
inline SegSample gen_sample(std::size_t index, std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed,
                            std::vector<ShapeSpec>* layout = nullptr) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  Rng rng(seq);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  const std::size_t hw = h * w;
  std::vector<double> rgb(3 * hw), th(hw, kThermalBackground);
  const auto bg = class_color(0, k);
  for (std::size_t ch = 0; ch < 3; ++ch) std::fill(rgb.begin() + ch * hw, rgb.begin() + (ch + 1) * hw, bg[ch]);
  SegSample s;
  s.height = h;
  s.width = w;
  s.labels.assign(hw, 0);

  const std::size_t shapes = pick(2, 5);
  const double small = static_cast<double>(std::min(h, w));
  for (std::size_t n = 0; n < shapes; ++n) {
    ShapeSpec shape;
    shape.cls = pick(1, k - 1);
    shape.visibility = static_cast<Visibility>(pick(0, 2));
    shape.disk = pick(0, 1) == 1;
    shape.cy = uni(0, static_cast<double>(h));
    shape.cx = uni(0, static_cast<double>(w));
    shape.radius = uni(small / 10.0, small / 5.0);
    shape.half_h = uni(h / 16.0, h / 6.0);
    shape.half_w = uni(w / 16.0, w / 6.0);
    const auto color = class_color(shape.cls, k);
    const float temp = class_temperature(shape.cls, k);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!shape.contains(y, x)) continue;
        const std::size_t i = y * w + x;
        s.labels[i] = static_cast<std::uint8_t>(shape.cls);
        // The hidden modality keeps whatever was painted underneath.
        if (shape.visibility != Visibility::thermal_only)
          for (std::size_t ch = 0; ch < 3; ++ch) rgb[ch * hw + i] = color[ch];
        if (shape.visibility != Visibility::rgb_only) th[i] = temp;
      }
    if (layout) layout->push_back(shape);
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  auto noise = [&] {
    double z;
    do z = normal(rng);
    while (std::abs(z) >= 3.0);
    return kNoiseSigma * z;
  };
  s.rgb.resize(3 * hw);
  s.thermal.resize(hw);
  for (std::size_t i = 0; i < 3 * hw; ++i) s.rgb[i] = quantize8(rgb[i] + noise());
  for (std::size_t i = 0; i < hw; ++i) s.thermal[i] = quantize8(th[i] + noise());
  return s;
}

/// Deterministic complementary RGB-thermal dataset. Every value is a multiple
/// of 1/255, so an 8-bit round trip through disk is lossless.
inline std::vector<SegSample> gen_dataset(std::size_t n, std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed) {
  if (n == 0) throw RangeError("gen_dataset: n must be positive");
  if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
    throw DimensionError("gen_dataset: size " + std::to_string(h) + "x" + std::to_string(w) + " must be a positive multiple of 16");
  }
  if (k < 4 || k > 255) throw RangeError("gen_dataset: class count must be in [4, 255]");
  std::vector<SegSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_sample(i, h, w, k, seed));
  return out;
}

inline Image to_image(const std::vector<float>& planar, std::size_t channels, std::size_t h, std::size_t w) {
  Image img(channels, h, w);
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t i = 0; i < h * w; ++i)
      img.pixels[i * channels + ch] =
          static_cast<std::uint8_t>(std::lround(std::clamp(planar[ch * h * w + i], 0.0f, 1.0f) * 255.0f));
  return img;
}

inline std::vector<float> to_planar(const Image& img) {
  const std::size_t hw = img.height * img.width;
  std::vector<float> out(img.channels * hw);
  for (std::size_t ch = 0; ch < img.channels; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = static_cast<float>(img.pixels[i * img.channels + ch]) / 255.0f;
  return out;
}

inline std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples, const DatasetMeta& meta) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string stem = sample_stem(i);
    write_image_file(dir / (stem + "_rgb.ppm"), to_image(s.rgb, 3, s.height, s.width));
    write_image_file(dir / (stem + "_th.pgm"), to_image(s.thermal, 1, s.height, s.width));
    Image lbl(1, s.height, s.width);
    lbl.pixels = s.labels;
    write_image_file(dir / (stem + "_lbl.pgm"), lbl);
  }
  std::ofstream out(dir / "meta.txt");
  out << "n=" << samples.size() << "\nh=" << meta.height << "\nw=" << meta.width << "\nk=" << meta.classes
      << "\nseed=" << meta.seed << '\n';
  if (!out) throw Error("cannot write " + (dir / "meta.txt").string());
}

inline DatasetMeta read_meta(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.txt");
  if (!in) throw Error("no meta.txt in " + dir.string());
  std::map<std::string, std::uint64_t> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("meta.txt: bad line '" + line + "'");
    try {
      kv[line.substr(0, eq)] = std::stoull(line.substr(eq + 1));
    } catch (const std::exception&) {
      throw FormatError("meta.txt: bad value in '" + line + "'");
    }
  }
  for (const char* key : {"n", "h", "w", "k", "seed"})
    if (!kv.count(key)) throw FormatError(std::string("meta.txt: missing ") + key + "=");
  return {kv["n"], kv["h"], kv["w"], kv["k"], kv["seed"]};
}

inline SegSample load_sample(const std::filesystem::path& rgb_path, const std::filesystem::path& th_path) {
  const Image rgb = read_ppm(rgb_path), th = read_pgm(th_path);
  if (rgb.height != th.height || rgb.width != th.width) {
    throw DimensionError("RGB " + rgb_path.string() + " and thermal " + th_path.string() + " differ in size");
  }
  SegSample s;
  s.height = rgb.height;
  s.width = rgb.width;
  s.rgb = to_planar(rgb);
  s.thermal = to_planar(th);
  s.labels.assign(s.height * s.width, 0);
  return s;
}

inline std::vector<SegSample> load_dataset(const std::filesystem::path& dir, DatasetMeta* meta_out = nullptr) {
  const DatasetMeta meta = read_meta(dir);
  std::vector<SegSample> out;
  for (std::size_t i = 0; i < meta.n; ++i) {
    const std::string stem = sample_stem(i);
    SegSample s = load_sample(dir / (stem + "_rgb.ppm"), dir / (stem + "_th.pgm"));
    const Image lbl = read_pgm(dir / (stem + "_lbl.pgm"));
    if (lbl.height != s.height || lbl.width != s.width) throw DimensionError("label map " + stem + " differs in size");
    for (auto v : lbl.pixels)
      if (v >= meta.classes) throw RangeError("label map " + stem + " has class " + std::to_string(v) + " >= k");
    s.labels = lbl.pixels;
    out.push_back(std::move(s));
  }
  if (meta_out) *meta_out = meta;
  return out;
}

}  // namespace sgfnet
