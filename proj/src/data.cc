//
// Copyright 2026 The dpmaes Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include "dpmaes/data.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "dpmaes/checkpoint.h"
#include "dpmaes/errors.h"
#include "dpmaes/rng.h"

namespace dpmaes {
namespace {

constexpr std::string_view kManifestFormat = "dpmaes-dataset-1";
constexpr double kPi = std::numbers::pi;

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Bilinear value noise on a (cells + 1)^2 lattice, smoothstep-interpolated.
class ValueNoise {
 public:
  ValueNoise(int64_t cells, uint64_t seed) : cells_(cells) {
    Rng rng(seed);
    lattice_.resize(static_cast<size_t>((cells + 1) * (cells + 1)));
    for (double& v : lattice_) v = rng.uniform();
  }

  double at(double u, double v) const {
    const double x = u * static_cast<double>(cells_);
    const double y = v * static_cast<double>(cells_);
    const int64_t ix = std::min<int64_t>(static_cast<int64_t>(x), cells_ - 1);
    const int64_t iy = std::min<int64_t>(static_cast<int64_t>(y), cells_ - 1);
    const double fx = smoothstep(x - static_cast<double>(ix));
    const double fy = smoothstep(y - static_cast<double>(iy));
    const int64_t w = cells_ + 1;
    auto l = [&](int64_t a, int64_t b) {
      return lattice_[static_cast<size_t>(b * w + a)];
    };
    const double top = l(ix, iy) + (l(ix + 1, iy) - l(ix, iy)) * fx;
    const double bot =
        l(ix, iy + 1) + (l(ix + 1, iy + 1) - l(ix, iy + 1)) * fx;
    return top + (bot - top) * fy;
  }

 private:
  int64_t cells_;
  std::vector<double> lattice_;
};

std::vector<double> random_palette(Rng& rng, int colors) {
  std::vector<double> p(static_cast<size_t>(3 * colors));
  for (double& c : p) c = rng.uniform();
  return p;
}

// Piecewise-linear interpolation through the palette colors.
void palette_color(const std::vector<double>& palette, double t, double* rgb) {
  const int64_t n = static_cast<int64_t>(palette.size() / 3);
  if (n == 1) {
    std::copy_n(palette.data(), 3, rgb);
    return;
  }
  const double x = clamp01(t) * static_cast<double>(n - 1);
  const int64_t i = std::min<int64_t>(static_cast<int64_t>(x), n - 2);
  const double f = x - static_cast<double>(i);
  for (int c = 0; c < 3; ++c) {
    const double a = palette[static_cast<size_t>(3 * i + c)];
    const double b = palette[static_cast<size_t>(3 * (i + 1) + c)];
    rgb[c] = a + (b - a) * f;
  }
}

SynthLayer grating_layer(Rng& rng, double angle, double opacity,
                         double min_cycles = 1.5, double max_cycles = 8.0) {
  SynthLayer l;
  l.kind = SynthLayer::Kind::kGrating;
  l.opacity = opacity;
  const double cycles = rng.uniform(min_cycles, max_cycles);
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  const double sharpness = rng.uniform(0.5, 6.0);
  l.params = {angle, cycles, phase, sharpness};
  l.palette = random_palette(rng, 2);
  return l;
}

SynthLayer noise_layer(Rng& rng, double opacity) {
  SynthLayer l;
  l.kind = SynthLayer::Kind::kNoise;
  l.opacity = opacity;
  const double octaves = static_cast<double>(1 + rng.below(4));
  const double cells = static_cast<double>(2 + rng.below(3));
  const double persistence = rng.uniform(0.35, 0.7);
  l.params = {octaves, cells, persistence};
  l.palette = random_palette(rng, 3);
  l.noise_seed = rng.next_u64();
  return l;
}

SynthLayer shape_layer(Rng& rng, double opacity) {
  SynthLayer l;
  l.kind = SynthLayer::Kind::kShape;
  l.opacity = opacity;
  const double kind = static_cast<double>(rng.below(3));
  const double cx = rng.uniform(0.15, 0.85);
  const double cy = rng.uniform(0.15, 0.85);
  const double size = rng.uniform(0.12, 0.4);
  const double rotation = rng.uniform(0.0, 2.0 * kPi);
  l.params = {kind, cx, cy, size, rotation};
  l.palette = random_palette(rng, 2);
  return l;
}

SynthLayer colormap_layer(Rng& rng, double opacity) {
  SynthLayer l;
  l.kind = SynthLayer::Kind::kColorMap;
  l.opacity = opacity;
  l.palette = random_palette(rng, 3);
  return l;
}

// Signed distance (in image units) to the shape boundary, negative inside.
double shape_distance(const std::vector<double>& p, double u, double v) {
  const int kind = static_cast<int>(p[0]);
  const double dx = u - p[1];
  const double dy = v - p[2];
  const double c = std::cos(p[4]);
  const double s = std::sin(p[4]);
  const double x = c * dx + s * dy;
  const double y = -s * dx + c * dy;
  const double r = p[3];
  switch (kind) {
    case 0:
      return std::sqrt(x * x + y * y) - r;
    case 1:
      return std::max(std::abs(x) - r, std::abs(y) - 0.6 * r);
    default: {
      // Equilateral triangle: max over the three edge half-planes.
      double d = -1e9;
      for (int k = 0; k < 3; ++k) {
        const double a = 2.0 * kPi * k / 3.0 + kPi / 2.0;
        d = std::max(d, x * std::cos(a) + y * std::sin(a) - 0.5 * r);
      }
      return d;
    }
  }
}

double noise_field(const SynthLayer& l, const std::vector<ValueNoise>& octs,
                   double u, double v) {
  const double persistence = l.params[2];
  double total = 0.0;
  double norm = 0.0;
  double amp = 1.0;
  for (const ValueNoise& n : octs) {
    total += amp * n.at(u, v);
    norm += amp;
    amp *= persistence;
  }
  return total / norm;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string image_file_name(int64_t index, int64_t n) {
  int width = 6;
  for (int64_t m = n - 1; m >= 1000000; m /= 10) ++width;
  std::string digits = std::to_string(index);
  if (static_cast<int>(digits.size()) < width) {
    digits.insert(0, width - digits.size(), '0');
  }
  return digits + ".ppm";
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

int64_t parse_manifest_int(const std::map<std::string, std::string>& kv,
                           const std::string& key,
                           const std::filesystem::path& file) {
  auto it = kv.find(key);
  if (it == kv.end()) {
    throw IoError(file.string() + ": missing key '" + key + "'");
  }
  int64_t v = 0;
  const std::string& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw IoError(file.string() + ": '" + key + "' is not an integer");
  }
  return v;
}

}  // namespace

std::string_view role_name(DatasetRole role) {
  switch (role) {
    case DatasetRole::kSyntheticPretrain:
      return "synthetic-pretrain";
    case DatasetRole::kPrivateTrain:
      return "private-train";
    case DatasetRole::kEval:
      return "eval";
  }
  return "unknown";
}

DatasetRole parse_role(std::string_view name) {
  if (name == "synthetic-pretrain") return DatasetRole::kSyntheticPretrain;
  if (name == "private-train") return DatasetRole::kPrivateTrain;
  if (name == "eval") return DatasetRole::kEval;
  throw ConfigError("unknown dataset role '" + std::string(name) +
                    "' (expected synthetic-pretrain, private-train or eval)");
}

// ---------------------------------------------------------------------------
// ImageDataset

ImageDataset::ImageDataset(int64_t resolution, int64_t channels,
                           DatasetRole role)
    : resolution_(resolution), channels_(channels), role_(role) {
  if (resolution < 1) throw InvalidArgumentError("resolution must be >= 1");
  if (channels != 1 && channels != 3) {
    throw InvalidArgumentError("channels must be 1 or 3");
  }
}

void ImageDataset::add(std::span<const uint8_t> pixels,
                       std::optional<int64_t> label) {
  if (static_cast<int64_t>(pixels.size()) != image_bytes()) {
    throw InvalidArgumentError("image has " + std::to_string(pixels.size()) +
                               " bytes, expected " +
                               std::to_string(image_bytes()));
  }
  if (count_ > 0 && label.has_value() != labeled()) {
    throw InvalidArgumentError("labels must cover every image or none");
  }
  if (label && *label < 0) throw InvalidArgumentError("labels must be >= 0");
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  if (label) labels_.push_back(*label);
  ++count_;
}

int64_t ImageDataset::num_classes() const {
  if (labels_.empty()) return 0;
  return 1 + *std::max_element(labels_.begin(), labels_.end());
}

void ImageDataset::check_index(int64_t index) const {
  if (index < 0 || index >= count_) {
    throw InvalidArgumentError("image index " + std::to_string(index) +
                               " out of range [0, " + std::to_string(count_) +
                               ")");
  }
}

std::span<const uint8_t> ImageDataset::pixels(int64_t index) const {
  check_index(index);
  return std::span<const uint8_t>(pixels_).subspan(
      static_cast<size_t>(index * image_bytes()),
      static_cast<size_t>(image_bytes()));
}

Tensor ImageDataset::fetch(std::span<const int64_t> indices) const {
  const int64_t B = static_cast<int64_t>(indices.size());
  const int64_t R = resolution_;
  const int64_t C = channels_;
  Tensor out({B, C, R, R});
  double* dst = out.ptr();
  for (int64_t b = 0; b < B; ++b) {
    auto px = pixels(indices[static_cast<size_t>(b)]);
    for (int64_t y = 0; y < R; ++y) {
      for (int64_t x = 0; x < R; ++x) {
        for (int64_t c = 0; c < C; ++c) {
          dst[((b * C + c) * R + y) * R + x] =
              px[static_cast<size_t>((y * R + x) * C + c)] / 255.0;
        }
      }
    }
  }
  return out;
}

Tensor ImageDataset::fetch_all() const {
  std::vector<int64_t> all(static_cast<size_t>(count_));
  for (int64_t i = 0; i < count_; ++i) all[static_cast<size_t>(i)] = i;
  return fetch(all);
}

ImageDataset ImageDataset::subset(std::span<const int64_t> indices) const {
  ImageDataset out(resolution_, channels_, role_);
  for (int64_t i : indices) {
    if (labeled()) {
      out.add(pixels(i), labels_[static_cast<size_t>(i)]);
    } else {
      out.add(pixels(i));
    }
  }
  return out;
}

std::string ImageDataset::digest() const {
  uint64_t h = fnv1a64("");
  for (int64_t i = 0; i < count_; ++i) {
    h = fnv1a64(encode_pnm(pixels(i), resolution_, resolution_, channels_), h);
  }
  return hex64(h);
}

DatasetManifest ImageDataset::manifest(const std::filesystem::path& root) const {
  DatasetManifest m;
  m.root = root;
  m.n = count_;
  m.resolution = resolution_;
  m.channels = channels_;
  m.role = role_;
  m.has_labels = labeled();
  m.digest = digest();
  return m;
}

// ---------------------------------------------------------------------------
// Procedural programs

SynthProgram sample_program(uint64_t seed) {
  Rng rng(seed);
  SynthProgram p;
  p.seed = seed;
  p.depth = 2 + static_cast<int64_t>(rng.below(3));
  p.layers.push_back(noise_layer(rng, 1.0));
  for (int64_t i = 0; i < p.depth; ++i) {
    switch (rng.below(7)) {
      case 0:
      case 1:
      case 2:
        p.layers.push_back(
            grating_layer(rng, rng.uniform(0.0, kPi), rng.uniform(0.35, 0.9)));
        break;
      case 3:
        p.layers.push_back(noise_layer(rng, rng.uniform(0.3, 0.7)));
        break;
      case 4:
      case 5:
        p.layers.push_back(shape_layer(rng, rng.uniform(0.6, 1.0)));
        break;
      default:
        p.layers.push_back(colormap_layer(rng, rng.uniform(0.3, 0.8)));
        break;
    }
  }
  return p;
}

SynthProgram sample_labeled_program(uint64_t seed, int64_t label,
                                    int64_t num_classes) {
  if (num_classes < 1 || label < 0 || label >= num_classes) {
    throw InvalidArgumentError("label out of range");
  }
  Rng rng(seed);
  SynthProgram p;
  p.seed = seed;
  p.depth = 2;
  p.layers.push_back(noise_layer(rng, 1.0));
  // Classes cycle through coarse orientations first, then grating frequency
  // bands. A single class count of 1 degenerates to one band, one angle.
  const int64_t bands = num_classes >= 2 ? 2 : 1;
  const int64_t angles = (num_classes + bands - 1) / bands;
  const int64_t band = label / angles;
  const double jitter = rng.uniform(-0.2, 0.2);
  const double angle = (static_cast<double>(label % angles) + jitter) * kPi /
                       static_cast<double>(angles);
  const double lo = band == 0 ? 1.5 : 5.0, hi = band == 0 ? 3.0 : 8.0;
  SynthLayer grating = grating_layer(rng, angle, 1.0, lo, hi);
  for (int c = 0; c < 3; ++c) grating.palette[3 + c] = 1.0 - grating.palette[c];
  p.layers.push_back(std::move(grating));
  return p;
}

std::vector<uint8_t> render(const SynthProgram& program, int64_t resolution) {
  if (resolution < 1) throw InvalidArgumentError("resolution must be >= 1");
  const int64_t R = resolution;
  std::vector<double> img(static_cast<size_t>(R * R * 3), 0.0);
  for (const SynthLayer& l : program.layers) {
    std::vector<ValueNoise> octs;
    if (l.kind == SynthLayer::Kind::kNoise) {
      const int64_t octaves = static_cast<int64_t>(l.params[0]);
      int64_t cells = static_cast<int64_t>(l.params[1]);
      for (int64_t k = 0; k < octaves; ++k, cells *= 2) {
        octs.emplace_back(cells, l.noise_seed + static_cast<uint64_t>(k));
      }
    }
    for (int64_t y = 0; y < R; ++y) {
      for (int64_t x = 0; x < R; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(R);
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(R);
        double* px = &img[static_cast<size_t>((y * R + x) * 3)];
        double field = 0.0;
        double coverage = 1.0;
        switch (l.kind) {
          case SynthLayer::Kind::kGrating: {
            const double t = u * std::cos(l.params[0]) + v * std::sin(l.params[0]);
            const double w = std::sin(2.0 * kPi * l.params[1] * t + l.params[2]);
            field = 0.5 + 0.5 * std::tanh(l.params[3] * w) / std::tanh(l.params[3]);
            break;
          }
          case SynthLayer::Kind::kNoise:
            field = noise_field(l, octs, u, v);
            break;
          case SynthLayer::Kind::kShape: {
            const double d = shape_distance(l.params, u, v);
            coverage = clamp01(0.5 - d * static_cast<double>(R));
            field = clamp01(0.5 + (v - l.params[2]) / (2.0 * l.params[3]));
            break;
          }
          case SynthLayer::Kind::kColorMap:
            field = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            break;
        }
        double rgb[3];
        palette_color(l.palette, field, rgb);
        const double a = l.opacity * coverage;
        for (int c = 0; c < 3; ++c) px[c] = (1.0 - a) * px[c] + a * rgb[c];
      }
    }
  }
  std::vector<uint8_t> out(img.size());
  for (size_t i = 0; i < img.size(); ++i) {
    out[i] = static_cast<uint8_t>(std::lround(clamp01(img[i]) * 255.0));
  }
  return out;
}

ImageDataset generate_synthetic(const SynthOptions& o) {
  if (o.count < 1) throw InvalidArgumentError("count must be >= 1");
  if (o.resolution < 1) throw InvalidArgumentError("resolution must be >= 1");
  if (o.num_classes < 0) throw InvalidArgumentError("num_classes must be >= 0");
  ImageDataset ds(o.resolution, 3, o.role);
  for (int64_t i = 0; i < o.count; ++i) {
    const uint64_t s =
        derive_seed(o.seed, SeedPurpose::kSynthetic, static_cast<uint64_t>(i));
    if (o.num_classes > 0) {
      const int64_t label = i % o.num_classes;
      ds.add(render(sample_labeled_program(s, label, o.num_classes),
                    o.resolution),
             label);
    } else {
      ds.add(render(sample_program(s), o.resolution));
    }
  }
  return ds;
}

DatasetManifest generate_synthetic(const SynthOptions& options,
                                   const std::filesystem::path& out_dir) {
  return write_dataset(generate_synthetic(options), out_dir);
}

// ---------------------------------------------------------------------------
// Files

std::string encode_pnm(std::span<const uint8_t> pixels, int64_t width,
                       int64_t height, int64_t channels) {
  if (channels != 1 && channels != 3) {
    throw InvalidArgumentError("pnm supports 1 or 3 channels");
  }
  if (static_cast<int64_t>(pixels.size()) != width * height * channels) {
    throw InvalidArgumentError("pixel count does not match image size");
  }
  std::string out = (channels == 3 ? "P6\n" : "P5\n") + std::to_string(width) +
                    " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

std::vector<uint8_t> decode_pnm(std::string_view bytes, int64_t* width,
                                int64_t* height, int64_t* channels) {
  size_t pos = 0;
  auto token = [&]() -> std::string_view {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
        ++pos;
      } else {
        break;
      }
    }
    const size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    }
    return bytes.substr(start, pos - start);
  };
  auto number = [&](const char* what) {
    const std::string_view t = token();
    int64_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || p != t.data() + t.size() || v < 1) {
      throw IoError(std::string("bad pnm header: ") + what);
    }
    return v;
  };
  const std::string_view magic = token();
  if (magic == "P6") {
    *channels = 3;
  } else if (magic == "P5") {
    *channels = 1;
  } else {
    throw IoError("not a binary pnm image");
  }
  *width = number("width");
  *height = number("height");
  if (number("maxval") != 255) throw IoError("only 8-bit pnm is supported");
  ++pos;  // single whitespace before the raster
  const size_t need = static_cast<size_t>(*width * *height * *channels);
  if (pos > bytes.size() || bytes.size() - pos != need) {
    throw IoError("pnm raster has the wrong size");
  }
  return std::vector<uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                              bytes.end());
}

DatasetManifest write_dataset(const ImageDataset& ds,
                              const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const int64_t n = ds.size();
  uint64_t h = fnv1a64("");
  for (int64_t i = 0; i < n; ++i) {
    const std::string img =
        encode_pnm(ds.pixels(i), ds.resolution(), ds.resolution(), ds.channels());
    h = fnv1a64(img, h);
    write_file(dir / image_file_name(i, n), img);
  }
  if (ds.labeled()) {
    std::string labels;
    for (int64_t l : ds.labels()) labels += std::to_string(l) + "\n";
    write_file(dir / "labels", labels);
  }
  DatasetManifest m = ds.manifest(dir);
  m.digest = hex64(h);
  std::ostringstream out;
  out << "format=" << kManifestFormat << "\n"
      << "n=" << m.n << "\n"
      << "resolution=" << m.resolution << "\n"
      << "channels=" << m.channels << "\n"
      << "role=" << role_name(m.role) << "\n"
      << "labels=" << (m.has_labels ? "yes" : "no") << "\n"
      << "digest=" << m.digest << "\n";
  write_file(dir / "manifest", out.str());
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const std::filesystem::path file = dir / "manifest";
  if (!std::filesystem::exists(file)) {
    throw IoError("no manifest in " + dir.string());
  }
  std::map<std::string, std::string> kv;
  std::istringstream in(read_file(file));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw IoError(file.string() + ": malformed line '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["format"] != kManifestFormat) {
    throw IoError(file.string() + ": unknown format '" + kv["format"] + "'");
  }
  DatasetManifest m;
  m.root = dir;
  m.n = parse_manifest_int(kv, "n", file);
  m.resolution = parse_manifest_int(kv, "resolution", file);
  m.channels = parse_manifest_int(kv, "channels", file);
  try {
    m.role = parse_role(kv["role"]);
  } catch (const ConfigError& e) {
    throw IoError(file.string() + ": " + e.what());
  }
  m.has_labels = kv["labels"] == "yes";
  m.digest = kv["digest"];
  if (m.n < 1) throw IoError(file.string() + ": n must be >= 1");
  if (m.resolution < 1 || (m.channels != 1 && m.channels != 3)) {
    throw IoError(file.string() + ": bad resolution or channel count");
  }
  return m;
}

ImageDataset load_dataset(const std::filesystem::path& dir) {
  const DatasetManifest m = read_manifest(dir);
  std::vector<int64_t> labels;
  if (m.has_labels) {
    std::istringstream in(read_file(dir / "labels"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      int64_t v = 0;
      auto [p, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
      if (ec != std::errc() || p != line.data() + line.size() || v < 0) {
        throw IoError((dir / "labels").string() + ": bad label '" + line + "'");
      }
      labels.push_back(v);
    }
    if (static_cast<int64_t>(labels.size()) != m.n) {
      throw IoError((dir / "labels").string() + " has " +
                    std::to_string(labels.size()) + " entries, manifest n=" +
                    std::to_string(m.n));
    }
  }
  ImageDataset ds(m.resolution, m.channels, m.role);
  uint64_t h = fnv1a64("");
  for (int64_t i = 0; i < m.n; ++i) {
    const std::filesystem::path file = dir / image_file_name(i, m.n);
    if (!std::filesystem::exists(file)) {
      throw IoError("missing image " + file.string());
    }
    const std::string bytes = read_file(file);
    int64_t w = 0, ht = 0, c = 0;
    std::vector<uint8_t> px;
    try {
      px = decode_pnm(bytes, &w, &ht, &c);
    } catch (const IoError& e) {
      throw IoError(file.string() + ": " + e.what());
    }
    if (w != m.resolution || ht != m.resolution || c != m.channels) {
      throw IoError(file.string() + ": image is " + std::to_string(w) + "x" +
                    std::to_string(ht) + "x" + std::to_string(c) +
                    ", manifest says " + std::to_string(m.resolution) + "x" +
                    std::to_string(m.resolution) + "x" +
                    std::to_string(m.channels));
    }
    h = fnv1a64(bytes, h);
    if (m.has_labels) {
      ds.add(px, labels[static_cast<size_t>(i)]);
    } else {
      ds.add(px);
    }
  }
  if (hex64(h) != m.digest) {
    throw IoError(dir.string() + ": digest mismatch (manifest " + m.digest +
                  ", files " + hex64(h) + ")");
  }
  return ds;
}

std::vector<int64_t> poisson_sample(int64_t n, double q, uint64_t step_seed) {
  if (n < 0) throw InvalidArgumentError("n must be >= 0");
  if (!(q >= 0.0 && q <= 1.0)) {
    throw InvalidArgumentError("sampling ratio must lie in [0, 1]");
  }
  std::vector<int64_t> out;
  if (q == 0.0) return out;
  Rng rng(step_seed);
  for (int64_t i = 0; i < n; ++i) {
    if (rng.uniform() < q) out.push_back(i);
  }
  return out;
}

}  // namespace dpmaes
