#pragma once

// Synthetic multi-band scenes with instance annotations, resolution
// degradation, nested training subsets, and on-disk formats (raw scene files
// and COCO-shaped annotation JSON).

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <numbers>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "gfm/band_adapt.hpp"
#include "gfm/box.hpp"

namespace gfm {

enum class ShapeFamily { Ellipse, BlobPolygon };

struct BinaryMask {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0/1

  BinaryMask() = default;
  BinaryMask(std::int64_t h, std::int64_t w)
      : height(h), width(w), bits(static_cast<std::size_t>(h * w), 0) {}

  std::uint8_t at(std::int64_t r, std::int64_t c) const { return bits[r * width + c]; }
  std::uint8_t& at(std::int64_t r, std::int64_t c) { return bits[r * width + c]; }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  // Tight box around set pixels; invalid box if empty.
  Box tight_box() const {
    std::int64_t r0 = height, r1 = -1, c0 = width, c1 = -1;
    for (std::int64_t r = 0; r < height; ++r)
      for (std::int64_t c = 0; c < width; ++c)
        if (at(r, c)) {
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
        }
    if (r1 < 0) return {};
    return {static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1),
            static_cast<double>(r1 + 1)};
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct InstanceAnnotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t class_id = 1;  // 1..K; 0 is background
  Box box;
  BinaryMask mask;

  double mask_area() const { return static_cast<double>(mask.count()); }
};

struct Scene {
  std::int64_t image_id = 0;
  Tensor<float> raster;  // [C,T,H,W]
  std::vector<InstanceAnnotation> annotations;
};

struct SceneConfig {
  std::int64_t bands = 6;  // 6, or 3 (R,G,B taken from the 6-band render)
  std::int64_t time = 1;
  std::int64_t image_size = 64;
  std::int64_t min_objects = 1, max_objects = 5;
  std::int64_t min_size = 6, max_size = 32;  // object extent in pixels
  std::vector<ShapeFamily> shapes{ShapeFamily::Ellipse, ShapeFamily::BlobPolygon};
  std::int64_t num_classes = 2;
  // [class][6 bands]; generated from the seed when empty.
  std::vector<std::array<double, 6>> signatures;
  std::array<double, 6> background{0.30, 0.35, 0.32, 0.45, 0.40, 0.33};
  double background_amplitude = 0.08;
  double noise_std = 0.02;
  std::uint64_t seed = 0;

  // Class signatures, generated deterministically when not configured.
  std::vector<std::array<double, 6>> class_signatures() const {
    if (!signatures.empty()) return signatures;
    std::vector<std::array<double, 6>> out;
    Rng rng = Rng(seed).split("signatures");
    const double sep = std::max(0.12, 6.0 * noise_std);
    for (std::int64_t k = 0; k < num_classes; ++k) {
      for (int attempt = 0;; ++attempt) {
        std::array<double, 6> s{};
        for (auto& v : s) v = rng.uniform(0.05, 0.95);
        bool ok = distance(s, background) >= sep;
        for (const auto& o : out) ok = ok && distance(s, o) >= sep;
        if (ok || attempt > 1000) {
          out.push_back(s);
          break;
        }
      }
    }
    return out;
  }

  static double distance(const std::array<double, 6>& a, const std::array<double, 6>& b) {
    double s = 0;
    for (int i = 0; i < 6; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }

  void validate() const {
    if (bands != 3 && bands != 6) throw ConfigError("data.bands must be 3 or 6");
    if (time < 1) throw ConfigError("data.time must be >= 1");
    if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
    if (min_objects < 1 || max_objects < min_objects)
      throw ConfigError("data.min_objects/max_objects must satisfy 1 <= min <= max");
    if (min_size < 2 || max_size < min_size || max_size > image_size)
      throw ConfigError("data.min_size/max_size must satisfy 2 <= min <= max <= image_size");
    if (num_classes < 1) throw ConfigError("data.num_classes must be >= 1");
    if (shapes.empty()) throw ConfigError("data.shapes must not be empty");
    if (noise_std < 0) throw ConfigError("data.noise_std must be >= 0");
    if (!signatures.empty() && static_cast<std::int64_t>(signatures.size()) != num_classes)
      throw ConfigError("data.signatures must list one signature per class");
    const auto sig = class_signatures();
    for (std::size_t a = 0; a < sig.size(); ++a)
      for (std::size_t b = a + 1; b < sig.size(); ++b)
        if (distance(sig[a], sig[b]) < 3.0 * noise_std)
          throw ConfigError("data.signatures: classes " + std::to_string(a + 1) + " and " +
                            std::to_string(b + 1) + " closer than 3x noise std");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["bands"] = bands;
    j["time"] = time;
    j["image_size"] = image_size;
    j["min_objects"] = min_objects;
    j["max_objects"] = max_objects;
    j["min_size"] = min_size;
    j["max_size"] = max_size;
    j["num_classes"] = num_classes;
    j["noise_std"] = noise_std;
    j["background_amplitude"] = background_amplitude;
    j["seed"] = seed;
    std::vector<std::string> sh;
    for (auto s : shapes) sh.push_back(s == ShapeFamily::Ellipse ? "ellipse" : "blob_polygon");
    j["shapes"] = sh;
    j["signatures"] = class_signatures();
    j["background"] = background;
    return j;
  }

  // Inverse of to_json; absent keys keep their defaults.
  static SceneConfig from_json(const nlohmann::json& j) {
    SceneConfig c;
    c.bands = j.value("bands", c.bands);
    c.time = j.value("time", c.time);
    c.image_size = j.value("image_size", c.image_size);
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.min_size = j.value("min_size", c.min_size);
    c.max_size = j.value("max_size", c.max_size);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.background_amplitude = j.value("background_amplitude", c.background_amplitude);
    c.seed = j.value("seed", c.seed);
    if (j.contains("shapes")) {
      c.shapes.clear();
      for (const auto& s : j["shapes"].get<std::vector<std::string>>()) {
        if (s == "ellipse") c.shapes.push_back(ShapeFamily::Ellipse);
        else if (s == "blob_polygon") c.shapes.push_back(ShapeFamily::BlobPolygon);
        else throw ConfigError("data.shapes: unknown shape family '" + s + "'");
      }
    }
    if (j.contains("signatures")) c.signatures = j["signatures"].get<std::vector<std::array<double, 6>>>();
    if (j.contains("background")) c.background = j["background"].get<std::array<double, 6>>();
    return c;
  }
};

namespace detail {

inline bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0])
      in = !in;
  }
  return in;
}

// Rasterizes one object (pixel centers inside the shape) into a mask.
inline BinaryMask render_shape(ShapeFamily fam, double cx, double cy, double extent, Rng& rng,
                               std::int64_t H, std::int64_t W) {
  BinaryMask m(H, W);
  const double R = extent / 2.0;
  const auto r0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cy - R)) - 1);
  const auto r1 = std::min<std::int64_t>(H, static_cast<std::int64_t>(std::ceil(cy + R)) + 1);
  const auto c0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cx - R)) - 1);
  const auto c1 = std::min<std::int64_t>(W, static_cast<std::int64_t>(std::ceil(cx + R)) + 1);
  if (fam == ShapeFamily::Ellipse) {
    const double a = R, b = R * rng.uniform(0.55, 1.0), th = rng.uniform(0.0, std::numbers::pi);
    const double ct = std::cos(th), st = std::sin(th);
    for (std::int64_t r = r0; r < r1; ++r)
      for (std::int64_t c = c0; c < c1; ++c) {
        const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
        const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
        if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) m.at(r, c) = 1;
      }
  } else {
    const int n = 7;
    std::vector<std::array<double, 2>> poly;
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    for (int i = 0; i < n; ++i) {
      const double ang = phase + 2 * std::numbers::pi * i / n;
      const double rad = R * rng.uniform(0.6, 1.0);
      poly.push_back({cx + rad * std::cos(ang), cy + rad * std::sin(ang)});
    }
    for (std::int64_t r = r0; r < r1; ++r)
      for (std::int64_t c = c0; c < c1; ++c)
        if (inside_polygon(poly, c + 0.5, r + 0.5)) m.at(r, c) = 1;
  }
  return m;
}

}  // namespace detail

// Band indices of R, G, B within the 6-band order (Blue, Green, Red, ...).
inline const std::vector<std::int64_t>& rgb_band_indices() {
  static const std::vector<std::int64_t> idx{2, 1, 0};
  return idx;
}

inline Scene synth_scene(const SceneConfig& cfg, std::int64_t index) {
  cfg.validate();
  const auto S = cfg.image_size, Tt = cfg.time;
  Rng rng = Rng(cfg.seed).split("scene").split(static_cast<std::uint64_t>(index));
  const auto sig = cfg.class_signatures();

  Scene scene;
  scene.image_id = index;
  const auto count = cfg.min_objects + static_cast<std::int64_t>(rng.below(
                                             static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  BinaryMask occupied(S, S);
  std::vector<std::int64_t> owner(static_cast<std::size_t>(S * S), -1);
  for (std::int64_t k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      const double extent = rng.uniform(static_cast<double>(cfg.min_size),
                                        static_cast<double>(cfg.max_size) + 0.999);
      const double cx = rng.uniform(extent / 2, S - extent / 2);
      const double cy = rng.uniform(extent / 2, S - extent / 2);
      const auto fam = cfg.shapes[rng.below(cfg.shapes.size())];
      auto mask = detail::render_shape(fam, cx, cy, extent, rng, S, S);
      const Box box = mask.tight_box();
      if (!box.valid()) continue;
      const double span = std::max(box.width(), box.height());
      if (span < cfg.min_size || span > cfg.max_size) continue;
      // keep a one-pixel gap between instances
      bool clash = false;
      for (std::int64_t r = static_cast<std::int64_t>(box.y1); r < box.y2 && !clash; ++r)
        for (std::int64_t c = static_cast<std::int64_t>(box.x1); c < box.x2 && !clash; ++c) {
          if (!mask.at(r, c)) continue;
          for (std::int64_t dr = -1; dr <= 1 && !clash; ++dr)
            for (std::int64_t dc = -1; dc <= 1 && !clash; ++dc) {
              const auto rr = r + dr, cc = c + dc;
              if (rr >= 0 && rr < S && cc >= 0 && cc < S && occupied.at(rr, cc)) clash = true;
            }
        }
      if (clash) continue;
      InstanceAnnotation a;
      a.image_id = index;
      a.class_id = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
      a.box = box;
      for (std::int64_t i = 0; i < S * S; ++i)
        if (mask.bits[i]) {
          occupied.bits[i] = 1;
          owner[i] = static_cast<std::int64_t>(scene.annotations.size());
        }
      a.mask = std::move(mask);
      scene.annotations.push_back(std::move(a));
      placed = true;
    }
    if (!placed)
      throw GenerationError("scene " + std::to_string(index) + ": could not place object " +
                            std::to_string(k + 1) + " of " + std::to_string(count) +
                            " after 400 attempts");
  }

  // Smooth background field shared across bands, scaled per band.
  std::array<double, 3> fx{}, fy{}, ph{};
  for (int i = 0; i < 3; ++i) {
    fx[i] = rng.uniform(0.5, 2.5) * 2 * std::numbers::pi / S;
    fy[i] = rng.uniform(0.5, 2.5) * 2 * std::numbers::pi / S;
    ph[i] = rng.uniform(0.0, 2 * std::numbers::pi);
  }
  std::array<double, 6> band_gain{};
  for (auto& g : band_gain) g = rng.uniform(0.6, 1.4);
  std::vector<double> field(static_cast<std::size_t>(S * S));
  for (std::int64_t r = 0; r < S; ++r)
    for (std::int64_t c = 0; c < S; ++c) {
      double f = 0;
      for (int i = 0; i < 3; ++i) f += std::sin(fx[i] * c + fy[i] * r + ph[i]);
      field[r * S + c] = f / 3.0;
    }

  std::vector<float> data(static_cast<std::size_t>(6 * Tt * S * S));
  Rng noise = rng.split("noise");
  for (std::int64_t b = 0; b < 6; ++b)
    for (std::int64_t t = 0; t < Tt; ++t)
      for (std::int64_t i = 0; i < S * S; ++i) {
        const auto o = owner[i];
        double v = o >= 0 ? sig[scene.annotations[o].class_id - 1][b]
                          : cfg.background[b] + cfg.background_amplitude * band_gain[b] * field[i];
        if (cfg.noise_std > 0) v += noise.normal(0.0, cfg.noise_std);
        data[(b * Tt + t) * S * S + i] = static_cast<float>(v);
      }
  auto raster = Tensor<float>::from({6, Tt, S, S}, std::move(data));
  if (cfg.bands == 3) raster = select_bands(raster, rgb_band_indices());
  scene.raster = raster;
  for (std::size_t k = 0; k < scene.annotations.size(); ++k)
    scene.annotations[k].id = index * 1000 + static_cast<std::int64_t>(k) + 1;
  return scene;
}

// ---------------------------------------------------------------- transforms

// Non-overlapping average pooling of every band; boxes scale by 1/factor and
// masks are max-pooled.
inline Tensor<float> degrade_raster(const Tensor<float>& x, std::int64_t factor) {
  if (factor < 1) throw ConfigError("resolution factor must be >= 1");
  if (x.rank() != 4) throw DimensionError("degrade_resolution expects (C,T,H,W)");
  const auto C = x.dim(0), Tt = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % factor || W % factor)
    throw ConfigError("resolution factor " + std::to_string(factor) + " does not divide " +
                      std::to_string(H) + "x" + std::to_string(W));
  const auto Ho = H / factor, Wo = W / factor;
  std::vector<float> out(static_cast<std::size_t>(C * Tt * Ho * Wo));
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::int64_t p = 0; p < C * Tt; ++p)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j) {
        double s = 0;
        for (std::int64_t a = 0; a < factor; ++a)
          for (std::int64_t b = 0; b < factor; ++b)
            s += x[(p * H + i * factor + a) * W + j * factor + b];
        out[(p * Ho + i) * Wo + j] = static_cast<float>(s * inv);
      }
  return Tensor<float>::from({C, Tt, Ho, Wo}, std::move(out));
}

inline BinaryMask max_pool_mask(const BinaryMask& m, std::int64_t factor) {
  BinaryMask out(m.height / factor, m.width / factor);
  for (std::int64_t r = 0; r < m.height; ++r)
    for (std::int64_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) out.at(r / factor, c / factor) = 1;
  return out;
}

inline BinaryMask upsample_mask(const BinaryMask& m, std::int64_t factor) {
  BinaryMask out(m.height * factor, m.width * factor);
  for (std::int64_t r = 0; r < out.height; ++r)
    for (std::int64_t c = 0; c < out.width; ++c) out.at(r, c) = m.at(r / factor, c / factor);
  return out;
}

inline Scene degrade_resolution(const Scene& s, std::int64_t factor) {
  Scene out;
  out.image_id = s.image_id;
  out.raster = degrade_raster(s.raster, factor);
  for (const auto& a : s.annotations) {
    InstanceAnnotation d = a;
    d.box = a.box.scaled(1.0 / static_cast<double>(factor));
    d.mask = max_pool_mask(a.mask, factor);
    out.annotations.push_back(std::move(d));
  }
  return out;
}

// Nearest-neighbour upsampling of raster and annotations by `factor`.
inline Scene upsample_scene(const Scene& s, std::int64_t factor) {
  Scene out;
  out.image_id = s.image_id;
  const auto& x = s.raster;
  const auto C = x.dim(0), Tt = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = H * factor, Wo = W * factor;
  std::vector<float> data(static_cast<std::size_t>(C * Tt * Ho * Wo));
  for (std::int64_t p = 0; p < C * Tt; ++p)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j)
        data[(p * Ho + i) * Wo + j] = x[(p * H + i / factor) * W + j / factor];
  out.raster = Tensor<float>::from({C, Tt, Ho, Wo}, std::move(data));
  for (const auto& a : s.annotations) {
    InstanceAnnotation d = a;
    d.box = a.box.scaled(static_cast<double>(factor));
    d.mask = upsample_mask(a.mask, factor);
    out.annotations.push_back(std::move(d));
  }
  return out;
}

// Seeded subset of `n` scene indices (ascending). Subsets for different
// fractions with the same seed are nested: all come from one shuffled order.
inline std::vector<std::int64_t> subsample_indices(std::int64_t n, double fraction,
                                                   std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("train_fraction must be in (0, 1], got " + std::to_string(fraction));
  const auto keep = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(n)));
  if (keep < 1) throw ConfigError("train_fraction " + std::to_string(fraction) + " of " +
                                  std::to_string(n) + " scenes leaves nothing");
  Rng rng = Rng(seed).split("subsample");
  auto order = rng.permutation(static_cast<std::size_t>(n));
  std::vector<std::int64_t> out(order.begin(), order.begin() + keep);
  std::sort(out.begin(), out.end());
  return out;
}

// ------------------------------------------------------------------- file I/O

struct DatasetManifest {
  std::string split;
  std::vector<std::string> scenes;  // header file names relative to the split directory
  std::string annotation_file = "annotations.json";
  std::string config_hash;

  nlohmann::json to_json() const {
    return {{"split", split}, {"scenes", scenes}, {"annotation_file", annotation_file},
            {"config_hash", config_hash}};
  }
  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.split = j.at("split").get<std::string>();
    m.scenes = j.at("scenes").get<std::vector<std::string>>();
    m.annotation_file = j.value("annotation_file", "annotations.json");
    m.config_hash = j.value("config_hash", "");
    return m;
  }
};

// Subset of a manifest by `subsample_indices`.
inline DatasetManifest subsample_split(const DatasetManifest& m, double fraction,
                                       std::uint64_t seed) {
  DatasetManifest out = m;
  out.scenes.clear();
  for (auto i : subsample_indices(static_cast<std::int64_t>(m.scenes.size()), fraction, seed))
    out.scenes.push_back(m.scenes[i]);
  return out;
}

inline std::string scene_stem(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04lld", static_cast<long long>(index));
  return buf;
}

inline void write_scene(const std::filesystem::path& header_path, const Tensor<float>& x,
                        const std::vector<std::string>& band_order = {}) {
  if (x.rank() != 4) throw DimensionError("write_scene expects (C,T,H,W)");
  nlohmann::json h{{"bands", x.dim(0)},  {"time", x.dim(1)}, {"height", x.dim(2)},
                   {"width", x.dim(3)},  {"dtype", "f32"},
                   {"band_order", band_order}};
  auto bin = header_path;
  bin.replace_extension(".bin");
  std::ofstream(header_path) << h.dump(2) << "\n";
  std::ofstream out(bin, std::ios::binary);
  out.write(reinterpret_cast<const char*>(x.data().data()),
            static_cast<std::streamsize>(x.numel() * sizeof(float)));
  if (!out) throw FormatError("write_scene: cannot write " + bin.string());
}

inline Tensor<float> read_scene(const std::filesystem::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw FormatError("read_scene: cannot open " + header_path.string());
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("read_scene: corrupt header " + header_path.string() + " at byte " +
                      std::to_string(e.byte));
  }
  std::array<std::int64_t, 4> dims{};
  const char* keys[] = {"bands", "time", "height", "width"};
  for (int i = 0; i < 4; ++i) {
    if (!h.contains(keys[i]) || !h[keys[i]].is_number_integer() || h[keys[i]].get<std::int64_t>() <= 0)
      throw FormatError("read_scene: header " + header_path.string() + " has no valid '" +
                        keys[i] + "'");
    dims[i] = h[keys[i]].get<std::int64_t>();
  }
  if (h.value("dtype", "") != "f32")
    throw FormatError("read_scene: unsupported dtype '" + h.value("dtype", std::string("?")) +
                      "' in " + header_path.string());
  auto bin = header_path;
  bin.replace_extension(".bin");
  const auto expected = static_cast<std::uintmax_t>(dims[0] * dims[1] * dims[2] * dims[3]) * 4;
  if (!std::filesystem::exists(bin)) throw FormatError("read_scene: missing payload " + bin.string());
  const auto actual = std::filesystem::file_size(bin);
  if (actual != expected)
    throw FormatError("read_scene: payload " + bin.string() + " has " + std::to_string(actual) +
                      " bytes, header declares " + std::to_string(expected) +
                      " (length mismatch at byte offset " + std::to_string(std::min(actual, expected)) +
                      ")");
  std::vector<float> data(static_cast<std::size_t>(expected / 4));
  std::ifstream b(bin, std::ios::binary);
  b.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(expected));
  return Tensor<float>::from({dims[0], dims[1], dims[2], dims[3]}, std::move(data));
}

// Uncompressed row-major run lengths, starting with the run of zeros.
inline std::vector<std::int64_t> rle_encode(const BinaryMask& m) {
  std::vector<std::int64_t> counts;
  std::uint8_t cur = 0;
  std::int64_t run = 0;
  for (auto b : m.bits) {
    if (b != cur) {
      counts.push_back(run);
      run = 0;
      cur = b;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

inline BinaryMask rle_decode(const std::vector<std::int64_t>& counts, std::int64_t h,
                             std::int64_t w) {
  BinaryMask m(h, w);
  std::int64_t pos = 0;
  std::uint8_t val = 0;
  for (auto c : counts) {
    if (c < 0 || pos + c > h * w) throw FormatError("rle: run lengths exceed mask size");
    std::fill_n(m.bits.begin() + pos, c, val);
    pos += c;
    val ^= 1;
  }
  if (pos != h * w) throw FormatError("rle: run lengths do not cover the mask");
  return m;
}

inline nlohmann::json annotation_json(const InstanceAnnotation& a) {
  const auto bb = a.box.xywh();
  return {{"id", a.id},
          {"image_id", a.image_id},
          {"category_id", a.class_id},
          {"bbox", {bb[0], bb[1], bb[2], bb[3]}},
          {"area", a.mask.count()},
          {"iscrowd", 0},
          {"segmentation", {{"counts", rle_encode(a.mask)}, {"size", {a.mask.height, a.mask.width}}}}};
}

inline InstanceAnnotation annotation_from_json(const nlohmann::json& j) {
  InstanceAnnotation a;
  a.id = j.at("id").get<std::int64_t>();
  a.image_id = j.at("image_id").get<std::int64_t>();
  a.class_id = j.at("category_id").get<std::int64_t>();
  const auto bb = j.at("bbox").get<std::vector<double>>();
  if (bb.size() != 4) throw FormatError("annotation " + std::to_string(a.id) + ": bbox needs 4 values");
  a.box = Box::from_xywh(bb[0], bb[1], bb[2], bb[3]);
  if (j.contains("segmentation")) {
    const auto& s = j["segmentation"];
    const auto size = s.at("size").get<std::vector<std::int64_t>>();
    a.mask = rle_decode(s.at("counts").get<std::vector<std::int64_t>>(), size.at(0), size.at(1));
  }
  return a;
}

inline nlohmann::json coco_json(const std::vector<Scene>& scenes, std::int64_t num_classes,
                                const std::vector<std::string>& file_names) {
  nlohmann::json images = nlohmann::json::array(), anns = nlohmann::json::array(),
                 cats = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    images.push_back({{"id", s.image_id},
                      {"file_name", file_names.at(i)},
                      {"height", s.raster.dim(2)},
                      {"width", s.raster.dim(3)}});
    for (const auto& a : s.annotations) anns.push_back(annotation_json(a));
  }
  for (std::int64_t k = 1; k <= num_classes; ++k)
    cats.push_back({{"id", k}, {"name", "class_" + std::to_string(k)}});
  return {{"images", images}, {"annotations", anns}, {"categories", cats}};
}

struct LoadedSplit {
  DatasetManifest manifest;
  std::vector<Scene> scenes;
  std::int64_t num_classes = 0;
};

// Writes scenes, annotations and manifest into `dir`.
inline void write_split(const std::filesystem::path& dir, const std::string& split,
                        const std::vector<Scene>& scenes, std::int64_t num_classes,
                        const std::string& config_hash,
                        const std::vector<std::string>& band_order = {}) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.split = split;
  m.config_hash = config_hash;
  for (const auto& s : scenes) {
    const auto name = scene_stem(s.image_id) + ".json";
    write_scene(dir / name, s.raster, band_order);
    m.scenes.push_back(name);
  }
  std::ofstream(dir / m.annotation_file) << coco_json(scenes, num_classes, m.scenes).dump() << "\n";
  std::ofstream(dir / "manifest.json") << m.to_json().dump(2) << "\n";
}

inline LoadedSplit read_split(const std::filesystem::path& dir) {
  LoadedSplit out;
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("dataset: no manifest.json in " + dir.string());
  try {
    out.manifest = DatasetManifest::from_json(nlohmann::json::parse(mf));
    std::ifstream af(dir / out.manifest.annotation_file);
    if (!af) throw FormatError("dataset: missing annotation file in " + dir.string());
    const auto coco = nlohmann::json::parse(af);
    out.num_classes = static_cast<std::int64_t>(coco.at("categories").size());
    std::map<std::string, std::int64_t> id_of;
    for (const auto& im : coco.at("images"))
      id_of[im.at("file_name").get<std::string>()] = im.at("id").get<std::int64_t>();
    std::map<std::int64_t, std::size_t> slot;
    for (const auto& name : out.manifest.scenes) {
      auto it = id_of.find(name);
      if (it == id_of.end()) throw FormatError("dataset: scene " + name + " missing from annotations");
      Scene s;
      s.image_id = it->second;
      s.raster = read_scene(dir / name);
      slot[s.image_id] = out.scenes.size();
      out.scenes.push_back(std::move(s));
    }
    for (const auto& j : coco.at("annotations")) {
      auto a = annotation_from_json(j);
      auto it = slot.find(a.image_id);
      if (it == slot.end()) {
        if (id_of.size() == out.manifest.scenes.size())
          throw FormatError("dataset: annotation " + std::to_string(a.id) +
                            " refers to unknown image " + std::to_string(a.image_id));
        continue;  // scene excluded by a subsampled manifest
      }
      out.scenes[it->second].annotations.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset " + dir.string() + ": " + e.what());
  }
  return out;
}

// Per-band mean and standard deviation over a set of rasters.
struct BandStats {
  std::vector<double> mean, std;
};

inline BandStats band_stats(const std::vector<Scene>& scenes) {
  if (scenes.empty()) throw UsageError("band_stats: no scenes");
  const auto C = scenes[0].raster.dim(0);
  std::vector<double> s(C, 0.0), ss(C, 0.0);
  double n = 0;
  for (const auto& sc : scenes) {
    const auto plane = static_cast<std::int64_t>(sc.raster.numel()) / C;
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < plane; ++i) {
        const double v = sc.raster[c * plane + i];
        s[c] += v;
        ss[c] += v * v;
      }
    n += static_cast<double>(plane);
  }
  BandStats st;
  for (std::int64_t c = 0; c < C; ++c) {
    const double m = s[c] / n;
    st.mean.push_back(m);
    st.std.push_back(std::sqrt(std::max(ss[c] / n - m * m, 1e-12)));
  }
  return st;
}

inline Tensor<float> normalize_raster(const Tensor<float>& x, const BandStats& st) {
  const auto C = x.dim(0);
  if (static_cast<std::int64_t>(st.mean.size()) != C)
    throw AdaptationRequiredError(static_cast<long>(st.mean.size()), C);
  const auto plane = static_cast<std::int64_t>(x.numel()) / C;
  std::vector<float> out(x.numel());
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < plane; ++i)
      out[c * plane + i] = static_cast<float>((x[c * plane + i] - st.mean[c]) / st.std[c]);
  return Tensor<float>::from(x.shape(), std::move(out));
}

}  // namespace gfm
