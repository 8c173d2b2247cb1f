#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "vmscan/patching.hpp"
#include "vmscan/rng.hpp"
#include "vmscan/tensor.hpp"

namespace vmscan {

/// Procedural stand-in for aerial segmentation data: class 0 is a textured
/// background, the others are shape archetypes (bars = road-like,
/// rectangles = building-like, blobs = water-like, ellipses = canopy-like,
/// small rectangles = vehicle-like) with distinct color signatures.
struct SyntheticSceneConfig {
  long size = 64;
  long num_classes = 6;
  double density = 1.0;
  double noise = 0.05;
  long min_shapes_per_class = 2;
  uint64_t seed = 0;

  void validate() const {
    if (size < 8) throw std::invalid_argument("SyntheticSceneConfig: size must be >= 8");
    if (num_classes < 2 || num_classes > 64)
      throw std::invalid_argument("SyntheticSceneConfig: num_classes must be in [2,64]");
    if (density <= 0) throw std::invalid_argument("SyntheticSceneConfig: density must be > 0");
  }
};

struct Scene {
  Image image;
  std::vector<int> mask;
};

namespace detail {

struct ClassStyle {
  double r, g, b;
  int archetype;  // 0 bar, 1 rectangle, 2 blob, 3 ellipse, 4 small rect
};

inline ClassStyle class_style(long cls) {
  // First five classes use hand-picked remote-sensing-ish colors; extras
  // walk a hue wheel so any class count stays separable.
  static const ClassStyle base[] = {
      {0.30, 0.31, 0.36, 0},  // roads: dark gray bars
      {0.82, 0.28, 0.22, 1},  // buildings: red rectangles
      {0.16, 0.35, 0.78, 2},  // water: blue blobs
      {0.20, 0.62, 0.26, 3},  // vegetation: green ellipses
      {0.92, 0.88, 0.30, 4},  // vehicles: bright small rectangles
  };
  if (cls >= 1 && cls <= 5) return base[cls - 1];
  const double hue = std::fmod(0.61803398875 * static_cast<double>(cls), 1.0) * 6.0;
  const double x = 1.0 - std::fabs(std::fmod(hue, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hue)) {
    case 0: r = 1; g = x; break;
    case 1: r = x; g = 1; break;
    case 2: g = 1; b = x; break;
    case 3: g = x; b = 1; break;
    case 4: r = x; b = 1; break;
    default: r = 1; b = x; break;
  }
  return ClassStyle{0.25 + 0.6 * r, 0.25 + 0.6 * g, 0.25 + 0.6 * b,
                    static_cast<int>(cls % 5)};
}

inline void paint(Scene& s, long x, long y, long cls, double r, double g, double b) {
  const long size = s.image.width;
  if (x < 0 || y < 0 || x >= size || y >= size) return;
  const long i = y * size + x;
  s.mask[static_cast<size_t>(i)] = static_cast<int>(cls);
  s.image.pixels[i * 3 + 0] = r;
  s.image.pixels[i * 3 + 1] = g;
  s.image.pixels[i * 3 + 2] = b;
}

inline void draw_shape(Scene& s, long cls, const ClassStyle& style, Rng& rng) {
  const long size = s.image.width;
  const double scale = static_cast<double>(size) / 64.0;
  const double jr = style.r + rng.uniform(-0.05, 0.05);
  const double jg = style.g + rng.uniform(-0.05, 0.05);
  const double jb = style.b + rng.uniform(-0.05, 0.05);
  switch (style.archetype) {
    case 0: {  // elongated bar across the scene
      const long width = std::max<long>(2, static_cast<long>(rng.randint(2, 4) * scale));
      const long pos = rng.randint(0, size - width);
      const bool horizontal = rng.bernoulli(0.5);
      for (long a = 0; a < size; ++a)
        for (long w = 0; w < width; ++w)
          horizontal ? paint(s, a, pos + w, cls, jr, jg, jb)
                     : paint(s, pos + w, a, cls, jr, jg, jb);
      break;
    }
    case 1: {  // rectangle
      const long w = std::max<long>(3, static_cast<long>(rng.randint(6, 14) * scale));
      const long h = std::max<long>(3, static_cast<long>(rng.randint(6, 14) * scale));
      const long x0 = rng.randint(0, std::max<long>(0, size - w));
      const long y0 = rng.randint(0, std::max<long>(0, size - h));
      for (long y = y0; y < y0 + h; ++y)
        for (long x = x0; x < x0 + w; ++x) paint(s, x, y, cls, jr, jg, jb);
      break;
    }
    case 2: {  // blob: union of overlapping discs
      const long cx = rng.randint(6, size - 7), cy = rng.randint(6, size - 7);
      const long discs = rng.randint(3, 5);
      long px = cx, py = cy;
      for (long d = 0; d < discs; ++d) {
        const long rad = std::max<long>(2, static_cast<long>(rng.randint(3, 6) * scale));
        for (long y = py - rad; y <= py + rad; ++y)
          for (long x = px - rad; x <= px + rad; ++x)
            if ((x - px) * (x - px) + (y - py) * (y - py) <= rad * rad)
              paint(s, x, y, cls, jr, jg, jb);
        px += rng.randint(-rad, rad);
        py += rng.randint(-rad, rad);
      }
      break;
    }
    case 3: {  // ellipse
      const long ax = std::max<long>(2, static_cast<long>(rng.randint(4, 9) * scale));
      const long ay = std::max<long>(2, static_cast<long>(rng.randint(4, 9) * scale));
      const long cx = rng.randint(ax, size - 1 - ax), cy = rng.randint(ay, size - 1 - ay);
      for (long y = cy - ay; y <= cy + ay; ++y)
        for (long x = cx - ax; x <= cx + ax; ++x) {
          const double dx = static_cast<double>(x - cx) / static_cast<double>(ax);
          const double dy = static_cast<double>(y - cy) / static_cast<double>(ay);
          if (dx * dx + dy * dy <= 1.0) paint(s, x, y, cls, jr, jg, jb);
        }
      break;
    }
    default: {  // small rectangle
      const long w = std::max<long>(2, static_cast<long>(rng.randint(2, 4) * scale));
      const long h = std::max<long>(2, static_cast<long>(rng.randint(3, 5) * scale));
      const long x0 = rng.randint(0, size - w);
      const long y0 = rng.randint(0, size - h);
      for (long y = y0; y < y0 + h; ++y)
        for (long x = x0; x < x0 + w; ++x) paint(s, x, y, cls, jr, jg, jb);
      break;
    }
  }
}

inline Scene render_once(const SyntheticSceneConfig& cfg, Rng& rng) {
  Scene s;
  s.image.height = cfg.size;
  s.image.width = cfg.size;
  s.image.channels = 3;
  s.image.pixels = Tensor({cfg.size * cfg.size, 3});
  s.mask.assign(static_cast<size_t>(cfg.size * cfg.size), 0);

  // Textured background: coarse value noise, bilinearly upsampled.
  const long coarse = 8;
  std::vector<double> noise_grid(static_cast<size_t>(coarse * coarse));
  for (auto& v : noise_grid) v = rng.uniform(-0.08, 0.08);
  const double base_r = 0.46, base_g = 0.42, base_b = 0.34;
  for (long y = 0; y < cfg.size; ++y)
    for (long x = 0; x < cfg.size; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(cfg.size) * (coarse - 1);
      const double fx = static_cast<double>(x) / static_cast<double>(cfg.size) * (coarse - 1);
      const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
      const long y1 = std::min(y0 + 1, coarse - 1), x1 = std::min(x0 + 1, coarse - 1);
      const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
      const double n = (1 - wy) * ((1 - wx) * noise_grid[size_t(y0 * coarse + x0)] +
                                   wx * noise_grid[size_t(y0 * coarse + x1)]) +
                       wy * ((1 - wx) * noise_grid[size_t(y1 * coarse + x0)] +
                             wx * noise_grid[size_t(y1 * coarse + x1)]);
      const long i = y * cfg.size + x;
      s.image.pixels[i * 3 + 0] = base_r + n;
      s.image.pixels[i * 3 + 1] = base_g + n;
      s.image.pixels[i * 3 + 2] = base_b + n * 0.5;
    }

  // Shape classes, biggest archetypes first so small ones stay visible.
  std::vector<long> order;
  for (long c = 1; c < cfg.num_classes; ++c) order.push_back(c);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    auto rank = [](int archetype) {
      switch (archetype) {
        case 0: return 0;  // bars under everything
        case 2: return 1;  // blobs
        case 3: return 2;  // ellipses
        case 1: return 3;  // rectangles
        default: return 4; // small rectangles on top
      }
    };
    return rank(class_style(a).archetype) < rank(class_style(b).archetype);
  });
  for (long cls : order) {
    const ClassStyle style = class_style(cls);
    const long shapes = std::max<long>(
        cfg.min_shapes_per_class,
        static_cast<long>(std::lround(cfg.density * (style.archetype == 4 ? 4 : 2))));
    for (long q = 0; q < shapes; ++q) draw_shape(s, cls, style, rng);
  }

  // Pixel noise.
  for (long i = 0; i < s.image.pixels.size(); ++i)
    s.image.pixels[i] =
        std::clamp(s.image.pixels[i] + rng.normal(0.0, cfg.noise), 0.0, 1.0);
  return s;
}

inline bool all_classes_present(const Scene& s, long num_classes, long min_pixels) {
  std::vector<long> counts(static_cast<size_t>(num_classes), 0);
  for (int v : s.mask) counts[static_cast<size_t>(v)] += 1;
  for (long c = 0; c < num_classes; ++c)
    if (counts[static_cast<size_t>(c)] < min_pixels) return false;
  return true;
}

}  // namespace detail

/// Deterministic per (cfg.seed, index); regenerates from the continued
/// stream a few times if a class failed to survive occlusion.
inline Scene generate_scene(const SyntheticSceneConfig& cfg, long index) {
  cfg.validate();
  Rng rng(Rng::splitmix(cfg.seed) ^ Rng::splitmix(static_cast<uint64_t>(index) + 0xd1ce));
  Scene s = detail::render_once(cfg, rng);
  for (int attempt = 0; attempt < 3 && !detail::all_classes_present(s, cfg.num_classes, 4);
       ++attempt)
    s = detail::render_once(cfg, rng);
  return s;
}

struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

/// Validation scenes draw from an offset index range so the splits never
/// overlap for a fixed seed.
inline Dataset generate_dataset(const SyntheticSceneConfig& cfg, long n_train, long n_val) {
  if (n_train < 1 || n_val < 1)
    throw std::invalid_argument("generate_dataset: need at least one scene per split");
  Dataset ds;
  ds.train.reserve(static_cast<size_t>(n_train));
  ds.val.reserve(static_cast<size_t>(n_val));
  for (long i = 0; i < n_train; ++i) ds.train.push_back(generate_scene(cfg, i));
  for (long i = 0; i < n_val; ++i) ds.val.push_back(generate_scene(cfg, 1000000 + i));
  return ds;
}

/// Train-time augmentation: random flips, resize jitter of +-25% with a
/// crop/pad back to the native size, brightness/contrast jitter of +-10%.
/// The mask follows the same geometry with nearest-neighbor sampling.
inline Scene augment(const Scene& in, Rng& rng) {
  const long size = in.image.width;
  const long ch = in.image.channels;
  Scene out = in;

  const bool fh = rng.bernoulli(0.5);
  const bool fv = rng.bernoulli(0.5);
  const double zoom = rng.uniform(0.75, 1.25);
  const long scaled = std::max<long>(8, static_cast<long>(std::lround(zoom * static_cast<double>(size))));
  // A single offset serves crop (scaled > size) or replicate pad (scaled < size).
  const long span = std::labs(scaled - size);
  const long ox = span > 0 ? rng.randint(0, span) * (scaled >= size ? 1 : -1) : 0;
  const long oy = span > 0 ? rng.randint(0, span) * (scaled >= size ? 1 : -1) : 0;
  const double b_jit = rng.uniform(-0.1, 0.1);
  const double c_jit = rng.uniform(0.9, 1.1);

  auto src_coord = [&](long dst, long offset) {
    // Destination pixel -> continuous source coordinate in the original.
    const double centered = (static_cast<double>(dst + offset) + 0.5) *
                                static_cast<double>(size) / static_cast<double>(scaled) - 0.5;
    return centered;
  };

  for (long y = 0; y < size; ++y) {
    for (long x = 0; x < size; ++x) {
      double sy = src_coord(y, oy);
      double sx = src_coord(x, ox);
      sy = std::clamp(sy, 0.0, static_cast<double>(size - 1));
      sx = std::clamp(sx, 0.0, static_cast<double>(size - 1));
      double gy = fv ? static_cast<double>(size - 1) - sy : sy;
      double gx = fh ? static_cast<double>(size - 1) - sx : sx;

      const long y0 = static_cast<long>(std::floor(gy)), x0 = static_cast<long>(std::floor(gx));
      const long y1 = std::min(y0 + 1, size - 1), x1 = std::min(x0 + 1, size - 1);
      const double wy = gy - static_cast<double>(y0), wx = gx - static_cast<double>(x0);
      for (long c = 0; c < ch; ++c) {
        const double v =
            (1 - wy) * ((1 - wx) * in.image.pixels[(y0 * size + x0) * ch + c] +
                        wx * in.image.pixels[(y0 * size + x1) * ch + c]) +
            wy * ((1 - wx) * in.image.pixels[(y1 * size + x0) * ch + c] +
                  wx * in.image.pixels[(y1 * size + x1) * ch + c]);
        out.image.pixels[(y * size + x) * ch + c] =
            std::clamp((v - 0.5) * c_jit + 0.5 + b_jit, 0.0, 1.0);
      }
      const long ny = std::min<long>(size - 1, static_cast<long>(std::lround(gy)));
      const long nx = std::min<long>(size - 1, static_cast<long>(std::lround(gx)));
      out.mask[static_cast<size_t>(y * size + x)] = in.mask[static_cast<size_t>(ny * size + nx)];
    }
  }
  return out;
}

}  // namespace vmscan
