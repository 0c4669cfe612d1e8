#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crackkw/box.hpp"
#include "crackkw/random.hpp"
#include "crackkw/tensor.hpp"

// Procedural crack imagery, the augmentation recipe, and the preprocessing
// pipeline (perceptual-hash dedup, 7:2:1 split, training-set subsampling).
//
// Images and masks are rank-2 tensors (H x W). Boxes use pixel-edge
// coordinates: a box covering columns a..b (inclusive) has x1 = a, x2 = b + 1.

namespace crackkw {

struct CrackSample {
  Tensor image;  ///< grayscale in [0, 1]
  Tensor mask;   ///< 0 / 1
  std::vector<Box> boxes;
  std::uint64_t seed = 0;

  std::size_t height() const { return image.dim(0); }
  std::size_t width() const { return image.dim(1); }
};

struct Difficulty {
  int min_cracks = 1;
  int max_cracks = 1;
  double background_p = 0.1;  ///< probability that an image has no crack at all
  int min_length = 14;
  int max_length = 36;
  double turn_sd = 0.25;       ///< heading drift per step, radians
  double contrast = 0.35;      ///< how much darker a crack is than its background
  double texture_amp = 0.12;   ///< amplitude of the smooth background texture
  double grain_sd = 0.03;      ///< per-pixel background noise
  std::size_t min_component = 4;  ///< smaller mask components are erased
};

struct AugmentConfig {
  double rotation_deg = 30.0;  ///< uniform in [-rotation_deg, rotation_deg]
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  double scale_lo = 0.8, scale_hi = 1.2;
  double noise_sigma = 0.1;
};

// ---------------------------------------------------------------------------
// Mask components and boxes.

/// 8-connected components of the mask; components smaller than min_pixels are
/// erased from the mask in place. Boxes of the survivors are merged while any
/// two overlap, so every positive pixel lies in exactly one box. Sorted by
/// (y1, x1).
inline std::vector<Box> boxes_from_mask(Tensor& mask, std::size_t min_pixels = 1) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  std::vector<int> label(H * W, -1);
  struct Span {
    std::size_t x1, y1, x2, y2;
  };
  std::vector<Span> spans;
  std::vector<std::size_t> stack, members;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (mask[start] == 0.0 || label[start] >= 0) continue;
    const int id = static_cast<int>(spans.size());
    Span s{W, H, 0, 0};
    members.clear();
    stack.assign(1, start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      members.push_back(q);
      const std::size_t y = q / W, x = q % W;
      s.x1 = std::min(s.x1, x), s.y1 = std::min(s.y1, y);
      s.x2 = std::max(s.x2, x + 1), s.y2 = std::max(s.y2, y + 1);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(H) || nx >= static_cast<long>(W)) continue;
          const std::size_t n = static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx);
          if (mask[n] != 0.0 && label[n] < 0) {
            label[n] = id;
            stack.push_back(n);
          }
        }
      }
    }
    if (members.size() < min_pixels) {
      for (std::size_t q : members) mask[q] = 0.0;
      s = Span{0, 0, 0, 0};  // placeholder, dropped below
    }
    spans.push_back(s);
  }
  std::vector<Span> live;
  for (const auto& s : spans) {
    if (s.x2 > s.x1) live.push_back(s);
  }
  for (bool merged = true; merged;) {
    merged = false;
    for (std::size_t i = 0; i < live.size() && !merged; ++i) {
      for (std::size_t j = i + 1; j < live.size(); ++j) {
        const auto& a = live[i];
        const auto& b = live[j];
        if (a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2) {
          live[i] = Span{std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
          live.erase(live.begin() + static_cast<long>(j));
          merged = true;
          break;
        }
      }
    }
  }
  std::sort(live.begin(), live.end(), [](const Span& a, const Span& b) {
    return a.y1 != b.y1 ? a.y1 < b.y1 : a.x1 < b.x1;
  });
  std::vector<Box> out;
  for (const auto& s : live) {
    out.push_back(Box{static_cast<double>(s.x1), static_cast<double>(s.y1), static_cast<double>(s.x2),
                      static_cast<double>(s.y2)});
  }
  return out;
}

/// Checks the mask/box invariants; returns an empty string when they hold.
inline std::string check_consistency(const CrackSample& s) {
  const std::size_t H = s.mask.dim(0), W = s.mask.dim(1);
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    const Box& b = s.boxes[i];
    if (!b.valid() || b.x1 < 0 || b.y1 < 0 || b.x2 > static_cast<double>(W) || b.y2 > static_cast<double>(H)) {
      return "box " + std::to_string(i) + " " + to_string(b) + " is invalid";
    }
    bool any = false;
    for (auto y = static_cast<std::size_t>(b.y1); y < static_cast<std::size_t>(b.y2) && !any; ++y)
      for (auto x = static_cast<std::size_t>(b.x1); x < static_cast<std::size_t>(b.x2); ++x) any |= s.mask[y * W + x] != 0.0;
    if (!any) return "box " + std::to_string(i) + " holds no mask pixel";
  }
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (s.mask[y * W + x] == 0.0) continue;
      int holders = 0;
      for (const Box& b : s.boxes) {
        holders += static_cast<double>(x) >= b.x1 && static_cast<double>(x) < b.x2 && static_cast<double>(y) >= b.y1 &&
                   static_cast<double>(y) < b.y2;
      }
      if (holders != 1) {
        return "pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") lies in " + std::to_string(holders) + " boxes";
      }
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Generation.

namespace detail {

/// Smooth value noise: bilinear interpolation of a coarse random grid.
inline Tensor value_noise(std::size_t H, std::size_t W, std::size_t cells, Rng& rng) {
  const std::size_t G = cells + 1;
  std::vector<double> grid(G * G);
  for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
  Tensor out(Shape{H, W});
  for (std::size_t y = 0; y < H; ++y) {
    const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(H) * static_cast<double>(cells);
    const auto iy = std::min(static_cast<std::size_t>(gy), cells - 1);
    const double fy = gy - static_cast<double>(iy);
    for (std::size_t x = 0; x < W; ++x) {
      const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(W) * static_cast<double>(cells);
      const auto ix = std::min(static_cast<std::size_t>(gx), cells - 1);
      const double fx = gx - static_cast<double>(ix);
      const double top = grid[iy * G + ix] * (1 - fx) + grid[iy * G + ix + 1] * fx;
      const double bot = grid[(iy + 1) * G + ix] * (1 - fx) + grid[(iy + 1) * G + ix + 1] * fx;
      out[y * W + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

inline void stamp(Tensor& mask, double cx, double cy, int thickness) {
  const long H = static_cast<long>(mask.dim(0)), W = static_cast<long>(mask.dim(1));
  // Thickness 1: one pixel; 2: a 2x2 block; 3: a plus-shaped disc of radius 1.
  const long x0 = static_cast<long>(std::floor(cx)), y0 = static_cast<long>(std::floor(cy));
  auto set = [&](long x, long y) {
    if (x >= 0 && y >= 0 && x < W && y < H) mask[static_cast<std::size_t>(y * W + x)] = 1.0;
  };
  set(x0, y0);
  if (thickness == 2) {
    set(x0 + 1, y0), set(x0, y0 + 1), set(x0 + 1, y0 + 1);
  } else if (thickness >= 3) {
    set(x0 + 1, y0), set(x0 - 1, y0), set(x0, y0 + 1), set(x0, y0 - 1);
  }
}

}  // namespace detail

/// Deterministic in (seed, size, difficulty).
inline CrackSample generate(std::uint64_t seed, std::size_t size, const Difficulty& diff = {}) {
  if (size < 16) throw std::invalid_argument("generate: size must be at least 16, got " + std::to_string(size));
  if (diff.min_cracks < 0 || diff.max_cracks < diff.min_cracks) {
    throw std::invalid_argument("generate: crack count range is empty");
  }
  Rng rng(seed);
  CrackSample s;
  s.seed = seed;
  const std::size_t H = size, W = size;

  const double base = rng.uniform(0.55, 0.75);
  Tensor texture = detail::value_noise(H, W, 4, rng);
  Tensor fine = detail::value_noise(H, W, 12, rng);
  Tensor bg(Shape{H, W});
  for (std::size_t i = 0; i < H * W; ++i) {
    bg[i] = base + diff.texture_amp * texture[i] + 0.4 * diff.texture_amp * fine[i] + rng.normal(0.0, diff.grain_sd);
  }

  s.mask = Tensor(Shape{H, W}, 0.0);
  const int cracks = rng.bernoulli(diff.background_p)
                         ? 0
                         : static_cast<int>(rng.integer(diff.min_cracks, diff.max_cracks));
  const double margin = static_cast<double>(size) * 0.15;
  for (int c = 0; c < cracks; ++c) {
    double x = rng.uniform(margin, static_cast<double>(W) - margin);
    double y = rng.uniform(margin, static_cast<double>(H) - margin);
    double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    int thickness = static_cast<int>(rng.integer(1, 3));
    const auto length = rng.integer(diff.min_length, diff.max_length);
    for (std::int64_t step = 0; step < length; ++step) {
      detail::stamp(s.mask, x, y, thickness);
      heading += rng.normal(0.0, diff.turn_sd);
      x += std::cos(heading);
      y += std::sin(heading);
      if (rng.bernoulli(0.15)) thickness = std::clamp(thickness + static_cast<int>(rng.integer(-1, 1)), 1, 3);
      if (x < 0 || y < 0 || x >= static_cast<double>(W) || y >= static_cast<double>(H)) break;
    }
  }
  s.boxes = boxes_from_mask(s.mask, diff.min_component);

  s.image = Tensor(Shape{H, W});
  for (std::size_t i = 0; i < H * W; ++i) {
    const double crack = s.mask[i] != 0.0 ? diff.contrast * rng.uniform(0.8, 1.2) : 0.0;
    s.image[i] = std::clamp(bg[i] - crack, 0.0, 1.0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentDraw {
  double angle_deg = 0.0;
  bool hflip = false, vflip = false;
  double scale = 1.0;
  double noise_sigma = 0.0;
};

inline AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng) {
  AugmentDraw d;
  d.angle_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  d.hflip = rng.bernoulli(cfg.hflip_p);
  d.vflip = rng.bernoulli(cfg.vflip_p);
  d.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  d.noise_sigma = cfg.noise_sigma;
  return d;
}

/// Applies one drawn transform about the image centre: image bilinear with
/// edge clamping, mask nearest-neighbour, boxes recomputed from the mask.
inline CrackSample apply_augment(const CrackSample& s, const AugmentDraw& d, Rng& rng,
                                 std::size_t min_component = 1) {
  const std::size_t H = s.height(), W = s.width();
  const double cx = static_cast<double>(W) / 2.0, cy = static_cast<double>(H) / 2.0;
  const double th = d.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  CrackSample out;
  out.seed = s.seed;
  out.image = Tensor(Shape{H, W});
  out.mask = Tensor(Shape{H, W}, 0.0);
  auto pixel = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
    return s.image[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      // Output pixel centre, undo flips, then inverse rotate-and-scale.
      double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      if (d.hflip) px = static_cast<double>(W) - px;
      if (d.vflip) py = static_cast<double>(H) - py;
      const double dx = (px - cx) / d.scale, dy = (py - cy) / d.scale;
      const double sx = c * dx + sn * dy + cx - 0.5, sy = -sn * dx + c * dy + cy - 0.5;
      const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      double v = pixel(y0, x0);
      if (fx != 0.0 || fy != 0.0) {
        v = (pixel(y0, x0) * (1 - fx) + pixel(y0, x0 + 1) * fx) * (1 - fy) +
            (pixel(y0 + 1, x0) * (1 - fx) + pixel(y0 + 1, x0 + 1) * fx) * fy;
      }
      if (d.noise_sigma > 0.0) v += rng.normal(0.0, d.noise_sigma);
      out.image[y * W + x] = std::clamp(v, 0.0, 1.0);
      const long mx = static_cast<long>(std::lround(sx)), my = static_cast<long>(std::lround(sy));
      if (mx >= 0 && my >= 0 && mx < static_cast<long>(W) && my < static_cast<long>(H)) {
        out.mask[y * W + x] = s.mask[static_cast<std::size_t>(my) * W + static_cast<std::size_t>(mx)];
      }
    }
  }
  out.boxes = boxes_from_mask(out.mask, min_component);
  return out;
}

inline CrackSample augment(const CrackSample& s, const AugmentConfig& cfg, Rng& rng, std::size_t min_component = 1) {
  const AugmentDraw d = draw_augment(cfg, rng);
  return apply_augment(s, d, rng, min_component);
}

// ---------------------------------------------------------------------------
// Perceptual hash.

namespace detail {

/// Bilinear resample with pixel-centre alignment. A 2x reduction averages
/// 2x2 blocks exactly.
inline std::vector<double> resample(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  std::vector<double> out(out_h * out_w);
  auto at = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
    return img[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(H) / static_cast<double>(out_h) - 0.5;
    const long y0 = static_cast<long>(std::floor(sy));
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(W) / static_cast<double>(out_w) - 0.5;
      const long x0 = static_cast<long>(std::floor(sx));
      const double fx = sx - static_cast<double>(x0);
      out[y * out_w + x] = (at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx) * (1 - fy) +
                           (at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx) * fy;
    }
  }
  return out;
}

}  // namespace detail

/// DCT hash: resample to 32x32, orthonormal 2-D DCT-II, keep the top-left 8x8
/// block, threshold against the median of its 63 non-DC coefficients. Bit i
/// (row-major over the block) is stored at position 63 - i.
inline std::uint64_t phash64(const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("phash64: expected an H x W image, got " + shape_str(image.shape()));
  constexpr std::size_t N = 32, K = 8;
  const auto px = detail::resample(image, N, N);
  static const auto basis = [] {
    std::array<double, K * N> b{};
    for (std::size_t k = 0; k < K; ++k) {
      const double a = k == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
      for (std::size_t n = 0; n < N; ++n) {
        b[k * N + n] = a * std::cos(std::numbers::pi * (2.0 * static_cast<double>(n) + 1.0) * static_cast<double>(k) /
                                    (2.0 * N));
      }
    }
    return b;
  }();
  // Rows first, then columns, only for the kept frequencies.
  std::array<double, N * K> rows{};
  for (std::size_t y = 0; y < N; ++y)
    for (std::size_t v = 0; v < K; ++v) {
      double acc = 0.0;
      for (std::size_t x = 0; x < N; ++x) acc += basis[v * N + x] * px[y * N + x];
      rows[y * K + v] = acc;
    }
  std::array<double, K * K> coef{};
  for (std::size_t u = 0; u < K; ++u)
    for (std::size_t v = 0; v < K; ++v) {
      double acc = 0.0;
      for (std::size_t y = 0; y < N; ++y) acc += basis[u * N + y] * rows[y * K + v];
      coef[u * K + v] = acc;
    }
  std::vector<double> ac(coef.begin() + 1, coef.end());
  std::nth_element(ac.begin(), ac.begin() + 31, ac.end());
  const double median = ac[31];
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < K * K; ++i) {
    if (coef[i] > median) h |= std::uint64_t{1} << (63 - i);
  }
  return h;
}

inline int hamming(std::uint64_t a, std::uint64_t b) { return std::popcount(a ^ b); }

/// Greedy scan in input order: an item is dropped iff its hash lies within
/// `threshold` of an earlier kept item. Returns kept indices.
inline std::vector<std::size_t> dedup(const std::vector<std::uint64_t>& hashes, int threshold = 5) {
  if (threshold < 0 || threshold > 64) throw std::invalid_argument("dedup: threshold must lie in [0, 64]");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < hashes.size(); ++i) {
    bool dup = false;
    for (std::size_t k : kept) {
      if (hamming(hashes[i], hashes[k]) <= threshold) {
        dup = true;
        break;
      }
    }
    if (!dup) kept.push_back(i);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Splits.

/// Partition sizes by largest remainder; ties go to the earlier part.
inline std::vector<std::size_t> split_counts(std::size_t n, const std::vector<double>& ratios) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split: ratios must be non-negative");
    total += r;
  }
  if (!(total > 0.0)) throw std::invalid_argument("split: ratios sum to zero");
  std::vector<std::size_t> counts(ratios.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double exact = static_cast<double>(n) * ratios[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += counts[i];
    rem.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) counts[rem[k % rem.size()].second] += 1;
  return counts;
}

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then contiguous 7:2:1 parts.
inline SplitIndices split(std::size_t n, std::uint64_t seed, const std::vector<double>& ratios = {7, 2, 1}) {
  if (n == 0) throw std::invalid_argument("split: empty dataset");
  if (ratios.size() != 3) throw std::invalid_argument("split: expected three ratios");
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  const auto counts = split_counts(n, ratios);
  SplitIndices out;
  auto it = perm.begin();
  out.train.assign(it, it + static_cast<long>(counts[0]));
  it += static_cast<long>(counts[0]);
  out.val.assign(it, it + static_cast<long>(counts[1]));
  it += static_cast<long>(counts[1]);
  out.test.assign(it, perm.end());
  return out;
}

/// round(fraction * n) items without replacement. The order comes from one
/// seeded permutation, so smaller fractions are prefixes of larger ones.
inline std::vector<std::size_t> subsample(const std::vector<std::size_t>& items, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample: fraction must lie in (0, 1]");
  Rng rng(seed);
  const auto perm = rng.permutation(items.size());
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(items.size())));
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(items[perm[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Datasets on disk.

struct Dataset {
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::size_t generated = 0;  ///< before dedup
  std::vector<CrackSample> samples;
  std::vector<std::string> split;  ///< "train", "val" or "test", per sample

  std::vector<std::size_t> indices(const std::string& part) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] == part) out.push_back(i);
    }
    return out;
  }
};

/// Generates `count` samples, drops perceptual duplicates, splits 7:2:1.
inline Dataset build_dataset(std::size_t count, std::size_t size, std::uint64_t seed, const Difficulty& diff = {},
                             int threshold = 5) {
  if (count == 0) throw std::invalid_argument("build_dataset: count must be positive");
  std::vector<CrackSample> all;
  std::vector<std::uint64_t> hashes;
  all.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    all.push_back(generate(derive_seed(seed, i), size, diff));
    hashes.push_back(phash64(all.back().image));
  }
  Dataset ds;
  ds.size = size;
  ds.seed = seed;
  ds.generated = count;
  for (std::size_t k : dedup(hashes, threshold)) ds.samples.push_back(std::move(all[k]));
  ds.split.assign(ds.samples.size(), "train");
  const auto parts = split(ds.samples.size(), derive_seed(seed, 0xA11CE));
  for (auto i : parts.val) ds.split[i] = "val";
  for (auto i : parts.test) ds.split[i] = "test";
  return ds;
}

inline std::string sample_stem(std::size_t i) {
  std::ostringstream os;
  os << "sample_" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "samples");
  nlohmann::json j;
  j["size"] = ds.size;
  j["seed"] = ds.seed;
  j["generated"] = ds.generated;
  j["count"] = ds.samples.size();
  nlohmann::json items = nlohmann::json::array();
  std::ofstream boxes(dir / "boxes.csv", std::ios::binary);
  if (!boxes) throw std::runtime_error("cannot write " + (dir / "boxes.csv").string());
  boxes << "sample_id,x1,y1,x2,y2\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const std::string stem = sample_stem(i);
    save_tensor((dir / "samples" / (stem + ".image.ckt")).string(), s.image);
    save_tensor((dir / "samples" / (stem + ".mask.ckt")).string(), s.mask);
    items.push_back({{"id", i}, {"seed", s.seed}, {"split", ds.split[i]}, {"boxes", s.boxes.size()}});
    for (const auto& b : s.boxes) boxes << i << ',' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << '\n';
  }
  j["samples"] = items;
  std::ofstream(dir / "manifest.json", std::ios::binary) << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no manifest.json in " + dir.string());
  const auto j = nlohmann::json::parse(is);
  Dataset ds;
  ds.size = j.at("size");
  ds.seed = j.at("seed");
  ds.generated = j.at("generated");
  for (const auto& item : j.at("samples")) {
    const std::size_t i = item.at("id");
    CrackSample s;
    s.seed = item.at("seed");
    s.image = load_tensor((dir / "samples" / (sample_stem(i) + ".image.ckt")).string());
    s.mask = load_tensor((dir / "samples" / (sample_stem(i) + ".mask.ckt")).string());
    ds.samples.push_back(std::move(s));
    ds.split.push_back(item.at("split"));
  }
  std::ifstream bs(dir / "boxes.csv");
  std::string line;
  std::getline(bs, line);
  while (std::getline(bs, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id;
    char comma;
    Box b;
    ls >> id >> comma >> b.x1 >> comma >> b.y1 >> comma >> b.x2 >> comma >> b.y2;
    if (!ls || id >= ds.samples.size()) throw std::runtime_error("bad boxes.csv row: " + line);
    ds.samples[id].boxes.push_back(b);
  }
  return ds;
}

/// Reads an 8-bit binary PGM (P5) into [0, 1].
inline Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  auto token = [&] {
    std::string t;
    while (is >> t) {
      if (t[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return t;
    }
    throw std::runtime_error("truncated PGM header in " + path.string());
  };
  if (token() != "P5") throw std::runtime_error(path.string() + " is not a binary PGM");
  const std::size_t W = std::stoul(token()), H = std::stoul(token()), maxval = std::stoul(token());
  if (maxval == 0 || maxval > 255) throw std::runtime_error("only 8-bit PGM is supported");
  is.get();
  std::vector<unsigned char> px(W * H);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!is) throw std::runtime_error("truncated PGM pixel data in " + path.string());
  Tensor t(Shape{H, W});
  for (std::size_t i = 0; i < px.size(); ++i) t[i] = static_cast<double>(px[i]) / static_cast<double>(maxval);
  return t;
}

}  // namespace crackkw
