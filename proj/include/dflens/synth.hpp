#pragma once

// Synthetic "visual concept" scenes: one flat-colored shape inside one image
// quadrant, rendered to [-1, 1] with a -1 background.

#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/error.hpp"
#include "dflens/rng.hpp"
#include "dflens/tensor.hpp"
#include "dflens/tokens.hpp"

namespace dflens {

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };
enum class ColorKind { red = 0, green = 1, blue = 2 };
enum class Quadrant { tl = 0, tr = 1, bl = 2, br = 3 };

struct Scene {
  ShapeKind shape = ShapeKind::circle;
  ColorKind color = ColorKind::red;
  Quadrant quadrant = Quadrant::tl;
  std::uint64_t jitter_seed = 0;

  ConditionTokens tokens() const {
    return ConditionTokens{{vocab::kShapeOffset + static_cast<int>(shape), vocab::kColorOffset + static_cast<int>(color),
                            vocab::kQuadrantOffset + static_cast<int>(quadrant)}};
  }
};

/// Continuous placement of a scene's shape at a given resolution.
struct ShapeGeometry {
  double cx = 0.0, cy = 0.0;
  double half = 0.0;  // radius for circles, half side for squares and triangles
};

inline ShapeGeometry scene_geometry(const Scene& scene, int size) {
  KeyedRng rng(scene.jitter_seed, streams::kScene);
  const int q = size / 2;
  // integral side lengths keep square areas exact on the pixel grid
  const int side_lo = static_cast<int>(std::lround(size * 0.25));
  const int side_hi = static_cast<int>(std::lround(size * 0.35));
  const int side = side_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(side_hi - side_lo + 1)));
  ShapeGeometry g;
  g.half = side / 2.0;
  const int qi = static_cast<int>(scene.quadrant);
  const double x0 = (qi % 2) * q, y0 = (qi / 2) * q;
  const double lo = g.half + 1.0, hi = q - g.half - 1.0;
  g.cx = x0 + lo + (hi - lo) * rng.uniform();
  g.cy = y0 + lo + (hi - lo) * rng.uniform();
  return g;
}

inline bool inside_shape(ShapeKind shape, const ShapeGeometry& g, double x, double y) {
  const double dx = x - g.cx, dy = y - g.cy;
  switch (shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= g.half * g.half;
    case ShapeKind::square: return std::abs(dx) <= g.half && std::abs(dy) <= g.half;
    case ShapeKind::triangle:
      // apex up, base at the bottom
      return dy >= -g.half && dy <= g.half && std::abs(dx) <= (dy + g.half) / 2.0;
  }
  return false;
}

/// Rasterizes a scene into a [3, size, size] tensor (pixel centers sampled, no anti-aliasing).
inline Tensor render(const Scene& scene, int size) {
  if (size < 16) throw Error(concat("render: size must be >= 16, got ", size));
  const auto n = static_cast<std::size_t>(size);
  std::vector<double> img(3 * n * n, -1.0);
  const auto g = scene_geometry(scene, size);
  const auto channel = static_cast<std::size_t>(scene.color);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (inside_shape(scene.shape, g, static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5)) {
        img[(channel * n + i) * n + j] = 1.0;
      }
    }
  }
  return Tensor({3, n, n}, std::move(img));
}

struct Sample {
  Scene scene;
  Tensor image;
  ConditionTokens tokens;
};

inline Scene sample_scene(std::uint64_t seed, std::uint64_t index) {
  KeyedRng rng(seed, streams::kDataset, index);
  Scene s;
  s.shape = static_cast<ShapeKind>(rng.below(3));
  s.color = static_cast<ColorKind>(rng.below(3));
  s.quadrant = static_cast<Quadrant>(rng.below(4));
  s.jitter_seed = rng.next_u64();
  return s;
}

inline std::vector<Sample> sample_dataset(int n, std::uint64_t seed, int size = 32) {
  if (n < 1) throw Error(concat("sample_dataset: n must be >= 1, got ", n));
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Scene s = sample_scene(seed, static_cast<std::uint64_t>(i));
    out.push_back(Sample{s, render(s, size), s.tokens()});
  }
  return out;
}

inline nlohmann::json scene_to_json(const Scene& s) {
  return {{"shape", vocab::kShapes[static_cast<std::size_t>(s.shape)]},
          {"color", vocab::kColors[static_cast<std::size_t>(s.color)]},
          {"quadrant", vocab::kQuadrants[static_cast<std::size_t>(s.quadrant)]},
          {"jitter_seed", s.jitter_seed},
          {"tokens", s.tokens().ids}};
}

}  // namespace dflens
