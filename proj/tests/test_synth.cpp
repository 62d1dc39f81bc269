#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "support.hpp"

using namespace dflens;

namespace {

struct Footprint {
  std::size_t count = 0;
  double mean_x = 0.0, mean_y = 0.0;
  std::size_t min_x = 1 << 20, max_x = 0, min_y = 1 << 20, max_y = 0;
  std::array<std::size_t, 3> per_channel{};
};

Footprint footprint(const Tensor& img) {
  const std::size_t n = img.dim(1);
  Footprint f;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (img[(c * n + i) * n + j] <= 0.0) continue;
        ++f.per_channel[c];
        ++f.count;
        f.mean_x += static_cast<double>(j);
        f.mean_y += static_cast<double>(i);
        f.min_x = std::min(f.min_x, j);
        f.max_x = std::max(f.max_x, j);
        f.min_y = std::min(f.min_y, i);
        f.max_y = std::max(f.max_y, i);
      }
    }
  }
  if (f.count) {
    f.mean_x /= static_cast<double>(f.count);
    f.mean_y /= static_cast<double>(f.count);
  }
  return f;
}

}  // namespace

TEST(Render, RedCircleTopLeft) {
  const Scene s{ShapeKind::circle, ColorKind::red, Quadrant::tl, 5};
  const Tensor img = render(s, 32);
  const auto f = footprint(img);
  ASSERT_GT(f.per_channel[0], 0u);
  EXPECT_EQ(f.per_channel[1] + f.per_channel[2], 0u);
  EXPECT_LT(f.max_x, 16u);
  EXPECT_LT(f.max_y, 16u);
}

TEST(Render, PureFunctionOfScene) {
  const Scene s{ShapeKind::triangle, ColorKind::green, Quadrant::br, 77};
  EXPECT_TRUE(render(s, 32).same_values(render(s, 32)));
}

TEST(Render, ValueRange) {
  const Tensor img = render(Scene{ShapeKind::square, ColorKind::blue, Quadrant::tr, 3}, 24);
  EXPECT_EQ(img.shape(), (Shape{3, 24, 24}));
  for (double v : img.data()) EXPECT_TRUE(v == -1.0 || v == 1.0);
  EXPECT_THROW(render(Scene{}, 15), Error);
}

TEST(Render, SquareAreaMatchesSide) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    for (int size : {16, 32, 48}) {
      const Scene s{ShapeKind::square, ColorKind::blue, static_cast<Quadrant>(seed % 4), seed};
      const double side = 2.0 * scene_geometry(s, size).half;
      const double area = static_cast<double>(footprint(render(s, size)).per_channel[2]);
      EXPECT_NEAR(area, side * side, 0.1 * side * side) << "seed=" << seed << " size=" << size;
    }
  }
}

TEST(Render, ShapeInsideItsQuadrant) {
  for (std::uint64_t i = 0; i < 300; ++i) {
    const Scene s = sample_scene(11, i);
    const auto f = footprint(render(s, 32));
    ASSERT_GT(f.count, 0u);
    const std::size_t qi = static_cast<std::size_t>(s.quadrant);
    const std::size_t x0 = (qi % 2) * 16, y0 = (qi / 2) * 16;
    EXPECT_GE(f.min_x, x0);
    EXPECT_LT(f.max_x, x0 + 16);
    EXPECT_GE(f.min_y, y0);
    EXPECT_LT(f.max_y, y0 + 16);
  }
}

TEST(Render, LabelsRecoverableByOracle) {
  for (const auto& sample : sample_dataset(300, 21)) {
    const auto f = footprint(sample.image);
    const auto dominant = static_cast<std::size_t>(
        std::max_element(f.per_channel.begin(), f.per_channel.end()) - f.per_channel.begin());
    const std::size_t quadrant = (f.mean_y >= 16.0 ? 2 : 0) + (f.mean_x >= 16.0 ? 1 : 0);
    EXPECT_EQ(sample.tokens.ids[1], vocab::kColorOffset + static_cast<int>(dominant));
    EXPECT_EQ(sample.tokens.ids[2], vocab::kQuadrantOffset + static_cast<int>(quadrant));
    // exactly one shape: a single colored channel
    int colored = 0;
    for (auto c : f.per_channel) colored += c > 0;
    EXPECT_EQ(colored, 1);
  }
}

TEST(Dataset, MarginalsUniform) {
  const int n = 3600;
  const auto data = sample_dataset(n, 5);
  std::array<int, 3> shapes{}, colors{};
  std::array<int, 4> quadrants{};
  for (const auto& s : data) {
    ++shapes[static_cast<std::size_t>(s.scene.shape)];
    ++colors[static_cast<std::size_t>(s.scene.color)];
    ++quadrants[static_cast<std::size_t>(s.scene.quadrant)];
  }
  auto check = [&](auto counts) {
    const double p = 1.0 / counts.size();
    const double sd = std::sqrt(n * p * (1 - p));
    for (int c : counts) EXPECT_NEAR(c, n * p, 3 * sd);
  };
  check(shapes);
  check(colors);
  check(quadrants);
}

TEST(Dataset, ReproducibleAndInVocabulary) {
  const auto a = sample_dataset(50, 9), b = sample_dataset(50, 9), c = sample_dataset(50, 10);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].image.same_values(b[i].image));
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    any_diff |= !a[i].image.same_values(c[i].image);
    ASSERT_EQ(a[i].tokens.size(), 3u);
    EXPECT_TRUE(a[i].tokens.ids[0] >= 0 && a[i].tokens.ids[0] < 3);
    EXPECT_TRUE(a[i].tokens.ids[1] >= 3 && a[i].tokens.ids[1] < 6);
    EXPECT_TRUE(a[i].tokens.ids[2] >= 6 && a[i].tokens.ids[2] < 10);
  }
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(sample_dataset(0, 1), Error);
}

TEST(Vocabulary, NamesRoundTrip) {
  const auto t = vocab::make_tokens("triangle", "blue", "bl");
  EXPECT_EQ(t.ids, (std::vector<int>{2, 5, 8}));
  EXPECT_EQ(vocab::token_name(5), "blue");
  EXPECT_THROW(vocab::make_tokens("hexagon", "blue", "bl"), Error);
  EXPECT_THROW(vocab::token_name(10), Error);
  const auto j = scene_to_json(Scene{ShapeKind::square, ColorKind::green, Quadrant::tr, 4});
  EXPECT_EQ(j.at("shape"), "square");
  EXPECT_EQ(j.at("tokens"), nlohmann::json({1, 4, 7}));
}
