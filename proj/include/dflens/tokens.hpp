#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "dflens/error.hpp"

namespace dflens {

/// Condition token ids fed to the denoiser's cross-attention.
struct ConditionTokens {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  bool operator==(const ConditionTokens&) const = default;
};

// Synthetic concept vocabulary: three attribute slots laid out back to back.
// Slot 0 (subject): shape, slot 1 (attribute): color, slot 2 (relation): quadrant.
namespace vocab {
inline constexpr std::array<std::string_view, 3> kShapes{"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 3> kColors{"red", "green", "blue"};
inline constexpr std::array<std::string_view, 4> kQuadrants{"tl", "tr", "bl", "br"};

inline constexpr int kShapeOffset = 0;
inline constexpr int kColorOffset = 3;
inline constexpr int kQuadrantOffset = 6;
inline constexpr int kSize = 10;
inline constexpr std::array<std::string_view, 3> kSlotNames{"shape", "color", "quadrant"};

inline std::string_view token_name(int id) {
  if (id >= kQuadrantOffset && id < kSize) return kQuadrants[static_cast<std::size_t>(id - kQuadrantOffset)];
  if (id >= kColorOffset && id < kQuadrantOffset) return kColors[static_cast<std::size_t>(id - kColorOffset)];
  if (id >= 0 && id < kColorOffset) return kShapes[static_cast<std::size_t>(id)];
  throw Error(concat("token id ", id, " outside vocabulary of size ", kSize));
}

template <std::size_t N>
int index_of(const std::array<std::string_view, N>& names, std::string_view name, const char* slot) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == name) return static_cast<int>(i);
  }
  throw Error(concat("unknown ", slot, " '", name, "'"));
}

inline ConditionTokens make_tokens(std::string_view shape, std::string_view color, std::string_view quadrant) {
  return ConditionTokens{{kShapeOffset + index_of(kShapes, shape, "shape"),
                          kColorOffset + index_of(kColors, color, "color"),
                          kQuadrantOffset + index_of(kQuadrants, quadrant, "quadrant")}};
}
}  // namespace vocab

}  // namespace dflens
