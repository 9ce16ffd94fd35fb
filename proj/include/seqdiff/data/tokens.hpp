#pragma once

#include "seqdiff/core/tensor.hpp"

namespace seqdiff::token {

inline constexpr Index kPad = 0;
inline constexpr Index kMask = 1;
inline constexpr Index kCls = 2;
inline constexpr Index kBos = 3;
inline constexpr Index kEos = 4;
inline constexpr Index kUnk = 5;
// Ids below this value never come from raw text.
inline constexpr Index kReserved = 5;

inline bool is_special(Index id) { return id < kReserved; }

}  // namespace seqdiff::token
