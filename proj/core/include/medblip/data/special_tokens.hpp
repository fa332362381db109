#pragma once

namespace medblip::tokens {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kQuestion = 3;  // "question:"
inline constexpr int kAnswer = 4;    // "answer:"

}  // namespace medblip::tokens
