#pragma once

// Deterministic synthetic English-like text. Each paragraph introduces a few
// characters with freshly composed names and places and keeps referring back
// to them, so predicting a name's continuation needs in-context recall rather
// than memorized spelling.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hyspec/numerics.hpp"

namespace hyspec {

namespace detail {
inline constexpr std::array<std::string_view, 24> kSyllables = {
    "ka", "lo", "mi", "ren", "dor", "tha", "vel", "an", "si", "bru", "el", "mor",
    "qui", "sa", "tor", "ny", "ga", "fen", "ro", "li", "est", "wyn", "ba", "del"};
inline constexpr std::array<std::string_view, 10> kTrades = {
    "baker", "smith", "weaver", "miller", "fisher", "potter", "cooper", "tanner", "mason", "brewer"};
inline constexpr std::array<std::string_view, 10> kGoods = {
    "loaves of bread", "iron nails", "bolts of cloth", "sacks of flour", "baskets of fish",
    "clay jars", "oak barrels", "leather boots", "carved stones", "casks of ale"};
inline constexpr std::array<std::string_view, 9> kNumbers = {"two", "three", "four", "five", "six",
                                                             "seven", "eight", "nine", "ten"};
inline constexpr std::array<std::string_view, 6> kDays = {"morning", "evening", "spring", "winter",
                                                          "market day", "feast day"};
inline constexpr std::array<std::string_view, 6> kPlaceEnds = {"wick", "ford", "holm", "by", "ton", "mere"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& a, Rng& r) {
  return a[r.below(N)];
}

inline std::string make_name(Rng& r) {
  std::string s;
  const int n = 2 + static_cast<int>(r.below(2));
  for (int i = 0; i < n; ++i) s += pick(kSyllables, r);
  s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

inline std::string make_place(Rng& r) {
  std::string s = std::string(pick(kSyllables, r)) + std::string(pick(kSyllables, r)) +
                  std::string(pick(kPlaceEnds, r));
  s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

inline std::string paragraph(Rng& r) {
  const std::string a = make_name(r), b = make_name(r), place = make_place(r);
  const std::string trade(pick(kTrades, r)), goods(pick(kGoods, r)), num(pick(kNumbers, r));
  const std::string num2(pick(kNumbers, r)), day(pick(kDays, r));
  std::string p;
  p += a + " the " + trade + " lived in " + place + ". ";
  p += "Every " + day + " " + a + " made " + num + " " + goods + ". ";
  switch (r.below(3)) {
    case 0:
      p += "One day a traveller named " + b + " came to " + place + " and asked " + a + " for " + goods + ". ";
      p += a + " gave " + b + " " + num2 + " " + goods + ", and " + b + " thanked " + a + ". ";
      break;
    case 1:
      p += b + ", who kept the inn at " + place + ", bought " + num2 + " " + goods + " from " + a + ". ";
      p += "The people of " + place + " said that " + a + " was the best " + trade + " they knew. ";
      break;
    default:
      p += "When " + b + " left " + place + ", " + a + " sent " + num2 + " " + goods + " along. ";
      p += b + " never forgot the " + trade + " of " + place + ". ";
      break;
  }
  p += "So " + a + " stayed in " + place + " and " + b + " went on.\n";
  return p;
}
}  // namespace detail

/// At least `min_bytes` of text, fully determined by `seed`.
inline std::string synthetic_corpus(std::size_t min_bytes, std::uint64_t seed) {
  Rng r(seed);
  std::string out;
  out.reserve(min_bytes + 512);
  while (out.size() < min_bytes) out += detail::paragraph(r);
  return out;
}

}  // namespace hyspec
