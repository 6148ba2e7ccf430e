#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sanr {

/// Base error for every failure the codec reports (bad input, corrupt stream,
/// configuration mismatch). The CLI maps these to exit status 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when the training loss becomes non-finite. The CLI maps this to
/// exit status 2.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(message);
}

/// Round to nearest, ties away from zero.
inline double round_half_away(double x) { return std::round(x); }

/// round_half_to_even(n / 2^shift) evaluated exactly on integers.
inline int round_div_pow2_half_even(int n, int shift) {
  if (shift == 0) return n;
  const int q = n >> shift;
  const int rem = n & ((1 << shift) - 1);
  const int half = 1 << (shift - 1);
  if (rem > half) return q + 1;
  if (rem < half) return q;
  return (q % 2 == 0) ? q : q + 1;
}

}  // namespace sanr
