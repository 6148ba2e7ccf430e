#pragma once

// Byte-oriented range coder (carry-propagating, LZMA style) with 16-bit
// probability tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sanr/common.hpp"
#include "sanr/entropy_models.hpp"

namespace sanr {

inline constexpr int kProbabilityBits = 16;
inline constexpr std::uint32_t kProbabilityTotal = 1u << kProbabilityBits;

/// Cumulative frequencies of symbols min_symbol .. min_symbol + N - 1.
/// cum has N + 1 entries, cum[0] = 0, cum[N] = 65536, every symbol >= 1.
struct FrequencyTable {
  std::int32_t min_symbol = 0;
  std::vector<std::uint32_t> cum;

  int symbol_count() const { return static_cast<int>(cum.size()) - 1; }
  std::int32_t max_symbol() const { return min_symbol + symbol_count() - 1; }
  std::uint32_t freq(int index) const { return cum[index + 1] - cum[index]; }
};

/// Discretized Laplace(mu, b) over the integers [lo, hi]: each symbol gets
/// 1 + floor(p_i / P * (65536 - N)) and the leftover mass goes to the most
/// probable symbol.
inline FrequencyTable laplace_table(double mu, double b, std::int32_t lo, std::int32_t hi) {
  require(hi >= lo, "empty symbol range");
  const long n = static_cast<long>(hi) - lo + 1;
  require(n <= static_cast<long>(kProbabilityTotal) / 2, "symbol range too wide for 16-bit tables");
  std::vector<double> p(static_cast<std::size_t>(n));
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    p[i] = laplace_mass(static_cast<double>(lo + i), mu, b);
    total += p[i];
  }
  FrequencyTable t;
  t.min_symbol = lo;
  std::vector<std::uint32_t> f(static_cast<std::size_t>(n), 1);
  const double spare = static_cast<double>(kProbabilityTotal - n);
  std::uint32_t used = 0;
  if (total > 0.0) {
    for (long i = 0; i < n; ++i) {
      f[i] += static_cast<std::uint32_t>(std::floor(p[i] / total * spare));
      used += f[i];
    }
  } else {
    used = static_cast<std::uint32_t>(n);
  }
  const auto best = std::max_element(p.begin(), p.end()) - p.begin();
  f[best] += kProbabilityTotal - used;
  t.cum.resize(static_cast<std::size_t>(n) + 1);
  t.cum[0] = 0;
  for (long i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + f[i];
  return t;
}

/// Bits the coder spends on `symbol` under `t`.
inline double table_cost_bits(const FrequencyTable& t, std::int32_t symbol) {
  return kProbabilityBits - std::log2(static_cast<double>(t.freq(symbol - t.min_symbol)));
}

class RangeEncoder {
 public:
  void encode(std::int32_t symbol, const FrequencyTable& t) {
    require(symbol >= t.min_symbol && symbol <= t.max_symbol(), "symbol outside the coded range");
    const int idx = symbol - t.min_symbol;
    const std::uint32_t r = range_ >> kProbabilityBits;
    low_ += static_cast<std::uint64_t>(r) * t.cum[idx];
    range_ = r * t.freq(idx);
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  std::vector<std::uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  static constexpr std::uint32_t kTop = 1u << 24;

  void shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 32);
      std::uint8_t temp = cache_;
      do {
        out_.push_back(static_cast<std::uint8_t>(temp + carry));
        temp = 0xFF;
      } while (--cache_size_ != 0);
      cache_ = static_cast<std::uint8_t>(static_cast<std::uint32_t>(low_) >> 24);
    }
    ++cache_size_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
    for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
  }

  std::int32_t decode(const FrequencyTable& t) {
    const std::uint32_t r = range_ >> kProbabilityBits;
    const std::uint32_t value = code_ / r;
    require(value < kProbabilityTotal, "corrupt range-coded payload");
    const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), value);
    const int idx = static_cast<int>(it - t.cum.begin()) - 1;
    code_ -= r * t.cum[idx];
    range_ = r * t.freq(idx);
    while (range_ < (1u << 24)) {
      range_ <<= 8;
      code_ = (code_ << 8) | next_byte();
    }
    return t.min_symbol + idx;
  }

  std::size_t consumed() const { return pos_; }

 private:
  std::uint32_t next_byte() {
    require(pos_ < in_.size(), "corrupt range-coded payload: read past end");
    return in_[pos_++];
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

/// Encodes symbols[i] under table_for(i).
template <typename TableFn>
std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> symbols, TableFn&& table_for) {
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode(symbols[i], table_for(i));
  return enc.finish();
}

template <typename TableFn>
std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, std::size_t count, TableFn&& table_for) {
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = dec.decode(table_for(i));
  return out;
}

}  // namespace sanr
