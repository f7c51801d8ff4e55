#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace npusim {

using Cycle = uint64_t;
using Addr = uint64_t;

constexpr Cycle kNever = UINT64_MAX;

enum class ErrorCode {
  kParse,
  kUnsupportedOperator,
  kLinkage,
  kUnboundSymbol,
  kShapeMismatch,
  kCycle,
  kDegenerateShape,
  kFootprint,
  kUnsupportedAttribute,
  kAxisTooLarge,
  kBlockTooTall,
  kMissingLatencyConfig,
  kConfig,
  kConsistency,
  kStarvation,
  kIo,
};

const char* error_code_name(ErrorCode code);

// All recoverable simulator errors carry a code so callers (and tests) can
// branch on the failure class without parsing messages.
class SimError : public std::runtime_error {
 public:
  SimError(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

constexpr uint64_t ceil_div(uint64_t a, uint64_t b) { return (a + b - 1) / b; }

constexpr uint64_t align_down(uint64_t a, uint64_t g) { return a / g * g; }

constexpr uint64_t align_up(uint64_t a, uint64_t g) { return ceil_div(a, g) * g; }

constexpr bool is_power_of_two(uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

// Cycle count of a clock at `to_hz` reached by cycle t of a clock at `from_hz`.
inline uint64_t convert_cycles_floor(uint64_t t, uint64_t from_hz, uint64_t to_hz) {
  return static_cast<uint64_t>(static_cast<unsigned __int128>(t) * to_hz / from_hz);
}

// First cycle of the `from_hz` clock at which the `to_hz` clock reaches e.
inline uint64_t convert_cycles_ceil(uint64_t e, uint64_t from_hz, uint64_t to_hz) {
  const unsigned __int128 num = static_cast<unsigned __int128>(e) * from_hz;
  return static_cast<uint64_t>((num + to_hz - 1) / to_hz);
}

inline unsigned log2_exact(uint64_t v) {
  unsigned k = 0;
  while ((uint64_t{1} << k) < v) ++k;
  return k;
}

}  // namespace npusim
