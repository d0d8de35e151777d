#pragma once

#include <cstdint>

#include "qtz/common.hpp"

namespace qtz {

// Fixed-point representation of a real multiplier M in (0, 1):
// M ~= (m0 / 2^31) * 2^-shift with m0 in [2^30, 2^31) and shift >= 0,
// accurate to within 2^-31 relative.
struct RequantSpec {
    std::int32_t m0 = 1 << 30;
    int shift = 0;

    bool operator==(const RequantSpec&) const = default;
};

RequantSpec quantize_multiplier(double m);

// Rounded fixed-point product: (v * m0) >> (31 + shift) with round half away
// from zero, computed through a 64-bit intermediate. No clamping.
std::int64_t fixed_mul(std::int64_t v, const RequantSpec& rs);

// Map an int32 accumulator to an output code:
// clamp(lo, hi, fixed_mul(acc) + z_y). Saturates, never throws.
std::int32_t requantize(std::int32_t acc, const RequantSpec& rs, std::int32_t z_y, std::int32_t lo,
                        std::int32_t hi);

}  // namespace qtz
