#include "qtz/kernels/requantize.hpp"

#include <cmath>

namespace qtz {

RequantSpec quantize_multiplier(double m) {
    if (!(m > 0.0) || m >= 1.0)
        throw MultiplierOutOfRange("requant multiplier must be in (0, 1), got " + std::to_string(m));
    int e = 0;
    const double f = std::frexp(m, &e);  // m = f * 2^e, f in [0.5, 1), e <= 0
    std::int64_t m0 = iround_half_away(f * 2147483648.0);
    if (m0 == (std::int64_t{1} << 31)) {
        // f rounded up to 1.0; renormalize unless that would need a left shift
        if (e == 0)
            m0 = (std::int64_t{1} << 31) - 1;
        else {
            m0 = std::int64_t{1} << 30;
            ++e;
        }
    }
    RequantSpec rs;
    rs.m0 = static_cast<std::int32_t>(m0);
    rs.shift = -e;
    return rs;
}

std::int64_t fixed_mul(std::int64_t v, const RequantSpec& rs) {
    const int k = 31 + rs.shift;
    const std::int64_t p = v * rs.m0;
    const std::int64_t mag = p < 0 ? -p : p;
    const std::int64_t r = (mag + (std::int64_t{1} << (k - 1))) >> k;
    return p < 0 ? -r : r;
}

std::int32_t requantize(std::int32_t acc, const RequantSpec& rs, std::int32_t z_y, std::int32_t lo,
                        std::int32_t hi) {
    const std::int64_t r = fixed_mul(acc, rs) + z_y;
    return static_cast<std::int32_t>(clamp_to<std::int64_t>(lo, hi, r));
}

}  // namespace qtz
