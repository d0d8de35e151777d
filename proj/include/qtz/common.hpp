#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace qtz {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateRange : Error {
    using Error::Error;
};
struct CodeOutOfRange : Error {
    using Error::Error;
};
struct ShapeMismatch : Error {
    using Error::Error;
};
struct AlreadyQuantized : Error {
    using Error::Error;
};
struct UnsupportedTopology : Error {
    using Error::Error;
};
struct MultiplierOutOfRange : Error {
    using Error::Error;
};
struct AccumulatorOverflow : Error {
    using Error::Error;
};
struct MissingRange : Error {
    using Error::Error;
};
struct NoData : Error {
    using Error::Error;
};
struct DataExhausted : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};
struct NonFiniteGradient : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

// Single rounding mode used on both the float and integer sides:
// round half away from zero (what std::round/llround implement).
inline double round_half_away(double x) {
    return std::round(x);
}

inline std::int64_t iround_half_away(double x) {
    return std::llround(x);
}

template <typename T>
constexpr T clamp_to(T lo, T hi, T x) {
    return x < lo ? lo : (x > hi ? hi : x);
}

}  // namespace qtz
