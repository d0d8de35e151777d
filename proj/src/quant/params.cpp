#include "qtz/quant/params.hpp"

#include <algorithm>
#include <cmath>

namespace qtz {

std::string scheme_name(Scheme s) {
    switch (s) {
        case Scheme::Affine: return "affine";
        case Scheme::SymmetricSigned: return "symmetric_signed";
        case Scheme::SymmetricUnsigned: return "symmetric_unsigned";
    }
    return "affine";
}

Scheme scheme_from_name(const std::string& name) {
    if (name == "affine") return Scheme::Affine;
    if (name == "symmetric_signed" || name == "symmetric") return Scheme::SymmetricSigned;
    if (name == "symmetric_unsigned") return Scheme::SymmetricUnsigned;
    throw FormatError("unknown quantization scheme: " + name);
}

RangeSpec relax_range(RangeSpec r) {
    if (r.x_min > r.x_max) throw DegenerateRange("range with x_min > x_max");
    return {std::min(r.x_min, 0.0), std::max(r.x_max, 0.0)};
}

RangeSpec widen_degenerate(RangeSpec r, double eps) {
    if (r.x_min != r.x_max) return r;
    double x = r.x_min;
    return {std::min(0.0, x) - eps, std::max(0.0, x) + eps};
}

std::int32_t QuantParams::code_min() const {
    const std::int64_t n = n_levels();
    switch (scheme) {
        case Scheme::Affine: return 0;
        case Scheme::SymmetricSigned:
            return static_cast<std::int32_t>(narrow_range ? -(n / 2 - 1) : -(n / 2));
        case Scheme::SymmetricUnsigned: return 0;
    }
    return 0;
}

std::int32_t QuantParams::code_max() const {
    const std::int64_t n = n_levels();
    switch (scheme) {
        case Scheme::Affine: return static_cast<std::int32_t>(n - 1);
        case Scheme::SymmetricSigned: return static_cast<std::int32_t>(n / 2 - 1);
        case Scheme::SymmetricUnsigned: return static_cast<std::int32_t>(narrow_range ? n - 2 : n - 1);
    }
    return 0;
}

void QuantParams::validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw DegenerateRange("scale must be positive");
    if (n_bits != 4 && n_bits != 8 && n_bits != 16) throw Error("n_bits must be one of 4, 8, 16");
    if (scheme == Scheme::Affine) {
        if (zero_point < 0 || zero_point > code_max())
            throw Error("affine zero_point outside [0, N_levels-1]");
    } else if (zero_point != 0) {
        throw Error("symmetric quantizer requires zero_point == 0");
    }
}

QuantParams affine_params(RangeSpec r, int n_bits) {
    if (r.x_max == r.x_min) throw DegenerateRange("affine_params: x_max == x_min");
    if (r.x_min > 0.0 || r.x_max < 0.0) throw DegenerateRange("affine_params: range not relaxed");
    QuantParams qp;
    qp.scheme = Scheme::Affine;
    qp.n_bits = n_bits;
    qp.narrow_range = false;
    const double levels = static_cast<double>((std::int64_t{1} << n_bits) - 1);
    qp.scale = (r.x_max - r.x_min) / levels;
    const std::int64_t z = iround_half_away(-r.x_min / qp.scale);
    qp.zero_point = static_cast<std::int32_t>(clamp_to<std::int64_t>(0, std::int64_t(levels), z));
    qp.validate();
    return qp;
}

QuantParams symmetric_params(double max_abs, int n_bits, Scheme scheme, bool narrow_range) {
    if (scheme == Scheme::Affine) throw Error("symmetric_params called with affine scheme");
    if (max_abs == 0.0) throw DegenerateRange("symmetric_params: max_abs == 0");
    QuantParams qp;
    qp.scheme = scheme;
    qp.n_bits = n_bits;
    qp.narrow_range = narrow_range;
    qp.zero_point = 0;
    qp.scale = max_abs / static_cast<double>(qp.code_max());
    qp.validate();
    return qp;
}

QuantParams params_from_minmax(double x_min, double x_max, int n_bits, Scheme scheme,
                               bool narrow_range) {
    if (scheme == Scheme::Affine) {
        RangeSpec r = widen_degenerate(relax_range({x_min, x_max}));
        return affine_params(r, n_bits);
    }
    double max_abs = std::max(std::fabs(x_min), std::fabs(x_max));
    if (max_abs == 0.0) max_abs = 1e-6;  // degenerate-range widening, symmetric flavor
    return symmetric_params(max_abs, n_bits, scheme, narrow_range);
}

}  // namespace qtz
