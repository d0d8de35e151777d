#pragma once

#include <string>
#include <vector>

#include "qtz/graph/graph.hpp"
#include "qtz/quant/quantize.hpp"

namespace qtz {

struct DegenerateTensor : Error {
    using Error::Error;
};

// Per-output-feature-map signal-to-quantization-noise ratio in dB:
// 10*log10(sum W^2 / sum (W - SimQuant(W))^2) over each channel slice, with
// SimQuant parameterized by the stated scheme and granularity. Zero-error
// (and all-zero) channels are capped at 100 dB.
std::vector<double> sqnr(const Tensor& w, int channel_axis, Scheme scheme, Granularity gran,
                         int n_bits, bool narrow_range = false);

inline constexpr double kSqnrCapDb = 100.0;

struct Histogram {
    std::vector<double> edges;          // size counts+1
    std::vector<std::int64_t> counts;
    double max_value = 0.0;
};

// Histogram of W^2 / mean(W^2): the normalized power distribution whose
// outliers flag fold-induced dynamic-range damage.
Histogram weight_power_histogram(const Tensor& w, int bins);

struct SqnrReport {
    std::string layer;
    std::string scheme_desc;
    std::vector<double> per_channel_db;
    Histogram db_histogram;  // 1 dB bins
};

// Per-layer SQNR under {affine per-layer, symmetric per-channel, affine
// per-channel} for every weight-carrying op of a folded model.
std::vector<SqnrReport> compare_schemes(const Graph& folded_model, int n_bits = 8);

// 1 dB-wide bins over the given values.
Histogram db_histogram(const std::vector<double>& values);

std::string sqnr_reports_csv(const std::vector<SqnrReport>& reports);

}  // namespace qtz
