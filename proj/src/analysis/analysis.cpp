#include "qtz/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qtz {

std::vector<double> sqnr(const Tensor& w, int channel_axis, Scheme scheme, Granularity gran,
                         int n_bits, bool narrow_range) {
    if (w.numel() == 0) throw NoData("sqnr on empty tensor");
    const Tensor sim = sim_quant_tensor(w, gran, scheme, n_bits, narrow_range);
    const std::int64_t channels = w.shape[static_cast<std::size_t>(channel_axis)];
    const std::int64_t stride = w.inner_stride(channel_axis);
    std::vector<double> signal(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> noise(static_cast<std::size_t>(channels), 0.0);
    for (std::int64_t i = 0; i < w.numel(); ++i) {
        const auto c = static_cast<std::size_t>((i / stride) % channels);
        signal[c] += w[i] * w[i];
        const double e = w[i] - sim[i];
        noise[c] += e * e;
    }
    std::vector<double> db(static_cast<std::size_t>(channels));
    for (std::size_t c = 0; c < db.size(); ++c)
        db[c] = (noise[c] == 0.0 || signal[c] == 0.0)
                    ? kSqnrCapDb
                    : std::min(kSqnrCapDb, 10.0 * std::log10(signal[c] / noise[c]));
    return db;
}

Histogram weight_power_histogram(const Tensor& w, int bins) {
    double mean_power = 0.0;
    for (double v : w.data) mean_power += v * v;
    mean_power /= static_cast<double>(w.numel());
    if (mean_power == 0.0) throw DegenerateTensor("weight_power_histogram: all-zero tensor");

    std::vector<double> norm(w.data.size());
    double maxv = 0.0;
    for (std::size_t i = 0; i < norm.size(); ++i) {
        norm[i] = w.data[i] * w.data[i] / mean_power;
        maxv = std::max(maxv, norm[i]);
    }
    Histogram h;
    h.max_value = maxv;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    h.edges.resize(static_cast<std::size_t>(bins) + 1);
    const double hi = maxv > 0.0 ? maxv : 1.0;
    for (int b = 0; b <= bins; ++b)
        h.edges[static_cast<std::size_t>(b)] = hi * static_cast<double>(b) / bins;
    for (double v : norm) {
        auto b = static_cast<std::int64_t>(v / hi * bins);
        if (b >= bins) b = bins - 1;
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

Histogram db_histogram(const std::vector<double>& values) {
    Histogram h;
    if (values.empty()) return h;
    double lo = std::floor(*std::min_element(values.begin(), values.end()));
    double hi = std::ceil(*std::max_element(values.begin(), values.end()));
    if (hi == lo) hi = lo + 1.0;
    const auto bins = static_cast<std::int64_t>(hi - lo);
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    h.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (std::int64_t b = 0; b <= bins; ++b) h.edges[static_cast<std::size_t>(b)] = lo + b;
    for (double v : values) {
        auto b = static_cast<std::int64_t>(v - lo);
        if (b >= bins) b = bins - 1;
        if (b < 0) b = 0;
        ++h.counts[static_cast<std::size_t>(b)];
        h.max_value = std::max(h.max_value, v);
    }
    return h;
}

std::vector<SqnrReport> compare_schemes(const Graph& folded_model, int n_bits) {
    std::vector<SqnrReport> reports;
    for (const Node& n : folded_model.nodes) {
        if (!n.is_conv_like()) continue;
        const Tensor& w = folded_model.params.at(n.inputs[1]);
        const int axis = weight_channel_axis(n.kind);
        struct SchemeCase {
            const char* desc;
            Scheme scheme;
            Granularity gran;
        };
        const SchemeCase cases[] = {
            {"asymmetric_per_layer", Scheme::Affine, Granularity::per_layer()},
            {"symmetric_per_channel", Scheme::SymmetricSigned, Granularity::per_channel(axis)},
            {"asymmetric_per_channel", Scheme::Affine, Granularity::per_channel(axis)},
        };
        for (const auto& sc : cases) {
            SqnrReport r;
            r.layer = n.name;
            r.scheme_desc = sc.desc;
            r.per_channel_db = sqnr(w, axis, sc.scheme, sc.gran, n_bits);
            r.db_histogram = db_histogram(r.per_channel_db);
            reports.push_back(std::move(r));
        }
    }
    return reports;
}

std::string sqnr_reports_csv(const std::vector<SqnrReport>& reports) {
    std::ostringstream out;
    out << "layer,scheme,channel,sqnr_db\n";
    for (const SqnrReport& r : reports)
        for (std::size_t c = 0; c < r.per_channel_db.size(); ++c)
            out << r.layer << ',' << r.scheme_desc << ',' << c << ',' << r.per_channel_db[c]
                << '\n';
    return out.str();
}

}  // namespace qtz
