#include "qtz/io/dataset.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "qtz/common.hpp"

namespace qtz {

namespace {

std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("idx: truncated header");
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
           std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Tensor Dataset::batch_images(const std::vector<std::int64_t>& idx) const {
    const std::int64_t h = images.dim(1), w = images.dim(2), c = images.dim(3);
    const std::int64_t stride = h * w * c;
    Tensor out({static_cast<std::int64_t>(idx.size()), h, w, c});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::memcpy(&out.data[i * static_cast<std::size_t>(stride)],
                    &images.data[static_cast<std::size_t>(idx[i] * stride)],
                    sizeof(double) * static_cast<std::size_t>(stride));
    return out;
}

std::vector<int> Dataset::batch_labels(const std::vector<std::int64_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<std::size_t>(idx[i])];
    return out;
}

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    if (!imf) throw NoData("cannot open " + images_path);
    if (read_be32(imf) != 0x00000803u) throw FormatError(images_path + ": bad image magic");
    const std::int64_t n = read_be32(imf);
    const std::int64_t h = read_be32(imf);
    const std::int64_t w = read_be32(imf);
    std::vector<unsigned char> raw(static_cast<std::size_t>(n * h * w));
    imf.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!imf) throw FormatError(images_path + ": truncated image payload");

    std::ifstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw NoData("cannot open " + labels_path);
    if (read_be32(lbf) != 0x00000801u) throw FormatError(labels_path + ": bad label magic");
    const std::int64_t ln = read_be32(lbf);
    if (ln != n) throw FormatError("image/label count mismatch");
    std::vector<unsigned char> lraw(static_cast<std::size_t>(n));
    lbf.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
    if (!lbf) throw FormatError(labels_path + ": truncated label payload");

    Dataset ds;
    ds.images = Tensor({n, h, w, 1});
    for (std::size_t i = 0; i < raw.size(); ++i) ds.images[static_cast<std::int64_t>(i)] = raw[i] / 255.0;
    ds.labels.assign(lraw.begin(), lraw.end());
    return ds;
}

void save_idx_dataset(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path) {
    const std::int64_t n = ds.images.dim(0), h = ds.images.dim(1), w = ds.images.dim(2);
    std::ofstream imf(images_path, std::ios::binary);
    if (!imf) throw Error("cannot write " + images_path);
    write_be32(imf, 0x00000803u);
    write_be32(imf, static_cast<std::uint32_t>(n));
    write_be32(imf, static_cast<std::uint32_t>(h));
    write_be32(imf, static_cast<std::uint32_t>(w));
    std::vector<unsigned char> raw(static_cast<std::size_t>(n * h * w));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double v = ds.images[static_cast<std::int64_t>(i)] * 255.0;
        raw[i] = static_cast<unsigned char>(clamp_to(0.0, 255.0, round_half_away(v)));
    }
    imf.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));

    std::ofstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw Error("cannot write " + labels_path);
    write_be32(lbf, 0x00000801u);
    write_be32(lbf, static_cast<std::uint32_t>(n));
    std::vector<unsigned char> lraw(ds.labels.begin(), ds.labels.end());
    lbf.write(reinterpret_cast<const char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
}

Dataset load_idx_dir(const std::string& dir, bool train) {
    const std::string prefix = dir + "/" + (train ? "train" : "t10k");
    return load_idx_dataset(prefix + "-images-idx3-ubyte", prefix + "-labels-idx1-ubyte");
}

Dataset synthesize_dataset(std::int64_t count, std::uint64_t seed, double noise) {
    constexpr std::int64_t kH = 28, kW = 28, kClasses = 10, kGrid = 7;
    // class templates: low-frequency patterns from a fixed per-class stream,
    // bilinearly upsampled from a kGrid x kGrid lattice
    std::vector<Tensor> templates;
    for (int k = 0; k < kClasses; ++k) {
        Rng trng(0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(k + 1));
        Tensor grid({kGrid, kGrid});
        for (auto& v : grid.data) v = trng.uniform();
        Tensor tmpl({kH, kW});
        for (std::int64_t i = 0; i < kH; ++i)
            for (std::int64_t j = 0; j < kW; ++j) {
                const double gi = static_cast<double>(i) * (kGrid - 1) / (kH - 1);
                const double gj = static_cast<double>(j) * (kGrid - 1) / (kW - 1);
                const std::int64_t i0 = static_cast<std::int64_t>(gi), j0 = static_cast<std::int64_t>(gj);
                const std::int64_t i1 = std::min<std::int64_t>(i0 + 1, kGrid - 1);
                const std::int64_t j1 = std::min<std::int64_t>(j0 + 1, kGrid - 1);
                const double fi = gi - i0, fj = gj - j0;
                tmpl[i * kW + j] = (1 - fi) * ((1 - fj) * grid[i0 * kGrid + j0] + fj * grid[i0 * kGrid + j1]) +
                                   fi * ((1 - fj) * grid[i1 * kGrid + j0] + fj * grid[i1 * kGrid + j1]);
            }
        templates.push_back(std::move(tmpl));
    }

    Rng rng(seed);
    Dataset ds;
    ds.images = Tensor({count, kH, kW, 1});
    ds.labels.resize(static_cast<std::size_t>(count));
    for (std::int64_t s = 0; s < count; ++s) {
        const int label = static_cast<int>(rng.integer(kClasses));
        ds.labels[static_cast<std::size_t>(s)] = label;
        const Tensor& tmpl = templates[static_cast<std::size_t>(label)];
        const std::int64_t di = rng.integer(5) - 2, dj = rng.integer(5) - 2;
        const double contrast = rng.uniform(0.7, 1.3);
        for (std::int64_t i = 0; i < kH; ++i)
            for (std::int64_t j = 0; j < kW; ++j) {
                const std::int64_t si = clamp_to<std::int64_t>(0, kH - 1, i + di);
                const std::int64_t sj = clamp_to<std::int64_t>(0, kW - 1, j + dj);
                double v = contrast * tmpl[si * kW + sj] + noise * rng.normal();
                ds.images.at4(s, i, j, 0) = clamp_to(0.0, 1.0, v);
            }
    }
    return ds;
}

}  // namespace qtz
