#include "sdsae/featmap.hpp"

#include "binio.hpp"
#include "sdsae/error.hpp"
#include "sdsae/kernels.hpp"
#include "sdsae/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace sdsae {

namespace fs = std::filesystem;

Grid SparseFeatureMap::feature_grid(uint32_t rho) const {
    Grid g(h, w);
    for (size_t c = 0; c < cells.size(); ++c) g.values[c] = cells[c].get(rho);
    return g;
}

SparseFeatureMap SparseFeatureMap::crop(uint32_t i0, uint32_t j0, uint32_t ch, uint32_t cw) const {
    if (i0 + ch > h || j0 + cw > w) throw ConfigError("crop window exceeds the map");
    SparseFeatureMap out(ch, cw, n_f);
    for (uint32_t i = 0; i < ch; ++i)
        for (uint32_t j = 0; j < cw; ++j) out.cell(i, j) = cell(i0 + i, j0 + j);
    return out;
}

void SparseFeatureMap::validate() const {
    if (cells.size() != size_t(h) * w) throw FormatError("sparse map cell count does not match h*w");
    for (const auto& c : cells) {
        if (c.n_f != n_f || c.indices.size() != c.values.size()) throw FormatError("inconsistent sparse cell");
        for (size_t q = 0; q < c.nnz(); ++q) {
            if (c.indices[q] >= n_f) throw FormatError("feature index out of range");
            if (q > 0 && c.indices[q] <= c.indices[q - 1]) throw FormatError("feature indices not strictly increasing");
            if (!(c.values[q] > 0.0f)) throw FormatError("non-positive sparse coefficient");
        }
    }
}

DenseFeatureMap crop(const DenseFeatureMap& m, uint32_t i0, uint32_t j0, uint32_t ch, uint32_t cw) {
    if (i0 + ch > m.h || j0 + cw > m.w) throw ConfigError("crop window exceeds the map");
    DenseFeatureMap out(ch, cw, m.d);
    for (uint32_t i = 0; i < ch; ++i)
        for (uint32_t j = 0; j < cw; ++j) std::ranges::copy(m.cell(i0 + i, j0 + j), out.cell(i, j).begin());
    return out;
}

SparseFeatureMap encode_map(const SaeParams& params, const DenseFeatureMap& dense, uint32_t k) {
    if (dense.d != params.d())
        throw ConfigError("encode_map: map has d=" + std::to_string(dense.d) + ", SAE expects " +
                          std::to_string(params.d()));
    SparseFeatureMap out(dense.h, dense.w, params.n_f());
    out.cells = encode_batch(params, dense.data, k);
    return out;
}

double average_activation(const SparseFeatureMap& s, uint32_t rho) {
    if (rho >= s.n_f) throw ConfigError("feature id out of range");
    double sum = 0.0;
    for (const auto& c : s.cells) sum += c.get(rho);
    return sum / double(size_t(s.h) * s.w);
}

std::vector<uint64_t> top_quantile_examples(std::span<const ExampleActivation> examples, double q) {
    if (!(q > 0.0 && q <= 1.0)) throw ConfigError("quantile q must lie in (0, 1]");
    std::vector<ExampleActivation> active;
    for (const auto& e : examples)
        if (e.activation > 0.0) active.push_back(e);
    if (active.empty()) return {};
    std::sort(active.begin(), active.end(), [](const auto& a, const auto& b) {
        return a.activation > b.activation || (a.activation == b.activation && a.id < b.id);
    });
    // Guard against q * n landing a hair above an integer.
    const size_t keep = std::clamp<size_t>(size_t(std::ceil(q * double(active.size()) - 1e-9)), 1, active.size());
    const double cutoff = active[keep - 1].activation;
    std::vector<uint64_t> ids;
    for (const auto& e : active) {
        if (e.activation < cutoff) break;
        ids.push_back(e.id);
    }
    return ids;
}

HeatmapInfo heatmap_export(const SparseFeatureMap& s, uint32_t rho, const fs::path& path, uint32_t upscale) {
    if (rho >= s.n_f) throw ConfigError("feature id out of range");
    if (upscale == 0) throw ConfigError("upscale factor must be positive");
    const Grid g = s.feature_grid(rho);
    HeatmapInfo info{*std::min_element(g.values.begin(), g.values.end()),
                     *std::max_element(g.values.begin(), g.values.end())};

    GrayImage img{s.h * upscale, s.w * upscale, {}};
    img.pixels.assign(size_t(img.h) * img.w, 0);
    for (uint32_t y = 0; y < img.h; ++y)
        for (uint32_t x = 0; x < img.w; ++x) {
            const float v = g.at(y / upscale, x / upscale);
            uint8_t px = 0;
            if (info.max > 0.0f && v > 0.0f)
                px = uint8_t(std::clamp(std::floor(double(v) / info.max * 255.0), 0.0, 255.0));
            img.pixels[size_t(y) * img.w + x] = px;
        }
    write_pgm(img, path);

    auto side = path;
    side += ".txt";
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw IoError("cannot write " + side.string());
    out.precision(9);
    out << "min " << info.min << "\nmax " << info.max << "\n";
    return info;
}

void FeatureStatsAccumulator::add(const SparseFeatureMap& s) {
    for (const auto& c : s.cells) {
        const float v = c.get(rho_);
        if (v > 0.0f) {
            sum_ += v;
            ++count_;
        }
    }
}

FeatureStats FeatureStatsAccumulator::result() const {
    return {rho_, count_ > 0 ? sum_ / double(count_) : std::numeric_limits<double>::quiet_NaN(), count_};
}

FeatureStats feature_stats(std::span<const SparseFeatureMap> maps, uint32_t rho) {
    FeatureStatsAccumulator acc(rho);
    for (const auto& m : maps) acc.add(m);
    return acc.result();
}

SparseMapWriter::SparseMapWriter(const fs::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
}

void SparseMapWriter::write(const SparseFeatureMap& m) {
    m.validate();
    out_.write("SDSF", 4);
    detail::put<uint32_t>(out_, kSparseMapVersion);
    detail::put<uint32_t>(out_, m.h);
    detail::put<uint32_t>(out_, m.w);
    detail::put<uint32_t>(out_, m.n_f);
    for (const auto& c : m.cells) {
        if (c.nnz() > std::numeric_limits<uint16_t>::max()) throw ConfigError("too many coefficients in one cell");
        detail::put<uint16_t>(out_, uint16_t(c.nnz()));
        for (size_t q = 0; q < c.nnz(); ++q) {
            detail::put<uint32_t>(out_, c.indices[q]);
            detail::put<float>(out_, c.values[q]);
        }
    }
    if (!out_) throw IoError("write failed for " + path_.string());
}

void SparseMapWriter::close() {
    out_.flush();
    if (!out_) throw IoError("write failed for " + path_.string());
    out_.close();
}

SparseMapReader::SparseMapReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path.string());
}

std::optional<SparseFeatureMap> SparseMapReader::next() {
    char magic[4];
    in_.read(magic, 4);
    if (in_.gcount() == 0) return std::nullopt;
    const std::string where = path_.string();
    if (in_.gcount() != 4 || std::memcmp(magic, "SDSF", 4) != 0) throw FormatError(where + ": bad magic");
    const auto version = detail::get<uint32_t>(in_, where + " header");
    if (version != kSparseMapVersion) throw FormatError(where + ": unsupported version " + std::to_string(version));
    const auto h = detail::get<uint32_t>(in_, where + " header");
    const auto w = detail::get<uint32_t>(in_, where + " header");
    const auto n_f = detail::get<uint32_t>(in_, where + " header");
    if (h == 0 || w == 0 || n_f == 0) throw FormatError(where + ": zero dimension");
    SparseFeatureMap m(h, w, n_f);
    for (auto& c : m.cells) {
        const auto count = detail::get<uint16_t>(in_, where + " cell");
        c.indices.resize(count);
        c.values.resize(count);
        for (uint16_t q = 0; q < count; ++q) {
            c.indices[q] = detail::get<uint32_t>(in_, where + " cell");
            c.values[q] = detail::get<float>(in_, where + " cell");
        }
    }
    m.validate();
    return m;
}

void write_sparse_maps(std::span<const SparseFeatureMap> maps, const fs::path& path) {
    SparseMapWriter w(path);
    for (const auto& m : maps) w.write(m);
    w.close();
}

std::vector<SparseFeatureMap> read_sparse_maps(const fs::path& path) {
    SparseMapReader r(path);
    std::vector<SparseFeatureMap> out;
    while (auto m = r.next()) out.push_back(std::move(*m));
    return out;
}

}  // namespace sdsae
