#pragma once

#include "sdsae/grid.hpp"
#include "sdsae/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <vector>

namespace sdsae {

// Per-position sparse codes over an h x w grid.
struct SparseFeatureMap {
    uint32_t h = 0;
    uint32_t w = 0;
    uint32_t n_f = 0;
    std::vector<SparseCoeffs> cells;  // row-major (i, j)

    SparseFeatureMap() = default;
    SparseFeatureMap(uint32_t h_, uint32_t w_, uint32_t n_f_)
        : h(h_), w(w_), n_f(n_f_), cells(size_t(h_) * w_, SparseCoeffs{{}, {}, n_f_}) {}

    const SparseCoeffs& cell(size_t i, size_t j) const { return cells[i * w + j]; }
    SparseCoeffs& cell(size_t i, size_t j) { return cells[i * w + j]; }

    // S^rho as an h x w grid.
    Grid feature_grid(uint32_t rho) const;
    SparseFeatureMap crop(uint32_t i0, uint32_t j0, uint32_t ch, uint32_t cw) const;
    void validate() const;

    bool operator==(const SparseFeatureMap&) const = default;
};

DenseFeatureMap crop(const DenseFeatureMap& m, uint32_t i0, uint32_t j0, uint32_t ch, uint32_t cw);

// Cellwise encode, parallel over positions.
SparseFeatureMap encode_map(const SaeParams& params, const DenseFeatureMap& dense, uint32_t k);

// a_rho = mean of S^rho over the grid.
double average_activation(const SparseFeatureMap& s, uint32_t rho);

struct ExampleActivation {
    uint64_t id = 0;
    double activation = 0.0;
};

// Among examples with a > 0, those at or above the nearest-rank (1 - q) quantile,
// i.e. at least the ceil(q * n) largest, plus anything tied with the cut-off value.
// Output is ordered by activation descending, then id ascending.
std::vector<uint64_t> top_quantile_examples(std::span<const ExampleActivation> examples, double q);

struct HeatmapInfo {
    float min = 0.0f;
    float max = 0.0f;
};

// Writes S^rho as an 8-bit PGM scaled so max -> 255 (floor), upscaled by
// nearest neighbour, plus `<path>.txt` holding the raw min/max.
HeatmapInfo heatmap_export(const SparseFeatureMap& s, uint32_t rho, const std::filesystem::path& path,
                           uint32_t upscale = 1);

struct FeatureStats {
    uint32_t feature = 0;
    double mean = 0.0;  // meaningful only when count > 0
    uint64_t count = 0;

    bool defined() const { return count > 0; }
};

class FeatureStatsAccumulator {
public:
    explicit FeatureStatsAccumulator(uint32_t rho) : rho_(rho) {}
    void add(const SparseFeatureMap& s);
    FeatureStats result() const;

private:
    uint32_t rho_;
    double sum_ = 0.0;
    uint64_t count_ = 0;
};

// Mean of the strictly positive S^rho entries over all maps.
FeatureStats feature_stats(std::span<const SparseFeatureMap> maps, uint32_t rho);

// SDSF file: a sequence of records, each "SDSF", version, h, w, n_f, then per
// cell a u16 count followed by count x (u32 index, f32 value).
inline constexpr uint32_t kSparseMapVersion = 1;
void write_sparse_maps(std::span<const SparseFeatureMap> maps, const std::filesystem::path& path);
std::vector<SparseFeatureMap> read_sparse_maps(const std::filesystem::path& path);

class SparseMapWriter {
public:
    explicit SparseMapWriter(const std::filesystem::path& path);
    void write(const SparseFeatureMap& m);
    void close();

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class SparseMapReader {
public:
    explicit SparseMapReader(const std::filesystem::path& path);
    std::optional<SparseFeatureMap> next();

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

}  // namespace sdsae
