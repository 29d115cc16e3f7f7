#pragma once

#include "sdsae/featmap.hpp"
#include "sdsae/grid.hpp"
#include "sdsae/raster.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sdsae {

// 1 - sum ||h - h'||^2 / sum ||h - mean(h)||^2 over row-major (n x d) sets.
// Throws DataError on an empty set or zero total variance.
double explained_variance(std::span<const float> h, std::span<const float> h_prime, uint32_t d);

enum class OverlapMode {
    flattened,     // cosine over the whole h*w*n_f tensor
    per_position,  // mean of per-cell cosines (cells where both codes are empty count as 0)
};

// Cosine similarity of two sparse feature maps; 0 when either is all-zero.
double overlap_cosine(const SparseFeatureMap& a, const SparseFeatureMap& b,
                      OverlapMode mode = OverlapMode::flattened);

// An image together with one feature's activation grid over it.
struct WeightedImage {
    const RgbImage* image = nullptr;
    Grid activations;
};

struct ColorSensitivity {
    std::array<double, 3> average{};
    double distance = 0.0;  // activation-weighted mean Manhattan distance, <= 765
};

inline constexpr double kMaxColorDistance = 3.0 * 255.0;

// Activation grids are upsampled to image resolution by nearest neighbour.
ColorSensitivity color_sensitivity(std::span<const WeightedImage> samples);

struct LocalityResult {
    std::optional<double> outside;  // mean per-pixel L1 change over zero-activation patches
    std::optional<double> inside;   // ... over patches larger than at least half of all patches
    size_t outside_pixels = 0;
    size_t inside_pixels = 0;
};

// Patch classification: inside if the patch activation exceeds that of at least
// 50% of the patches; outside if its activation is exactly zero.
std::vector<int8_t> locality_regions(const Grid& activations);
LocalityResult locality(const RgbImage& original, const RgbImage& intervened, const Grid& activations);

struct EmbeddingVector {
    std::vector<float> values;
    std::string tag;
};

double embedding_cosine(const EmbeddingVector& a, const EmbeddingVector& b);
// Mean cosine over all unordered pairs (requires at least two vectors).
double pairwise_mean_cosine(std::span<const EmbeddingVector> set);

// Blob: one text line "<m> <tag>\n" followed by m f32 little-endian values.
void write_embedding(const EmbeddingVector& e, const std::filesystem::path& path);
EmbeddingVector read_embedding(const std::filesystem::path& path);

inline constexpr std::array<double, 3> kDefaultSensitivityThresholds = {0.0, 0.1, 0.3};

// Fraction of the grid where S^rho > 0.
double active_area_fraction(const SparseFeatureMap& s, uint32_t rho);

struct SensitivityCount {
    double threshold = 0.0;
    uint64_t active = 0;  // maps whose active area exceeds the threshold
    uint64_t total = 0;
    double proportion() const { return total ? double(active) / double(total) : 0.0; }
};

// Counts maps whose active-area fraction for rho is strictly above each threshold.
std::vector<SensitivityCount> sensitivity_counts(std::span<const SparseFeatureMap> maps, uint32_t rho,
                                                 std::span<const double> thresholds = kDefaultSensitivityThresholds);

}  // namespace sdsae
