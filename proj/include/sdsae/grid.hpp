#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace sdsae {

// h x w x d float tensor, row-major in (i, j, channel) order.
struct DenseFeatureMap {
    uint32_t h = 0;
    uint32_t w = 0;
    uint32_t d = 0;
    std::vector<float> data;

    DenseFeatureMap() = default;
    DenseFeatureMap(uint32_t h_, uint32_t w_, uint32_t d_)
        : h(h_), w(w_), d(d_), data(size_t(h_) * w_ * d_, 0.0f) {}

    size_t cells() const { return size_t(h) * w; }
    std::span<float> cell(size_t i, size_t j) { return {data.data() + (i * w + j) * d, d}; }
    std::span<const float> cell(size_t i, size_t j) const { return {data.data() + (i * w + j) * d, d}; }
    std::span<float> cell(size_t c) { return {data.data() + c * d, d}; }
    std::span<const float> cell(size_t c) const { return {data.data() + c * d, d}; }

    bool operator==(const DenseFeatureMap&) const = default;
};

// h x w scalar grid (spatial weights, masks, single-feature activations).
struct Grid {
    uint32_t h = 0;
    uint32_t w = 0;
    std::vector<float> values;

    Grid() = default;
    Grid(uint32_t h_, uint32_t w_, float fill = 0.0f) : h(h_), w(w_), values(size_t(h_) * w_, fill) {}

    size_t size() const { return values.size(); }
    float& at(size_t i, size_t j) { return values[i * w + j]; }
    float at(size_t i, size_t j) const { return values[i * w + j]; }

    bool operator==(const Grid&) const = default;
};

// Nearest-neighbour resample of a grid onto a target resolution.
Grid resample_nearest(const Grid& src, uint32_t h, uint32_t w);

}  // namespace sdsae
