#pragma once

#include "sdsae/grid.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sdsae {

// 8-bit grayscale (PGM, P5) raster.
struct GrayImage {
    uint32_t h = 0;
    uint32_t w = 0;
    std::vector<uint8_t> pixels;
    bool operator==(const GrayImage&) const = default;
};

// 8-bit RGB (PPM, P6) raster, interleaved.
struct RgbImage {
    uint32_t h = 0;
    uint32_t w = 0;
    std::vector<uint8_t> pixels;  // h * w * 3

    const uint8_t* at(size_t y, size_t x) const { return pixels.data() + (y * w + x) * 3; }
    uint8_t* at(size_t y, size_t x) { return pixels.data() + (y * w + x) * 3; }
    bool operator==(const RgbImage&) const = default;
};

void write_pgm(const GrayImage& img, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);

// Float grid from a PGM (pixel / maxval) or a single-map, d=1 shard (.sdsh).
Grid load_grid(const std::filesystem::path& path);
void save_grid_shard(const Grid& grid, const std::filesystem::path& path);

}  // namespace sdsae
