#include "sdsae/raster.hpp"

#include "sdsae/error.hpp"
#include "sdsae/shardio.hpp"

#include <cctype>
#include <fstream>

namespace sdsae {

namespace fs = std::filesystem;

namespace {

void skip_ws_and_comments(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c != EOF && std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

uint32_t read_header_int(std::istream& in, const fs::path& path) {
    skip_ws_and_comments(in);
    long v = -1;
    if (!(in >> v) || v <= 0 || v > (1L << 30)) throw FormatError(path.string() + ": malformed netpbm header");
    return uint32_t(v);
}

// Reads a P5/P6 header; returns (w, h) and leaves the stream at the pixel payload.
std::pair<uint32_t, uint32_t> read_netpbm(std::istream& in, const char* magic, const fs::path& path) {
    char m[2] = {0, 0};
    in.read(m, 2);
    if (in.gcount() != 2 || m[0] != magic[0] || m[1] != magic[1])
        throw FormatError(path.string() + ": expected " + std::string(magic, 2) + " netpbm file");
    const uint32_t w = read_header_int(in, path);
    const uint32_t h = read_header_int(in, path);
    const uint32_t maxval = read_header_int(in, path);
    if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
    in.get();  // single whitespace before payload
    return {w, h};
}

}  // namespace

void write_pgm(const GrayImage& img, const fs::path& path) {
    if (img.pixels.size() != size_t(img.h) * img.w) throw ConfigError("write_pgm: pixel count mismatch");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

GrayImage read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    auto [w, h] = read_netpbm(in, "P5", path);
    GrayImage img{h, w, std::vector<uint8_t>(size_t(h) * w)};
    in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (in.gcount() != std::streamsize(img.pixels.size())) throw FormatError(path.string() + ": truncated pixels");
    return img;
}

void write_ppm(const RgbImage& img, const fs::path& path) {
    if (img.pixels.size() != size_t(img.h) * img.w * 3) throw ConfigError("write_ppm: pixel count mismatch");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

RgbImage read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    auto [w, h] = read_netpbm(in, "P6", path);
    RgbImage img{h, w, std::vector<uint8_t>(size_t(h) * w * 3)};
    in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (in.gcount() != std::streamsize(img.pixels.size())) throw FormatError(path.string() + ": truncated pixels");
    return img;
}

Grid load_grid(const fs::path& path) {
    if (path.extension() == ".pgm") {
        const auto img = read_pgm(path);
        Grid g(img.h, img.w);
        for (size_t i = 0; i < img.pixels.size(); ++i) g.values[i] = float(img.pixels[i]) / 255.0f;
        return g;
    }
    if (path.extension() == ".sdsh") {
        auto reader = read_shard(path);
        const auto& hd = reader.header();
        if (hd.d != 1 || hd.count != 1) throw FormatError(path.string() + ": grid shard must hold one map with d=1");
        DenseFeatureMap m;
        reader.next(m);
        Grid g(hd.h, hd.w);
        g.values = std::move(m.data);
        return g;
    }
    throw FormatError(path.string() + ": unsupported grid file (expected .pgm or .sdsh)");
}

void save_grid_shard(const Grid& grid, const fs::path& path) {
    ShardHeader hd;
    hd.h = grid.h;
    hd.w = grid.w;
    hd.d = 1;
    hd.count = 1;
    DenseFeatureMap m(grid.h, grid.w, 1);
    m.data = grid.values;
    write_shard(hd, std::span<const DenseFeatureMap>(&m, 1), path);
}

}  // namespace sdsae
