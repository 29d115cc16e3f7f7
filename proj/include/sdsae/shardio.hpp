#pragma once

#include "sdsae/grid.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sdsae {

inline constexpr char kShardMagic[4] = {'S', 'D', 'S', 'H'};
inline constexpr uint32_t kShardVersion = 1;
inline constexpr uint8_t kDtypeF32 = 1;
inline constexpr size_t kShardHeaderBytes = 32;

struct ShardHeader {
    uint32_t version = kShardVersion;
    uint32_t h = 0;
    uint32_t w = 0;
    uint32_t d = 0;
    uint64_t count = 0;
    uint8_t dtype = kDtypeF32;

    uint64_t vectors_per_map() const { return uint64_t(h) * w; }
    uint64_t floats_per_map() const { return uint64_t(h) * w * d; }
    uint64_t payload_bytes() const { return count * floats_per_map() * sizeof(float); }
    bool operator==(const ShardHeader&) const = default;
};

// Writes header + maps. Returns the number of bytes written.
uint64_t write_shard(const ShardHeader& header, std::span<const DenseFeatureMap> maps,
                     const std::filesystem::path& path);

// Sequential reader over the maps of one shard. Holds one map in memory at a time.
class ShardReader {
public:
    explicit ShardReader(const std::filesystem::path& path);

    const ShardHeader& header() const { return header_; }
    uint64_t remaining() const { return header_.count - next_; }

    // Reads the next map into `out`; false once all `count` maps were consumed.
    bool next(DenseFeatureMap& out);
    // Raw access: reads `n` consecutive position vectors (n * d floats).
    void read_vectors(std::span<float> out);
    void seek_vector(uint64_t index);

private:
    std::filesystem::path path_;
    std::ifstream in_;
    ShardHeader header_;
    uint64_t next_ = 0;
};

ShardReader read_shard(const std::filesystem::path& path);
ShardHeader read_shard_header(const std::filesystem::path& path);

// Lexicographically sorted *.sdsh files of a dataset directory (or the file itself).
std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir_or_file);

// Streams per-position vectors (length d) of a list of shards, in storage order
// (shard, map, i, j), restricted to the global vector index range [begin, end).
class PositionStream {
public:
    PositionStream(std::vector<std::filesystem::path> shards, uint64_t begin, uint64_t end);
    explicit PositionStream(std::vector<std::filesystem::path> shards);

    uint32_t dim() const { return d_; }
    uint64_t total() const { return total_; }
    uint64_t size() const { return end_ - begin_; }
    bool next(std::span<float> out);

private:
    void open_at(uint64_t global);

    std::vector<std::filesystem::path> shards_;
    std::vector<uint64_t> offsets_;  // first global vector index of each shard
    uint32_t d_ = 0;
    uint64_t total_ = 0;
    uint64_t begin_ = 0;
    uint64_t end_ = 0;
    uint64_t pos_ = 0;
    size_t shard_ = 0;
    std::unique_ptr<ShardReader> reader_;
};

inline constexpr size_t kDefaultShuffleBuffer = 1u << 20;

// Windowed shuffle over a PositionStream. Emits each stored vector exactly once;
// the order is a deterministic function of the seed.
class ShuffleStream {
public:
    ShuffleStream(PositionStream source, size_t buffer_size, uint64_t seed);

    uint32_t dim() const { return source_.dim(); }
    uint64_t size() const { return source_.size(); }
    bool next(std::span<float> out);

private:
    void fill();

    PositionStream source_;
    size_t capacity_;
    std::mt19937_64 rng_;
    std::vector<float> buffer_;
    size_t filled_ = 0;
    bool draining_ = false;
    std::vector<float> incoming_;
};

ShuffleStream shuffle_stream(const std::vector<std::filesystem::path>& shards, size_t buffer_size,
                             uint64_t seed);

// Plain-text dataset manifest: block name, prompt-source tag, and per-shard CRC-32.
struct ManifestEntry {
    std::string file;
    uint32_t crc32 = 0;
    uint64_t count = 0;
    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::string block;
    std::string source;
    std::vector<ManifestEntry> shards;
    bool operator==(const DatasetManifest&) const = default;
};

inline constexpr const char* kManifestName = "MANIFEST";

uint32_t file_crc32(const std::filesystem::path& path);
DatasetManifest build_manifest(const std::filesystem::path& dir, const std::string& block,
                               const std::string& source);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);
// Throws FormatError when a listed shard is missing or its checksum differs.
void verify_manifest(const std::filesystem::path& dir);

}  // namespace sdsae
