#include "sdsae/shardio.hpp"

#include "binio.hpp"
#include "sdsae/error.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sdsae {

namespace fs = std::filesystem;
using detail::get;
using detail::put;

namespace {

void check_header(const ShardHeader& hd, const std::string& where) {
    if (hd.h == 0 || hd.w == 0 || hd.d == 0) throw ConfigError(where + ": h, w, d must be positive");
    if (hd.count == 0) throw ConfigError(where + ": shard must hold at least one map");
    if (hd.dtype != kDtypeF32) throw FormatError(where + ": unsupported dtype " + std::to_string(hd.dtype));
}

ShardHeader parse_header(std::istream& in, const std::string& where) {
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4) throw FormatError(where + ": truncated header");
    if (std::memcmp(magic, kShardMagic, 4) != 0) throw FormatError(where + ": bad magic");
    ShardHeader hd;
    hd.version = get<uint32_t>(in, "header");
    if (hd.version != kShardVersion)
        throw FormatError(where + ": unsupported version " + std::to_string(hd.version));
    hd.h = get<uint32_t>(in, "header");
    hd.w = get<uint32_t>(in, "header");
    hd.d = get<uint32_t>(in, "header");
    hd.count = get<uint64_t>(in, "header");
    hd.dtype = get<uint8_t>(in, "header");
    char reserved[3];
    in.read(reserved, 3);
    if (in.gcount() != 3) throw FormatError(where + ": truncated header");
    if (hd.dtype != kDtypeF32) throw FormatError(where + ": unsupported dtype " + std::to_string(hd.dtype));
    if (hd.h == 0 || hd.w == 0 || hd.d == 0 || hd.count == 0)
        throw FormatError(where + ": zero dimension in header");
    return hd;
}

}  // namespace

uint64_t write_shard(const ShardHeader& header, std::span<const DenseFeatureMap> maps, const fs::path& path) {
    check_header(header, path.string());
    if (header.count != maps.size())
        throw ConfigError("write_shard: header count " + std::to_string(header.count) + " but " +
                          std::to_string(maps.size()) + " maps given");
    for (const auto& m : maps) {
        if (m.h != header.h || m.w != header.w || m.d != header.d || m.data.size() != header.floats_per_map())
            throw ConfigError("write_shard: map dimensions differ from header");
        for (float v : m.data)
            if (!std::isfinite(v)) throw DataError("write_shard: non-finite value in feature map");
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kShardMagic, 4);
    put<uint32_t>(out, header.version);
    put<uint32_t>(out, header.h);
    put<uint32_t>(out, header.w);
    put<uint32_t>(out, header.d);
    put<uint64_t>(out, header.count);
    put<uint8_t>(out, header.dtype);
    const char reserved[3] = {0, 0, 0};
    out.write(reserved, 3);
    for (const auto& m : maps) detail::put_span<float>(out, m.data);
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
    return kShardHeaderBytes + header.payload_bytes();
}

ShardReader::ShardReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open shard " + path.string());
    header_ = parse_header(in_, path.string());
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path.string());
    if (size < kShardHeaderBytes + header_.payload_bytes())
        throw FormatError(path.string() + ": truncated payload (" + std::to_string(size) + " bytes, expected " +
                          std::to_string(kShardHeaderBytes + header_.payload_bytes()) + ")");
}

bool ShardReader::next(DenseFeatureMap& out) {
    if (next_ >= header_.count) return false;
    if (out.h != header_.h || out.w != header_.w || out.d != header_.d)
        out = DenseFeatureMap(header_.h, header_.w, header_.d);
    detail::get_span<float>(in_, out.data, path_.string() + " payload");
    ++next_;
    return true;
}

void ShardReader::read_vectors(std::span<float> out) {
    detail::get_span<float>(in_, out, path_.string() + " payload");
}

void ShardReader::seek_vector(uint64_t index) {
    in_.clear();
    in_.seekg(std::streamoff(kShardHeaderBytes + index * header_.d * sizeof(float)));
    next_ = index / header_.vectors_per_map();
}

ShardReader read_shard(const fs::path& path) { return ShardReader(path); }

ShardHeader read_shard_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open shard " + path.string());
    return parse_header(in, path.string());
}

std::vector<fs::path> list_shards(const fs::path& dir_or_file) {
    std::error_code ec;
    if (fs::is_regular_file(dir_or_file, ec)) return {dir_or_file};
    if (!fs::is_directory(dir_or_file, ec)) throw IoError("no such dataset: " + dir_or_file.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir_or_file))
        if (e.is_regular_file() && e.path().extension() == ".sdsh") out.push_back(e.path());
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    return out;
}

PositionStream::PositionStream(std::vector<fs::path> shards) : PositionStream(std::move(shards), 0, UINT64_MAX) {}

PositionStream::PositionStream(std::vector<fs::path> shards, uint64_t begin, uint64_t end)
    : shards_(std::move(shards)) {
    if (shards_.empty()) throw DataError("empty dataset: no shards");
    for (const auto& p : shards_) {
        const auto hd = read_shard_header(p);
        if (d_ == 0) d_ = hd.d;
        if (hd.d != d_)
            throw ConfigError("mixed vector dimension across shards: " + std::to_string(d_) + " vs " +
                              std::to_string(hd.d) + " in " + p.string());
        offsets_.push_back(total_);
        total_ += hd.count * hd.vectors_per_map();
    }
    begin_ = std::min(begin, total_);
    end_ = std::clamp(end, begin_, total_);
    pos_ = begin_;
    if (pos_ < end_) open_at(pos_);
}

void PositionStream::open_at(uint64_t global) {
    shard_ = size_t(std::upper_bound(offsets_.begin(), offsets_.end(), global) - offsets_.begin()) - 1;
    reader_ = std::make_unique<ShardReader>(shards_[shard_]);
    reader_->seek_vector(global - offsets_[shard_]);
}

bool PositionStream::next(std::span<float> out) {
    if (pos_ >= end_) return false;
    if (out.size() != d_) throw ConfigError("position buffer has wrong dimension");
    const uint64_t shard_end =
        shard_ + 1 < offsets_.size() ? offsets_[shard_ + 1] : total_;
    if (pos_ >= shard_end) open_at(pos_);
    reader_->read_vectors(out);
    ++pos_;
    return true;
}

ShuffleStream::ShuffleStream(PositionStream source, size_t buffer_size, uint64_t seed)
    : source_(std::move(source)), capacity_(std::max<size_t>(buffer_size, 1)), rng_(seed) {
    incoming_.resize(source_.dim());
}

void ShuffleStream::fill() {
    const size_t d = source_.dim();
    const size_t want = size_t(std::min<uint64_t>(capacity_, source_.size()));
    buffer_.resize(want * d);
    while (filled_ < want && source_.next(std::span<float>(buffer_.data() + filled_ * d, d))) ++filled_;
}

bool ShuffleStream::next(std::span<float> out) {
    const size_t d = source_.dim();
    if (out.size() != d) throw ConfigError("shuffle buffer has wrong dimension");
    if (buffer_.empty()) fill();
    if (filled_ == 0) return false;

    std::uniform_int_distribution<size_t> pick(0, filled_ - 1);
    const size_t slot = pick(rng_);
    float* slot_ptr = buffer_.data() + slot * d;
    std::copy(slot_ptr, slot_ptr + d, out.begin());

    if (!draining_ && source_.next(incoming_)) {
        std::copy(incoming_.begin(), incoming_.end(), slot_ptr);
    } else {
        // Source exhausted: move the last live entry into the hole.
        draining_ = true;
        --filled_;
        if (slot != filled_) {
            const float* last = buffer_.data() + filled_ * d;
            std::copy(last, last + d, slot_ptr);
        }
    }
    return true;
}

ShuffleStream shuffle_stream(const std::vector<fs::path>& shards, size_t buffer_size, uint64_t seed) {
    return ShuffleStream(PositionStream(shards), buffer_size, seed);
}

uint32_t file_crc32(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    uLong crc = crc32(0L, Z_NULL, 0);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), std::streamsize(buf.size()));
        const auto n = in.gcount();
        if (n > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), uInt(n));
    }
    return uint32_t(crc);
}

DatasetManifest build_manifest(const fs::path& dir, const std::string& block, const std::string& source) {
    DatasetManifest m{block, source, {}};
    for (const auto& p : list_shards(dir))
        m.shards.push_back({p.filename().string(), file_crc32(p), read_shard_header(p).count});
    return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& dir) {
    std::ofstream out(dir / kManifestName, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << "block " << m.block << "\n";
    out << "source " << m.source << "\n";
    for (const auto& s : m.shards) {
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", s.crc32);
        out << "shard " << s.file << " " << crc << " " << s.count << "\n";
    }
    if (!out) throw IoError("manifest write failed in " + dir.string());
}

DatasetManifest read_manifest(const fs::path& dir) {
    std::ifstream in(dir / kManifestName);
    if (!in) throw IoError("no manifest in " + dir.string());
    DatasetManifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "block") {
            ls >> m.block;
        } else if (key == "source") {
            ls >> m.source;
        } else if (key == "shard") {
            ManifestEntry e;
            std::string crc;
            if (!(ls >> e.file >> crc >> e.count))
                throw FormatError("manifest line " + std::to_string(lineno) + ": expected 'shard <file> <crc32> <count>'");
            e.crc32 = uint32_t(std::stoul(crc, nullptr, 16));
            m.shards.push_back(e);
        } else {
            throw FormatError("manifest line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }
    return m;
}

void verify_manifest(const fs::path& dir) {
    for (const auto& s : read_manifest(dir).shards) {
        const auto p = dir / s.file;
        if (!fs::exists(p)) throw FormatError("manifest lists missing shard " + s.file);
        if (file_crc32(p) != s.crc32) throw FormatError("checksum mismatch for shard " + s.file);
    }
}

}  // namespace sdsae
