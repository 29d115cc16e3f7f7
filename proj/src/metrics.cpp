#include "sdsae/metrics.hpp"

#include "binio.hpp"
#include "sdsae/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sdsae {

double explained_variance(std::span<const float> h, std::span<const float> h_prime, uint32_t d) {
    if (d == 0 || h.empty() || h.size() % d != 0) throw DataError("explained_variance: empty or ragged input");
    if (h.size() != h_prime.size()) throw ConfigError("explained_variance: h and h' differ in size");
    const size_t n = h.size() / d;
    std::vector<double> mean(d, 0.0);
    for (size_t b = 0; b < n; ++b)
        for (uint32_t j = 0; j < d; ++j) mean[j] += h[b * d + j];
    for (auto& m : mean) m /= double(n);
    double err = 0.0, var = 0.0;
    for (size_t b = 0; b < n; ++b)
        for (uint32_t j = 0; j < d; ++j) {
            const double x = h[b * d + j];
            const double r = x - h_prime[b * d + j];
            const double c = x - mean[j];
            err += r * r;
            var += c * c;
        }
    if (var == 0.0) throw DataError("explained_variance: zero total variance");
    return 1.0 - err / var;
}

namespace {

// Dot product and squared norms of two sparse codes (indices sorted).
void sparse_products(const SparseCoeffs& a, const SparseCoeffs& b, double& dot, double& na, double& nb) {
    size_t p = 0, q = 0;
    while (p < a.nnz() && q < b.nnz()) {
        if (a.indices[p] == b.indices[q]) {
            dot += double(a.values[p]) * b.values[q];
            ++p;
            ++q;
        } else if (a.indices[p] < b.indices[q]) {
            ++p;
        } else {
            ++q;
        }
    }
    for (float v : a.values) na += double(v) * v;
    for (float v : b.values) nb += double(v) * v;
}

}  // namespace

double overlap_cosine(const SparseFeatureMap& a, const SparseFeatureMap& b, OverlapMode mode) {
    if (a.h != b.h || a.w != b.w || a.n_f != b.n_f) throw ConfigError("overlap_cosine: map dimensions differ");
    if (mode == OverlapMode::flattened) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t c = 0; c < a.cells.size(); ++c) sparse_products(a.cells[c], b.cells[c], dot, na, nb);
        if (na == 0.0 || nb == 0.0) return 0.0;
        return dot / (std::sqrt(na) * std::sqrt(nb));
    }
    double sum = 0.0;
    for (size_t c = 0; c < a.cells.size(); ++c) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        sparse_products(a.cells[c], b.cells[c], dot, na, nb);
        if (na > 0.0 && nb > 0.0) sum += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    return sum / double(a.cells.size());
}

ColorSensitivity color_sensitivity(std::span<const WeightedImage> samples) {
    // Two passes: weighted mean colour, then weighted mean L1 distance to it.
    double wsum = 0.0;
    std::array<double, 3> acc{};
    auto visit = [&](auto&& fn) {
        for (const auto& s : samples) {
            if (!s.image) throw ConfigError("color_sensitivity: missing image");
            const Grid up = resample_nearest(s.activations, s.image->h, s.image->w);
            for (uint32_t y = 0; y < s.image->h; ++y)
                for (uint32_t x = 0; x < s.image->w; ++x) {
                    const double wgt = up.at(y, x);
                    if (wgt != 0.0) fn(wgt, s.image->at(y, x));
                }
        }
    };
    visit([&](double wgt, const uint8_t* px) {
        wsum += wgt;
        for (int c = 0; c < 3; ++c) acc[c] += wgt * px[c];
    });
    if (!(wsum > 0.0)) throw DataError("color_sensitivity: all activation weights are zero");
    ColorSensitivity out;
    for (int c = 0; c < 3; ++c) out.average[c] = acc[c] / wsum;
    double dist = 0.0;
    visit([&](double wgt, const uint8_t* px) {
        double l1 = 0.0;
        for (int c = 0; c < 3; ++c) l1 += std::abs(px[c] - out.average[c]);
        dist += wgt * l1;
    });
    out.distance = dist / wsum;
    return out;
}

std::vector<int8_t> locality_regions(const Grid& activations) {
    const size_t n = activations.size();
    std::vector<float> sorted(activations.values);
    std::sort(sorted.begin(), sorted.end());
    std::vector<int8_t> region(n, 0);  // 1 inside, -1 outside, 0 excluded
    for (size_t p = 0; p < n; ++p) {
        const float a = activations.values[p];
        const size_t below = size_t(std::lower_bound(sorted.begin(), sorted.end(), a) - sorted.begin());
        if (2 * below >= n && below > 0)
            region[p] = 1;
        else if (a == 0.0f)
            region[p] = -1;
    }
    return region;
}

LocalityResult locality(const RgbImage& original, const RgbImage& intervened, const Grid& activations) {
    if (original.h != intervened.h || original.w != intervened.w)
        throw ConfigError("locality: image dimensions differ");
    const auto region = locality_regions(activations);
    double in_sum = 0.0, out_sum = 0.0;
    LocalityResult r;
    for (uint32_t y = 0; y < original.h; ++y) {
        const size_t pi = size_t(y) * activations.h / original.h;
        for (uint32_t x = 0; x < original.w; ++x) {
            const size_t pj = size_t(x) * activations.w / original.w;
            const int8_t reg = region[pi * activations.w + pj];
            if (reg == 0) continue;
            const uint8_t* a = original.at(y, x);
            const uint8_t* b = intervened.at(y, x);
            double l1 = 0.0;
            for (int c = 0; c < 3; ++c) l1 += std::abs(int(a[c]) - int(b[c]));
            if (reg > 0) {
                in_sum += l1;
                ++r.inside_pixels;
            } else {
                out_sum += l1;
                ++r.outside_pixels;
            }
        }
    }
    if (r.inside_pixels) r.inside = in_sum / double(r.inside_pixels);
    if (r.outside_pixels) r.outside = out_sum / double(r.outside_pixels);
    return r;
}

double embedding_cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.values.size() != b.values.size() || a.values.empty())
        throw ConfigError("embedding_cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        dot += double(a.values[i]) * b.values[i];
        na += double(a.values[i]) * a.values[i];
        nb += double(b.values[i]) * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) throw DataError("embedding_cosine: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double pairwise_mean_cosine(std::span<const EmbeddingVector> set) {
    if (set.size() < 2) throw DataError("pairwise_mean_cosine: need at least two vectors");
    double sum = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < set.size(); ++i)
        for (size_t j = i + 1; j < set.size(); ++j) {
            sum += embedding_cosine(set[i], set[j]);
            ++pairs;
        }
    return sum / double(pairs);
}

void write_embedding(const EmbeddingVector& e, const std::filesystem::path& path) {
    if (e.values.empty()) throw ConfigError("embedding must be non-empty");
    if (e.tag.find_first_of(" \n") != std::string::npos) throw ConfigError("embedding tag must not contain spaces");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << e.values.size() << " " << e.tag << "\n";
    detail::put_span<float>(out, e.values);
    if (!out) throw IoError("write failed for " + path.string());
}

EmbeddingVector read_embedding(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing embedding header");
    std::istringstream hs(line);
    long m = 0;
    EmbeddingVector e;
    if (!(hs >> m) || m <= 0) throw FormatError(path.string() + ": bad embedding header");
    hs >> e.tag;
    e.values.resize(size_t(m));
    detail::get_span<float>(in, e.values, path.string() + " embedding");
    for (float v : e.values)
        if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite embedding value");
    return e;
}

double active_area_fraction(const SparseFeatureMap& s, uint32_t rho) {
    size_t on = 0;
    for (const auto& c : s.cells)
        if (c.get(rho) > 0.0f) ++on;
    return double(on) / double(s.cells.size());
}

std::vector<SensitivityCount> sensitivity_counts(std::span<const SparseFeatureMap> maps, uint32_t rho,
                                                 std::span<const double> thresholds) {
    std::vector<SensitivityCount> out;
    for (double t : thresholds) out.push_back({t, 0, maps.size()});
    for (const auto& m : maps) {
        const double frac = active_area_fraction(m, rho);
        for (auto& c : out)
            if (frac > c.threshold) ++c.active;
    }
    return out;
}

}  // namespace sdsae
