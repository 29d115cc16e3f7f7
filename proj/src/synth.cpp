#include "sdsae/synth.hpp"

#include "sdsae/error.hpp"
#include "sdsae/featmap.hpp"
#include "sdsae/rng.hpp"
#include "sdsae/shardio.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sdsae {

namespace {

double row_dot(const float* a, const float* b, uint32_t d) {
    double s = 0.0;
    for (uint32_t j = 0; j < d; ++j) s += double(a[j]) * b[j];
    return s;
}

void normalize(float* v, uint32_t d) {
    const double n = std::sqrt(row_dot(v, v, d));
    for (uint32_t j = 0; j < d; ++j) v[j] = float(v[j] / n);
}

}  // namespace

GroundTruthDictionary gen_dictionary(uint32_t d, uint32_t n_true, uint64_t seed, bool orthogonal) {
    if (d == 0 || n_true == 0) throw ConfigError("gen_dictionary: d and n_true must be positive");
    if (orthogonal && n_true > d) throw ConfigError("gen_dictionary: orthogonal atoms need n_true <= d");
    GroundTruthDictionary dict;
    dict.d = d;
    dict.n_true = n_true;
    dict.atoms.resize(size_t(n_true) * d);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (uint32_t i = 0; i < n_true; ++i) {
        float* a = dict.atoms.data() + size_t(i) * d;
        do {
            for (uint32_t j = 0; j < d; ++j) a[j] = normal(rng);
            if (orthogonal)
                for (int pass = 0; pass < 2; ++pass)
                    for (uint32_t p = 0; p < i; ++p) {
                        const float* b = dict.atoms.data() + size_t(p) * d;
                        const double c = row_dot(a, b, d);
                        for (uint32_t j = 0; j < d; ++j) a[j] = float(a[j] - c * b[j]);
                    }
        } while (row_dot(a, a, d) < 1e-12);
        normalize(a, d);
    }
    for (uint32_t i = 0; i < n_true; ++i)
        for (uint32_t p = i + 1; p < n_true; ++p)
            dict.max_abs_cosine = std::max(
                dict.max_abs_cosine, std::abs(row_dot(dict.atoms.data() + size_t(i) * d, dict.atoms.data() + size_t(p) * d, d)));
    return dict;
}

SyntheticSamples gen_samples(const GroundTruthDictionary& dict, uint64_t n, uint64_t seed) {
    if (n == 0) throw ConfigError("gen_samples: n must be positive");
    if (dict.k_true == 0 || dict.k_true > dict.n_true) throw ConfigError("gen_samples: need 0 < k_true <= n_true");
    if (!(dict.coef_min > 0.0f && dict.coef_max >= dict.coef_min)) throw ConfigError("gen_samples: bad coefficient range");
    const uint32_t d = dict.d;
    SyntheticSamples out;
    out.d = d;
    out.vectors.assign(size_t(n) * d, 0.0f);
    out.codes.resize(n);

#pragma omp parallel
    {
        std::vector<uint32_t> ids(dict.n_true);
#pragma omp for schedule(static)
        for (std::ptrdiff_t si = 0; si < std::ptrdiff_t(n); ++si) {
            const size_t s = size_t(si);
            std::mt19937_64 rng(mix_seed(seed, s));
            std::iota(ids.begin(), ids.end(), 0u);
            // Partial Fisher-Yates: the first k_true slots become the chosen atoms.
            for (uint32_t q = 0; q < dict.k_true; ++q) {
                std::uniform_int_distribution<uint32_t> pick(q, dict.n_true - 1);
                std::swap(ids[q], ids[pick(rng)]);
            }
            std::sort(ids.begin(), ids.begin() + dict.k_true);
            std::uniform_real_distribution<float> coef(dict.coef_min, dict.coef_max);
            SparseCoeffs& code = out.codes[s];
            code.n_f = dict.n_true;
            float* v = out.vectors.data() + s * d;
            for (uint32_t q = 0; q < dict.k_true; ++q) {
                const float c = coef(rng);
                code.indices.push_back(ids[q]);
                code.values.push_back(c);
                const auto a = dict.atom(ids[q]);
                for (uint32_t j = 0; j < d; ++j) v[j] += c * a[j];
            }
            if (dict.noise_sigma > 0.0f) {
                std::normal_distribution<float> noise(0.0f, dict.noise_sigma);
                for (uint32_t j = 0; j < d; ++j) v[j] += noise(rng);
            }
        }
    }
    return out;
}

void write_synthetic(const SyntheticSamples& s, const std::filesystem::path& shard,
                     const std::filesystem::path& sidecar) {
    ShardHeader hd;
    hd.h = 1;
    hd.w = 1;
    hd.d = s.d;
    hd.count = s.size();
    std::vector<DenseFeatureMap> maps(s.size(), DenseFeatureMap(1, 1, s.d));
    for (size_t i = 0; i < s.size(); ++i)
        std::copy_n(s.vectors.begin() + std::ptrdiff_t(i * s.d), s.d, maps[i].data.begin());
    write_shard(hd, maps, shard);

    SparseMapWriter w(sidecar);
    for (const auto& code : s.codes) {
        SparseFeatureMap m(1, 1, code.n_f);
        m.cells[0] = code;
        w.write(m);
    }
    w.close();
}

MatchResult match_features(const SaeParams& learned, const GroundTruthDictionary& dict, double threshold) {
    if (learned.d() != dict.d) throw ConfigError("match_features: dimension mismatch");
    const uint32_t d = dict.d;
    const uint32_t n_f = learned.n_f();
    std::vector<double> fnorm(n_f);
    for (uint32_t f = 0; f < n_f; ++f) {
        const auto v = learned.feature(f);
        fnorm[f] = std::sqrt(row_dot(v.data(), v.data(), d));
    }

    struct Cand {
        double c;
        uint32_t atom, feature;
    };
    std::vector<Cand> cands;
    cands.reserve(size_t(dict.n_true) * n_f);
    for (uint32_t a = 0; a < dict.n_true; ++a)
        for (uint32_t f = 0; f < n_f; ++f) {
            const double c = fnorm[f] > 0.0 ? std::abs(row_dot(dict.atom(a).data(), learned.feature(f).data(), d)) / fnorm[f] : 0.0;
            cands.push_back({c, a, f});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        if (x.c != y.c) return x.c > y.c;
        if (x.atom != y.atom) return x.atom < y.atom;
        return x.feature < y.feature;
    });

    std::vector<char> atom_used(dict.n_true, 0), feat_used(n_f, 0);
    MatchResult r;
    r.pairs.resize(dict.n_true);
    for (uint32_t a = 0; a < dict.n_true; ++a) r.pairs[a] = {a, UINT32_MAX, 0.0};
    for (const auto& c : cands) {
        if (atom_used[c.atom] || feat_used[c.feature]) continue;
        atom_used[c.atom] = feat_used[c.feature] = 1;
        r.pairs[c.atom] = {c.atom, c.feature, c.c};
    }
    size_t hit = 0;
    for (const auto& p : r.pairs)
        if (p.abs_cosine >= threshold) ++hit;
    r.recovery_rate = double(hit) / double(dict.n_true);
    return r;
}

}  // namespace sdsae
