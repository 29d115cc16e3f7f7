#pragma once

// Shared helpers for the unit and acceptance tests: temporary directories,
// random instance generators and brute-force oracles. The oracles are written
// independently of the library (dense, serial, double precision) on purpose.

#include "sdsae/featmap.hpp"
#include "sdsae/grid.hpp"
#include "sdsae/raster.hpp"
#include "sdsae/riebench.hpp"
#include "sdsae/sae.hpp"
#include "sdsae/train.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace testing {

namespace fs = std::filesystem;
using namespace sdsae;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<uint64_t> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("sdsae_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::vector<float> rand_vec(std::mt19937_64& rng, size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline std::vector<float> gauss_vec(std::mt19937_64& rng, size_t n, float sigma = 1.0f) {
    std::normal_distribution<float> g(0.0f, sigma);
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

// Random SAE with unit decoder features, random encoder and biases.
inline SaeParams random_params(uint32_t d, uint32_t n_f, uint32_t k, uint64_t seed, float bias_scale = 0.1f) {
    std::mt19937_64 rng(seed);
    SaeConfig cfg{d, n_f, k, std::min<uint32_t>(n_f, 4), 1.0f / 32.0f};
    SaeParams p(cfg);
    p.encoder = gauss_vec(rng, size_t(n_f) * d, 1.0f / std::sqrt(float(d)));
    p.decoder = gauss_vec(rng, size_t(n_f) * d);
    for (uint32_t r = 0; r < n_f; ++r) {
        double ss = 0.0;
        for (float x : p.feature(r)) ss += double(x) * x;
        const double inv = 1.0 / std::sqrt(ss);
        for (float& x : p.feature(r)) x = float(x * inv);
    }
    p.b_pre = rand_vec(rng, d, -bias_scale, bias_scale);
    p.b_act = rand_vec(rng, n_f, -bias_scale, bias_scale);
    return p;
}

inline DenseFeatureMap random_dense(std::mt19937_64& rng, uint32_t h, uint32_t w, uint32_t d) {
    DenseFeatureMap m(h, w, d);
    m.data = gauss_vec(rng, m.data.size());
    return m;
}

// Random sparse map with up to `k` positive entries per cell.
inline SparseFeatureMap random_sparse(std::mt19937_64& rng, uint32_t h, uint32_t w, uint32_t n_f, uint32_t k,
                                      double empty_prob = 0.1) {
    SparseFeatureMap s(h, w, n_f);
    std::uniform_real_distribution<float> val(0.05f, 3.0f);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<uint32_t> cnt(1, k);
    for (auto& c : s.cells) {
        if (u(rng) < empty_prob) continue;
        std::vector<uint32_t> ids(n_f);
        std::iota(ids.begin(), ids.end(), 0u);
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(std::min(cnt(rng), n_f));
        std::sort(ids.begin(), ids.end());
        c.indices = ids;
        for (size_t q = 0; q < ids.size(); ++q) c.values.push_back(val(rng));
    }
    return s;
}

inline Grid random_mask_grid(std::mt19937_64& rng, uint32_t h, uint32_t w, double p = 0.4) {
    Grid g(h, w);
    std::bernoulli_distribution b(p);
    for (auto& v : g.values) v = b(rng) ? 1.0f : 0.0f;
    if (std::all_of(g.values.begin(), g.values.end(), [](float v) { return v == 0.0f; })) g.values[0] = 1.0f;
    return g;
}

inline RgbImage random_image(std::mt19937_64& rng, uint32_t h, uint32_t w) {
    RgbImage img;
    img.h = h;
    img.w = w;
    img.pixels.resize(size_t(h) * w * 3);
    std::uniform_int_distribution<int> px(0, 255);
    for (auto& p : img.pixels) p = uint8_t(px(rng));
    return img;
}

inline double rel_diff(double a, double b) {
    const double den = std::max(std::abs(a), std::abs(b));
    return den == 0.0 ? 0.0 : std::abs(a - b) / den;
}

// ---------------------------------------------------------------- oracles

namespace oracle {

// Full sort by (value desc, index asc), take k, keep positives, report by index.
inline std::map<uint32_t, float> topk_relu(const std::vector<float>& pre, uint32_t k) {
    std::vector<std::pair<float, uint32_t>> v;
    for (uint32_t i = 0; i < pre.size(); ++i) v.push_back({pre[i], i});
    std::sort(v.begin(), v.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    std::map<uint32_t, float> out;
    for (uint32_t i = 0; i < std::min<size_t>(k, v.size()); ++i)
        if (v[i].first > 0.0f) out[v[i].second] = v[i].first;
    return out;
}

inline std::vector<double> pre_activations(const SaeParams& p, const std::vector<float>& h) {
    std::vector<double> pre(p.n_f());
    for (uint32_t r = 0; r < p.n_f(); ++r) {
        double acc = p.b_act[r];
        for (uint32_t j = 0; j < p.d(); ++j) acc += double(p.encoder[size_t(r) * p.d() + j]) * (double(h[j]) - p.b_pre[j]);
        pre[r] = acc;
    }
    return pre;
}

// W_dec as a dense d x n_f matrix times a dense coefficient vector.
inline std::vector<double> decode_dense(const SaeParams& p, const std::vector<double>& s) {
    std::vector<double> out(p.d());
    for (uint32_t j = 0; j < p.d(); ++j) {
        double acc = p.b_pre[j];
        for (uint32_t r = 0; r < p.n_f(); ++r) acc += double(p.decoder[size_t(r) * p.d() + j]) * s[r];
        out[j] = acc;
    }
    return out;
}

inline std::vector<double> dense_of(const SparseCoeffs& s) {
    std::vector<double> v(s.n_f, 0.0);
    for (size_t q = 0; q < s.nnz(); ++q) v[s.indices[q]] = s.values[q];
    return v;
}

// Loss with the TopK supports held fixed: s_rho = pre_rho on `main[b]`,
// s_aux = pre on `aux[b]`. `frozen_err[b]` is h' - h for the residual target.
struct FixedSupport {
    std::vector<std::vector<uint32_t>> main;
    std::vector<std::vector<uint32_t>> aux;
    std::vector<std::vector<double>> frozen_err;
};

inline double loss_fixed(const SaeParams& p, const std::vector<float>& batch, const FixedSupport& sup, AuxTarget target,
                         bool any_dead) {
    const uint32_t d = p.d();
    const size_t n = batch.size() / d;
    double total = 0.0;
    for (size_t b = 0; b < n; ++b) {
        std::vector<float> h(batch.begin() + std::ptrdiff_t(b * d), batch.begin() + std::ptrdiff_t((b + 1) * d));
        const auto pre = pre_activations(p, h);
        std::vector<double> s(p.n_f(), 0.0), sa(p.n_f(), 0.0);
        for (auto r : sup.main[b]) s[r] = pre[r];
        for (auto r : sup.aux[b]) sa[r] = pre[r];
        const auto rec = decode_dense(p, s);
        double l = 0.0;
        for (uint32_t j = 0; j < d; ++j) l += (h[j] - rec[j]) * (h[j] - rec[j]);
        if (any_dead) {
            auto ra = decode_dense(p, sa);
            double la = 0.0;
            for (uint32_t j = 0; j < d; ++j) {
                const double e = target == AuxTarget::input ? ra[j] - h[j] : (ra[j] - p.b_pre[j]) + sup.frozen_err[b][j];
                la += e * e;
            }
            l += double(p.config.alpha) * la;
        }
        total += l;
    }
    return total / double(n);
}

// Largest tensor-wise relative error ||g - g_fd|| / ||g_fd|| between the analytic
// gradient of compute_loss and central differences of the fixed-support oracle.
inline double gradient_check(const SaeParams& params, const std::vector<float>& batch, const DeadTracker& tracker,
                             AuxTarget target, float eps = 1e-3f) {
    const auto res = compute_loss(params, batch, tracker, target);
    const uint32_t d = params.d();
    const size_t n = batch.size() / d;
    const bool any_dead = tracker.dead_count() > 0;
    FixedSupport sup;
    for (size_t b = 0; b < n; ++b) {
        sup.main.push_back(res.codes[b].indices);
        sup.aux.push_back(res.aux_codes[b].indices);
        std::vector<float> h(batch.begin() + std::ptrdiff_t(b * d), batch.begin() + std::ptrdiff_t((b + 1) * d));
        const auto rec = decode_dense(params, dense_of(res.codes[b]));
        std::vector<double> e(d);
        for (uint32_t j = 0; j < d; ++j) e[j] = rec[j] - h[j];
        sup.frozen_err.push_back(e);
    }

    SaeParams work = params;
    double worst = 0.0;
    auto check = [&](std::vector<float>& tensor, const std::vector<float>& analytic) {
        double num = 0.0, den = 0.0, an = 0.0;
        for (size_t i = 0; i < tensor.size(); ++i) {
            const float x = tensor[i];
            const float xp = x + eps, xm = x - eps;
            tensor[i] = xp;
            const double lp = loss_fixed(work, batch, sup, target, any_dead);
            tensor[i] = xm;
            const double lm = loss_fixed(work, batch, sup, target, any_dead);
            tensor[i] = x;
            const double fd = (lp - lm) / (double(xp) - double(xm));
            num += (analytic[i] - fd) * (analytic[i] - fd);
            den += fd * fd;
            an += double(analytic[i]) * analytic[i];
        }
        if (den < 1e-20 && an < 1e-20) return;
        worst = std::max(worst, std::sqrt(num / std::max(den, an)));
    };
    check(work.encoder, res.grads.encoder);
    check(work.b_pre, res.grads.b_pre);
    check(work.b_act, res.grads.b_act);
    check(work.decoder, res.grads.decoder);
    return worst;
}

inline double explained_variance(const std::vector<float>& h, const std::vector<float>& hp, uint32_t d) {
    const size_t n = h.size() / d;
    std::vector<long double> mean(d, 0.0L);
    for (size_t b = 0; b < n; ++b)
        for (uint32_t j = 0; j < d; ++j) mean[j] += h[b * d + j];
    for (auto& m : mean) m /= (long double)n;
    long double sse = 0.0L, sst = 0.0L;
    for (size_t b = 0; b < n; ++b)
        for (uint32_t j = 0; j < d; ++j) {
            const long double e = (long double)h[b * d + j] - hp[b * d + j];
            const long double c = (long double)h[b * d + j] - mean[j];
            sse += e * e;
            sst += c * c;
        }
    return double(1.0L - sse / sst);
}

inline std::vector<double> dense_tensor(const SparseFeatureMap& s) {
    std::vector<double> t(s.cells.size() * s.n_f, 0.0);
    for (size_t c = 0; c < s.cells.size(); ++c)
        for (size_t q = 0; q < s.cells[c].nnz(); ++q) t[c * s.n_f + s.cells[c].indices[q]] = s.cells[c].values[q];
    return t;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return (na == 0 || nb == 0) ? 0.0 : dot / std::sqrt(na * nb);
}

inline double overlap_flat(const SparseFeatureMap& a, const SparseFeatureMap& b) {
    return cosine(dense_tensor(a), dense_tensor(b));
}

inline double overlap_per_position(const SparseFeatureMap& a, const SparseFeatureMap& b) {
    const auto ta = dense_tensor(a), tb = dense_tensor(b);
    double sum = 0.0;
    for (size_t c = 0; c < a.cells.size(); ++c) {
        std::vector<double> x(ta.begin() + std::ptrdiff_t(c * a.n_f), ta.begin() + std::ptrdiff_t((c + 1) * a.n_f));
        std::vector<double> y(tb.begin() + std::ptrdiff_t(c * a.n_f), tb.begin() + std::ptrdiff_t((c + 1) * a.n_f));
        sum += cosine(x, y);
    }
    return sum / double(a.cells.size());
}

// Per-pixel weights by explicit patch lookup; weighted mean and L1 spread.
inline std::pair<std::array<double, 3>, double> color(const std::vector<std::pair<const RgbImage*, Grid>>& samples) {
    std::vector<std::pair<double, std::array<double, 3>>> px;
    for (const auto& [img, g] : samples)
        for (uint32_t y = 0; y < img->h; ++y)
            for (uint32_t x = 0; x < img->w; ++x) {
                const double w = g.values[(size_t(y) * g.h / img->h) * g.w + size_t(x) * g.w / img->w];
                const uint8_t* p = img->pixels.data() + (size_t(y) * img->w + x) * 3;
                px.push_back({w, {double(p[0]), double(p[1]), double(p[2])}});
            }
    double ws = 0;
    std::array<double, 3> avg{};
    for (const auto& [w, c] : px) {
        ws += w;
        for (int i = 0; i < 3; ++i) avg[i] += w * c[i];
    }
    for (auto& a : avg) a /= ws;
    double dist = 0;
    for (const auto& [w, c] : px) dist += w * (std::abs(c[0] - avg[0]) + std::abs(c[1] - avg[1]) + std::abs(c[2] - avg[2]));
    return {avg, dist / ws};
}

// Inside: patch activation strictly larger than at least half of all patches.
// Outside: activation exactly zero.
inline std::pair<std::optional<double>, std::optional<double>> locality(const RgbImage& a, const RgbImage& b,
                                                                        const Grid& g) {
    const size_t n = g.values.size();
    std::vector<int> region(n, 0);
    for (size_t p = 0; p < n; ++p) {
        size_t smaller = 0;
        for (size_t q = 0; q < n; ++q) smaller += g.values[q] < g.values[p];
        if (smaller > 0 && smaller * 2 >= n) region[p] = 1;
        else if (g.values[p] == 0.0f) region[p] = -1;
    }
    double si = 0, so = 0;
    size_t ni = 0, no = 0;
    for (uint32_t y = 0; y < a.h; ++y)
        for (uint32_t x = 0; x < a.w; ++x) {
            const int r = region[(size_t(y) * g.h / a.h) * g.w + size_t(x) * g.w / a.w];
            double l1 = 0;
            for (int c = 0; c < 3; ++c)
                l1 += std::abs(double(a.pixels[(size_t(y) * a.w + x) * 3 + c]) - b.pixels[(size_t(y) * a.w + x) * 3 + c]);
            if (r > 0) si += l1, ++ni;
            if (r < 0) so += l1, ++no;
        }
    std::optional<double> out, in;
    if (no) out = so / double(no);
    if (ni) in = si / double(ni);
    return {out, in};
}

inline std::vector<double> masked_mean(const std::vector<SparseFeatureMap>& steps, const Grid& mask) {
    const auto& f = steps.front();
    const Grid m = resample_nearest(mask, f.h, f.w);
    std::vector<double> sum(f.n_f, 0.0);
    size_t count = 0;
    for (const auto& s : steps) {
        const auto t = dense_tensor(s);
        for (size_t c = 0; c < s.cells.size(); ++c) {
            if (m.values[c] == 0.0f) continue;
            ++count;
            for (uint32_t r = 0; r < s.n_f; ++r) sum[r] += t[c * s.n_f + r];
        }
    }
    for (auto& v : sum) v /= double(count);
    return sum;
}

struct Gamma {
    size_t block;
    uint32_t feature;
    double gamma;
};

// Eq.-style importance: per block normalisation, concatenation, sort by (-gamma, block, feature).
inline std::vector<Gamma> importance(const std::vector<BlockCoeffMeans>& blocks) {
    std::vector<Gamma> all;
    for (size_t b = 0; b < blocks.size(); ++b) {
        const double ss = std::accumulate(blocks[b].src.begin(), blocks[b].src.end(), 0.0);
        const double st = std::accumulate(blocks[b].tgt.begin(), blocks[b].tgt.end(), 0.0);
        for (uint32_t r = 0; r < blocks[b].src.size(); ++r)
            all.push_back({b, r, (ss > 0 ? blocks[b].src[r] / ss : 0.0) - (st > 0 ? blocks[b].tgt[r] / st : 0.0)});
    }
    std::sort(all.begin(), all.end(), [](const Gamma& x, const Gamma& y) {
        return std::make_tuple(-x.gamma, x.block, x.feature) < std::make_tuple(-y.gamma, y.block, y.feature);
    });
    return all;
}

struct NeuronScore {
    size_t layer;
    uint32_t neuron;
    double score;
};

inline std::vector<NeuronScore> neuron(const std::vector<NeuronLayer>& layers, const Grid& ms, const Grid& mt) {
    auto mean = [](const std::vector<DenseFeatureMap>& steps, const Grid& mask) {
        const Grid m = resample_nearest(mask, steps[0].h, steps[0].w);
        std::vector<double> s(steps[0].d, 0.0);
        double cnt = 0;
        for (const auto& st : steps)
            for (size_t c = 0; c < st.cells(); ++c)
                if (m.values[c] != 0.0f) {
                    cnt += 1;
                    for (uint32_t j = 0; j < st.d; ++j) s[j] += st.data[c * st.d + j];
                }
        for (auto& v : s) v /= cnt;
        double nn = 0;
        for (double v : s) nn += v * v;
        for (auto& v : s) v /= std::sqrt(nn);
        return s;
    };
    std::vector<NeuronScore> all;
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto a = mean(layers[l].src, ms), b = mean(layers[l].tgt, mt);
        for (uint32_t j = 0; j < a.size(); ++j) all.push_back({l, j, std::abs(a[j] - b[j])});
    }
    std::sort(all.begin(), all.end(), [](const NeuronScore& x, const NeuronScore& y) {
        return std::make_tuple(-x.score, x.layer, x.neuron) < std::make_tuple(-y.score, y.layer, y.neuron);
    });
    return all;
}

inline std::vector<double> steering(const DenseFeatureMap& s, const Grid& ms, const DenseFeatureMap& t, const Grid& mt,
                                    double strength) {
    const Grid a = resample_nearest(ms, s.h, s.w), b = resample_nearest(mt, s.h, s.w);
    std::vector<double> out(s.data.size());
    for (size_t c = 0; c < s.cells(); ++c)
        for (uint32_t j = 0; j < s.d; ++j)
            out[c * s.d + j] = strength * (a.values[c] * double(s.data[c * s.d + j]) - b.values[c] * double(t.data[c * s.d + j]));
    return out;
}

// Nearest-rank top-q selection over positive activations, ordered (a desc, id asc).
inline std::vector<uint64_t> top_quantile(const std::vector<ExampleActivation>& ex, double q) {
    std::vector<double> vals;
    for (const auto& e : ex)
        if (e.activation > 0) vals.push_back(e.activation);
    if (vals.empty()) return {};
    std::sort(vals.rbegin(), vals.rend());
    size_t keep = 0;
    while (double(keep) < q * double(vals.size()) - 1e-9) ++keep;
    keep = std::max<size_t>(keep, 1);
    const double cut = vals[keep - 1];
    std::vector<std::pair<double, uint64_t>> sel;
    for (const auto& e : ex)
        if (e.activation > 0 && e.activation >= cut) sel.push_back({-e.activation, e.id});
    std::sort(sel.begin(), sel.end());
    std::vector<uint64_t> ids;
    for (auto& [a, id] : sel) ids.push_back(id);
    return ids;
}

inline std::pair<double, uint64_t> feature_stats(const std::vector<SparseFeatureMap>& maps, uint32_t rho) {
    std::vector<double> pos;
    for (const auto& m : maps)
        for (const auto& c : m.cells)
            for (size_t q = 0; q < c.nnz(); ++q)
                if (c.indices[q] == rho && c.values[q] > 0) pos.push_back(c.values[q]);
    if (pos.empty()) return {0.0, 0};
    return {std::accumulate(pos.begin(), pos.end(), 0.0) / double(pos.size()), pos.size()};
}

}  // namespace oracle

}  // namespace testing
