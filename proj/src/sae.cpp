#include "sdsae/sae.hpp"

#include "binio.hpp"
#include "sdsae/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace sdsae {

using detail::get;
using detail::put;

void SaeConfig::validate() const {
    if (d == 0) throw ConfigError("d must be positive");
    if (n_f == 0) throw ConfigError("n_f must be positive");
    if (k == 0 || k > n_f)
        throw ConfigError("k must satisfy 0 < k <= n_f (k=" + std::to_string(k) + ", n_f=" + std::to_string(n_f) + ")");
    if (k_aux == 0 || k_aux > n_f)
        throw ConfigError("k_aux must satisfy 0 < k_aux <= n_f (k_aux=" + std::to_string(k_aux) +
                          ", n_f=" + std::to_string(n_f) + ")");
    if (!(alpha >= 0.0f) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
}

float SparseCoeffs::get(uint32_t feature) const {
    auto it = std::lower_bound(indices.begin(), indices.end(), feature);
    if (it == indices.end() || *it != feature) return 0.0f;
    return values[size_t(it - indices.begin())];
}

SaeParams::SaeParams(const SaeConfig& cfg)
    : config(cfg),
      encoder(size_t(cfg.n_f) * cfg.d, 0.0f),
      b_pre(cfg.d, 0.0f),
      b_act(cfg.n_f, 0.0f),
      decoder(size_t(cfg.n_f) * cfg.d, 0.0f) {}

SparseCoeffs topk_relu(std::span<const float> pre, uint32_t k) {
    SparseCoeffs out;
    out.n_f = uint32_t(pre.size());
    k = std::min<uint32_t>(k, uint32_t(pre.size()));
    if (k == 0) return out;

    thread_local std::vector<uint32_t> order;
    order.resize(pre.size());
    std::iota(order.begin(), order.end(), 0u);
    auto before = [&](uint32_t a, uint32_t b) { return pre[a] > pre[b] || (pre[a] == pre[b] && a < b); };
    if (k < pre.size()) std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), before);

    auto sel = std::span(order).first(k);
    std::sort(sel.begin(), sel.end());
    out.indices.reserve(k);
    out.values.reserve(k);
    for (uint32_t idx : sel) {
        if (pre[idx] > 0.0f) {
            out.indices.push_back(idx);
            out.values.push_back(pre[idx]);
        }
    }
    return out;
}

void pre_activations(const SaeParams& params, std::span<const float> h, std::span<float> out) {
    const uint32_t d = params.d();
    thread_local std::vector<float> centered;
    centered.resize(d);
    for (uint32_t c = 0; c < d; ++c) centered[c] = h[c] - params.b_pre[c];
    for (uint32_t rho = 0; rho < params.n_f(); ++rho) {
        const float* row = params.encoder.data() + size_t(rho) * d;
        float acc = 0.0f;
        for (uint32_t c = 0; c < d; ++c) acc += row[c] * centered[c];
        out[rho] = acc + params.b_act[rho];
    }
}

SparseCoeffs encode(const SaeParams& params, std::span<const float> h, uint32_t k) {
    if (h.size() != params.d())
        throw ConfigError("encode: input has dimension " + std::to_string(h.size()) + ", expected " +
                          std::to_string(params.d()));
    if (k == 0 || k > params.n_f()) throw ConfigError("encode: k out of range");
    thread_local std::vector<float> pre;
    pre.resize(params.n_f());
    pre_activations(params, h, pre);
    return topk_relu(pre, k);
}

void decode_into(const SaeParams& params, const SparseCoeffs& s, std::span<float> out) {
    if (s.n_f != params.n_f())
        throw ConfigError("decode: code has n_f=" + std::to_string(s.n_f) + ", expected " +
                          std::to_string(params.n_f()));
    if (out.size() != params.d()) throw ConfigError("decode: output has wrong dimension");
    std::copy(params.b_pre.begin(), params.b_pre.end(), out.begin());
    for (size_t n = 0; n < s.nnz(); ++n) {
        const auto f = params.feature(s.indices[n]);
        const float c = s.values[n];
        for (uint32_t j = 0; j < params.d(); ++j) out[j] += c * f[j];
    }
}

std::vector<float> decode(const SaeParams& params, const SparseCoeffs& s) {
    std::vector<float> out(params.d());
    decode_into(params, s, out);
    return out;
}

std::pair<std::vector<float>, SparseCoeffs> reconstruct(const SaeParams& params, std::span<const float> h,
                                                        uint32_t k) {
    auto s = encode(params, h, k);
    auto out = decode(params, s);
    return {std::move(out), std::move(s)};
}

double max_decoder_norm_error(const SaeParams& params) {
    double worst = 0.0;
    for (uint32_t rho = 0; rho < params.n_f(); ++rho) {
        double sq = 0.0;
        for (float v : params.feature(rho)) sq += double(v) * v;
        worst = std::max(worst, std::abs(std::sqrt(sq) - 1.0));
    }
    return worst;
}

void save_checkpoint(const SaeParams& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const auto& c = params.config;
    out.write("SDCK", 4);
    put<uint32_t>(out, kCheckpointVersion);
    put<uint32_t>(out, c.d);
    put<uint32_t>(out, c.n_f);
    put<uint32_t>(out, c.k);
    put<uint32_t>(out, c.k_aux);
    put<float>(out, c.alpha);
    detail::put_span<float>(out, params.encoder);
    detail::put_span<float>(out, params.b_pre);
    detail::put_span<float>(out, params.b_act);
    // W_dec on disk is d x n_f row-major.
    std::vector<float> row(c.n_f);
    for (uint32_t j = 0; j < c.d; ++j) {
        for (uint32_t rho = 0; rho < c.n_f; ++rho) row[rho] = params.decoder[size_t(rho) * c.d + j];
        detail::put_span<float>(out, row);
    }
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

SaeParams load_checkpoint(const std::filesystem::path& path, bool verify_norms) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "SDCK", 4) != 0) throw FormatError(path.string() + ": bad magic");
    const auto version = get<uint32_t>(in, "checkpoint header");
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    SaeConfig c;
    c.d = get<uint32_t>(in, "checkpoint header");
    c.n_f = get<uint32_t>(in, "checkpoint header");
    c.k = get<uint32_t>(in, "checkpoint header");
    c.k_aux = get<uint32_t>(in, "checkpoint header");
    c.alpha = get<float>(in, "checkpoint header");
    c.validate();

    SaeParams p(c);
    detail::get_span<float>(in, p.encoder, "encoder weights");
    detail::get_span<float>(in, p.b_pre, "b_pre");
    detail::get_span<float>(in, p.b_act, "b_act");
    std::vector<float> row(c.n_f);
    for (uint32_t j = 0; j < c.d; ++j) {
        detail::get_span<float>(in, row, "decoder weights");
        for (uint32_t rho = 0; rho < c.n_f; ++rho) p.decoder[size_t(rho) * c.d + j] = row[rho];
    }
    for (const auto* v : {&p.encoder, &p.b_pre, &p.b_act, &p.decoder})
        for (float x : *v)
            if (!std::isfinite(x)) throw FormatError(path.string() + ": non-finite parameter");
    if (verify_norms) {
        const double err = max_decoder_norm_error(p);
        if (err > kDecoderNormTolerance)
            throw FormatError(path.string() + ": decoder feature norms deviate from 1 by " + std::to_string(err));
    }
    return p;
}

}  // namespace sdsae
