#include "sdsae/kernels.hpp"

#include "sdsae/error.hpp"

#include <algorithm>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sdsae {

int set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
    return omp_get_max_threads();
#else
    (void)n;
    return 1;
#endif
}

namespace {

size_t rows_of(const SaeParams& params, std::span<const float> batch) {
    if (batch.size() % params.d() != 0)
        throw ConfigError("batch length " + std::to_string(batch.size()) + " is not a multiple of d=" +
                          std::to_string(params.d()));
    return batch.size() / params.d();
}

}  // namespace

std::vector<SparseCoeffs> encode_batch(const SaeParams& params, std::span<const float> batch, uint32_t k) {
    const size_t n = rows_of(params, batch);
    const uint32_t d = params.d();
    std::vector<SparseCoeffs> out(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < std::ptrdiff_t(n); ++b) out[size_t(b)] = encode(params, batch.subspan(size_t(b) * d, d), k);
    return out;
}

void reconstruct_batch(const SaeParams& params, std::span<const float> batch, uint32_t k, std::span<float> out) {
    const size_t n = rows_of(params, batch);
    const uint32_t d = params.d();
    if (out.size() != batch.size()) throw ConfigError("reconstruct_batch: output size mismatch");
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < std::ptrdiff_t(n); ++b) {
        const size_t off = size_t(b) * d;
        decode_into(params, encode(params, batch.subspan(off, d), k), out.subspan(off, d));
    }
}

namespace reference {

namespace {

// Full sort by (value desc, index asc) over the candidate ids; keep k, then ReLU.
std::vector<float> dense_topk(const std::vector<float>& pre, std::vector<uint32_t> candidates, uint32_t k) {
    std::stable_sort(candidates.begin(), candidates.end(), [&](uint32_t a, uint32_t b) { return pre[a] > pre[b]; });
    std::vector<float> s(pre.size(), 0.0f);
    for (size_t q = 0; q < candidates.size() && q < k; ++q)
        if (pre[candidates[q]] > 0.0f) s[candidates[q]] = pre[candidates[q]];
    return s;
}

std::vector<float> dense_pre(const SaeParams& p, const float* h) {
    const uint32_t d = p.d();
    std::vector<float> centered(d);
    for (uint32_t j = 0; j < d; ++j) centered[j] = h[j] - p.b_pre[j];
    std::vector<float> pre(p.n_f());
    for (uint32_t rho = 0; rho < p.n_f(); ++rho) {
        float acc = 0.0f;
        for (uint32_t j = 0; j < d; ++j) acc += p.encoder[size_t(rho) * d + j] * centered[j];
        pre[rho] = acc + p.b_act[rho];
    }
    return pre;
}

SparseCoeffs to_sparse(const std::vector<float>& dense) {
    SparseCoeffs s;
    s.n_f = uint32_t(dense.size());
    for (uint32_t rho = 0; rho < dense.size(); ++rho)
        if (dense[rho] > 0.0f) {
            s.indices.push_back(rho);
            s.values.push_back(dense[rho]);
        }
    return s;
}

}  // namespace

std::vector<SparseCoeffs> encode_batch(const SaeParams& params, std::span<const float> batch, uint32_t k) {
    const size_t n = rows_of(params, batch);
    std::vector<uint32_t> all(params.n_f());
    std::iota(all.begin(), all.end(), 0u);
    std::vector<SparseCoeffs> out;
    for (size_t b = 0; b < n; ++b)
        out.push_back(to_sparse(dense_topk(dense_pre(params, batch.data() + b * params.d()), all, k)));
    return out;
}

LossResult compute_loss(const SaeParams& p, std::span<const float> batch, const DeadTracker& tracker,
                        AuxTarget aux_target) {
    const size_t n = rows_of(p, batch);
    const uint32_t d = p.d(), n_f = p.n_f();
    const double g = 2.0 / double(n);
    const double alpha = p.config.alpha;

    std::vector<uint32_t> all(n_f), dead;
    std::iota(all.begin(), all.end(), 0u);
    for (uint32_t rho = 0; rho < n_f; ++rho)
        if (tracker.dead(rho)) dead.push_back(rho);

    std::vector<double> genc(size_t(n_f) * d, 0.0), gdec(size_t(n_f) * d, 0.0), gpre(d, 0.0), gact(n_f, 0.0);
    LossResult res;
    double sum_main = 0.0, sum_aux = 0.0;

    for (size_t b = 0; b < n; ++b) {
        const float* h = batch.data() + b * d;
        const auto pre = dense_pre(p, h);
        const auto s = dense_topk(pre, all, p.config.k);
        std::vector<float> s_aux(n_f, 0.0f);
        if (!dead.empty()) s_aux = dense_topk(pre, dead, p.config.k_aux);

        std::vector<double> e(d), ea(d, 0.0);
        for (uint32_t j = 0; j < d; ++j) {
            double recon = p.b_pre[j];
            for (uint32_t rho = 0; rho < n_f; ++rho) recon += double(s[rho]) * p.decoder[size_t(rho) * d + j];
            e[j] = recon - h[j];
        }
        if (!dead.empty()) {
            for (uint32_t j = 0; j < d; ++j) {
                double r = 0.0;
                for (uint32_t rho = 0; rho < n_f; ++rho) r += double(s_aux[rho]) * p.decoder[size_t(rho) * d + j];
                ea[j] = aux_target == AuxTarget::input ? r + p.b_pre[j] - h[j] : r + e[j];
            }
        }
        for (uint32_t j = 0; j < d; ++j) {
            sum_main += e[j] * e[j];
            sum_aux += ea[j] * ea[j];
        }

        // d loss / d pre, restricted to the selected (positive) support.
        std::vector<double> dpre(n_f, 0.0);
        for (uint32_t rho = 0; rho < n_f; ++rho) {
            double main_dot = 0.0, aux_dot = 0.0;
            for (uint32_t j = 0; j < d; ++j) {
                const double f = p.decoder[size_t(rho) * d + j];
                main_dot += f * e[j];
                aux_dot += f * ea[j];
            }
            if (s[rho] > 0.0f) dpre[rho] += g * main_dot;
            if (s_aux[rho] > 0.0f) dpre[rho] += g * alpha * aux_dot;
            for (uint32_t j = 0; j < d; ++j)
                gdec[size_t(rho) * d + j] += g * s[rho] * e[j] + g * alpha * s_aux[rho] * ea[j];
        }
        for (uint32_t j = 0; j < d; ++j) {
            gpre[j] += g * e[j];
            if (aux_target == AuxTarget::input && !dead.empty()) gpre[j] += g * alpha * ea[j];
        }
        for (uint32_t rho = 0; rho < n_f; ++rho) {
            gact[rho] += dpre[rho];
            for (uint32_t j = 0; j < d; ++j) {
                genc[size_t(rho) * d + j] += dpre[rho] * (double(h[j]) - p.b_pre[j]);
                gpre[j] -= dpre[rho] * p.encoder[size_t(rho) * d + j];
            }
        }
        res.codes.push_back(to_sparse(s));
        res.aux_codes.push_back(to_sparse(s_aux));
    }

    res.grads = ParamTensors(p.config);
    auto narrow = [](const std::vector<double>& src, std::vector<float>& dst) {
        for (size_t i = 0; i < src.size(); ++i) dst[i] = float(src[i]);
    };
    narrow(genc, res.grads.encoder);
    narrow(gdec, res.grads.decoder);
    narrow(gpre, res.grads.b_pre);
    narrow(gact, res.grads.b_act);
    res.main_loss = sum_main / double(n);
    res.aux_loss = sum_aux / double(n);
    res.loss = res.main_loss + alpha * res.aux_loss;
    return res;
}

}  // namespace reference

}  // namespace sdsae
