#include "sdsae/train.hpp"

#include "sdsae/error.hpp"
#include "sdsae/kernels.hpp"
#include "sdsae/metrics.hpp"
#include "sdsae/rng.hpp"
#include "sdsae/shardio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

namespace sdsae {

AuxTarget parse_aux_target(const std::string& name) {
    if (name == "input") return AuxTarget::input;
    if (name == "residual") return AuxTarget::residual;
    throw ConfigError("unknown aux target '" + name + "' (expected input or residual)");
}

const char* to_string(AuxTarget t) { return t == AuxTarget::input ? "input" : "residual"; }

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be > 0");
    if (!(beta1 > 0.0f && beta1 < 1.0f)) throw ConfigError("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0f && beta2 < 1.0f)) throw ConfigError("beta2 must lie in (0, 1)");
    if (!(adam_epsilon > 0.0f)) throw ConfigError("adam_epsilon must be > 0");
    if (dead_window == 0) throw ConfigError("dead_window must be positive");
    if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in [0, 1)");
}

ParamTensors::ParamTensors(const SaeConfig& cfg)
    : encoder(size_t(cfg.n_f) * cfg.d, 0.0f),
      b_pre(cfg.d, 0.0f),
      b_act(cfg.n_f, 0.0f),
      decoder(size_t(cfg.n_f) * cfg.d, 0.0f) {}

uint32_t DeadTracker::dead_count() const {
    return uint32_t(std::count_if(last_fired_.begin(), last_fired_.end(), [&](uint64_t c) { return c >= window_; }));
}

void DeadTracker::update(std::span<const SparseCoeffs> codes, uint64_t batch_size) {
    std::vector<char> fired(last_fired_.size(), 0);
    for (const auto& c : codes)
        for (size_t n = 0; n < c.nnz(); ++n)
            if (c.values[n] > 0.0f) fired[c.indices[n]] = 1;
    for (size_t rho = 0; rho < last_fired_.size(); ++rho)
        last_fired_[rho] = fired[rho] ? 0 : last_fired_[rho] + batch_size;
}

SparseCoeffs dead_topk(std::span<const float> pre, const DeadTracker& tracker, uint32_t k_aux) {
    thread_local std::vector<float> gathered;
    thread_local std::vector<uint32_t> ids;
    gathered.clear();
    ids.clear();
    for (uint32_t rho = 0; rho < pre.size(); ++rho) {
        if (tracker.dead(rho)) {
            gathered.push_back(pre[rho]);
            ids.push_back(rho);
        }
    }
    SparseCoeffs local = topk_relu(gathered, k_aux);
    for (auto& idx : local.indices) idx = ids[idx];
    local.n_f = uint32_t(pre.size());
    return local;
}

namespace {

float dot(std::span<const float> a, const float* b) {
    float acc = 0.0f;
    for (size_t j = 0; j < a.size(); ++j) acc += a[j] * b[j];
    return acc;
}

struct FeatureHit {
    uint32_t sample;
    float coef_main;
    float coef_aux;
    float dpre;
};

}  // namespace

LossResult compute_loss(const SaeParams& params, std::span<const float> batch, const DeadTracker& tracker,
                        AuxTarget aux_target) {
    const uint32_t d = params.d();
    const uint32_t n_f = params.n_f();
    if (batch.empty() || batch.size() % d != 0)
        throw ConfigError("compute_loss: batch size " + std::to_string(batch.size()) + " is not a positive multiple of d=" +
                          std::to_string(d));
    if (tracker.size() != n_f) throw ConfigError("compute_loss: dead tracker has wrong feature count");

    const size_t n = batch.size() / d;
    const float g = 2.0f / float(n);
    const float alpha = params.config.alpha;
    const bool any_dead = tracker.dead_count() > 0;
    const uint32_t k = params.config.k;

    LossResult res;
    res.grads = ParamTensors(params.config);
    res.codes.resize(n);
    res.aux_codes.assign(n, SparseCoeffs{{}, {}, n_f});

    std::vector<float> err(n * d);
    std::vector<float> aux_err(any_dead ? n * d : 0);
    std::vector<float> bpre_part(n * d);
    std::vector<double> main_l(n, 0.0), aux_l(n, 0.0);
    std::vector<std::vector<std::pair<uint32_t, float>>> dpre_main(n), dpre_aux(n);

#pragma omp parallel
    {
        std::vector<float> pre(n_f);
        std::vector<float> recon(d);
#pragma omp for schedule(static)
        for (std::ptrdiff_t bi = 0; bi < std::ptrdiff_t(n); ++bi) {
            const size_t b = size_t(bi);
            const auto h = batch.subspan(b * d, d);
            pre_activations(params, h, pre);
            SparseCoeffs& code = res.codes[b];
            code = topk_relu(pre, k);
            decode_into(params, code, recon);

            float* e = err.data() + b * d;
            float* part = bpre_part.data() + b * d;
            double l = 0.0;
            for (uint32_t j = 0; j < d; ++j) {
                e[j] = recon[j] - h[j];
                l += double(e[j]) * e[j];
                part[j] = g * e[j];
            }
            main_l[b] = l;

            auto& dm = dpre_main[b];
            dm.clear();
            for (size_t q = 0; q < code.nnz(); ++q)
                dm.emplace_back(code.indices[q], g * dot(params.feature(code.indices[q]), e));

            auto& da = dpre_aux[b];
            da.clear();
            if (any_dead) {
                SparseCoeffs& aux = res.aux_codes[b];
                aux = dead_topk(pre, tracker, params.config.k_aux);
                float* ea = aux_err.data() + b * d;
                // input: ea = (W s_aux + b_pre) - h ; residual: ea = W s_aux - (h - h') = W s_aux + e
                for (uint32_t j = 0; j < d; ++j)
                    ea[j] = aux_target == AuxTarget::input ? params.b_pre[j] - h[j] : e[j];
                for (size_t q = 0; q < aux.nnz(); ++q) {
                    const auto f = params.feature(aux.indices[q]);
                    const float c = aux.values[q];
                    for (uint32_t j = 0; j < d; ++j) ea[j] += c * f[j];
                }
                double la = 0.0;
                for (uint32_t j = 0; j < d; ++j) la += double(ea[j]) * ea[j];
                aux_l[b] = la;
                for (size_t q = 0; q < aux.nnz(); ++q)
                    da.emplace_back(aux.indices[q], g * alpha * dot(params.feature(aux.indices[q]), ea));
                if (aux_target == AuxTarget::input)
                    for (uint32_t j = 0; j < d; ++j) part[j] += g * alpha * ea[j];
            }

            // Encoder input is h - b_pre, so b_pre also receives -W_enc^T dpre.
            for (const auto* list : {&dm, &da})
                for (const auto& [rho, dp] : *list) {
                    const auto row = params.encoder_row(rho);
                    for (uint32_t j = 0; j < d; ++j) part[j] -= dp * row[j];
                }
        }
    }

    // Inverted index feature -> hits, in sample order, so the parallel
    // per-feature reduction below is independent of the thread count.
    std::vector<uint32_t> offsets(n_f + 1, 0);
    for (size_t b = 0; b < n; ++b) {
        for (const auto& [rho, dp] : dpre_main[b]) ++offsets[rho + 1];
        for (const auto& [rho, dp] : dpre_aux[b]) ++offsets[rho + 1];
    }
    for (uint32_t rho = 0; rho < n_f; ++rho) offsets[rho + 1] += offsets[rho];
    std::vector<FeatureHit> hits(offsets[n_f]);
    {
        std::vector<uint32_t> cursor(offsets.begin(), offsets.end() - 1);
        for (size_t b = 0; b < n; ++b) {
            const auto& code = res.codes[b];
            for (size_t q = 0; q < code.nnz(); ++q)
                hits[cursor[code.indices[q]]++] = {uint32_t(b), code.values[q], 0.0f, dpre_main[b][q].second};
            const auto& aux = res.aux_codes[b];
            for (size_t q = 0; q < aux.nnz(); ++q)
                hits[cursor[aux.indices[q]]++] = {uint32_t(b), 0.0f, aux.values[q], dpre_aux[b][q].second};
        }
    }

    auto& gr = res.grads;
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t ri = 0; ri < std::ptrdiff_t(n_f); ++ri) {
        const uint32_t rho = uint32_t(ri);
        float* gdec = gr.decoder.data() + size_t(rho) * d;
        float* genc = gr.encoder.data() + size_t(rho) * d;
        float gact = 0.0f;
        for (uint32_t q = offsets[rho]; q < offsets[rho + 1]; ++q) {
            const auto& hit = hits[q];
            const float* h = batch.data() + size_t(hit.sample) * d;
            if (hit.coef_main != 0.0f) {
                const float* e = err.data() + size_t(hit.sample) * d;
                const float c = g * hit.coef_main;
                for (uint32_t j = 0; j < d; ++j) gdec[j] += c * e[j];
            }
            if (hit.coef_aux != 0.0f) {
                const float* ea = aux_err.data() + size_t(hit.sample) * d;
                const float c = g * alpha * hit.coef_aux;
                for (uint32_t j = 0; j < d; ++j) gdec[j] += c * ea[j];
            }
            for (uint32_t j = 0; j < d; ++j) genc[j] += hit.dpre * (h[j] - params.b_pre[j]);
            gact += hit.dpre;
        }
        gr.b_act[rho] = gact;
    }

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ji = 0; ji < std::ptrdiff_t(d); ++ji) {
        double acc = 0.0;
        for (size_t b = 0; b < n; ++b) acc += bpre_part[b * d + size_t(ji)];
        gr.b_pre[size_t(ji)] = float(acc);
    }

    double sum_main = 0.0, sum_aux = 0.0;
    for (size_t b = 0; b < n; ++b) {
        sum_main += main_l[b];
        sum_aux += aux_l[b];
    }
    res.main_loss = sum_main / double(n);
    res.aux_loss = sum_aux / double(n);
    res.loss = res.main_loss + double(alpha) * res.aux_loss;
    return res;
}

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 uint64_t t, const TrainConfig& cfg) {
    const double bc1 = 1.0 - std::pow(double(cfg.beta1), double(t));
    const double bc2 = 1.0 - std::pow(double(cfg.beta2), double(t));
    const float b1 = cfg.beta1, b2 = cfg.beta2;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < std::ptrdiff_t(param.size()); ++ii) {
        const size_t i = size_t(ii);
        const float gi = grad[i];
        m[i] = b1 * m[i] + (1.0f - b1) * gi;
        v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
        const double m_hat = double(m[i]) / bc1;
        const double v_hat = double(v[i]) / bc2;
        param[i] -= float(double(cfg.learning_rate) * m_hat / (std::sqrt(v_hat) + double(cfg.adam_epsilon)));
    }
}

void adam_step(SaeParams& params, const ParamTensors& grads, AdamState& state, const TrainConfig& cfg) {
    auto check = [](const char* name, const std::vector<float>& g, size_t expect) {
        if (g.size() != expect) throw ConfigError(std::string("adam_step: gradient '") + name + "' has wrong shape");
        for (size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(g[i]))
                throw NumericError(std::string("non-finite gradient in '") + name + "' at index " + std::to_string(i) +
                                   " (value " + std::to_string(g[i]) + ")");
    };
    check("encoder", grads.encoder, params.encoder.size());
    check("b_pre", grads.b_pre, params.b_pre.size());
    check("b_act", grads.b_act, params.b_act.size());
    check("decoder", grads.decoder, params.decoder.size());
    if (state.m.encoder.size() != params.encoder.size()) state = AdamState(params.config);

    ++state.t;
    adam_update(params.encoder, grads.encoder, state.m.encoder, state.v.encoder, state.t, cfg);
    adam_update(params.b_pre, grads.b_pre, state.m.b_pre, state.v.b_pre, state.t, cfg);
    adam_update(params.b_act, grads.b_act, state.m.b_act, state.v.b_act, state.t, cfg);
    adam_update(params.decoder, grads.decoder, state.m.decoder, state.v.decoder, state.t, cfg);
    renormalize_decoder(params, mix_seed(cfg.seed, state.t));
}

namespace {

void random_unit(std::span<float> out, std::mt19937_64& rng) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    double sq = 0.0;
    do {
        sq = 0.0;
        for (auto& x : out) {
            x = normal(rng);
            sq += double(x) * x;
        }
    } while (sq == 0.0);
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& x : out) x = float(x * inv);
}

constexpr double kUnitSkipTolerance = 1e-7;

}  // namespace

void renormalize_decoder(SaeParams& params, uint64_t seed) {
    const uint32_t d = params.d();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ri = 0; ri < std::ptrdiff_t(params.n_f()); ++ri) {
        auto f = params.feature(uint32_t(ri));
        double sq = 0.0;
        for (float x : f) sq += double(x) * x;
        if (sq > 0.0 && std::isfinite(sq)) {
            // Features already unit to well within tolerance are left bitwise as they are.
            if (std::abs(std::sqrt(sq) - 1.0) <= kUnitSkipTolerance) continue;
            const double inv = 1.0 / std::sqrt(sq);
            for (uint32_t j = 0; j < d; ++j) f[j] = float(f[j] * inv);
        } else {
            std::mt19937_64 rng(mix_seed(seed, uint64_t(ri)));
            random_unit(f, rng);
        }
    }
}

SaeParams init_tied(const SaeConfig& cfg, uint64_t seed) {
    cfg.validate();
    SaeParams p(cfg);
    std::mt19937_64 rng(seed);
    for (uint32_t rho = 0; rho < cfg.n_f; ++rho) random_unit(p.feature(rho), rng);
    p.encoder = p.decoder;  // row rho of W_enc == f_rho
    return p;
}

std::string to_json_line(const TrainLogEntry& e) {
    std::ostringstream os;
    os.precision(9);
    os << "{\"step\":" << e.step << ",\"loss\":" << e.loss << ",\"aux_loss\":" << e.aux_loss << ",\"ev\":";
    if (std::isfinite(e.ev))
        os << e.ev;
    else
        os << "null";
    os << ",\"dead_count\":" << e.dead_count << "}";
    return os.str();
}

double reconstruction_ev(const SaeParams& params, std::span<const float> vectors, uint32_t k) {
    std::vector<float> recon(vectors.size());
    reconstruct_batch(params, vectors, k, recon);
    return explained_variance(vectors, recon, params.d());
}

FitResult fit(const std::vector<std::filesystem::path>& shards, const SaeConfig& sae_cfg, const TrainConfig& cfg,
              const FitOptions& opts) {
    sae_cfg.validate();
    cfg.validate();
    PositionStream probe(shards);
    if (probe.dim() != sae_cfg.d)
        throw ConfigError("shard vector dimension " + std::to_string(probe.dim()) + " does not match d=" +
                          std::to_string(sae_cfg.d));
    const uint64_t total = probe.total();
    const uint64_t holdout = uint64_t(std::floor(double(total) * cfg.holdout_fraction));
    const uint64_t train_end = total - holdout;
    if (train_end == 0) throw DataError("empty dataset: no training vectors");

    const uint32_t d = sae_cfg.d;
    std::vector<float> eval_set;
    {
        const uint64_t n_eval = std::min(holdout, cfg.eval_max);
        PositionStream held(shards, train_end, train_end + n_eval);
        eval_set.resize(size_t(n_eval) * d);
        for (uint64_t i = 0; i < n_eval; ++i) held.next(std::span<float>(eval_set.data() + i * d, d));
    }
    auto evaluate = [&](const SaeParams& p) {
        if (eval_set.empty()) return std::numeric_limits<double>::quiet_NaN();
        try {
            return reconstruction_ev(p, eval_set, sae_cfg.k);
        } catch (const DataError&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };

    std::unique_ptr<std::ofstream> log_out;
    if (opts.log_file) {
        log_out = std::make_unique<std::ofstream>(*opts.log_file, std::ios::trunc);
        if (!*log_out) throw IoError("cannot open training log " + opts.log_file->string());
    }

    FitResult result;
    result.params = init_tied(sae_cfg, cfg.seed);
    SaeParams& params = result.params;
    DeadTracker tracker(sae_cfg.n_f, cfg.dead_window);
    AdamState adam(sae_cfg);

    uint64_t epoch = 0;
    auto open_epoch = [&] {
        return std::make_unique<ShuffleStream>(PositionStream(shards, 0, train_end), cfg.shuffle_buffer,
                                               mix_seed(cfg.seed, epoch));
    };
    auto stream = open_epoch();
    std::vector<float> batch(size_t(cfg.batch_size) * d);

    for (uint64_t step = 0; step < cfg.steps; ++step) {
        for (uint32_t r = 0; r < cfg.batch_size; ++r) {
            std::span<float> row(batch.data() + size_t(r) * d, d);
            if (!stream->next(row)) {
                ++epoch;
                stream = open_epoch();
                stream->next(row);
            }
        }
        LossResult lr = compute_loss(params, batch, tracker, cfg.aux_target);
        if (!std::isfinite(lr.loss)) {
            if (opts.checkpoint) {
                auto dump = *opts.checkpoint;
                dump += ".nan-dump";
                save_checkpoint(params, dump);
            }
            throw NumericError("non-finite loss at step " + std::to_string(step));
        }
        adam_step(params, lr.grads, adam, cfg);
        tracker.update(lr.codes, cfg.batch_size);

        if (step % cfg.eval_interval == 0 || step + 1 == cfg.steps) {
            TrainLogEntry e{step, lr.loss, lr.aux_loss, evaluate(params), tracker.dead_count()};
            result.log.push_back(e);
            if (log_out) *log_out << to_json_line(e) << "\n";
            if (opts.on_eval) opts.on_eval(e);
        }
    }

    result.final_dead = tracker.dead_count();
    result.final_ev = evaluate(params);
    if (opts.checkpoint) save_checkpoint(params, *opts.checkpoint);
    return result;
}

}  // namespace sdsae
