#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace sdsae {

struct SaeConfig {
    uint32_t d = 0;
    uint32_t n_f = 0;
    uint32_t k = 0;
    uint32_t k_aux = 256;
    float alpha = 1.0f / 32.0f;

    // Throws ConfigError when an invariant is violated.
    void validate() const;
    bool operator==(const SaeConfig&) const = default;
};

// Sparse nonnegative code over n_f features. Indices strictly increasing, values > 0.
struct SparseCoeffs {
    std::vector<uint32_t> indices;
    std::vector<float> values;
    uint32_t n_f = 0;

    size_t nnz() const { return indices.size(); }
    float get(uint32_t feature) const;
    bool operator==(const SparseCoeffs&) const = default;
};

// Encoder/decoder weights. The decoder is stored feature-major: row rho of
// `decoder` is the feature vector f_rho (a column of W_dec in the d x n_f layout).
struct SaeParams {
    SaeConfig config;
    std::vector<float> encoder;  // n_f x d, row-major
    std::vector<float> b_pre;    // d
    std::vector<float> b_act;    // n_f
    std::vector<float> decoder;  // n_f x d, row rho = f_rho

    SaeParams() = default;
    explicit SaeParams(const SaeConfig& cfg);

    uint32_t d() const { return config.d; }
    uint32_t n_f() const { return config.n_f; }
    std::span<const float> encoder_row(uint32_t rho) const { return {encoder.data() + size_t(rho) * d(), d()}; }
    std::span<float> encoder_row(uint32_t rho) { return {encoder.data() + size_t(rho) * d(), d()}; }
    std::span<const float> feature(uint32_t rho) const { return {decoder.data() + size_t(rho) * d(), d()}; }
    std::span<float> feature(uint32_t rho) { return {decoder.data() + size_t(rho) * d(), d()}; }

    bool operator==(const SaeParams&) const = default;
};

// Keep the k largest pre-activations (ties: lower index wins), then drop non-positive survivors.
SparseCoeffs topk_relu(std::span<const float> pre, uint32_t k);

// Pre-activations W_enc (h - b_pre) + b_act.
void pre_activations(const SaeParams& params, std::span<const float> h, std::span<float> out);

SparseCoeffs encode(const SaeParams& params, std::span<const float> h, uint32_t k);
std::vector<float> decode(const SaeParams& params, const SparseCoeffs& s);
void decode_into(const SaeParams& params, const SparseCoeffs& s, std::span<float> out);
std::pair<std::vector<float>, SparseCoeffs> reconstruct(const SaeParams& params, std::span<const float> h,
                                                        uint32_t k);

// Largest | ||f_rho||_2 - 1 | over all features, computed in double.
double max_decoder_norm_error(const SaeParams& params);
inline constexpr double kDecoderNormTolerance = 1e-6;

// Checkpoint: "SDCK", version, d, n_f, k, k_aux, alpha, then W_enc, b_pre, b_act,
// W_dec (d x n_f row-major), all f32 little-endian.
inline constexpr uint32_t kCheckpointVersion = 1;
void save_checkpoint(const SaeParams& params, const std::filesystem::path& path);
// Rejects decoders whose feature norms deviate from 1 unless `verify_norms` is false.
SaeParams load_checkpoint(const std::filesystem::path& path, bool verify_norms = true);

}  // namespace sdsae
