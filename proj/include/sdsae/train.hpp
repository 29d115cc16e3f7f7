#pragma once

#include "sdsae/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sdsae {

// What the auxiliary dead-feature reconstruction is compared against.
//   input:    alpha * ||h - (W_dec s_aux + b_pre)||^2
//   residual: alpha * ||(h - h') - W_dec s_aux||^2, with h - h' held constant
enum class AuxTarget { input, residual };

AuxTarget parse_aux_target(const std::string& name);
const char* to_string(AuxTarget t);

struct TrainConfig {
    uint32_t batch_size = 4096;
    float learning_rate = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_epsilon = 1e-8f;
    uint64_t dead_window = 100'000;
    uint64_t steps = 0;
    uint64_t seed = 0;
    AuxTarget aux_target = AuxTarget::input;
    uint64_t eval_interval = 100;
    size_t shuffle_buffer = 1u << 20;
    double holdout_fraction = 0.01;
    // Upper bound on held-out vectors scored per evaluation.
    uint64_t eval_max = 100'000;

    void validate() const;
};

// Parameter-shaped tensors (gradients, Adam moments).
struct ParamTensors {
    std::vector<float> encoder;
    std::vector<float> b_pre;
    std::vector<float> b_act;
    std::vector<float> decoder;

    ParamTensors() = default;
    explicit ParamTensors(const SaeConfig& cfg);

    // Visits (name, tensor) pairs in a fixed order.
    template <class F>
    void for_each(F&& f) {
        f("encoder", encoder);
        f("b_pre", b_pre);
        f("b_act", b_act);
        f("decoder", decoder);
    }
};

class DeadTracker {
public:
    DeadTracker() = default;
    DeadTracker(uint32_t n_f, uint64_t window) : last_fired_(n_f, 0), window_(window) {}

    bool dead(uint32_t rho) const { return last_fired_[rho] >= window_; }
    uint32_t dead_count() const;
    uint64_t since_fired(uint32_t rho) const { return last_fired_[rho]; }
    uint64_t window() const { return window_; }
    uint32_t size() const { return uint32_t(last_fired_.size()); }

    // A feature that fired in the batch resets to 0, otherwise its counter grows by batch_size.
    void update(std::span<const SparseCoeffs> codes, uint64_t batch_size);

private:
    std::vector<uint64_t> last_fired_;
    uint64_t window_ = 1;
};

struct LossResult {
    double loss = 0.0;      // batch mean of main + alpha * aux
    double main_loss = 0.0; // batch mean of ||h - h'||^2
    double aux_loss = 0.0;  // batch mean of the unweighted auxiliary term (0 when nothing is dead)
    ParamTensors grads;
    std::vector<SparseCoeffs> codes;
    std::vector<SparseCoeffs> aux_codes;  // empty per sample when no feature is dead
};

// Batch mean loss and its exact gradient with straight-through TopK (gradient
// only on the selected support). `batch` is row-major batch_size x d.
LossResult compute_loss(const SaeParams& params, std::span<const float> batch, const DeadTracker& tracker,
                        AuxTarget aux_target = AuxTarget::input);

// Top-k_aux positive pre-activations among dead features.
SparseCoeffs dead_topk(std::span<const float> pre, const DeadTracker& tracker, uint32_t k_aux);

struct AdamState {
    ParamTensors m;
    ParamTensors v;
    uint64_t t = 0;

    AdamState() = default;
    explicit AdamState(const SaeConfig& cfg) : m(cfg), v(cfg) {}
};

// Bias-corrected Adam update followed by decoder renormalization. Throws
// NumericError on non-finite gradients, leaving params untouched.
void adam_step(SaeParams& params, const ParamTensors& grads, AdamState& state, const TrainConfig& cfg);
// Adam update alone; adam_step = adam_update + renormalize_decoder.
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 uint64_t t, const TrainConfig& cfg);

// Rescale every f_rho to unit norm; zero features get a random direction derived from `seed`.
void renormalize_decoder(SaeParams& params, uint64_t seed = 0);

// Random unit decoder features, W_enc = W_dec^T, zero biases.
SaeParams init_tied(const SaeConfig& cfg, uint64_t seed);

struct TrainLogEntry {
    uint64_t step = 0;
    double loss = 0.0;
    double aux_loss = 0.0;
    double ev = 0.0;  // NaN when there is no held-out slice
    uint32_t dead_count = 0;
};

std::string to_json_line(const TrainLogEntry& e);

struct FitResult {
    SaeParams params;
    std::vector<TrainLogEntry> log;
    uint32_t final_dead = 0;
    double final_ev = 0.0;
};

struct FitOptions {
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> log_file;
    std::function<void(const TrainLogEntry&)> on_eval;
};

// Trains on the shards. The last `holdout_fraction` of vectors in storage order
// is held out for evaluation and never trained on.
FitResult fit(const std::vector<std::filesystem::path>& shards, const SaeConfig& sae_cfg, const TrainConfig& cfg,
              const FitOptions& opts = {});

// Explained variance of the SAE reconstruction over a row-major set of vectors.
double reconstruction_ev(const SaeParams& params, std::span<const float> vectors, uint32_t k);

}  // namespace sdsae
