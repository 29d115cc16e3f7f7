#pragma once

// Batch kernels. The default versions are OpenMP-parallel; `reference` holds
// plain serial dense implementations used as test oracles and benchmark baselines.

#include "sdsae/sae.hpp"
#include "sdsae/train.hpp"

#include <span>
#include <vector>

namespace sdsae {

// Encodes each row of a row-major (n x d) batch.
std::vector<SparseCoeffs> encode_batch(const SaeParams& params, std::span<const float> batch, uint32_t k);

// Writes decode(encode(row)) for each row into `out` (n x d).
void reconstruct_batch(const SaeParams& params, std::span<const float> batch, uint32_t k, std::span<float> out);

// Sets the OpenMP thread count (0 keeps the runtime default). Returns the effective count.
int set_num_threads(int n);

namespace reference {

std::vector<SparseCoeffs> encode_batch(const SaeParams& params, std::span<const float> batch, uint32_t k);

// Dense serial loss/gradient: materializes full n_f coefficient vectors.
LossResult compute_loss(const SaeParams& params, std::span<const float> batch, const DeadTracker& tracker,
                        AuxTarget aux_target = AuxTarget::input);

}  // namespace reference

}  // namespace sdsae
