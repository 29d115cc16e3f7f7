#pragma once

#include "sdsae/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sdsae {

// Generative model for sparse nonnegative superpositions of unit atoms.
struct GroundTruthDictionary {
    uint32_t d = 0;
    uint32_t n_true = 0;
    std::vector<float> atoms;  // n_true x d, unit rows
    uint32_t k_true = 1;
    float coef_min = 0.5f;
    float coef_max = 2.0f;
    float noise_sigma = 0.0f;
    double max_abs_cosine = 0.0;  // largest |cos| between distinct atoms

    std::span<const float> atom(uint32_t i) const { return {atoms.data() + size_t(i) * d, d}; }
};

// Random unit atoms; with `orthogonal` (requires n_true <= d) they are Gram-Schmidt orthonormalized.
GroundTruthDictionary gen_dictionary(uint32_t d, uint32_t n_true, uint64_t seed, bool orthogonal = false);

struct SyntheticSamples {
    uint32_t d = 0;
    std::vector<float> vectors;       // n x d
    std::vector<SparseCoeffs> codes;  // ground-truth codes over n_true atoms
    size_t size() const { return codes.size(); }
};

// Each sample sums k_true distinct uniformly chosen atoms with coefficients
// uniform in [coef_min, coef_max], plus N(0, sigma^2) noise per component.
// Sample i draws only from a generator seeded by (seed, i).
SyntheticSamples gen_samples(const GroundTruthDictionary& dict, uint64_t n, uint64_t seed);

// Writes the samples as a shard of n maps of 1x1xd, and the codes as a
// sidecar of n 1x1 sparse-map records.
void write_synthetic(const SyntheticSamples& s, const std::filesystem::path& shard,
                     const std::filesystem::path& sidecar);

struct FeatureMatch {
    uint32_t atom = 0;
    uint32_t feature = 0;
    double abs_cosine = 0.0;
};

struct MatchResult {
    double recovery_rate = 0.0;
    std::vector<FeatureMatch> pairs;  // one per atom, by atom id
};

// Greedy one-to-one matching of atoms to decoder features by descending |cosine|.
MatchResult match_features(const SaeParams& learned, const GroundTruthDictionary& dict, double threshold = 0.9);

}  // namespace sdsae
