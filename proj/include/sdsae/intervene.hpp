#pragma once

#include "sdsae/featmap.hpp"
#include "sdsae/grid.hpp"
#include "sdsae/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sdsae {

enum class EditMode {
    add_fixed,      // dD'_ij = dD_ij + A_ij f_rho
    modulate,       // dD'_ij = dD_ij + beta S^rho_ij f_rho
    empty_context,  // D_out'_ij = D_in_ij + gamma k mu f_rho
};

enum class CfgMode { plain, cond_only, cond_minus_uncond };

const char* to_string(EditMode m);
const char* to_string(CfgMode m);
EditMode parse_edit_mode(const std::string& s);
CfgMode parse_cfg_mode(const std::string& s);

// A = scale * grid. `source` is the file the grid came from (empty if built in memory).
struct SpatialWeight {
    Grid grid;
    float scale = 1.0f;
    std::string source;

    Grid effective() const;
    bool operator==(const SpatialWeight& o) const { return grid == o.grid && scale == o.scale; }
};

struct FeatureEdit {
    uint32_t feature = 0;
    EditMode mode = EditMode::add_fixed;
    // add_fixed: required weights. modulate: optional supplied S^rho. empty_context: optional mask.
    std::optional<SpatialWeight> weight;
    float beta = 0.0f;   // modulate
    float gamma = 0.0f;  // empty_context
    uint32_t k = 0;      // empty_context
    float mu = 0.0f;     // empty_context

    bool operator==(const FeatureEdit&) const = default;
};

struct InterventionSpec {
    std::string block;
    std::vector<FeatureEdit> edits;
    CfgMode cfg = CfgMode::cond_minus_uncond;
    uint32_t step_begin = 0;  // half-open [step_begin, step_end) in sampler order
    uint32_t step_end = 1;
    bool ablate_block = false;
    std::string checkpoint;  // optional path of the SAE the features belong to

    // Throws FormatError on malformed edits. n_f = 0 skips the feature-range check.
    void validate(uint32_t n_f = 0) const;
    bool operator==(const InterventionSpec&) const = default;
};

// dD' = dD + A (x) f_rho. Cells with A_ij == 0 are left bitwise unchanged.
DenseFeatureMap apply_fixed(const DenseFeatureMap& dense, uint32_t rho, const Grid& weights, const SaeParams& params);

// dD' = dD + beta S^rho (x) f_rho.
DenseFeatureMap apply_modulation(const DenseFeatureMap& dense, const SparseFeatureMap& codes, uint32_t rho, float beta,
                                 const SaeParams& params);

// D_out' = D_in + gamma k mu f_rho on every cell (or only where mask != 0).
// Throws DataError when mu is undefined (no positive activations seen).
DenseFeatureMap apply_empty_context(const DenseFeatureMap& block_input, uint32_t rho, float gamma, uint32_t k,
                                    const FeatureStats& mu, const SaeParams& params,
                                    const std::optional<Grid>& mask = std::nullopt);

// Encode, add A_ij to coefficient rho (clamped at 0), decode. Carries the SAE
// reconstruction error; the direct dense edit above is the default path.
DenseFeatureMap apply_fixed_reconstructed(const DenseFeatureMap& dense, uint32_t rho, const Grid& weights,
                                          const SaeParams& params, uint32_t k);

// Applies an add_fixed or modulate edit in place. Modulate edits without
// supplied weights use `codes` (required then).
void apply_edit(DenseFeatureMap& dense, const FeatureEdit& edit, const SaeParams& params,
                const SparseFeatureMap* codes = nullptr);

struct CfgEdits {
    std::vector<FeatureEdit> cond;
    std::vector<FeatureEdit> uncond;
    bool cond_pass_only = false;
};

FeatureEdit negated(const FeatureEdit& e);
CfgEdits compose_cfg(const InterventionSpec& spec);

// Text format (one file may hold several block specs):
//   sdsae-intervention 1
//   checkpoint <path>               (optional)
//   block <id>
//     cfg <plain|cond_only|cond_minus_uncond>
//     steps <begin> <end>
//     ablate <true|false>
//     edit add_fixed <rho> weight <file> scale <s>
//     edit modulate <rho> beta <b> [weight <file> scale <s>]
//     edit empty_context <rho> gamma <g> k <k> mu <mu> [weight <file> scale <s>]
//   end
// Weight files (.pgm or .sdsh) are resolved relative to the spec file.
inline constexpr int kSpecVersion = 1;

// Writes the spec and, for weights without a source file, grid sidecars
// named <stem>.<block>.<edit>.sdsh next to it.
void serialize_spec(std::vector<InterventionSpec>& specs, const std::filesystem::path& path);
std::string format_spec(const std::vector<InterventionSpec>& specs);
std::vector<InterventionSpec> parse_spec(const std::filesystem::path& path);
std::vector<InterventionSpec> parse_spec_text(const std::string& text, const std::filesystem::path& base_dir);

}  // namespace sdsae
