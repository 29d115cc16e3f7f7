#pragma once

#include "sdsae/featmap.hpp"
#include "sdsae/grid.hpp"
#include "sdsae/intervene.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sdsae {

// Boolean region over a grid, stored as 0/1 values.
struct RegionMask {
    Grid grid;
    std::string source;

    RegionMask() = default;
    explicit RegionMask(Grid g, std::string src = {});

    // Cells with value > threshold are in the region.
    static RegionMask from_grid(const Grid& g, float threshold = 0.0f, std::string src = {});
    static RegionMask full(uint32_t h, uint32_t w);
    static RegionMask load(const std::filesystem::path& path);

    bool at(size_t c) const { return grid.values[c] != 0.0f; }
    size_t count() const;
    RegionMask inverted() const;
    RegionMask resampled(uint32_t h, uint32_t w) const;
};

// s_rho = mean of S^rho over masked cells and all steps. The mask is
// resampled to the map grid. Throws DataError on an empty mask.
std::vector<double> masked_mean_coeffs(std::span<const SparseFeatureMap> steps, const RegionMask& mask);

// Mean coefficient vectors of the two sides of a contrast for one block.
struct BlockCoeffMeans {
    std::string block;
    std::vector<double> src;
    std::vector<double> tgt;
};

struct RankEntry {
    std::string block;
    uint32_t feature = 0;
    double gamma = 0.0;

    bool operator==(const RankEntry&) const = default;
};

struct BlockNormalization {
    std::string block;
    double src_sum = 0.0;
    double tgt_sum = 0.0;
    bool src_zero() const { return src_sum <= 0.0; }
    bool tgt_zero() const { return tgt_sum <= 0.0; }
};

struct ImportanceRanking {
    std::vector<RankEntry> entries;  // gamma descending, ties by (block order, feature)
    std::vector<BlockNormalization> normalization;

    // First n entries.
    std::vector<RankEntry> top(size_t n) const;
    // Last n entries, most negative first, never overlapping top(n_top).
    std::vector<RankEntry> bottom(size_t n, size_t n_top = 0) const;
};

// Line-delimited ranking file: one {"normalization": [...]} line, then one
// {"block", "feature", "gamma"} line per entry in rank order.
void write_ranking(const ImportanceRanking& r, const std::filesystem::path& path);
ImportanceRanking read_ranking(const std::filesystem::path& path);

// gamma_rho = src_rho / sum(src) - tgt_rho / sum(tgt), normalised per block and
// concatenated over blocks in input order. A side with zero sum contributes an
// all-zero vector (recorded in normalization); both sides zero is a DataError.
ImportanceRanking importance_rank(std::span<const BlockCoeffMeans> blocks);

// Activations of one layer's neurons on the two passes, one map per step.
struct NeuronLayer {
    std::string layer;
    std::vector<DenseFeatureMap> src;
    std::vector<DenseFeatureMap> tgt;
};

struct NeuronEntry {
    std::string layer;
    uint32_t neuron = 0;
    double score = 0.0;  // |src_n - tgt_n| of the unit-normalised mean vectors
    double src = 0.0;
    double tgt = 0.0;

    bool operator==(const NeuronEntry&) const = default;
};

// Per-neuron masked means per side, L2-normalised per layer and side, ranked by
// absolute difference descending (ties by layer order, neuron). DataError on a
// zero-norm layer side or an empty mask.
std::vector<NeuronEntry> neuron_rank(std::span<const NeuronLayer> layers, const RegionMask& m_src,
                                     const RegionMask& m_tgt);

// strength * (M_src . dD_src - M_tgt . dD_tgt). Masks are resampled to the grid.
DenseFeatureMap steering_delta(const DenseFeatureMap& d_src, const RegionMask& m_src, const DenseFeatureMap& d_tgt,
                               const RegionMask& m_tgt, float strength);

enum class EditCategory {
    change_object,
    add_object,
    delete_object,
    change_content,
    change_pose,
    change_color,
    change_material,
    change_background,
    change_style,
};
inline constexpr size_t kEditCategoryCount = 9;

const char* to_string(EditCategory c);
EditCategory parse_edit_category(const std::string& s);
std::span<const EditCategory> all_edit_categories();

// Which (pass, region) pairs the ranking contrasts. The first side is "src".
enum class CollectFrom {
    src_mask_vs_tgt_mask,   // source pass in M_src vs target pass in M_tgt
    src_mask_both,          // source pass in M_src vs target pass in M_src
    tgt_object_vs_tgt_rest, // target pass in M_tgt vs target pass outside M_tgt
    full_grid,              // source pass vs target pass over the whole grid
};

// How a selected feature's weights are formed.
enum class Weighting {
    src_spatial,  // time-mean S^rho of the source pass, restricted to the region
    tgt_spatial,  // time-mean S^rho of the target pass, restricted to the region
    first_mean,   // ranking first-side mean broadcast over the region
    second_mean,  // ranking second-side mean broadcast over the region
};

enum class Region { src_mask, tgt_mask, full };

struct TransferAction {
    float sign = 1.0f;
    Weighting weighting = Weighting::src_spatial;
    Region region = Region::src_mask;

    bool operator==(const TransferAction&) const = default;
};

struct EditRecipe {
    EditCategory category = EditCategory::change_object;
    CollectFrom collect = CollectFrom::src_mask_vs_tgt_mask;
    TransferAction top;     // applied to the n_add highest-gamma features
    TransferAction bottom;  // applied to the n_sub lowest-gamma features
    uint32_t n_add = 0;
    uint32_t n_sub = 0;
    float strength = 1.0f;

    static EditRecipe for_category(EditCategory c, uint32_t n_add, uint32_t n_sub, float strength);
    bool needs_src_mask() const;
    bool needs_tgt_mask() const;
};

// One block's sparse maps over steps on the source and target passes.
struct BlockMaps {
    std::string block;
    std::vector<SparseFeatureMap> src;
    std::vector<SparseFeatureMap> tgt;
};

struct TransferMasks {
    std::optional<RegionMask> src;
    std::optional<RegionMask> tgt;
};

// Masked means per block as the recipe's collect mode prescribes.
std::vector<BlockCoeffMeans> collect_means(const EditRecipe& recipe, std::span<const BlockMaps> blocks,
                                           const TransferMasks& masks);

// One InterventionSpec per block realising the recipe from a global ranking
// (normally importance_rank(collect_means(...))). Every edit is add_fixed
// with weights at the block grid and scale = sign * strength.
std::vector<InterventionSpec> build_transfer(const EditRecipe& recipe, const ImportanceRanking& ranking,
                                             std::span<const BlockMaps> blocks, std::span<const BlockCoeffMeans> means,
                                             const TransferMasks& masks);

struct BlockSelectionCount {
    size_t top = 0;
    size_t bottom = 0;
};

// How many of the selected top/bottom features come from each block.
std::map<std::string, BlockSelectionCount> block_selection_counts(const ImportanceRanking& ranking, size_t n_add,
                                                                  size_t n_sub);

// Line-delimited benchmark manifest. Each line is a JSON object:
//   {"id": "...", "category": "change_color", "source_mask": "m_src.pgm",
//    "target_mask": "m_tgt.pgm", "blocks": [{"block": "down.2.1",
//    "source": "src.sdsf", "target": "tgt.sdsf"}], "embeddings": {"name": "file.emb"}}
// Relative paths resolve against the manifest's directory.
struct BenchmarkBlock {
    std::string block;
    std::filesystem::path source;
    std::filesystem::path target;
};

struct BenchmarkExample {
    std::string id;
    EditCategory category = EditCategory::change_object;
    std::optional<std::filesystem::path> source_mask;
    std::optional<std::filesystem::path> target_mask;
    std::vector<BenchmarkBlock> blocks;
    std::map<std::string, std::filesystem::path> embeddings;
};

std::vector<BenchmarkExample> read_benchmark_manifest(const std::filesystem::path& path);

struct BenchmarkExampleData {
    std::vector<BlockMaps> blocks;
    TransferMasks masks;
};

BenchmarkExampleData load_benchmark_example(const BenchmarkExample& ex);

// Sweep labels "<method>:<n>:<strength>", e.g. "s:160:1" = 160 features at strength 1.
struct SweepLabel {
    std::string method;
    uint32_t n = 0;
    float strength = 0.0f;

    std::string to_string() const;
    static SweepLabel parse(const std::string& s);
    bool operator==(const SweepLabel&) const = default;
};

struct ResultRecord {
    std::string example_id;
    EditCategory category = EditCategory::change_object;
    uint32_t n = 0;
    float strength = 0.0f;
    std::string method;
    std::map<std::string, double> metrics;

    std::string to_json_line() const;
};

}  // namespace sdsae
