#include "sdsae/riebench.hpp"

#include "sdsae/error.hpp"
#include "sdsae/raster.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace sdsae {

namespace fs = std::filesystem;
using nlohmann::json;

RegionMask::RegionMask(Grid g, std::string src) : grid(std::move(g)), source(std::move(src)) {
    for (auto& v : grid.values) v = v != 0.0f ? 1.0f : 0.0f;
}

RegionMask RegionMask::from_grid(const Grid& g, float threshold, std::string src) {
    Grid m(g.h, g.w);
    for (size_t c = 0; c < g.size(); ++c) m.values[c] = g.values[c] > threshold ? 1.0f : 0.0f;
    return RegionMask(std::move(m), std::move(src));
}

RegionMask RegionMask::full(uint32_t h, uint32_t w) { return RegionMask(Grid(h, w, 1.0f), "full"); }

RegionMask RegionMask::load(const fs::path& path) { return from_grid(load_grid(path), 0.0f, path.string()); }

size_t RegionMask::count() const {
    return size_t(std::count_if(grid.values.begin(), grid.values.end(), [](float v) { return v != 0.0f; }));
}

RegionMask RegionMask::inverted() const {
    RegionMask out = *this;
    for (auto& v : out.grid.values) v = v != 0.0f ? 0.0f : 1.0f;
    out.source = source.empty() ? std::string() : "~" + source;
    return out;
}

RegionMask RegionMask::resampled(uint32_t h, uint32_t w) const {
    RegionMask out;
    out.grid = resample_nearest(grid, h, w);
    out.source = source;
    return out;
}

std::vector<double> masked_mean_coeffs(std::span<const SparseFeatureMap> steps, const RegionMask& mask) {
    if (steps.empty()) throw DataError("masked_mean_coeffs: no sparse maps");
    const auto& first = steps.front();
    for (const auto& s : steps)
        if (s.h != first.h || s.w != first.w || s.n_f != first.n_f)
            throw ConfigError("masked_mean_coeffs: sparse maps differ in grid or n_f");
    const RegionMask m = mask.resampled(first.h, first.w);
    const size_t cnt = m.count();
    if (cnt == 0) throw DataError("empty mask" + (mask.source.empty() ? std::string() : " (" + mask.source + ")"));

    std::vector<double> sum(first.n_f, 0.0);
    for (const auto& s : steps)
        for (size_t c = 0; c < s.cells.size(); ++c) {
            if (!m.at(c)) continue;
            const auto& cell = s.cells[c];
            for (size_t t = 0; t < cell.indices.size(); ++t) sum[cell.indices[t]] += cell.values[t];
        }
    const double denom = double(cnt) * double(steps.size());
    for (auto& v : sum) v /= denom;
    return sum;
}

std::vector<RankEntry> ImportanceRanking::top(size_t n) const {
    n = std::min(n, entries.size());
    return {entries.begin(), entries.begin() + std::ptrdiff_t(n)};
}

std::vector<RankEntry> ImportanceRanking::bottom(size_t n, size_t n_top) const {
    n_top = std::min(n_top, entries.size());
    n = std::min(n, entries.size() - n_top);
    return {entries.rbegin(), entries.rbegin() + std::ptrdiff_t(n)};
}

ImportanceRanking importance_rank(std::span<const BlockCoeffMeans> blocks) {
    ImportanceRanking out;
    struct Keyed {
        RankEntry e;
        size_t block_idx;
    };
    std::vector<Keyed> all;
    for (size_t b = 0; b < blocks.size(); ++b) {
        const auto& blk = blocks[b];
        if (blk.src.size() != blk.tgt.size())
            throw ConfigError("importance_rank: block " + blk.block + " has mismatched n_f");
        BlockNormalization norm{blk.block, 0.0, 0.0};
        for (size_t r = 0; r < blk.src.size(); ++r) {
            if (blk.src[r] < 0.0 || blk.tgt[r] < 0.0 || !std::isfinite(blk.src[r]) || !std::isfinite(blk.tgt[r]))
                throw DataError("importance_rank: coefficient means must be finite and non-negative");
            norm.src_sum += blk.src[r];
            norm.tgt_sum += blk.tgt[r];
        }
        if (norm.src_zero() && norm.tgt_zero())
            throw DataError("importance_rank: block " + blk.block + " has zero coefficient sums on both sides");
        for (size_t r = 0; r < blk.src.size(); ++r) {
            const double a = norm.src_zero() ? 0.0 : blk.src[r] / norm.src_sum;
            const double c = norm.tgt_zero() ? 0.0 : blk.tgt[r] / norm.tgt_sum;
            all.push_back({{blk.block, uint32_t(r), a - c}, b});
        }
        out.normalization.push_back(norm);
    }
    std::stable_sort(all.begin(), all.end(), [](const Keyed& x, const Keyed& y) {
        if (x.e.gamma != y.e.gamma) return x.e.gamma > y.e.gamma;
        if (x.block_idx != y.block_idx) return x.block_idx < y.block_idx;
        return x.e.feature < y.e.feature;
    });
    out.entries.reserve(all.size());
    for (auto& k : all) out.entries.push_back(std::move(k.e));
    return out;
}

namespace {

std::vector<double> masked_mean_dense(std::span<const DenseFeatureMap> steps, const RegionMask& mask,
                                      const std::string& what) {
    if (steps.empty()) throw DataError(what + ": no activation maps");
    const auto& first = steps.front();
    for (const auto& s : steps)
        if (s.h != first.h || s.w != first.w || s.d != first.d)
            throw ConfigError(what + ": activation maps differ in shape");
    const RegionMask m = mask.resampled(first.h, first.w);
    const size_t cnt = m.count();
    if (cnt == 0) throw DataError("empty mask" + (mask.source.empty() ? std::string() : " (" + mask.source + ")"));
    std::vector<double> sum(first.d, 0.0);
    for (const auto& s : steps)
        for (size_t c = 0; c < s.cells(); ++c) {
            if (!m.at(c)) continue;
            const auto cell = s.cell(c);
            for (size_t n = 0; n < cell.size(); ++n) sum[n] += cell[n];
        }
    const double denom = double(cnt) * double(steps.size());
    for (auto& v : sum) v /= denom;
    return sum;
}

void normalize_l2(std::vector<double>& v, const std::string& what) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double n = std::sqrt(ss);
    if (!(n > 0.0)) throw DataError(what + " has zero norm");
    for (auto& x : v) x /= n;
}

}  // namespace

std::vector<NeuronEntry> neuron_rank(std::span<const NeuronLayer> layers, const RegionMask& m_src,
                                     const RegionMask& m_tgt) {
    struct Keyed {
        NeuronEntry e;
        size_t layer_idx;
    };
    std::vector<Keyed> all;
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        auto a = masked_mean_dense(layer.src, m_src, "neuron_rank " + layer.layer);
        auto b = masked_mean_dense(layer.tgt, m_tgt, "neuron_rank " + layer.layer);
        if (a.size() != b.size()) throw ConfigError("neuron_rank: layer " + layer.layer + " channel counts differ");
        normalize_l2(a, "layer " + layer.layer + " source means");
        normalize_l2(b, "layer " + layer.layer + " target means");
        for (size_t n = 0; n < a.size(); ++n) all.push_back({{layer.layer, uint32_t(n), std::abs(a[n] - b[n]), a[n], b[n]}, l});
    }
    std::stable_sort(all.begin(), all.end(), [](const Keyed& x, const Keyed& y) {
        if (x.e.score != y.e.score) return x.e.score > y.e.score;
        if (x.layer_idx != y.layer_idx) return x.layer_idx < y.layer_idx;
        return x.e.neuron < y.e.neuron;
    });
    std::vector<NeuronEntry> out;
    out.reserve(all.size());
    for (auto& k : all) out.push_back(std::move(k.e));
    return out;
}

DenseFeatureMap steering_delta(const DenseFeatureMap& d_src, const RegionMask& m_src, const DenseFeatureMap& d_tgt,
                               const RegionMask& m_tgt, float strength) {
    if (d_src.h != d_tgt.h || d_src.w != d_tgt.w || d_src.d != d_tgt.d)
        throw ConfigError("steering_delta: source and target maps differ in shape");
    const RegionMask ms = m_src.resampled(d_src.h, d_src.w);
    const RegionMask mt = m_tgt.resampled(d_src.h, d_src.w);
    DenseFeatureMap out(d_src.h, d_src.w, d_src.d);
    for (size_t c = 0; c < out.cells(); ++c) {
        const bool in_s = ms.at(c), in_t = mt.at(c);
        if (!in_s && !in_t) continue;
        const auto a = d_src.cell(c), b = d_tgt.cell(c);
        auto o = out.cell(c);
        for (size_t j = 0; j < o.size(); ++j) {
            const float x = in_s ? a[j] : 0.0f;
            const float y = in_t ? b[j] : 0.0f;
            o[j] = strength * (x - y);
        }
    }
    return out;
}

namespace {

constexpr std::array<EditCategory, kEditCategoryCount> kCategories = {
    EditCategory::change_object,  EditCategory::add_object,       EditCategory::delete_object,
    EditCategory::change_content, EditCategory::change_pose,      EditCategory::change_color,
    EditCategory::change_material, EditCategory::change_background, EditCategory::change_style,
};

}  // namespace

const char* to_string(EditCategory c) {
    switch (c) {
        case EditCategory::change_object: return "change_object";
        case EditCategory::add_object: return "add_object";
        case EditCategory::delete_object: return "delete_object";
        case EditCategory::change_content: return "change_content";
        case EditCategory::change_pose: return "change_pose";
        case EditCategory::change_color: return "change_color";
        case EditCategory::change_material: return "change_material";
        case EditCategory::change_background: return "change_background";
        case EditCategory::change_style: return "change_style";
    }
    return "?";
}

EditCategory parse_edit_category(const std::string& s) {
    for (auto c : kCategories)
        if (s == to_string(c)) return c;
    throw FormatError("unknown edit category '" + s + "'");
}

std::span<const EditCategory> all_edit_categories() { return kCategories; }

EditRecipe EditRecipe::for_category(EditCategory c, uint32_t n_add, uint32_t n_sub, float strength) {
    EditRecipe r;
    r.category = c;
    r.n_add = n_add;
    r.n_sub = n_sub;
    r.strength = strength;
    switch (c) {
        case EditCategory::change_object:
        case EditCategory::change_content:
        case EditCategory::change_pose:
            r.collect = CollectFrom::src_mask_vs_tgt_mask;
            r.top = {1.0f, Weighting::src_spatial, Region::src_mask};
            r.bottom = {-1.0f, Weighting::tgt_spatial, Region::tgt_mask};
            break;
        case EditCategory::change_color:
        case EditCategory::change_material:
        case EditCategory::change_background:
            r.collect = CollectFrom::src_mask_vs_tgt_mask;
            r.top = {1.0f, Weighting::first_mean, Region::tgt_mask};
            r.bottom = {-1.0f, Weighting::tgt_spatial, Region::tgt_mask};
            break;
        case EditCategory::add_object:
            r.collect = CollectFrom::src_mask_both;
            r.top = {1.0f, Weighting::src_spatial, Region::src_mask};
            r.bottom = {-1.0f, Weighting::tgt_spatial, Region::src_mask};
            break;
        case EditCategory::delete_object:
            r.collect = CollectFrom::tgt_object_vs_tgt_rest;
            r.top = {-1.0f, Weighting::tgt_spatial, Region::tgt_mask};
            r.bottom = {1.0f, Weighting::second_mean, Region::tgt_mask};
            break;
        case EditCategory::change_style:
            r.collect = CollectFrom::full_grid;
            r.top = {1.0f, Weighting::first_mean, Region::full};
            r.bottom = {-1.0f, Weighting::second_mean, Region::full};
            break;
    }
    return r;
}

bool EditRecipe::needs_src_mask() const {
    const bool c = collect == CollectFrom::src_mask_vs_tgt_mask || collect == CollectFrom::src_mask_both;
    return c || (n_add && top.region == Region::src_mask) || (n_sub && bottom.region == Region::src_mask);
}

bool EditRecipe::needs_tgt_mask() const {
    const bool c = collect == CollectFrom::src_mask_vs_tgt_mask || collect == CollectFrom::tgt_object_vs_tgt_rest;
    return c || (n_add && top.region == Region::tgt_mask) || (n_sub && bottom.region == Region::tgt_mask);
}

namespace {

void check_masks(const EditRecipe& recipe, const TransferMasks& masks) {
    if (recipe.needs_src_mask() && !masks.src)
        throw ConfigError(std::string("recipe ") + to_string(recipe.category) + " needs a source mask");
    if (recipe.needs_tgt_mask() && !masks.tgt)
        throw ConfigError(std::string("recipe ") + to_string(recipe.category) + " needs a target mask");
}

const SparseFeatureMap& grid_of(const BlockMaps& b) {
    if (b.src.empty() || b.tgt.empty()) throw DataError("block " + b.block + " has no sparse maps");
    const auto& s = b.src.front();
    for (const auto* side : {&b.src, &b.tgt})
        for (const auto& m : *side)
            if (m.h != s.h || m.w != s.w || m.n_f != s.n_f)
                throw ConfigError("block " + b.block + ": sparse maps differ in grid or n_f");
    return s;
}

// Time-mean of S^rho over the steps.
Grid time_mean(std::span<const SparseFeatureMap> steps, uint32_t rho) {
    const auto& f = steps.front();
    std::vector<double> acc(f.cells.size(), 0.0);
    for (const auto& s : steps)
        for (size_t c = 0; c < s.cells.size(); ++c) acc[c] += s.cells[c].get(rho);
    Grid g(f.h, f.w);
    for (size_t c = 0; c < acc.size(); ++c) g.values[c] = float(acc[c] / double(steps.size()));
    return g;
}

}  // namespace

std::vector<BlockCoeffMeans> collect_means(const EditRecipe& recipe, std::span<const BlockMaps> blocks,
                                           const TransferMasks& masks) {
    check_masks(recipe, masks);
    std::vector<BlockCoeffMeans> out;
    for (const auto& b : blocks) {
        const auto& g = grid_of(b);
        BlockCoeffMeans m{b.block, {}, {}};
        switch (recipe.collect) {
            case CollectFrom::src_mask_vs_tgt_mask:
                m.src = masked_mean_coeffs(b.src, *masks.src);
                m.tgt = masked_mean_coeffs(b.tgt, *masks.tgt);
                break;
            case CollectFrom::src_mask_both:
                m.src = masked_mean_coeffs(b.src, *masks.src);
                m.tgt = masked_mean_coeffs(b.tgt, *masks.src);
                break;
            case CollectFrom::tgt_object_vs_tgt_rest: {
                const RegionMask obj = masks.tgt->resampled(g.h, g.w);
                m.src = masked_mean_coeffs(b.tgt, obj);
                m.tgt = masked_mean_coeffs(b.tgt, obj.inverted());
                break;
            }
            case CollectFrom::full_grid: {
                const RegionMask all = RegionMask::full(g.h, g.w);
                m.src = masked_mean_coeffs(b.src, all);
                m.tgt = masked_mean_coeffs(b.tgt, all);
                break;
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<InterventionSpec> build_transfer(const EditRecipe& recipe, const ImportanceRanking& ranking,
                                             std::span<const BlockMaps> blocks, std::span<const BlockCoeffMeans> means,
                                             const TransferMasks& masks) {
    check_masks(recipe, masks);
    if (ranking.entries.empty() && (recipe.n_add || recipe.n_sub)) throw DataError("build_transfer: empty ranking");
    if (!std::isfinite(recipe.strength)) throw ConfigError("build_transfer: non-finite strength");
    if (means.size() != blocks.size()) throw ConfigError("build_transfer: one coefficient-mean record per block required");

    std::map<std::string, size_t> index;
    std::vector<InterventionSpec> specs;
    for (size_t b = 0; b < blocks.size(); ++b) {
        if (means[b].block != blocks[b].block) throw ConfigError("build_transfer: block order differs between maps and means");
        if (!index.emplace(blocks[b].block, b).second) throw ConfigError("build_transfer: duplicate block " + blocks[b].block);
        grid_of(blocks[b]);
        InterventionSpec s;
        s.block = blocks[b].block;
        specs.push_back(std::move(s));
    }

    auto emit = [&](const RankEntry& e, const TransferAction& act) {
        const auto it = index.find(e.block);
        if (it == index.end()) throw ConfigError("build_transfer: ranking names unknown block " + e.block);
        const auto& bm = blocks[it->second];
        const auto& g = bm.src.front();
        if (e.feature >= g.n_f) throw ConfigError("build_transfer: feature id out of range for block " + e.block);

        RegionMask region;
        switch (act.region) {
            case Region::src_mask: region = masks.src->resampled(g.h, g.w); break;
            case Region::tgt_mask: region = masks.tgt->resampled(g.h, g.w); break;
            case Region::full: region = RegionMask::full(g.h, g.w); break;
        }
        Grid w;
        switch (act.weighting) {
            case Weighting::src_spatial: w = time_mean(bm.src, e.feature); break;
            case Weighting::tgt_spatial: w = time_mean(bm.tgt, e.feature); break;
            case Weighting::first_mean: w = Grid(g.h, g.w, float(means[it->second].src.at(e.feature))); break;
            case Weighting::second_mean: w = Grid(g.h, g.w, float(means[it->second].tgt.at(e.feature))); break;
        }
        for (size_t c = 0; c < w.size(); ++c)
            if (!region.at(c)) w.values[c] = 0.0f;

        FeatureEdit edit;
        edit.feature = e.feature;
        edit.mode = EditMode::add_fixed;
        edit.weight = SpatialWeight{std::move(w), act.sign * recipe.strength, {}};
        specs[it->second].edits.push_back(std::move(edit));
    };

    for (const auto& e : ranking.top(recipe.n_add)) emit(e, recipe.top);
    for (const auto& e : ranking.bottom(recipe.n_sub, recipe.n_add)) emit(e, recipe.bottom);
    return specs;
}

std::map<std::string, BlockSelectionCount> block_selection_counts(const ImportanceRanking& ranking, size_t n_add,
                                                                  size_t n_sub) {
    std::map<std::string, BlockSelectionCount> out;
    for (const auto& n : ranking.normalization) out[n.block];
    for (const auto& e : ranking.top(n_add)) ++out[e.block].top;
    for (const auto& e : ranking.bottom(n_sub, n_add)) ++out[e.block].bottom;
    return out;
}

std::vector<BenchmarkExample> read_benchmark_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open benchmark manifest " + path.string());
    const fs::path base = path.parent_path();
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

    std::vector<BenchmarkExample> out;
    std::set<std::string> ids;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
        try {
            const json j = json::parse(line);
            BenchmarkExample ex;
            ex.id = j.at("id").get<std::string>();
            ex.category = parse_edit_category(j.at("category").get<std::string>());
            if (j.contains("source_mask")) ex.source_mask = resolve(j["source_mask"].get<std::string>());
            if (j.contains("target_mask")) ex.target_mask = resolve(j["target_mask"].get<std::string>());
            for (const auto& b : j.at("blocks"))
                ex.blocks.push_back({b.at("block").get<std::string>(), resolve(b.at("source").get<std::string>()),
                                     resolve(b.at("target").get<std::string>())});
            if (ex.blocks.empty()) throw FormatError("example has no blocks");
            if (j.contains("embeddings"))
                for (const auto& [k, v] : j["embeddings"].items()) ex.embeddings[k] = resolve(v.get<std::string>());
            if (!ids.insert(ex.id).second) throw FormatError("duplicate example id '" + ex.id + "'");
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw FormatError(where + e.what());
        } catch (const Error& e) {
            throw FormatError(where + e.what());
        }
    }
    return out;
}

BenchmarkExampleData load_benchmark_example(const BenchmarkExample& ex) {
    BenchmarkExampleData data;
    for (const auto& b : ex.blocks) data.blocks.push_back({b.block, read_sparse_maps(b.source), read_sparse_maps(b.target)});
    if (ex.source_mask) data.masks.src = RegionMask::load(*ex.source_mask);
    if (ex.target_mask) data.masks.tgt = RegionMask::load(*ex.target_mask);
    return data;
}

void write_ranking(const ImportanceRanking& r, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    json norm = json::array();
    for (const auto& n : r.normalization) norm.push_back({{"block", n.block}, {"src_sum", n.src_sum}, {"tgt_sum", n.tgt_sum}});
    out << json{{"normalization", norm}}.dump() << "\n";
    for (const auto& e : r.entries) out << json{{"block", e.block}, {"feature", e.feature}, {"gamma", e.gamma}}.dump() << "\n";
    if (!out) throw IoError("write failed for " + path.string());
}

ImportanceRanking read_ranking(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open ranking " + path.string());
    ImportanceRanking r;
    std::string line;
    int lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            if (!header) {
                for (const auto& n : j.at("normalization"))
                    r.normalization.push_back(
                        {n.at("block").get<std::string>(), n.at("src_sum").get<double>(), n.at("tgt_sum").get<double>()});
                header = true;
                continue;
            }
            r.entries.push_back({j.at("block").get<std::string>(), j.at("feature").get<uint32_t>(), j.at("gamma").get<double>()});
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!header) throw FormatError(path.string() + ": missing normalization record");
    for (size_t i = 1; i < r.entries.size(); ++i)
        if (r.entries[i].gamma > r.entries[i - 1].gamma) throw FormatError(path.string() + ": entries not sorted by gamma");
    return r;
}

std::string SweepLabel::to_string() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", double(strength));
    return method + ":" + std::to_string(n) + ":" + buf;
}

SweepLabel SweepLabel::parse(const std::string& s) {
    const auto a = s.find(':');
    const auto b = a == std::string::npos ? a : s.find(':', a + 1);
    if (a == std::string::npos || b == std::string::npos || a == 0 || s.find(':', b + 1) != std::string::npos)
        throw FormatError("sweep label '" + s + "' is not <method>:<n>:<strength>");
    SweepLabel l;
    l.method = s.substr(0, a);
    try {
        size_t used = 0;
        const std::string n = s.substr(a + 1, b - a - 1), st = s.substr(b + 1);
        const unsigned long v = std::stoul(n, &used);
        if (used != n.size() || n[0] == '-' || v > UINT32_MAX) throw std::invalid_argument(n);
        l.n = uint32_t(v);
        l.strength = std::stof(st, &used);
        if (used != st.size() || !std::isfinite(l.strength)) throw std::invalid_argument(st);
    } catch (const std::exception&) {
        throw FormatError("sweep label '" + s + "' has a malformed count or strength");
    }
    return l;
}

std::string ResultRecord::to_json_line() const {
    json j;
    j["example_id"] = example_id;
    j["category"] = to_string(category);
    j["n"] = n;
    j["strength"] = strength;
    j["method"] = method;
    json m = json::object();
    for (const auto& [k, v] : metrics) {
        if (std::isfinite(v)) m[k] = v;
        else m[k] = nullptr;
    }
    j["metrics"] = m;
    return j.dump();
}

}  // namespace sdsae
