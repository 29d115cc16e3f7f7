#include "sdsae/intervene.hpp"

#include "sdsae/error.hpp"
#include "sdsae/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sdsae {

namespace fs = std::filesystem;

const char* to_string(EditMode m) {
    switch (m) {
        case EditMode::add_fixed: return "add_fixed";
        case EditMode::modulate: return "modulate";
        case EditMode::empty_context: return "empty_context";
    }
    return "?";
}

const char* to_string(CfgMode m) {
    switch (m) {
        case CfgMode::plain: return "plain";
        case CfgMode::cond_only: return "cond_only";
        case CfgMode::cond_minus_uncond: return "cond_minus_uncond";
    }
    return "?";
}

EditMode parse_edit_mode(const std::string& s) {
    if (s == "add_fixed") return EditMode::add_fixed;
    if (s == "modulate") return EditMode::modulate;
    if (s == "empty_context") return EditMode::empty_context;
    throw FormatError("unknown edit mode '" + s + "'");
}

CfgMode parse_cfg_mode(const std::string& s) {
    if (s == "plain") return CfgMode::plain;
    if (s == "cond_only") return CfgMode::cond_only;
    if (s == "cond_minus_uncond") return CfgMode::cond_minus_uncond;
    throw FormatError("unknown cfg mode '" + s + "'");
}

Grid SpatialWeight::effective() const {
    Grid g = grid;
    for (auto& v : g.values) v *= scale;
    return g;
}

void InterventionSpec::validate(uint32_t n_f) const {
    if (block.empty() || block.find_first_of(" \t\n") != std::string::npos)
        throw FormatError("block id must be a non-empty token");
    if (step_end < step_begin) throw FormatError("step range end precedes begin");
    for (const auto& e : edits) {
        if (n_f && e.feature >= n_f)
            throw FormatError("feature " + std::to_string(e.feature) + " out of range (n_f=" + std::to_string(n_f) + ")");
        if (e.mode == EditMode::add_fixed && !e.weight) throw FormatError("add_fixed edit needs spatial weights");
        if (e.mode == EditMode::empty_context && e.k == 0) throw FormatError("empty_context edit needs k > 0");
        if (e.weight) {
            const auto& g = e.weight->grid;
            if (g.h == 0 || g.w == 0 || g.values.size() != size_t(g.h) * g.w)
                throw FormatError("malformed weight grid");
            for (float v : g.values)
                if (!std::isfinite(v)) throw FormatError("non-finite spatial weight");
            if (!std::isfinite(e.weight->scale)) throw FormatError("non-finite weight scale");
        }
        if (!std::isfinite(e.beta) || !std::isfinite(e.gamma) || !std::isfinite(e.mu))
            throw FormatError("non-finite edit parameter");
    }
}

namespace {

void check_feature(const SaeParams& params, const DenseFeatureMap& dense, uint32_t rho) {
    if (dense.d != params.d())
        throw ConfigError("feature map has d=" + std::to_string(dense.d) + ", SAE has d=" + std::to_string(params.d()));
    if (rho >= params.n_f()) throw ConfigError("feature id " + std::to_string(rho) + " out of range");
}

void add_scaled(std::span<float> cell, std::span<const float> f, float a) {
    for (size_t j = 0; j < cell.size(); ++j) cell[j] += a * f[j];
}

}  // namespace

DenseFeatureMap apply_fixed(const DenseFeatureMap& dense, uint32_t rho, const Grid& weights, const SaeParams& params) {
    check_feature(params, dense, rho);
    const Grid a = resample_nearest(weights, dense.h, dense.w);
    DenseFeatureMap out = dense;
    const auto f = params.feature(rho);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < std::ptrdiff_t(out.cells()); ++c) {
        const float w = a.values[size_t(c)];
        if (w != 0.0f) add_scaled(out.cell(size_t(c)), f, w);
    }
    return out;
}

DenseFeatureMap apply_modulation(const DenseFeatureMap& dense, const SparseFeatureMap& codes, uint32_t rho, float beta,
                                 const SaeParams& params) {
    check_feature(params, dense, rho);
    if (codes.h != dense.h || codes.w != dense.w) throw ConfigError("apply_modulation: code grid differs from map grid");
    Grid a = codes.feature_grid(rho);
    for (auto& v : a.values) v *= beta;
    return apply_fixed(dense, rho, a, params);
}

DenseFeatureMap apply_empty_context(const DenseFeatureMap& block_input, uint32_t rho, float gamma, uint32_t k,
                                    const FeatureStats& mu, const SaeParams& params, const std::optional<Grid>& mask) {
    check_feature(params, block_input, rho);
    if (!mu.defined()) throw DataError("feature " + std::to_string(rho) + " has no positive activations; mu undefined");
    const float amount = float(double(gamma) * double(k) * mu.mean);
    Grid a(block_input.h, block_input.w, amount);
    if (mask) {
        const Grid m = resample_nearest(*mask, block_input.h, block_input.w);
        for (size_t c = 0; c < a.size(); ++c)
            if (m.values[c] == 0.0f) a.values[c] = 0.0f;
    }
    return apply_fixed(block_input, rho, a, params);
}

DenseFeatureMap apply_fixed_reconstructed(const DenseFeatureMap& dense, uint32_t rho, const Grid& weights,
                                          const SaeParams& params, uint32_t k) {
    check_feature(params, dense, rho);
    const Grid a = resample_nearest(weights, dense.h, dense.w);
    const SparseFeatureMap codes = encode_map(params, dense, k);
    DenseFeatureMap out(dense.h, dense.w, dense.d);
    for (size_t c = 0; c < dense.cells(); ++c) {
        SparseCoeffs s = codes.cells[c];
        const float v = std::max(0.0f, s.get(rho) + a.values[c]);
        auto it = std::lower_bound(s.indices.begin(), s.indices.end(), rho);
        const auto pos = size_t(it - s.indices.begin());
        if (it != s.indices.end() && *it == rho) {
            if (v > 0.0f) {
                s.values[pos] = v;
            } else {
                s.indices.erase(it);
                s.values.erase(s.values.begin() + std::ptrdiff_t(pos));
            }
        } else if (v > 0.0f) {
            s.indices.insert(it, rho);
            s.values.insert(s.values.begin() + std::ptrdiff_t(pos), v);
        }
        decode_into(params, s, out.cell(c));
    }
    return out;
}

void apply_edit(DenseFeatureMap& dense, const FeatureEdit& edit, const SaeParams& params, const SparseFeatureMap* codes) {
    switch (edit.mode) {
        case EditMode::add_fixed:
            if (!edit.weight) throw FormatError("add_fixed edit without weights");
            dense = apply_fixed(dense, edit.feature, edit.weight->effective(), params);
            return;
        case EditMode::modulate:
            if (edit.weight) {
                Grid a = edit.weight->effective();
                for (auto& v : a.values) v *= edit.beta;
                dense = apply_fixed(dense, edit.feature, a, params);
            } else {
                if (!codes) throw ConfigError("modulate edit needs the sparse codes of the map");
                dense = apply_modulation(dense, *codes, edit.feature, edit.beta, params);
            }
            return;
        case EditMode::empty_context:
            throw ConfigError("empty_context edits replace the block output; use apply_empty_context with the block input");
    }
}

FeatureEdit negated(const FeatureEdit& e) {
    FeatureEdit n = e;
    switch (e.mode) {
        case EditMode::add_fixed: n.weight->scale = -e.weight->scale; break;
        case EditMode::modulate: n.beta = -e.beta; break;
        case EditMode::empty_context: n.gamma = -e.gamma; break;
    }
    return n;
}

CfgEdits compose_cfg(const InterventionSpec& spec) {
    CfgEdits out;
    out.cond = spec.edits;
    switch (spec.cfg) {
        case CfgMode::plain: break;
        case CfgMode::cond_only: out.cond_pass_only = true; break;
        case CfgMode::cond_minus_uncond:
            for (const auto& e : spec.edits) out.uncond.push_back(negated(e));
            break;
    }
    return out;
}

namespace {

std::string fmt_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", double(v));
    return buf;
}

}  // namespace

std::string format_spec(const std::vector<InterventionSpec>& specs) {
    std::ostringstream os;
    os << "sdsae-intervention " << kSpecVersion << "\n";
    std::string checkpoint;
    for (const auto& s : specs)
        if (!s.checkpoint.empty()) {
            if (!checkpoint.empty() && checkpoint != s.checkpoint)
                throw ConfigError("specs in one file must share the checkpoint");
            checkpoint = s.checkpoint;
        }
    if (!checkpoint.empty()) os << "checkpoint " << checkpoint << "\n";
    for (const auto& s : specs) {
        s.validate();
        os << "block " << s.block << "\n";
        os << "  cfg " << to_string(s.cfg) << "\n";
        os << "  steps " << s.step_begin << " " << s.step_end << "\n";
        os << "  ablate " << (s.ablate_block ? "true" : "false") << "\n";
        for (const auto& e : s.edits) {
            os << "  edit " << to_string(e.mode) << " " << e.feature;
            if (e.mode == EditMode::modulate) os << " beta " << fmt_float(e.beta);
            if (e.mode == EditMode::empty_context)
                os << " gamma " << fmt_float(e.gamma) << " k " << e.k << " mu " << fmt_float(e.mu);
            if (e.weight) {
                if (e.weight->source.empty()) throw ConfigError("weight grid has no file; use serialize_spec");
                os << " weight " << e.weight->source << " scale " << fmt_float(e.weight->scale);
            }
            os << "\n";
        }
        os << "end\n";
    }
    return os.str();
}

void serialize_spec(std::vector<InterventionSpec>& specs, const fs::path& path) {
    const auto dir = path.parent_path();
    const auto stem = path.stem().string();
    for (size_t b = 0; b < specs.size(); ++b)
        for (size_t e = 0; e < specs[b].edits.size(); ++e) {
            auto& w = specs[b].edits[e].weight;
            if (w && w->source.empty()) {
                const std::string name = stem + "." + std::to_string(b) + "." + std::to_string(e) + ".sdsh";
                save_grid_shard(w->grid, dir / name);
                w->source = name;
            }
        }
    const std::string text = format_spec(specs);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<InterventionSpec> parse_spec_text(const std::string& text, const fs::path& base_dir) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) -> FormatError {
        return FormatError("spec line " + std::to_string(lineno) + ": " + msg);
    };

    std::vector<InterventionSpec> specs;
    std::string checkpoint;
    bool header = false;
    InterventionSpec* cur = nullptr;

    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(t);
        if (tok.empty() || tok[0][0] == '#') continue;

        auto need = [&](size_t n) {
            if (tok.size() != n) throw fail("'" + tok[0] + "' expects " + std::to_string(n - 1) + " argument(s)");
        };
        auto as_uint = [&](const std::string& s) -> uint32_t {
            try {
                size_t used = 0;
                const unsigned long v = std::stoul(s, &used);
                if (used != s.size() || v > UINT32_MAX || s[0] == '-') throw std::invalid_argument(s);
                return uint32_t(v);
            } catch (const std::exception&) {
                throw fail("expected an unsigned integer, got '" + s + "'");
            }
        };
        auto as_float = [&](const std::string& s) -> float {
            try {
                size_t used = 0;
                const float v = std::stof(s, &used);
                if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
                return v;
            } catch (const std::exception&) {
                throw fail("expected a number, got '" + s + "'");
            }
        };

        if (!header) {
            if (tok.size() != 2 || tok[0] != "sdsae-intervention") throw fail("missing 'sdsae-intervention <version>' header");
            if (tok[1] != std::to_string(kSpecVersion)) throw fail("unsupported spec version " + tok[1]);
            header = true;
            continue;
        }
        const std::string& key = tok[0];
        if (!cur) {
            if (key == "checkpoint") {
                need(2);
                checkpoint = tok[1];
            } else if (key == "block") {
                need(2);
                specs.emplace_back();
                cur = &specs.back();
                cur->block = tok[1];
                cur->checkpoint = checkpoint;
            } else {
                throw fail("unexpected '" + key + "' outside a block");
            }
            continue;
        }
        if (key == "cfg") {
            need(2);
            try {
                cur->cfg = parse_cfg_mode(tok[1]);
            } catch (const FormatError& e) {
                throw fail(e.what());
            }
        } else if (key == "steps") {
            need(3);
            cur->step_begin = as_uint(tok[1]);
            cur->step_end = as_uint(tok[2]);
            if (cur->step_end < cur->step_begin) throw fail("step range end precedes begin");
        } else if (key == "ablate") {
            need(2);
            if (tok[1] != "true" && tok[1] != "false") throw fail("ablate expects true or false");
            cur->ablate_block = tok[1] == "true";
        } else if (key == "edit") {
            if (tok.size() < 3) throw fail("edit expects a mode and a feature id");
            FeatureEdit e;
            try {
                e.mode = parse_edit_mode(tok[1]);
            } catch (const FormatError& err) {
                throw fail(err.what());
            }
            e.feature = as_uint(tok[2]);
            bool has_beta = false, has_gamma = false, has_k = false, has_mu = false, has_scale = false;
            for (size_t i = 3; i < tok.size(); i += 2) {
                if (i + 1 >= tok.size()) throw fail("edit option '" + tok[i] + "' has no value");
                const auto& opt = tok[i];
                const auto& val = tok[i + 1];
                if (opt == "beta" && e.mode == EditMode::modulate) {
                    e.beta = as_float(val);
                    has_beta = true;
                } else if (opt == "gamma" && e.mode == EditMode::empty_context) {
                    e.gamma = as_float(val);
                    has_gamma = true;
                } else if (opt == "k" && e.mode == EditMode::empty_context) {
                    e.k = as_uint(val);
                    has_k = true;
                } else if (opt == "mu" && e.mode == EditMode::empty_context) {
                    e.mu = as_float(val);
                    has_mu = true;
                } else if (opt == "weight") {
                    SpatialWeight w;
                    w.source = val;
                    const fs::path p = fs::path(val).is_absolute() ? fs::path(val) : base_dir / val;
                    try {
                        w.grid = load_grid(p);
                    } catch (const Error& err) {
                        throw fail(std::string("cannot load weights: ") + err.what());
                    }
                    e.weight = std::move(w);
                } else if (opt == "scale") {
                    if (!e.weight) throw fail("'scale' must follow 'weight'");
                    e.weight->scale = as_float(val);
                    has_scale = true;
                } else {
                    throw fail("option '" + opt + "' is not valid for " + tok[1]);
                }
            }
            if (e.mode == EditMode::add_fixed && !e.weight) throw fail("add_fixed edit needs 'weight'");
            if (e.weight && !has_scale) throw fail("'weight' needs a 'scale'");
            if (e.mode == EditMode::modulate && !has_beta) throw fail("modulate edit needs 'beta'");
            if (e.mode == EditMode::empty_context && !(has_gamma && has_k && has_mu))
                throw fail("empty_context edit needs 'gamma', 'k' and 'mu'");
            cur->edits.push_back(std::move(e));
        } else if (key == "end") {
            need(1);
            try {
                cur->validate();
            } catch (const FormatError& e) {
                throw fail(e.what());
            }
            cur = nullptr;
        } else {
            throw fail("unknown key '" + key + "'");
        }
    }
    if (!header) throw FormatError("spec: empty file");
    if (cur) throw FormatError("spec: block '" + cur->block + "' is missing 'end'");
    return specs;
}

std::vector<InterventionSpec> parse_spec(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open spec " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_spec_text(ss.str(), path.parent_path());
}

}  // namespace sdsae
