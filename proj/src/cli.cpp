#include "sdsae/cli.hpp"

#include "sdsae/error.hpp"
#include "sdsae/featmap.hpp"
#include "sdsae/intervene.hpp"
#include "sdsae/kernels.hpp"
#include "sdsae/metrics.hpp"
#include "sdsae/raster.hpp"
#include "sdsae/riebench.hpp"
#include "sdsae/rng.hpp"
#include "sdsae/sae.hpp"
#include "sdsae/shardio.hpp"
#include "sdsae/synth.hpp"
#include "sdsae/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

namespace sdsae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
    uint64_t seed = 0;
    int threads = 0;
    bool no_verify = false;
    std::string report;
};

// Appends one JSON record to the report file (if any).
void emit_report(const Globals& g, json j) {
    if (g.report.empty()) return;
    std::ofstream out(g.report, std::ios::app);
    if (!out) throw IoError("cannot open report " + g.report);
    out << j.dump() << "\n";
    if (!out) throw IoError("write failed for " + g.report);
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    size_t start = 0;
    for (;;) {
        const auto p = s.find(sep, start);
        parts.push_back(s.substr(start, p == std::string::npos ? std::string::npos : p - start));
        if (p == std::string::npos) break;
        start = p + 1;
    }
    return parts;
}

std::vector<DenseFeatureMap> read_all_maps(const fs::path& path) {
    ShardReader r(path);
    std::vector<DenseFeatureMap> maps;
    DenseFeatureMap m;
    while (r.next(m)) maps.push_back(m);
    return maps;
}

// The synth dictionary is stored as one n_true x 1 x d map.
void save_dictionary(const GroundTruthDictionary& dict, const fs::path& path) {
    DenseFeatureMap m(dict.n_true, 1, dict.d);
    m.data = dict.atoms;
    ShardHeader h;
    h.h = dict.n_true;
    h.w = 1;
    h.d = dict.d;
    h.count = 1;
    write_shard(h, std::span<const DenseFeatureMap>(&m, 1), path);
}

GroundTruthDictionary load_dictionary(const fs::path& path) {
    const auto maps = read_all_maps(path);
    if (maps.size() != 1 || maps[0].w != 1) throw FormatError(path.string() + ": not a dictionary file");
    GroundTruthDictionary dict;
    dict.d = maps[0].d;
    dict.n_true = maps[0].h;
    dict.atoms = maps[0].data;
    return dict;
}

void maybe_verify_manifest(const Globals& g, const fs::path& shards) {
    if (g.no_verify) return;
    const fs::path dir = fs::is_directory(shards) ? shards : shards.parent_path();
    if (fs::exists(dir / kManifestName)) verify_manifest(dir);
}

// ---- synth ----

struct SynthArgs {
    uint32_t d = 0, n_true = 0, k_true = 0;
    uint64_t n = 0;
    float sigma = 0.01f;
    bool orthogonal = false;
    std::string out_dir, block = "synth";
};

int cmd_synth(const SynthArgs& a, const Globals& g, std::ostream& out) {
    if (a.d == 0 || a.n_true == 0 || a.n == 0) throw ConfigError("synth: d, n-true and n must be positive");
    if (a.k_true == 0 || a.k_true > a.n_true) throw ConfigError("synth: k-true must satisfy 0 < k-true <= n-true");
    if (!(a.sigma >= 0.0f) || !std::isfinite(a.sigma)) throw ConfigError("synth: sigma must be finite and >= 0");
    if (a.orthogonal && a.n_true > a.d) throw ConfigError("synth: --orthogonal needs n-true <= d");
    const fs::path dir(a.out_dir);
    fs::create_directories(dir);

    auto dict = gen_dictionary(a.d, a.n_true, g.seed, a.orthogonal);
    dict.k_true = a.k_true;
    dict.noise_sigma = a.sigma;
    const auto samples = gen_samples(dict, a.n, mix_seed(g.seed, 1));
    write_synthetic(samples, dir / "samples.sdsh", dir / "codes.sdsf");
    save_dictionary(dict, dir / "dictionary.dict");
    write_manifest(build_manifest(dir, a.block, "synth seed=" + std::to_string(g.seed)), dir);

    out << "synth: wrote " << a.n << " samples (d=" << a.d << ", n_true=" << a.n_true << ", k_true=" << a.k_true
        << ") to " << dir.string() << "; max |cos| between atoms " << dict.max_abs_cosine << "\n";
    emit_report(g, {{"command", "synth"}, {"d", a.d}, {"n_true", a.n_true}, {"k_true", a.k_true}, {"n", a.n},
                    {"sigma", a.sigma}, {"seed", g.seed}, {"max_abs_cosine", dict.max_abs_cosine},
                    {"shard", (dir / "samples.sdsh").string()}, {"sidecar", (dir / "codes.sdsf").string()},
                    {"dictionary", (dir / "dictionary.dict").string()}});
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string shards, out, log, dictionary, aux_target = "input";
    uint32_t n_f = 0, k = 0, k_aux = 0;
    float alpha = 1.0f / 32.0f;
    TrainConfig cfg;
};

int cmd_train(TrainArgs a, const Globals& g, std::ostream& out) {
    a.cfg.seed = g.seed;
    a.cfg.aux_target = parse_aux_target(a.aux_target);
    const auto shards = list_shards(a.shards);
    if (shards.empty()) throw DataError("train: no shards under " + a.shards);
    SaeConfig sc;
    sc.d = read_shard_header(shards.front()).d;
    sc.n_f = a.n_f;
    sc.k = a.k;
    sc.k_aux = a.k_aux ? a.k_aux : std::min<uint32_t>(256, a.n_f);
    sc.alpha = a.alpha;
    sc.validate();
    a.cfg.validate();
    maybe_verify_manifest(g, a.shards);

    FitOptions opts;
    opts.checkpoint = fs::path(a.out);
    if (!a.log.empty()) opts.log_file = fs::path(a.log);
    const auto res = fit(shards, sc, a.cfg, opts);

    json rep{{"command", "train"}, {"checkpoint", a.out}, {"d", sc.d}, {"n_f", sc.n_f}, {"k", sc.k},
             {"steps", a.cfg.steps}, {"seed", g.seed}, {"final_ev", num(res.final_ev)}, {"dead_count", res.final_dead}};
    out << "train: " << a.cfg.steps << " steps, held-out EV " << res.final_ev << ", dead features " << res.final_dead;
    if (!a.dictionary.empty()) {
        const auto m = match_features(res.params, load_dictionary(a.dictionary));
        rep["recovery_rate"] = m.recovery_rate;
        out << ", recovery " << m.recovery_rate;
    }
    out << "\n";
    emit_report(g, rep);
    return 0;
}

// ---- encode ----

int cmd_encode(const std::string& checkpoint, const std::string& shards_arg, const std::string& out_path, uint32_t k,
               const Globals& g, std::ostream& out) {
    const auto params = load_checkpoint(checkpoint, !g.no_verify);
    if (k == 0) k = params.config.k;
    if (k > params.n_f()) throw ConfigError("encode: k exceeds n_f");
    const auto shards = list_shards(shards_arg);
    if (shards.empty()) throw DataError("encode: no shards under " + shards_arg);
    maybe_verify_manifest(g, shards_arg);
    SparseMapWriter writer{fs::path(out_path)};
    uint64_t maps = 0;
    DenseFeatureMap m;
    for (const auto& s : shards) {
        ShardReader r(s);
        if (r.header().d != params.d())
            throw ConfigError("encode: " + s.string() + " has d=" + std::to_string(r.header().d) +
                              ", checkpoint has d=" + std::to_string(params.d()));
        while (r.next(m)) {
            writer.write(encode_map(params, m, k));
            ++maps;
        }
    }
    writer.close();
    out << "encode: " << maps << " maps -> " << out_path << "\n";
    emit_report(g, {{"command", "encode"}, {"maps", maps}, {"k", k}, {"out", out_path}});
    return 0;
}

// ---- shared inputs of rank / transfer ----

struct PairArgs {
    std::vector<std::string> blocks;  // name:src.sdsf:tgt.sdsf
    std::string src_mask, tgt_mask, manifest, example, category = "change_object";
};

struct PairData {
    std::vector<BlockMaps> blocks;
    TransferMasks masks;
    EditCategory category = EditCategory::change_object;
    std::string id;
};

PairData load_pair(const PairArgs& a) {
    PairData d;
    if (!a.manifest.empty()) {
        if (!a.blocks.empty()) throw ConfigError("--manifest and --block are mutually exclusive");
        const auto examples = read_benchmark_manifest(a.manifest);
        for (const auto& ex : examples)
            if (ex.id == a.example) {
                auto data = load_benchmark_example(ex);
                d.blocks = std::move(data.blocks);
                d.masks = std::move(data.masks);
                d.category = ex.category;
                d.id = ex.id;
                return d;
            }
        throw ConfigError("example '" + a.example + "' not in " + a.manifest);
    }
    if (a.blocks.empty()) throw ConfigError("need at least one --block name:src.sdsf:tgt.sdsf (or --manifest)");
    for (const auto& b : a.blocks) {
        const auto parts = split(b, ':');
        if (parts.size() != 3 || parts[0].empty()) throw ConfigError("--block expects name:src.sdsf:tgt.sdsf, got '" + b + "'");
        d.blocks.push_back({parts[0], read_sparse_maps(parts[1]), read_sparse_maps(parts[2])});
    }
    if (!a.src_mask.empty()) d.masks.src = RegionMask::load(a.src_mask);
    if (!a.tgt_mask.empty()) d.masks.tgt = RegionMask::load(a.tgt_mask);
    d.category = parse_edit_category(a.category);
    return d;
}

// ---- rank ----

struct RankArgs {
    PairArgs pair;
    std::string out, method = "sae";
    std::vector<std::string> layers;  // name:src.sdsh:tgt.sdsh (neuron method)
    size_t show = 10;
};

int cmd_rank(const RankArgs& a, const Globals& g, std::ostream& out) {
    if (a.method == "neuron") {
        if (a.pair.src_mask.empty() || a.pair.tgt_mask.empty()) throw ConfigError("rank --method neuron needs both masks");
        if (a.layers.empty()) throw ConfigError("rank --method neuron needs --layer name:src.sdsh:tgt.sdsh");
        std::vector<NeuronLayer> layers;
        for (const auto& l : a.layers) {
            const auto parts = split(l, ':');
            if (parts.size() != 3 || parts[0].empty()) throw ConfigError("--layer expects name:src.sdsh:tgt.sdsh");
            layers.push_back({parts[0], read_all_maps(parts[1]), read_all_maps(parts[2])});
        }
        const auto ranked = neuron_rank(layers, RegionMask::load(a.pair.src_mask), RegionMask::load(a.pair.tgt_mask));
        std::ofstream f(a.out, std::ios::trunc);
        if (!f) throw IoError("cannot open " + a.out + " for writing");
        for (const auto& e : ranked)
            f << json{{"layer", e.layer}, {"neuron", e.neuron}, {"score", e.score}, {"src", e.src}, {"tgt", e.tgt}}.dump()
              << "\n";
        out << "rank: " << ranked.size() << " neurons -> " << a.out << "\n";
        for (size_t i = 0; i < std::min(a.show, ranked.size()); ++i)
            out << "  " << ranked[i].layer << "#" << ranked[i].neuron << "  " << ranked[i].score << "\n";
        emit_report(g, {{"command", "rank"}, {"method", "neuron"}, {"entries", ranked.size()}, {"out", a.out}});
        return 0;
    }
    const auto data = load_pair(a.pair);
    const auto recipe = EditRecipe::for_category(data.category, 0, 0, 1.0f);
    const auto ranking = importance_rank(collect_means(recipe, data.blocks, data.masks));
    write_ranking(ranking, a.out);
    out << "rank: " << ranking.entries.size() << " features over " << data.blocks.size() << " block(s) -> " << a.out << "\n";
    for (const auto& n : ranking.normalization)
        if (n.src_zero() || n.tgt_zero())
            out << "  warning: block " << n.block << " has a zero coefficient sum on the "
                << (n.src_zero() ? "source" : "target") << " side\n";
    for (size_t i = 0; i < std::min(a.show, ranking.entries.size()); ++i)
        out << "  " << ranking.entries[i].block << "#" << ranking.entries[i].feature << "  " << ranking.entries[i].gamma << "\n";
    emit_report(g, {{"command", "rank"}, {"method", "sae"}, {"category", to_string(data.category)},
                    {"entries", ranking.entries.size()}, {"out", a.out}});
    return 0;
}

// ---- transfer ----

struct TransferArgs {
    PairArgs pair;
    std::string out, out_dir, ranking, method = "sae", cfg = "cond_minus_uncond", checkpoint, label;
    std::string src_dense, tgt_dense;
    int64_t n_add = -1, n_sub = -1;
    float strength = 1.0f;
    std::vector<uint32_t> steps;
};

void finish_specs(std::vector<InterventionSpec>& specs, const TransferArgs& a) {
    const CfgMode cfg = parse_cfg_mode(a.cfg);
    for (auto& s : specs) {
        s.cfg = cfg;
        s.checkpoint = a.checkpoint;
        if (!a.steps.empty()) {
            s.step_begin = a.steps[0];
            s.step_end = a.steps[1];
        }
        s.validate();
    }
}

size_t edit_count(const std::vector<InterventionSpec>& specs) {
    size_t n = 0;
    for (const auto& s : specs) n += s.edits.size();
    return n;
}

int cmd_transfer(TransferArgs a, const Globals& g, std::ostream& out) {
    if (!a.label.empty()) {
        const auto l = SweepLabel::parse(a.label);
        if (a.n_add < 0) a.n_add = l.n;
        a.strength = l.strength;
    }
    if (!std::isfinite(a.strength)) throw ConfigError("transfer: strength must be finite");
    if (!a.steps.empty() && (a.steps.size() != 2 || a.steps[1] < a.steps[0]))
        throw ConfigError("transfer: --steps expects BEGIN END with BEGIN <= END");

    if (a.method == "steering") {
        if (a.src_dense.empty() || a.tgt_dense.empty() || a.pair.src_mask.empty() || a.pair.tgt_mask.empty())
            throw ConfigError("transfer --method steering needs --src-dense, --tgt-dense and both masks");
        const auto src = read_all_maps(a.src_dense);
        const auto tgt = read_all_maps(a.tgt_dense);
        if (src.size() != tgt.size()) throw ConfigError("transfer: source and target shards hold different map counts");
        const auto ms = RegionMask::load(a.pair.src_mask), mt = RegionMask::load(a.pair.tgt_mask);
        if (ms.count() == 0 || mt.count() == 0) throw DataError("empty mask");
        std::vector<DenseFeatureMap> deltas;
        for (size_t i = 0; i < src.size(); ++i) deltas.push_back(steering_delta(src[i], ms, tgt[i], mt, a.strength));
        ShardHeader h = read_shard_header(a.src_dense);
        write_shard(h, deltas, a.out);
        out << "transfer: steering delta (" << deltas.size() << " map(s), strength " << a.strength << ") -> " << a.out << "\n";
        emit_report(g, {{"command", "transfer"}, {"method", "steering"}, {"strength", a.strength}, {"out", a.out}});
        return 0;
    }
    if (a.method != "sae") throw ConfigError("transfer: unknown method " + a.method);
    if (a.n_add < 0) throw ConfigError("transfer: --n (or --label) is required");
    if (a.n_sub < 0) a.n_sub = a.n_add;

    auto one = [&](const PairData& data, const fs::path& spec_path) {
        const auto recipe = EditRecipe::for_category(data.category, uint32_t(a.n_add), uint32_t(a.n_sub), a.strength);
        const auto means = collect_means(recipe, data.blocks, data.masks);
        const auto ranking = a.ranking.empty() ? importance_rank(means) : read_ranking(a.ranking);
        auto specs = build_transfer(recipe, ranking, data.blocks, means, data.masks);
        finish_specs(specs, a);
        serialize_spec(specs, spec_path);
        return specs;
    };

    const SweepLabel label{"s", uint32_t(a.n_add), a.strength};
    if (!a.pair.manifest.empty() && a.pair.example.empty()) {
        if (a.out_dir.empty()) throw ConfigError("transfer over a whole manifest needs --out-dir");
        if (!a.ranking.empty()) throw ConfigError("--ranking applies to a single example");
        fs::create_directories(a.out_dir);
        const auto examples = read_benchmark_manifest(a.pair.manifest);
        for (const auto& ex : examples) {
            auto loaded = load_benchmark_example(ex);
            PairData data{std::move(loaded.blocks), std::move(loaded.masks), ex.category, ex.id};
            const fs::path spec_path = fs::path(a.out_dir) / (ex.id + ".spec");
            const auto specs = one(data, spec_path);
            ResultRecord rec{ex.id, ex.category, uint32_t(a.n_add), a.strength, label.to_string(),
                             {{"edits", double(edit_count(specs))}, {"blocks", double(specs.size())}}};
            emit_report(g, json::parse(rec.to_json_line()));
        }
        out << "transfer: " << examples.size() << " example(s) -> " << a.out_dir << "\n";
        return 0;
    }
    if (a.out.empty()) throw ConfigError("transfer: --out is required");
    const auto data = load_pair(a.pair);
    const auto specs = one(data, a.out);
    out << "transfer: " << to_string(data.category) << " " << label.to_string() << ", " << edit_count(specs)
        << " edit(s) over " << specs.size() << " block(s) -> " << a.out << "\n";
    ResultRecord rec{data.id, data.category, uint32_t(a.n_add), a.strength, label.to_string(),
                     {{"edits", double(edit_count(specs))}, {"blocks", double(specs.size())}}};
    emit_report(g, json::parse(rec.to_json_line()));
    return 0;
}

// ---- metrics ----

struct MetricsArgs {
    std::string checkpoint, shards, a, b, mode = "flattened", original, intervened, activations;
    std::vector<std::string> samples, set;
    uint32_t k = 0;
    uint64_t max_vectors = 100'000;
};

int metric_ev(const MetricsArgs& a, const Globals& g, std::ostream& out) {
    if (a.checkpoint.empty() || a.shards.empty()) throw ConfigError("metrics ev needs --checkpoint and --shards");
    const auto params = load_checkpoint(a.checkpoint, !g.no_verify);
    const uint32_t k = a.k ? a.k : params.config.k;
    maybe_verify_manifest(g, a.shards);
    PositionStream stream(list_shards(a.shards));
    if (stream.dim() != params.d()) throw ConfigError("metrics ev: shard d differs from checkpoint d");
    const uint64_t n = std::min<uint64_t>(stream.size(), a.max_vectors);
    std::vector<float> h(n * params.d());
    for (uint64_t i = 0; i < n; ++i) stream.next(std::span<float>(h.data() + i * params.d(), params.d()));
    const double ev = reconstruction_ev(params, h, k);
    out << "ev: " << ev << " over " << n << " vectors\n";
    emit_report(g, {{"command", "metrics"}, {"metric", "ev"}, {"ev", ev}, {"vectors", n}, {"k", k}});
    return 0;
}

int metric_overlap(const MetricsArgs& a, const Globals& g, std::ostream& out) {
    if (a.a.empty() || a.b.empty()) throw ConfigError("metrics overlap needs --a and --b");
    const auto mode = a.mode == "per_position" ? OverlapMode::per_position : OverlapMode::flattened;
    const auto ma = read_sparse_maps(a.a), mb = read_sparse_maps(a.b);
    if (ma.size() != mb.size() || ma.empty()) throw DataError("metrics overlap: files hold different (or zero) map counts");
    double sum = 0.0;
    json values = json::array();
    for (size_t i = 0; i < ma.size(); ++i) {
        const double c = overlap_cosine(ma[i], mb[i], mode);
        values.push_back(c);
        sum += c;
    }
    const double mean = sum / double(ma.size());
    out << "overlap (" << a.mode << "): mean cosine " << mean << " over " << ma.size() << " pair(s)\n";
    emit_report(g, {{"command", "metrics"}, {"metric", "overlap"}, {"mode", a.mode}, {"mean", mean}, {"values", values}});
    return 0;
}

int metric_color(const MetricsArgs& a, const Globals& g, std::ostream& out) {
    if (a.samples.empty()) throw ConfigError("metrics color needs --sample image.ppm:activations");
    std::vector<RgbImage> images;
    std::vector<Grid> grids;
    for (const auto& s : a.samples) {
        const auto parts = split(s, ':');
        if (parts.size() != 2) throw ConfigError("--sample expects image.ppm:activations, got '" + s + "'");
        images.push_back(read_ppm(parts[0]));
        grids.push_back(load_grid(parts[1]));
    }
    std::vector<WeightedImage> ws;
    for (size_t i = 0; i < images.size(); ++i) ws.push_back({&images[i], grids[i]});
    const auto cs = color_sensitivity(ws);
    out << "color: average (" << cs.average[0] << ", " << cs.average[1] << ", " << cs.average[2] << "), distance "
        << cs.distance << "\n";
    emit_report(g, {{"command", "metrics"}, {"metric", "color"}, {"average", cs.average}, {"distance", cs.distance}});
    return 0;
}

int metric_locality(const MetricsArgs& a, const Globals& g, std::ostream& out) {
    if (a.original.empty() || a.intervened.empty() || a.activations.empty())
        throw ConfigError("metrics locality needs --original, --intervened and --activations");
    const auto r = locality(read_ppm(a.original), read_ppm(a.intervened), load_grid(a.activations));
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    out << "locality: outside " << (r.outside ? std::to_string(*r.outside) : "n/a") << ", inside "
        << (r.inside ? std::to_string(*r.inside) : "n/a") << "\n";
    emit_report(g, {{"command", "metrics"}, {"metric", "locality"}, {"outside", opt(r.outside)}, {"inside", opt(r.inside)},
                    {"outside_pixels", r.outside_pixels}, {"inside_pixels", r.inside_pixels}});
    return 0;
}

int metric_embed(const MetricsArgs& a, const Globals& g, std::ostream& out) {
    if (!a.set.empty()) {
        std::vector<EmbeddingVector> vs;
        for (const auto& p : a.set) vs.push_back(read_embedding(p));
        const double c = pairwise_mean_cosine(vs);
        out << "embed: pairwise mean cosine " << c << " over " << vs.size() << " vectors\n";
        emit_report(g, {{"command", "metrics"}, {"metric", "embed"}, {"pairwise_mean_cosine", c}, {"n", vs.size()}});
        return 0;
    }
    if (a.a.empty() || a.b.empty()) throw ConfigError("metrics embed needs --a and --b, or --set");
    const double c = embedding_cosine(read_embedding(a.a), read_embedding(a.b));
    out << "embed: cosine " << c << "\n";
    emit_report(g, {{"command", "metrics"}, {"metric", "embed"}, {"cosine", c}});
    return 0;
}

// ---- verify ----

int cmd_verify(const std::string& checkpoint, const std::string& shards, const Globals& g, std::ostream& out) {
    const auto params = load_checkpoint(checkpoint, false);
    params.config.validate();
    const double err = max_decoder_norm_error(params);
    const bool norms_ok = err <= kDecoderNormTolerance;
    bool manifest_checked = false;
    if (!shards.empty()) {
        const fs::path dir = fs::is_directory(shards) ? fs::path(shards) : fs::path(shards).parent_path();
        verify_manifest(dir);
        manifest_checked = true;
        for (const auto& s : list_shards(shards))
            if (read_shard_header(s).d != params.d())
                throw ConfigError("verify: " + s.string() + " does not match checkpoint d=" + std::to_string(params.d()));
    }
    const auto& c = params.config;
    out << "verify: d=" << c.d << " n_f=" << c.n_f << " k=" << c.k << " k_aux=" << c.k_aux << " alpha=" << c.alpha
        << "; max | ||f|| - 1 | = " << err << (norms_ok ? " (ok)" : " (VIOLATION)")
        << (manifest_checked ? "; manifest ok" : "") << "\n";
    emit_report(g, {{"command", "verify"}, {"checkpoint", checkpoint}, {"d", c.d}, {"n_f", c.n_f}, {"k", c.k},
                    {"k_aux", c.k_aux}, {"alpha", c.alpha}, {"max_norm_error", err}, {"norms_ok", norms_ok},
                    {"manifest_checked", manifest_checked}});
    if (!norms_ok) throw NumericError("decoder feature norms deviate from 1 by " + std::to_string(err));
    return 0;
}

void add_pair_options(CLI::App* sub, PairArgs& p, bool category) {
    sub->add_option("--block", p.blocks, "Block maps as name:source.sdsf:target.sdsf (repeatable)");
    sub->add_option("--src-mask", p.src_mask, "Source region mask (.pgm, nonzero = inside)");
    sub->add_option("--tgt-mask", p.tgt_mask, "Target region mask (.pgm, nonzero = inside)");
    sub->add_option("--manifest", p.manifest, "Benchmark manifest (JSON lines) instead of --block/--*-mask");
    sub->add_option("--example", p.example, "Example id within --manifest");
    if (category)
        sub->add_option("--category", p.category, "Edit category (sets the ranking contrast and recipe)")
            ->check(CLI::IsMember({"change_object", "add_object", "delete_object", "change_content", "change_pose",
                                   "change_color", "change_material", "change_background", "change_style"}));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sparse autoencoders for diffusion-model activations: training, feature maps, interventions, metrics"};
    app.name("sdsae");
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Seed for every random choice")->default_val(0);
    app.add_option("--threads", g.threads, "Worker threads (0 = OpenMP default)")->check(CLI::NonNegativeNumber);
    app.add_flag("--no-verify", g.no_verify, "Skip checkpoint norm and dataset checksum verification");
    app.add_option("--report", g.report, "Append JSON-line records to this file");

    SynthArgs sy;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic sparse-dictionary dataset");
    synth->add_option("--d", sy.d, "Vector dimension")->required();
    synth->add_option("--n-true", sy.n_true, "Number of ground-truth atoms")->required();
    synth->add_option("--k-true", sy.k_true, "Atoms per sample")->required();
    synth->add_option("--n", sy.n, "Number of samples")->required();
    synth->add_option("--sigma", sy.sigma, "Gaussian noise standard deviation")->default_val(0.01f);
    synth->add_flag("--orthogonal", sy.orthogonal, "Orthonormalize the atoms (needs n-true <= d)");
    synth->add_option("--block", sy.block, "Block name recorded in the manifest")->default_val("synth");
    synth->add_option("--out-dir", sy.out_dir, "Output directory")->required();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a TopK SAE on activation shards");
    train->add_option("--shards", tr.shards, "Shard directory or file")->required()->check(CLI::ExistingPath);
    train->add_option("--out", tr.out, "Checkpoint path")->required();
    train->add_option("--n-f", tr.n_f, "Number of features")->required();
    train->add_option("--k", tr.k, "Active features per position")->required();
    train->add_option("--k-aux", tr.k_aux, "Dead features in the auxiliary loss (default min(256, n_f))");
    train->add_option("--alpha", tr.alpha, "Auxiliary loss weight")->default_val(1.0f / 32.0f);
    train->add_option("--batch", tr.cfg.batch_size, "Batch size")->default_val(4096u);
    train->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate")->default_val(1e-4f);
    train->add_option("--beta1", tr.cfg.beta1, "Adam beta1")->default_val(0.9f);
    train->add_option("--beta2", tr.cfg.beta2, "Adam beta2")->default_val(0.999f);
    train->add_option("--steps", tr.cfg.steps, "Optimizer steps")->required();
    train->add_option("--dead-window", tr.cfg.dead_window, "Samples without firing before a feature is dead")
        ->default_val(100000u);
    train->add_option("--aux-target", tr.aux_target, "Auxiliary reconstruction target")
        ->check(CLI::IsMember({"input", "residual"}))
        ->default_val("input");
    train->add_option("--eval-interval", tr.cfg.eval_interval, "Steps between held-out evaluations")->default_val(100u);
    train->add_option("--shuffle-buffer", tr.cfg.shuffle_buffer, "Shuffle window in vectors")
        ->default_val(kDefaultShuffleBuffer);
    train->add_option("--holdout", tr.cfg.holdout_fraction, "Held-out fraction (tail in storage order)")->default_val(0.01);
    train->add_option("--eval-max", tr.cfg.eval_max, "Max held-out vectors scored per evaluation")->default_val(100000u);
    train->add_option("--log", tr.log, "JSON-line training log");
    train->add_option("--dictionary", tr.dictionary, "Synthetic dictionary to score recovery against")
        ->check(CLI::ExistingFile);

    std::string enc_ckpt, enc_shards, enc_out;
    uint32_t enc_k = 0;
    auto* encode = app.add_subcommand("encode", "Encode dense feature maps into sparse feature maps");
    encode->add_option("--checkpoint", enc_ckpt, "SAE checkpoint")->required()->check(CLI::ExistingFile);
    encode->add_option("--shards", enc_shards, "Shard directory or file")->required()->check(CLI::ExistingPath);
    encode->add_option("--out", enc_out, "Output sparse-map file (.sdsf)")->required();
    encode->add_option("--k", enc_k, "Active features per position (default: checkpoint k)");

    RankArgs rk;
    auto* rank = app.add_subcommand("rank", "Rank features by source/target importance");
    add_pair_options(rank, rk.pair, true);
    rank->add_option("--method", rk.method, "sae (feature importance) or neuron (baseline)")
        ->check(CLI::IsMember({"sae", "neuron"}))
        ->default_val("sae");
    rank->add_option("--layer", rk.layers, "Neuron activations as name:source.sdsh:target.sdsh (repeatable)");
    rank->add_option("--out", rk.out, "Ranking output (JSON lines)")->required();
    rank->add_option("--show", rk.show, "Entries to print")->default_val(10u);

    TransferArgs tf;
    auto* transfer = app.add_subcommand("transfer", "Build a feature-transfer intervention spec (or a steering delta)");
    add_pair_options(transfer, tf.pair, true);
    transfer->add_option("--method", tf.method, "sae (recipe spec) or steering (dense delta shard)")
        ->check(CLI::IsMember({"sae", "steering"}))
        ->default_val("sae");
    transfer->add_option("--n", tf.n_add, "Top features to add");
    transfer->add_option("--n-sub", tf.n_sub, "Bottom features to subtract (default: --n)");
    transfer->add_option("--strength", tf.strength, "Edit strength")->default_val(1.0f);
    transfer->add_option("--label", tf.label, "Sweep label method:n:strength, e.g. s:160:1");
    transfer->add_option("--ranking", tf.ranking, "Precomputed ranking (default: computed from the maps)");
    transfer->add_option("--cfg", tf.cfg, "Classifier-free guidance handling")
        ->check(CLI::IsMember({"plain", "cond_only", "cond_minus_uncond"}))
        ->default_val("cond_minus_uncond");
    transfer->add_option("--steps", tf.steps, "Step range BEGIN END (half-open)")->expected(2);
    transfer->add_option("--checkpoint", tf.checkpoint, "SAE checkpoint path recorded in the spec");
    transfer->add_option("--src-dense", tf.src_dense, "Source dense maps (.sdsh), steering only");
    transfer->add_option("--tgt-dense", tf.tgt_dense, "Target dense maps (.sdsh), steering only");
    transfer->add_option("--out", tf.out, "Spec file (sae) or delta shard (steering)");
    transfer->add_option("--out-dir", tf.out_dir, "Output directory when transferring a whole manifest");

    MetricsArgs mt;
    auto* metrics = app.add_subcommand("metrics", "Evaluation metrics");
    metrics->require_subcommand(1);
    auto* m_ev = metrics->add_subcommand("ev", "Explained variance of an SAE on shards");
    m_ev->add_option("--checkpoint", mt.checkpoint, "SAE checkpoint")->required()->check(CLI::ExistingFile);
    m_ev->add_option("--shards", mt.shards, "Shard directory or file")->required()->check(CLI::ExistingPath);
    m_ev->add_option("--k", mt.k, "Active features (default: checkpoint k)");
    m_ev->add_option("--max-vectors", mt.max_vectors, "Vectors scored")->default_val(100000u);
    auto* m_ov = metrics->add_subcommand("overlap", "Cosine overlap of paired sparse feature maps");
    m_ov->add_option("--a", mt.a, "First sparse-map file")->required();
    m_ov->add_option("--b", mt.b, "Second sparse-map file")->required();
    m_ov->add_option("--mode", mt.mode, "flattened or per_position")
        ->check(CLI::IsMember({"flattened", "per_position"}))
        ->default_val("flattened");
    auto* m_co = metrics->add_subcommand("color", "Activation-weighted color sensitivity");
    m_co->add_option("--sample", mt.samples, "image.ppm:activations (.pgm/.sdsh), repeatable")->required();
    auto* m_lo = metrics->add_subcommand("locality", "Pixel change outside/inside a feature's active region");
    m_lo->add_option("--original", mt.original, "Original image (.ppm)")->required();
    m_lo->add_option("--intervened", mt.intervened, "Intervened image (.ppm)")->required();
    m_lo->add_option("--activations", mt.activations, "Feature activation grid (.pgm/.sdsh)")->required();
    auto* m_em = metrics->add_subcommand("embed", "Cosine similarity of precomputed embeddings");
    m_em->add_option("--a", mt.a, "First embedding");
    m_em->add_option("--b", mt.b, "Second embedding");
    m_em->add_option("--set", mt.set, "Embeddings for a pairwise mean cosine");

    std::string ver_ckpt, ver_shards;
    auto* verify = app.add_subcommand("verify", "Audit a checkpoint (norms, config) and optionally a dataset");
    verify->add_option("--checkpoint", ver_ckpt, "SAE checkpoint")->required()->check(CLI::ExistingFile);
    verify->add_option("--shards", ver_shards, "Dataset directory whose manifest is checked")->check(CLI::ExistingPath);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return int(ExitCode::usage);
    }

    try {
        if (g.threads > 0) set_num_threads(g.threads);
        if (*synth) return cmd_synth(sy, g, out);
        if (*train) return cmd_train(tr, g, out);
        if (*encode) return cmd_encode(enc_ckpt, enc_shards, enc_out, enc_k, g, out);
        if (*rank) return cmd_rank(rk, g, out);
        if (*transfer) return cmd_transfer(tf, g, out);
        if (*m_ev) return metric_ev(mt, g, out);
        if (*m_ov) return metric_overlap(mt, g, out);
        if (*m_co) return metric_color(mt, g, out);
        if (*m_lo) return metric_locality(mt, g, out);
        if (*m_em) return metric_embed(mt, g, out);
        if (*verify) return cmd_verify(ver_ckpt, ver_shards, g, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return int(e.code());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return int(ExitCode::io);
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
    return int(ExitCode::usage);
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace sdsae::cli
