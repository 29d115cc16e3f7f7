#include "support.hpp"

#include "sdsae/error.hpp"
#include "sdsae/intervene.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>
#include <sstream>

using namespace testing;

namespace {

const fs::path kFixtures = SDSAE_FIXTURES;

// dD + A (x) f_rho, element by element in double.
std::vector<double> broadcast_oracle(const DenseFeatureMap& m, const Grid& a, const std::vector<float>& f) {
    std::vector<double> out(m.data.size());
    for (size_t c = 0; c < m.cells(); ++c)
        for (uint32_t j = 0; j < m.d; ++j) out[c * m.d + j] = double(m.data[c * m.d + j]) + double(a.values[c]) * f[j];
    return out;
}

std::vector<float> feature_of(const SaeParams& p, uint32_t rho) {
    return {p.feature(rho).begin(), p.feature(rho).end()};
}

Grid random_weights(std::mt19937_64& rng, uint32_t h, uint32_t w, double p_zero = 0.5) {
    Grid g(h, w);
    std::bernoulli_distribution z(p_zero);
    for (auto& v : g.values) v = z(rng) ? 0.0f : rand_vec(rng, 1, -20.0f, 20.0f)[0];
    return g;
}

FeatureEdit fixed_edit(uint32_t rho, const Grid& g, float scale, std::string source = {}) {
    FeatureEdit e;
    e.feature = rho;
    e.mode = EditMode::add_fixed;
    e.weight = SpatialWeight{g, scale, std::move(source)};
    return e;
}

FeatureEdit modulate_edit(uint32_t rho, float beta) {
    FeatureEdit e;
    e.feature = rho;
    e.mode = EditMode::modulate;
    e.beta = beta;
    return e;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("mode strings round trip; unknown modes rejected") {
    for (auto m : {EditMode::add_fixed, EditMode::modulate, EditMode::empty_context})
        CHECK(parse_edit_mode(to_string(m)) == m);
    for (auto m : {CfgMode::plain, CfgMode::cond_only, CfgMode::cond_minus_uncond}) CHECK(parse_cfg_mode(to_string(m)) == m);
    CHECK_THROWS_AS(parse_edit_mode("multiply"), FormatError);
    CHECK_THROWS_AS(parse_cfg_mode("uncond"), FormatError);
}

TEST_CASE("apply_fixed examples") {
    std::mt19937_64 rng(1);
    const auto p = random_params(6, 10, 2, 2);
    const auto m = random_dense(rng, 3, 4, 6);
    CHECK(apply_fixed(m, 3, Grid(3, 4, 0.0f), p) == m);

    Grid one(3, 4, 0.0f);
    one.at(1, 2) = 2.5f;
    const auto out = apply_fixed(m, 3, one, p);
    for (uint32_t i = 0; i < 3; ++i)
        for (uint32_t j = 0; j < 4; ++j) {
            if (i == 1 && j == 2) {
                for (uint32_t c = 0; c < 6; ++c) CHECK(out.cell(i, j)[c] == m.cell(i, j)[c] + 2.5f * p.feature(3)[c]);
            } else {
                CHECK(std::equal(out.cell(i, j).begin(), out.cell(i, j).end(), m.cell(i, j).begin()));
            }
        }
    // Weights at another resolution are nearest-neighbour resampled onto the map grid.
    Grid coarse(1, 2, 0.0f);
    coarse.at(0, 1) = 1.0f;
    CHECK(apply_fixed(m, 3, coarse, p) == apply_fixed(m, 3, resample_nearest(coarse, 3, 4), p));
    CHECK_THROWS_AS(apply_fixed(m, 10, one, p), ConfigError);
    CHECK_THROWS_AS(apply_fixed(random_dense(rng, 3, 4, 5), 3, one, p), ConfigError);
}

TEST_CASE("apply_fixed matches the broadcast oracle and leaves zero-weight cells bitwise unchanged") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const uint32_t h = 1 + uint32_t(rng() % 6), w = 1 + uint32_t(rng() % 6), d = 1 + uint32_t(rng() % 12);
        const auto p = random_params(d, 8, 2, rng());
        const auto m = random_dense(rng, h, w, d);
        const auto a = random_weights(rng, h, w);
        const uint32_t rho = uint32_t(rng() % 8);
        const auto out = apply_fixed(m, rho, a, p);
        const auto want = broadcast_oracle(m, a, feature_of(p, rho));
        for (size_t c = 0; c < m.cells(); ++c) {
            for (uint32_t j = 0; j < d; ++j) CHECK(out.data[c * d + j] == doctest::Approx(want[c * d + j]).epsilon(1e-6));
            if (a.values[c] == 0.0f)
                CHECK(std::memcmp(&out.data[c * d], &m.data[c * d], d * sizeof(float)) == 0);
        }
    }
}

TEST_CASE("apply_fixed: disjoint-feature edits add; negated weights undo up to rounding") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto p = random_params(7, 12, 2, rng());
        const auto m = random_dense(rng, 3, 3, 7);
        const auto a1 = random_weights(rng, 3, 3, 0.2), a2 = random_weights(rng, 3, 3, 0.2);
        const auto two = apply_fixed(apply_fixed(m, 1, a1, p), 5, a2, p);
        const auto f1 = feature_of(p, 1), f2 = feature_of(p, 5);
        for (size_t c = 0; c < m.cells(); ++c)
            for (uint32_t j = 0; j < 7; ++j) {
                const double want = double(m.data[c * 7 + j]) + double(a1.values[c]) * f1[j] + double(a2.values[c]) * f2[j];
                CHECK(two.data[c * 7 + j] == doctest::Approx(want).epsilon(1e-5).scale(20.0));
            }

        Grid neg = a1;
        for (auto& v : neg.values) v = -v;
        const auto back = apply_fixed(apply_fixed(m, 1, a1, p), 1, neg, p);
        for (size_t c = 0; c < m.cells(); ++c)
            for (uint32_t j = 0; j < 7; ++j) {
                const double x = m.data[c * 7 + j];
                const double step = std::abs(double(a1.values[c]) * f1[j]);
                // x + s - s differs from x by at most the rounding of the intermediate sum.
                CHECK(std::abs(double(back.data[c * 7 + j]) - x) <=
                      2.0 * std::numeric_limits<float>::epsilon() * (std::abs(x) + step));
            }
    }
}

TEST_CASE("apply_modulation examples and oracle") {
    std::mt19937_64 rng(5);
    const auto p = random_params(5, 9, 3, 6);
    const auto m = random_dense(rng, 2, 3, 5);
    const auto s = random_sparse(rng, 2, 3, 9, 3, 0.2);
    CHECK(apply_modulation(m, s, 2, 0.0f, p) == m);

    // A map that is exactly S^rho f_rho: beta = -1 removes it entirely.
    SparseFeatureMap only(2, 2, 9);
    DenseFeatureMap exact(2, 2, 5);
    for (size_t c = 0; c < 4; ++c) {
        only.cells[c] = {{4}, {float(c + 1)}, 9};
        for (uint32_t j = 0; j < 5; ++j) exact.data[c * 5 + j] = float(c + 1) * p.feature(4)[j];
    }
    const auto gone = apply_modulation(exact, only, 4, -1.0f, p);
    for (float x : gone.data) CHECK(x == 0.0f);

    for (int trial = 0; trial < 20; ++trial) {
        const uint32_t rho = uint32_t(rng() % 9);
        const auto codes = random_sparse(rng, 2, 3, 9, 4, 0.3);
        const auto out = apply_modulation(m, codes, rho, 6.0f, p);
        Grid beta_s = codes.feature_grid(rho);
        for (auto& v : beta_s.values) v *= 6.0f;
        const auto want = broadcast_oracle(m, beta_s, feature_of(p, rho));
        for (size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(want[i]).epsilon(1e-6));
        const auto g = codes.feature_grid(rho);
        for (size_t c = 0; c < m.cells(); ++c)
            if (g.values[c] == 0.0f) CHECK(std::memcmp(&out.data[c * 5], &m.data[c * 5], 5 * sizeof(float)) == 0);
    }
    CHECK_THROWS_AS(apply_modulation(m, random_sparse(rng, 3, 3, 9, 2), 2, 1.0f, p), ConfigError);
}

TEST_CASE("apply_empty_context examples") {
    std::mt19937_64 rng(7);
    const auto p = random_params(4, 6, 2, 8);
    const auto in = random_dense(rng, 2, 2, 4);
    const FeatureStats mu{5, 2.0, 11};
    CHECK(apply_empty_context(in, 5, 0.0f, 10, mu, p) == in);

    const auto out = apply_empty_context(in, 5, 1.0f, 10, mu, p);
    for (size_t c = 0; c < 4; ++c)
        for (uint32_t j = 0; j < 4; ++j)
            CHECK(out.data[c * 4 + j] == doctest::Approx(in.data[c * 4 + j] + 20.0 * p.feature(5)[j]).epsilon(1e-6));

    Grid mask(2, 2, 0.0f);
    mask.at(0, 1) = 1.0f;
    const auto masked = apply_empty_context(in, 5, 1.0f, 10, mu, p, mask);
    for (size_t c = 0; c < 4; ++c)
        if (c != 1) CHECK(std::equal(masked.cell(c).begin(), masked.cell(c).end(), in.cell(c).begin()));
    CHECK(masked.cell(1)[0] == out.cell(1)[0]);

    CHECK_THROWS_AS(apply_empty_context(in, 5, 1.0f, 10, FeatureStats{5, 0.0, 0}, p), DataError);
}

TEST_CASE("apply_fixed_reconstructed goes through the SAE and carries its error") {
    std::mt19937_64 rng(9);
    // Orthonormal identity SAE: nonnegative inputs reconstruct exactly, so both paths agree.
    SaeConfig cfg{4, 4, 4, 4, 1.0f / 32.0f};
    SaeParams id(cfg);
    for (uint32_t r = 0; r < 4; ++r) id.encoder[size_t(r) * 4 + r] = id.decoder[size_t(r) * 4 + r] = 1.0f;
    DenseFeatureMap m(2, 2, 4);
    for (auto& x : m.data) x = float(rng() % 5);
    Grid a(2, 2, 1.5f);
    CHECK(apply_fixed_reconstructed(m, 2, a, id, 4) == apply_fixed(m, 2, a, id));

    // Negative weights clamp the coefficient at zero.
    Grid neg(2, 2, -100.0f);
    const auto clamped = apply_fixed_reconstructed(m, 2, neg, id, 4);
    for (size_t c = 0; c < 4; ++c) CHECK(clamped.cell(c)[2] == 0.0f);

    // A lossy SAE: the reconstructed path differs even with zero weights; the direct path does not.
    const auto p = random_params(8, 16, 2, 10);
    const auto rm = random_dense(rng, 2, 2, 8);
    CHECK(apply_fixed(rm, 0, Grid(2, 2, 0.0f), p) == rm);
    CHECK_FALSE(apply_fixed_reconstructed(rm, 0, Grid(2, 2, 0.0f), p, 2) == rm);
}

TEST_CASE("apply_edit dispatches by mode") {
    std::mt19937_64 rng(11);
    const auto p = random_params(5, 8, 2, 12);
    const auto m = random_dense(rng, 2, 2, 5);
    const Grid a = random_weights(rng, 2, 2, 0.0);

    auto x = m;
    apply_edit(x, fixed_edit(3, a, 2.0f), p);
    Grid a2 = a;
    for (auto& v : a2.values) v *= 2.0f;
    CHECK(x == apply_fixed(m, 3, a2, p));

    const auto codes = random_sparse(rng, 2, 2, 8, 3, 0.0);
    x = m;
    apply_edit(x, modulate_edit(1, 0.5f), p, &codes);
    CHECK(x == apply_modulation(m, codes, 1, 0.5f, p));
    x = m;
    CHECK_THROWS_AS(apply_edit(x, modulate_edit(1, 0.5f), p), ConfigError);

    FeatureEdit ec;
    ec.mode = EditMode::empty_context;
    ec.gamma = 1.0f;
    ec.k = 10;
    ec.mu = 1.0f;
    CHECK_THROWS_AS(apply_edit(x, ec, p), ConfigError);
}

TEST_CASE("compose_cfg and negation") {
    InterventionSpec s;
    s.block = "down.2.1";
    s.edits = {fixed_edit(3, Grid(2, 2, 1.0f), 4.0f), modulate_edit(5, 2.0f)};
    FeatureEdit ec;
    ec.feature = 7;
    ec.mode = EditMode::empty_context;
    ec.gamma = 0.5f;
    ec.k = 10;
    ec.mu = 1.0f;
    s.edits.push_back(ec);

    s.cfg = CfgMode::cond_minus_uncond;
    auto c = compose_cfg(s);
    CHECK(c.cond == s.edits);
    REQUIRE(c.uncond.size() == 3);
    CHECK(c.uncond[0].weight->scale == -4.0f);
    CHECK(c.uncond[0].weight->grid == s.edits[0].weight->grid);
    CHECK(c.uncond[1].beta == -2.0f);
    CHECK(c.uncond[2].gamma == -0.5f);
    CHECK_FALSE(c.cond_pass_only);
    for (size_t i = 0; i < 3; ++i) CHECK(negated(c.uncond[i]) == s.edits[i]);

    s.cfg = CfgMode::plain;
    c = compose_cfg(s);
    CHECK(c.uncond.empty());
    CHECK_FALSE(c.cond_pass_only);

    s.cfg = CfgMode::cond_only;
    c = compose_cfg(s);
    CHECK(c.uncond.empty());
    CHECK(c.cond_pass_only);
}

TEST_CASE("spec validation") {
    InterventionSpec s;
    s.block = "up.0.1";
    s.edits = {fixed_edit(3, Grid(1, 1, 1.0f), 1.0f)};
    CHECK_NOTHROW(s.validate(10));
    CHECK_THROWS_AS(s.validate(3), FormatError);
    s.step_begin = 4;
    s.step_end = 2;
    CHECK_THROWS_AS(s.validate(), FormatError);
    s.step_end = 4;
    CHECK_NOTHROW(s.validate());
    s.block = "";
    CHECK_THROWS_AS(s.validate(), FormatError);
    s.block = "up.0.1";
    s.edits[0].weight.reset();
    CHECK_THROWS_AS(s.validate(), FormatError);
    FeatureEdit ec;
    ec.mode = EditMode::empty_context;
    ec.gamma = 1.0f;
    ec.k = 0;
    s.edits = {ec};
    CHECK_THROWS_AS(s.validate(), FormatError);
}

TEST_CASE("serialize/parse round trip with sidecar grids") {
    TempDir dir;
    std::mt19937_64 rng(13);
    InterventionSpec a;
    a.block = "down.2.1";
    a.checkpoint = "ck.sdck";
    a.step_begin = 3;
    a.step_end = 17;
    a.edits = {fixed_edit(11, random_weights(rng, 4, 4, 0.3), 0.123456789f), modulate_edit(2, -1.75f)};
    InterventionSpec b;
    b.block = "up.0.0";
    b.checkpoint = "ck.sdck";
    b.cfg = CfgMode::cond_only;
    b.ablate_block = true;
    FeatureEdit ec;
    ec.feature = 6;
    ec.mode = EditMode::empty_context;
    ec.gamma = 1.0f;
    ec.k = 10;
    ec.mu = 3.25f;
    ec.weight = SpatialWeight{random_mask_grid(rng, 2, 2), 1.0f, {}};
    b.edits = {ec};

    std::vector<InterventionSpec> specs = {a, b};
    serialize_spec(specs, dir / "x.spec");
    CHECK(fs::exists(dir / "x.0.0.sdsh"));
    CHECK(fs::exists(dir / "x.1.0.sdsh"));
    const auto back = parse_spec(dir / "x.spec");
    CHECK(back == std::vector<InterventionSpec>{a, b});
    CHECK(back[0].edits[0].weight->source == "x.0.0.sdsh");
    // Formatting is a fixed point once sources are assigned.
    CHECK(format_spec(back) == slurp(dir / "x.spec"));

    InterventionSpec minimal;
    minimal.block = "mid.0";
    std::vector<InterventionSpec> one = {minimal};
    serialize_spec(one, dir / "m.spec");
    CHECK(parse_spec(dir / "m.spec") == one);
}

TEST_CASE("parse errors carry line numbers") {
    const fs::path base = kFixtures;
    auto err = [&](const std::string& text) {
        try {
            parse_spec_text(text, base);
        } catch (const FormatError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    const std::string head = "sdsae-intervention 1\nblock b\n";
    CHECK(err("hello\n").find("spec line 1") != std::string::npos);
    CHECK(err("sdsae-intervention 2\n").find("unsupported spec version") != std::string::npos);
    CHECK(err(head + "  edit multiply 3\nend\n").find("spec line 3") != std::string::npos);
    CHECK(err(head + "  cfg sideways\nend\n").find("spec line 3") != std::string::npos);
    CHECK(err(head + "  steps 5 2\nend\n").find("spec line 3") != std::string::npos);
    CHECK(err(head + "  steps a 2\nend\n").find("unsigned integer") != std::string::npos);
    CHECK(err(head + "  edit modulate 3 beta nan\nend\n").find("expected a number") != std::string::npos);
    CHECK(err(head + "  edit modulate 3 gamma 1\nend\n").find("spec line 3") != std::string::npos);
    CHECK(err(head + "  edit add_fixed 3 weight nope.pgm scale 1\nend\n").find("cannot load weights") != std::string::npos);
    CHECK(err(head + "  ablate maybe\nend\n").find("spec line 3") != std::string::npos);
    CHECK(err(head + "  cfg plain\n").find("no error") == std::string::npos);  // unterminated block
    CHECK(err("sdsae-intervention 1\n  cfg plain\n").find("outside a block") != std::string::npos);
    CHECK(err(head + "end\n") == "no error");
}

TEST_CASE("golden spec fixture parses to the pinned structure") {
    const auto specs = parse_spec(kFixtures / "golden.spec");
    REQUIRE(specs.size() == 2);

    const auto& a = specs[0];
    CHECK(a.block == "down.2.1");
    CHECK(a.checkpoint == "down.2.1.sdck");
    CHECK(a.cfg == CfgMode::cond_minus_uncond);
    CHECK(a.step_begin == 0);
    CHECK(a.step_end == 25);
    CHECK_FALSE(a.ablate_block);
    REQUIRE(a.edits.size() == 2);
    CHECK(a.edits[0].mode == EditMode::add_fixed);
    CHECK(a.edits[0].feature == 17);
    REQUIRE(a.edits[0].weight);
    CHECK(a.edits[0].weight->scale == 160.0f);
    CHECK(a.edits[0].weight->source == "golden_mask.pgm");
    const auto& g = a.edits[0].weight->grid;
    CHECK(g.h == 4);
    CHECK(g.w == 4);
    for (uint32_t i = 0; i < 4; ++i)
        for (uint32_t j = 0; j < 4; ++j) CHECK(g.at(i, j) == (j < 2 ? 1.0f : 0.0f));
    CHECK(a.edits[1].mode == EditMode::modulate);
    CHECK(a.edits[1].feature == 4);
    CHECK(a.edits[1].beta == -1.0f);
    CHECK_FALSE(a.edits[1].weight);

    const auto& b = specs[1];
    CHECK(b.block == "up.0.1");
    CHECK(b.checkpoint == "down.2.1.sdck");
    CHECK(b.cfg == CfgMode::plain);
    CHECK(b.step_begin == 5);
    CHECK(b.step_end == 10);
    CHECK(b.ablate_block);
    REQUIRE(b.edits.size() == 2);
    CHECK(b.edits[0].mode == EditMode::empty_context);
    CHECK(b.edits[0].feature == 3);
    CHECK(b.edits[0].gamma == 1.0f);
    CHECK(b.edits[0].k == 10);
    CHECK(b.edits[0].mu == 2.5f);
    CHECK(b.edits[1].mode == EditMode::modulate);
    CHECK(b.edits[1].beta == 6.0f);
    REQUIRE(b.edits[1].weight);
    CHECK(b.edits[1].weight->scale == 0.5f);
    CHECK(b.edits[1].weight->grid.values == std::vector<float>{0.0f, 0.2f, 0.4f, 1.0f});

    // The fixture is in canonical form: formatting reproduces it byte for byte.
    CHECK(format_spec(specs) == slurp(kFixtures / "golden.spec"));
}

TEST_CASE("comments and blank lines are ignored") {
    const std::string text = "# leading comment\nsdsae-intervention 1\n\nblock b\n  # inside\n  steps 1 2\nend\n";
    const auto specs = parse_spec_text(text, kFixtures);
    REQUIRE(specs.size() == 1);
    CHECK(specs[0].step_begin == 1);
}
