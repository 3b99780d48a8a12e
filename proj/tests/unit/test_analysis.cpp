// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "tara/analysis/analysis.hpp"
#include "tara/diffusion/world.hpp"
#include "tara/error.hpp"
#include "tara/numerics/rng.hpp"

using namespace tara;
using attn::Projection;
using num::Matrix;

namespace {

attn::AttentionMap map_of(std::size_t layer, std::size_t step, Matrix w) {
    attn::AttentionMap m;
    m.layer = layer;
    m.step = step;
    m.timestep = static_cast<int>(100 - step);
    m.weights = std::move(w);
    return m;
}

/// Map whose column j puts mass on `cells[j]`; rows outside every set attend to a trailing sink column.
Matrix one_hot_columns(std::size_t m, const std::vector<std::vector<std::size_t>>& cells) {
    const std::size_t n = cells.size() + 1;
    Matrix w(m, n);
    for (std::size_t j = 0; j < cells.size(); ++j) {
        for (std::size_t c : cells[j]) {
            w(c, j) = 1.0;
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += w(i, j);
        if (s == 0.0) {
            w(i, n - 1) = 1.0;
        } else {
            for (std::size_t j = 0; j < n; ++j) w(i, j) /= s;
        }
    }
    return w;
}

}  // namespace

TEST_CASE("uniform attention: entropy ln m and pairwise IoU 1") {
    attn::ProbeCollector p;
    p.maps.push_back(map_of(0, 0, Matrix(16, 3, 1.0 / 3.0)));
    p.maps.push_back(map_of(1, 0, Matrix(16, 3, 1.0 / 3.0)));
    const std::vector<std::size_t> pos{0, 2};
    const auto s = analysis::attention_summary(p, pos);
    CHECK(s.maps_used == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(std::abs(s.entropy[i] - std::log(16.0)) < 1e-12);
        CHECK(std::abs(std::accumulate(s.mass[i].begin(), s.mass[i].end(), 0.0) - 1.0) < 1e-12);
    }
    CHECK(s.iou[0][1] == 1.0);
    CHECK(s.iou[0][0] == 1.0);
}

TEST_CASE("disjoint one-hot attention: IoU 0 and entropy of the owned cells") {
    attn::ProbeCollector p;
    // 20 cells, top 20% = 4 cells; position 0 owns cells 0-3, position 1 owns 10-13.
    p.maps.push_back(map_of(0, 0, one_hot_columns(20, {{0, 1, 2, 3}, {10, 11, 12, 13}})));
    const std::vector<std::size_t> pos{0, 1};
    const auto s = analysis::attention_summary(p, pos);
    CHECK(s.iou[0][1] == 0.0);
    CHECK(std::abs(s.entropy[0] - std::log(4.0)) < 1e-12);
    const std::vector<std::size_t> region{0, 1, 2, 3};
    CHECK(analysis::region_iou(s.mass[0], region, 0.2) == 1.0);
    CHECK(analysis::region_iou(s.mass[1], region, 0.2) == 0.0);
}

TEST_CASE("step ranges select maps and empty selections are rejected") {
    attn::ProbeCollector p;
    p.maps.push_back(map_of(0, 0, one_hot_columns(4, {{0}, {1}})));
    p.maps.push_back(map_of(0, 1, one_hot_columns(4, {{2}, {3}})));
    const std::vector<std::size_t> pos{0};
    analysis::StepRange late;
    late.first = 1;
    const auto s = analysis::attention_summary(p, pos, late, 0.25);
    CHECK(s.maps_used == 1);
    CHECK(s.mass[0][2] == 1.0);
    analysis::StepRange none;
    none.first = 5;
    CHECK_THROWS_AS(analysis::attention_summary(p, pos, none), ConfigError);
    analysis::StepRange inverted;
    inverted.first = 1;
    inverted.last = 0;
    CHECK_THROWS_AS(analysis::attention_summary(p, pos, inverted), ConfigError);
    const std::vector<std::size_t> out_of_range{7};
    CHECK_THROWS_AS(analysis::attention_summary(p, out_of_range), Error);
    CHECK_THROWS_AS(analysis::attention_summary(attn::ProbeCollector{}, pos), ConfigError);
}

TEST_CASE("top-mass cells: ceil(q m) cells, ties to the lower index") {
    const std::vector<double> mass{0.1, 0.3, 0.3, 0.05, 0.25};
    CHECK(analysis::top_mass_cells(mass, 0.2) == std::vector<std::size_t>{1});
    CHECK(analysis::top_mass_cells(mass, 0.4) == std::vector<std::size_t>{1, 2});
    CHECK(analysis::top_mass_cells(mass, 0.5) == std::vector<std::size_t>{1, 2, 4});
    CHECK(analysis::top_mass_cells(mass, 1.0).size() == 5);
    const std::vector<std::size_t> a{1, 2, 3}, b{2, 3, 4, 5}, e{};
    CHECK(analysis::set_iou(a, b) == doctest::Approx(2.0 / 5.0));
    CHECK(analysis::set_iou(e, e) == 1.0);
    CHECK(analysis::set_iou(a, e) == 0.0);
    const std::vector<double> p{0.5, 0.5, 0.0};
    CHECK(std::abs(analysis::entropy(p) - std::log(2.0)) < 1e-15);
}

TEST_CASE("property: permuting cells permutes the top-mass set") {
    num::Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 5 + rng.below(40);
        std::vector<double> mass(m);
        for (double& v : mass) v = rng.uniform();
        std::vector<std::size_t> perm(m);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = m - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        std::vector<double> shuffled(m);
        for (std::size_t i = 0; i < m; ++i) shuffled[perm[i]] = mass[i];
        auto top = analysis::top_mass_cells(mass, 0.2);
        for (std::size_t& c : top) c = perm[c];
        std::sort(top.begin(), top.end());
        CHECK(analysis::top_mass_cells(shuffled, 0.2) == top);
    }
}

TEST_CASE("token influence: averages per concept and projection, zeros survive") {
    attn::ProbeCollector p;
    p.influence.push_back({"a", Projection::K, 0, 0, {0.0, 2.0, 0.0}});
    p.influence.push_back({"a", Projection::K, 1, 0, {0.0, 4.0, 0.0}});
    p.influence.push_back({"a", Projection::V, 0, 0, {0.0, 1.0, 0.0}});
    p.influence.push_back({"b", Projection::K, 0, 0, {0.0, 0.0, 0.0}});
    const auto r = analysis::token_influence(p);
    CHECK(r.n == 3);
    CHECK(r.rows.size() == 3);
    CHECK(r.at("a", Projection::K).magnitude == std::vector<double>{0.0, 3.0, 0.0});
    CHECK(r.at("a", Projection::V).magnitude == std::vector<double>{0.0, 1.0, 0.0});
    CHECK(r.at("b", Projection::K).magnitude == std::vector<double>{0.0, 0.0, 0.0});
    CHECK_THROWS_AS(r.at("b", Projection::V), ConfigError);
    const std::vector<std::string> tokens{"[BOS]", "sks", "[EOS]"};
    const std::string csv = r.to_csv(tokens);
    CHECK(csv.rfind("concept,projection,position,token,magnitude\n", 0) == 0);
    CHECK(csv.find("a,K,1,sks,3") != std::string::npos);
    CHECK_THROWS_AS(analysis::token_influence(attn::ProbeCollector{}), ConfigError);
}

TEST_CASE("token influence of a sampled run is zero off the rare positions and zero for B = 0") {
    diffusion::ModelConfig c;
    c.grid = 4;
    c.d_model = 8;
    c.d_text = 8;
    c.layers = 2;
    c.mlp_hidden = 8;
    c.timesteps = 20;
    const auto v = text::build_vocab(11, 8, diffusion::default_words());
    const auto model = diffusion::ToyDenoiser::init(c, 2);
    lora::AdapterLayout layout;
    layout.d_model = 8;
    layout.d_text = 8;
    layout.layers = {0, 1};
    auto a = lora::init_adapter(text::bind_concept(v, "k", "sks", "dog"), 2, layout, lora::InitMode::Gaussian, 1);
    const auto seq = text::encode_prompt(v, std::span(&a.binding, 1),
                                         std::vector<std::string>{"a", "sks", "dog", "and", "a", "cat"});
    {
        attn::ProbeCollector p;
        const std::vector<lora::LoraAdapter> list{a};
        static_cast<void>(diffusion::sample(model, list, seq, 3, 3, &p));
        const auto r = analysis::token_influence(p);
        for (const auto& row : r.rows) {
            CHECK(*std::max_element(row.magnitude.begin(), row.magnitude.end()) == 0.0);
        }
    }
    num::Rng rng(5);
    for (const auto& name : lora::block_names(a)) {
        Matrix& m = lora::block(a, name);
        m = rng.normal_matrix(m.rows(), m.cols());
    }
    attn::ProbeCollector p;
    const std::vector<lora::LoraAdapter> list{a};
    static_cast<void>(diffusion::sample(model, list, seq, 3, 3, &p));
    CHECK(p.maps.size() == 6);
    const auto r = analysis::token_influence(p);
    for (const auto& row : r.rows) {
        for (std::size_t j = 0; j < seq.n(); ++j) {
            if (j == 2) {
                CHECK(row.magnitude[j] > 0.0);
            } else {
                CHECK(row.magnitude[j] == 0.0);
            }
        }
    }

    const auto path = (std::filesystem::temp_directory_path() / "tara_probe_test.tprb").string();
    analysis::save_probes(p, path);
    const auto back = analysis::load_probes(path);
    REQUIRE(back.maps.size() == p.maps.size());
    REQUIRE(back.influence.size() == p.influence.size());
    for (std::size_t i = 0; i < p.maps.size(); ++i) {
        CHECK(back.maps[i].weights.bitwise_equal(p.maps[i].weights));
        CHECK(back.maps[i].layer == p.maps[i].layer);
        CHECK(back.maps[i].step == p.maps[i].step);
        CHECK(back.maps[i].timestep == p.maps[i].timestep);
    }
    for (std::size_t i = 0; i < p.influence.size(); ++i) {
        CHECK(back.influence[i].column_norms == p.influence[i].column_norms);
        CHECK(back.influence[i].concept_name == p.influence[i].concept_name);
    }
    std::filesystem::remove(path);

    CHECK(analysis::method_of(a) == "tara");
}

TEST_CASE("interference: identical runs give 0, region MSE otherwise, and rankings ascend") {
    num::Rng rng(2);
    const Matrix composed = rng.normal_matrix(16, 4);
    const std::vector<Matrix> same{composed, composed};
    const std::vector<analysis::ConceptRegion> regions{{"x", {0, 1}}, {"y", {2, 3}}};
    const auto zero = analysis::interference("tara", same, composed, regions);
    CHECK(zero.mean("tara") == 0.0);

    Matrix shifted = composed;
    for (std::size_t k = 0; k < 4; ++k) shifted(0, k) += 1.0;
    const std::vector<Matrix> solo{shifted, composed};
    auto r = analysis::interference("db-lora-unmasked", solo, composed, regions);
    CHECK(r.rows[0].mse == doctest::Approx(0.5));
    CHECK(r.rows[1].mse == 0.0);
    CHECK(r.mean("db-lora-unmasked") == doctest::Approx(0.25));
    for (const auto& row : zero.rows) r.rows.push_back(row);
    CHECK(r.methods().size() == 2);
    const std::string ordering = r.ordering_csv();
    CHECK(ordering.find("tara") < ordering.find("db-lora-unmasked"));
    CHECK_THROWS_AS(r.mean("rob"), ConfigError);

    const std::vector<analysis::ConceptRegion> empty{{"x", {}}, {"y", {1}}};
    CHECK_THROWS_AS(analysis::interference("tara", same, composed, empty), ConfigError);
    CHECK_THROWS_AS(analysis::interference("tara", std::span(same).first(1), composed, regions), ConfigError);
}

TEST_CASE("PGM encoding: header, big-endian samples, min-max normalized") {
    const std::vector<double> v{0.0, 0.5, 1.0, 0.25};
    const auto bytes = analysis::encode_pgm16(v, 2);
    const std::string head = "P5\n2 2\n65535\n";
    REQUIRE(bytes.size() == head.size() + 8);
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(head.size())) == head);
    auto sample = [&](std::size_t i) { return (bytes[head.size() + 2 * i] << 8) | bytes[head.size() + 2 * i + 1]; };
    CHECK(sample(0) == 0);
    CHECK(sample(1) == 32768);
    CHECK(sample(2) == 65535);
    CHECK(sample(3) == 16384);
    CHECK_THROWS_AS(analysis::encode_pgm16(v, 3), ShapeError);
    const std::vector<double> shifted{2.0, 3.0, 2.5, 2.0};
    const auto s = analysis::encode_pgm16(shifted, 2);
    CHECK(((s[head.size() + 2] << 8) | s[head.size() + 3]) == 65535);
    CHECK(((s[head.size() + 4] << 8) | s[head.size() + 5]) == 32768);
    CHECK(((s[head.size() + 6] << 8) | s[head.size() + 7]) == 0);
    const std::vector<double> flat{0.3, 0.3, 0.3, 0.3};
    const auto f = analysis::encode_pgm16(flat, 2);
    CHECK(std::all_of(f.begin() + static_cast<std::ptrdiff_t>(head.size()), f.end(), [](auto b) { return b == 0; }));
    const std::vector<double> bad{std::nan("")};
    CHECK_THROWS_AS(analysis::encode_pgm16(bad, 1), NonFiniteError);
}
