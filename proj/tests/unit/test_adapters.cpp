// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "../oracles.hpp"
#include "tara/error.hpp"
#include "tara/io/container.hpp"
#include "tara/lora/adapter.hpp"
#include "tara/numerics/rng.hpp"

using namespace tara;
using attn::Projection;
using num::Matrix;

namespace {

text::Vocabulary vocab() { return text::build_vocab(3, 16, {"a", "dog", "cat", "sks", "xon", "vex", "car", "."}); }

lora::AdapterLayout layout(std::size_t layers = 2) {
    lora::AdapterLayout l;
    l.d_model = 12;
    l.d_text = 16;
    for (std::size_t i = 0; i < layers; ++i) {
        l.layers.push_back(i);
    }
    return l;
}

lora::LoraAdapter random_adapter(num::Rng& rng, const text::Vocabulary& v) {
    static const char* rares[] = {"sks", "xon", "vex"};
    static const char* classes[] = {"dog", "cat", "car"};
    lora::AdapterLayout l;
    l.d_model = 2 + rng.below(10);
    l.d_text = 16;
    const std::size_t nl = 1 + rng.below(3);
    for (std::size_t i = 0; i < nl; ++i) {
        l.layers.push_back(i * 2 + rng.below(2));
    }
    const bool unmasked = rng.below(2) == 0;
    l.mask_policy = unmasked ? attn::MaskPolicy::Unmasked : attn::MaskPolicy::TokenFocused;
    if (unmasked && rng.below(2) == 0) {
        l.targets = {Projection::Q, Projection::K, Projection::V, Projection::O};
    }
    const std::size_t rank = 1 + rng.below(l.d_model);
    const std::size_t pick = rng.below(3);
    lora::LoraAdapter a =
        lora::init_adapter(text::bind_concept(v, "c" + std::to_string(rng.below(1000)), rares[pick], classes[pick]),
                           rank, l, rng.below(2) == 0 ? lora::InitMode::Gaussian : lora::InitMode::Rob, rng.next_u64());
    for (const std::string& name : lora::block_names(a)) {
        Matrix& m = lora::block(a, name);
        m = rng.normal_matrix(m.rows(), m.cols());
    }
    return a;
}

}  // namespace

TEST_CASE("fresh adapters have B = 0, the right shapes and no effect") {
    const auto v = vocab();
    const auto b = text::bind_concept(v, "c", "sks", "dog");
    for (auto mode : {lora::InitMode::Gaussian, lora::InitMode::Rob}) {
        const lora::LoraAdapter a = lora::init_adapter(b, 8, layout(), mode, 1);
        for (std::size_t layer : {0u, 1u}) {
            for (Projection p : {Projection::K, Projection::V}) {
                const attn::LowRank& f = a.factors(layer, p);
                CHECK(f.a.rows() == 8);
                CHECK(f.a.cols() == 16);
                CHECK(f.b.rows() == 12);
                CHECK(f.b.cols() == 8);
                CHECK(num::max_abs(f.b) == 0.0);
                CHECK(num::max_abs(f.materialize()) == 0.0);
            }
            CHECK_THROWS_AS(a.factors(layer, Projection::Q), ConfigError);
        }
        CHECK_THROWS_AS(a.factors(5, Projection::K), ConfigError);
    }
}

TEST_CASE("Gaussian init draws A with variance about 1/r; Rob init has orthonormal rows") {
    const auto v = vocab();
    const auto b = text::bind_concept(v, "c", "sks", "dog");
    lora::AdapterLayout l = layout(8);
    const lora::LoraAdapter g = lora::init_adapter(b, 4, l, lora::InitMode::Gaussian, 2);
    double sq = 0.0;
    std::size_t n = 0;
    for (std::size_t layer = 0; layer < 8; ++layer) {
        for (Projection p : {Projection::K, Projection::V}) {
            for (double x : g.factors(layer, p).a.data()) {
                sq += x * x;
                ++n;
            }
        }
    }
    // 1024 draws; 4 standard errors of the variance estimate.
    CHECK(std::abs(sq / static_cast<double>(n) - 0.25) < 4.0 * 0.25 * std::sqrt(2.0 / static_cast<double>(n)));

    const lora::LoraAdapter r = lora::init_adapter(b, 8, layout(), lora::InitMode::Rob, 3);
    CHECK(r.a_frozen());
    const Matrix& a = r.factors(0, Projection::K).a;
    const Matrix gram = oracle::matmul(a, oracle::transpose(a));
    CHECK(oracle::max_abs_diff(gram, Matrix::identity(8)) < 1e-10);
}

TEST_CASE("init rejects bad ranks and layouts") {
    const auto v = vocab();
    const auto b = text::bind_concept(v, "c", "sks", "dog");
    CHECK_THROWS_AS(lora::init_adapter(b, 0, layout(), lora::InitMode::Gaussian, 0), ConfigError);
    CHECK_THROWS_AS(lora::init_adapter(b, 13, layout(), lora::InitMode::Gaussian, 0), ConfigError);
    lora::AdapterLayout twice = layout();
    twice.layers = {1, 1};
    CHECK_THROWS_AS(lora::init_adapter(b, 4, twice, lora::InitMode::Gaussian, 0), ConfigError);
    lora::AdapterLayout q = layout();
    q.targets = {Projection::Q};
    CHECK_THROWS_AS(lora::init_adapter(b, 4, q, lora::InitMode::Gaussian, 0), ConfigError);
    q.mask_policy = attn::MaskPolicy::Unmasked;
    CHECK_NOTHROW(lora::init_adapter(b, 4, q, lora::InitMode::Gaussian, 0));
    CHECK_THROWS_AS(lora::init_mode_from_string("kaiming"), ConfigError);
}

TEST_CASE("init is deterministic in the seed") {
    const auto v = vocab();
    const auto b = text::bind_concept(v, "c", "sks", "dog");
    const auto x = lora::init_adapter(b, 4, layout(), lora::InitMode::Gaussian, 9);
    CHECK(x.bitwise_equal(lora::init_adapter(b, 4, layout(), lora::InitMode::Gaussian, 9)));
    CHECK_FALSE(x.bitwise_equal(lora::init_adapter(b, 4, layout(), lora::InitMode::Gaussian, 10)));
}

TEST_CASE("low-rank product: B (A x) equals (B A) x within 1e-12") {
    num::Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const attn::LowRank f{rng.normal_matrix(3, 7), rng.normal_matrix(5, 3)};
        const Matrix x = rng.normal_matrix(7, 4);
        const Matrix lazy = num::matmul(f.b, num::matmul(f.a, x));
        const Matrix dense = oracle::matmul(oracle::matmul(f.b, f.a), x);
        CHECK(oracle::max_abs_diff(lazy, dense) < 1e-12);
    }
}

TEST_CASE("property: .tara round-trips bitwise and re-encodes to identical bytes") {
    const auto v = vocab();
    num::Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const lora::LoraAdapter a = random_adapter(rng, v);
        const auto bytes = lora::encode_adapter(a);
        const lora::LoraAdapter back = lora::decode_adapter(bytes);
        CHECK(back.bitwise_equal(a));
        CHECK(back.checksum() == a.checksum());
        CHECK(lora::encode_adapter(back) == bytes);
    }
}

TEST_CASE(".tara save and load through a file") {
    const auto v = vocab();
    num::Rng rng(6);
    const lora::LoraAdapter a = random_adapter(rng, v);
    const auto path = (std::filesystem::temp_directory_path() / "tara_adapter_test.tara").string();
    lora::save_adapter(a, path);
    CHECK(lora::load_adapter(path).bitwise_equal(a));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(lora::load_adapter(path), Error);
}

TEST_CASE("corrupted .tara files are rejected with the failing offset") {
    const auto v = vocab();
    num::Rng rng(7);
    const auto bytes = lora::encode_adapter(random_adapter(rng, v));

    auto flipped = bytes;
    flipped[1] ^= 0x20;
    try {
        static_cast<void>(lora::decode_adapter(flipped));
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.offset() == 1);
    }

    auto version = bytes;
    version[4] = 99;
    try {
        static_cast<void>(lora::decode_adapter(version));
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.offset() == 4);
    }

    auto header = bytes;
    header[12] = '[';
    CHECK_THROWS_AS(lora::decode_adapter(header), FormatError);

    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 3);
    CHECK_THROWS_AS(lora::decode_adapter(truncated), FormatError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(lora::decode_adapter(trailing), FormatError);

    CHECK_THROWS_AS(lora::decode_adapter(std::span<const std::uint8_t>()), FormatError);
}

TEST_CASE("property: any single-byte corruption in the fixed prefix or header is rejected deterministically") {
    const auto v = vocab();
    num::Rng rng(8);
    const auto bytes = lora::encode_adapter(random_adapter(rng, v));
    const std::size_t header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (bytes[11] << 24);
    for (std::size_t i = 0; i < 12; ++i) {
        auto bad = bytes;
        bad[i] ^= 0xFF;
        std::string first, second;
        try {
            static_cast<void>(lora::decode_adapter(bad));
        } catch (const FormatError& e) {
            first = e.what();
        }
        try {
            static_cast<void>(lora::decode_adapter(bad));
        } catch (const FormatError& e) {
            second = e.what();
        }
        CHECK_FALSE(first.empty());
        CHECK(first == second);
    }
    // Header bytes: structural damage is rejected; an edit inside a string value may still parse,
    // in which case decoding must be deterministic.
    std::size_t rejected = 0;
    for (std::size_t i = 12; i < 12 + header_len; ++i) {
        auto bad = bytes;
        bad[i] = '}';
        try {
            const lora::LoraAdapter x = lora::decode_adapter(bad);
            CHECK(lora::decode_adapter(bad).bitwise_equal(x));
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    CHECK(rejected > header_len / 2);
}

TEST_CASE("registry rejects a second adapter on the same rare token and keeps order") {
    const auto v = vocab();
    lora::AdapterRegistry reg;
    reg.add(lora::init_adapter(text::bind_concept(v, "a", "sks", "dog"), 4, layout(), lora::InitMode::Gaussian, 1));
    reg.add(lora::init_adapter(text::bind_concept(v, "b", "xon", "cat"), 4, layout(), lora::InitMode::Gaussian, 2));
    CHECK(reg.size() == 2);
    CHECK(reg.has_rare_token(v.id("sks")));
    CHECK_FALSE(reg.has_rare_token(v.id("vex")));
    CHECK(reg.adapters()[0].binding.name == "a");
    CHECK_THROWS_AS(
        reg.add(lora::init_adapter(text::bind_concept(v, "c", "sks", "car"), 4, layout(), lora::InitMode::Gaussian, 3)),
        ConfigError);
    CHECK(reg.size() == 2);
}

TEST_CASE("property: registry accepts a set iff its rare tokens are distinct") {
    const auto v = vocab();
    const char* rares[] = {"sks", "xon", "vex"};
    num::Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 1 + rng.below(4);
        std::vector<std::size_t> picks;
        for (std::size_t i = 0; i < k; ++i) {
            picks.push_back(rng.below(3));
        }
        bool distinct = true;
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = i + 1; j < k; ++j) {
                distinct = distinct && picks[i] != picks[j];
            }
        }
        lora::AdapterRegistry reg;
        bool threw = false;
        try {
            for (std::size_t i = 0; i < k; ++i) {
                reg.add(lora::init_adapter(text::bind_concept(v, "c" + std::to_string(i), rares[picks[i]], "dog"), 2,
                                           layout(), lora::InitMode::Gaussian, i));
            }
        } catch (const ConfigError&) {
            threw = true;
        }
        CHECK(threw == !distinct);
    }
}

TEST_CASE("block names, bind and bind_vars") {
    const auto v = vocab();
    const auto a = lora::init_adapter(text::bind_concept(v, "c", "sks", "dog"), 4, layout(), lora::InitMode::Rob, 1);
    const auto names = lora::block_names(a);
    CHECK(names == std::vector<std::string>{"l0.K.A", "l0.K.B", "l0.V.A", "l0.V.B", "l1.K.A", "l1.K.B", "l1.V.A",
                                            "l1.V.B"});
    num::Tape tape;
    const lora::BoundAdapter bound = lora::bind(tape, a, true);
    // Rob: A frozen, only B blocks are leaves.
    REQUIRE(bound.leaves.size() == 4);
    for (const auto& [name, var] : bound.leaves) {
        CHECK(name.back() == 'B');
    }
    CHECK(bound.layers.size() == 2);
    CHECK(lora::bind(tape, a, false).leaves.empty());

    std::vector<num::Var> vars;
    for (const auto& n : names) {
        vars.push_back(tape.constant(lora::block(a, n)));
    }
    CHECK(lora::bind_vars(a, vars).layers.size() == 2);
    vars.pop_back();
    CHECK_THROWS_AS(lora::bind_vars(a, vars), ShapeError);
    CHECK_THROWS_AS(lora::block(a, "l9.K.A"), ConfigError);
}

TEST_CASE("check_binding detects a different vocabulary") {
    const auto v = vocab();
    const auto a = lora::init_adapter(text::bind_concept(v, "c", "sks", "dog"), 4, layout(), lora::InitMode::Gaussian, 1);
    CHECK_NOTHROW(lora::check_binding(a, v));
    const auto other = text::build_vocab(3, 16, {"sks", "a", "dog", "cat", "xon", "vex", "car", "."});
    CHECK_THROWS_AS(lora::check_binding(a, other), ConfigError);
}

TEST_CASE("registry manifest round-trips and rejects malformed JSON") {
    const auto dir = std::filesystem::temp_directory_path();
    const auto path = (dir / "tara_manifest_test.json").string();
    lora::save_manifest({"x.tara", "y.tara"}, path);
    const auto back = lora::load_manifest(path);
    REQUIRE(back.size() == 2);
    CHECK(std::filesystem::path(back[0]).filename() == "x.tara");
    io::write_text(path, "{\"adapters\": 3}");
    CHECK_THROWS_AS(lora::load_manifest(path), ConfigError);
    std::filesystem::remove(path);
}
