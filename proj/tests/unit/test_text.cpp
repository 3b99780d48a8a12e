// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tara/error.hpp"
#include "tara/numerics/rng.hpp"
#include "tara/text/vocabulary.hpp"

using namespace tara;
using text::TokenId;

namespace {

std::vector<std::string> ten_words() {
    return {"a", "dog", "cat", "sks", "xon", "and", ".", "car", "vex", "tree"};
}

}  // namespace

TEST_CASE("build_vocab: shape, determinism and seed sensitivity") {
    const text::Vocabulary v = text::build_vocab(7, 8, ten_words());
    CHECK(v.table().rows() == 12);
    CHECK(v.table().cols() == 8);
    CHECK(v.size() == 12);
    CHECK(v.id("[BOS]") == text::kBos);
    CHECK(v.id("[EOS]") == text::kEos);
    CHECK(v.id("a") == 2);

    CHECK(text::build_vocab(7, 8, ten_words()).table().bitwise_equal(v.table()));
    CHECK_FALSE(text::build_vocab(8, 8, ten_words()).table().bitwise_equal(v.table()));
}

TEST_CASE("build_vocab: embeddings have variance about 1/d") {
    std::vector<std::string> words;
    for (int i = 0; i < 400; ++i) {
        words.push_back("w" + std::to_string(i));
    }
    const text::Vocabulary v = text::build_vocab(3, 16, words);
    double sq = 0.0;
    for (double x : v.table().data()) {
        sq += x * x;
    }
    const double var = sq / static_cast<double>(v.table().size());
    // 6432 draws: standard error of the variance estimate is about sqrt(2/6432)/16.
    CHECK(std::abs(var - 1.0 / 16.0) < 4.0 * std::sqrt(2.0 / 6432.0) / 16.0);
}

TEST_CASE("build_vocab: rejects duplicates, empty lists and narrow widths") {
    CHECK_THROWS_AS(text::build_vocab(1, 8, {"a", "b", "a"}), ConfigError);
    CHECK_THROWS_AS(text::build_vocab(1, 8, {}), ConfigError);
    CHECK_THROWS_AS(text::build_vocab(1, 3, {"a"}), ConfigError);
}

TEST_CASE("vocabulary JSON stores seed, width and words and regenerates the table") {
    const text::Vocabulary v = text::build_vocab(42, 8, ten_words());
    const text::Vocabulary back = text::Vocabulary::from_json(v.to_json());
    CHECK(back.table().bitwise_equal(v.table()));
    CHECK(back.checksum() == v.checksum());
    const auto path = (std::filesystem::temp_directory_path() / "tara_vocab_test.json").string();
    text::save_vocab(v, path);
    CHECK(text::load_vocab(path).table().bitwise_equal(v.table()));
    std::filesystem::remove(path);
}

TEST_CASE("encode_prompt: framing, positions and embedding columns") {
    const text::Vocabulary v = text::build_vocab(1, 8, ten_words());
    const text::ConceptBinding c1 = text::bind_concept(v, "c1", "sks", "dog");
    const std::vector<std::string> prompt{"a", "sks", "dog"};
    const text::TokenSequence s = text::encode_prompt(v, std::span(&c1, 1), prompt);
    CHECK(s.ids == std::vector<TokenId>{text::kBos, v.id("a"), v.id("sks"), v.id("dog"), text::kEos});
    CHECK(std::vector<std::size_t>(s.rare_of("c1").begin(), s.rare_of("c1").end()) == std::vector<std::size_t>{2});
    CHECK(std::vector<std::size_t>(s.class_of("c1").begin(), s.class_of("c1").end()) == std::vector<std::size_t>{3});
    for (std::size_t j = 0; j < s.n(); ++j) {
        const auto e = v.embedding(s.ids[j]);
        for (std::size_t r = 0; r < v.d(); ++r) {
            CHECK(s.x(r, j) == e[r]);
        }
    }
}

TEST_CASE("encode_prompt: no rare tokens and two concepts") {
    const text::Vocabulary v = text::build_vocab(1, 8, ten_words());
    const std::vector<text::ConceptBinding> b{text::bind_concept(v, "c1", "sks", "dog"),
                                              text::bind_concept(v, "c2", "xon", "cat")};
    const std::vector<std::string> plain{"a", "dog", "and", "a", "cat"};
    const text::TokenSequence s0 = text::encode_prompt(v, b, plain);
    CHECK(s0.rare_of("c1").empty());
    CHECK(s0.rare_of("c2").empty());

    const std::vector<std::string> both{"a", "xon", "cat", "and", "a", "sks", "dog", "sks"};
    const text::TokenSequence s = text::encode_prompt(v, b, both);
    // Index-scan oracle over the framed ids.
    for (const auto& binding : b) {
        std::vector<std::size_t> expected;
        for (std::size_t j = 0; j < s.ids.size(); ++j) {
            if (s.ids[j] == binding.rare) {
                expected.push_back(j);
            }
        }
        const auto got = s.rare_of(binding.name);
        CHECK(std::vector<std::size_t>(got.begin(), got.end()) == expected);
    }
    CHECK(s.rare_of("c1").size() == 2);
}

TEST_CASE("encode_prompt: unknown token is named") {
    const text::Vocabulary v = text::build_vocab(1, 8, ten_words());
    const std::vector<std::string> prompt{"a", "zebra"};
    try {
        static_cast<void>(text::encode_prompt(v, {}, prompt));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("zebra") != std::string::npos);
    }
}

TEST_CASE("bindings: reserved, identical and doubly bound rare tokens are rejected") {
    const text::Vocabulary v = text::build_vocab(1, 8, ten_words());
    CHECK_THROWS_AS(text::bind_concept(v, "x", "[BOS]", "dog"), ConfigError);
    CHECK_THROWS_AS(text::bind_concept(v, "x", "dog", "dog"), ConfigError);
    const std::vector<text::ConceptBinding> b{text::bind_concept(v, "c1", "sks", "dog"),
                                              text::bind_concept(v, "c2", "sks", "cat")};
    const std::vector<std::string> prompt{"a", "sks", "dog"};
    CHECK_THROWS_AS(text::encode_prompt(v, b, prompt), ConfigError);
}

TEST_CASE("property: decode inverts encode and encoding is bitwise stable") {
    const text::Vocabulary v = text::build_vocab(9, 8, ten_words());
    num::Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> prompt;
        const std::size_t n = rng.below(8);
        for (std::size_t i = 0; i < n; ++i) {
            prompt.push_back(ten_words()[rng.below(10)]);
        }
        const text::TokenSequence s = text::encode_prompt(v, {}, prompt);
        CHECK(s.n() == n + 2);
        CHECK(text::decode(v, s.ids) == prompt);
        CHECK(text::encode_prompt(v, {}, prompt).x.bitwise_equal(s.x));
    }
}

TEST_CASE("tokenize splits on whitespace and separates the full stop") {
    CHECK(text::tokenize("a sks dog.") == std::vector<std::string>{"a", "sks", "dog", "."});
    CHECK(text::tokenize("  a   cat . ") == std::vector<std::string>{"a", "cat", "."});
    CHECK(text::tokenize("").empty());
}
