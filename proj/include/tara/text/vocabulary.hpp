// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tara/numerics/matrix.hpp"

namespace tara::text {

using TokenId = std::size_t;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr std::string_view kBosWord = "[BOS]";
inline constexpr std::string_view kEosWord = "[EOS]";

/// Fixed vocabulary with a frozen random embedding table.
///
/// Ids 0 and 1 are [BOS] and [EOS]; the given words follow in order. Embeddings are
/// drawn i.i.d. N(0, 1/d) from the seed, so (seed, d, words) fully determine the table.
class Vocabulary {
public:
    std::size_t d() const noexcept { return d_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t size() const noexcept { return words_.size() + 2; }
    /// Words excluding [BOS]/[EOS].
    const std::vector<std::string>& words() const noexcept { return words_; }

    bool contains(std::string_view word) const;
    /// Throws ConfigError naming the word when it is unknown.
    TokenId id(std::string_view word) const;
    std::string_view word(TokenId id) const;

    /// |V| x d table, one row per token id.
    const num::Matrix& table() const noexcept { return table_; }
    std::span<const double> embedding(TokenId id) const;

    std::uint64_t checksum() const { return num::checksum(table_); }

    /// {"d":…, "seed":…, "words":[…]}
    std::string to_json() const;
    static Vocabulary from_json(std::string_view json);

private:
    friend Vocabulary build_vocab(std::uint64_t seed, std::size_t d, std::vector<std::string> words);

    std::size_t d_ = 0;
    std::uint64_t seed_ = 0;
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> ids_;
    num::Matrix table_;
};

Vocabulary build_vocab(std::uint64_t seed, std::size_t d, std::vector<std::string> words);

void save_vocab(const Vocabulary& v, const std::string& path);
Vocabulary load_vocab(const std::string& path);

/// Rare-token identifier bound to a class noun for one personalized concept.
struct ConceptBinding {
    std::string name;
    std::string rare_word;
    std::string class_word;
    TokenId rare = 0;
    TokenId cls = 0;
};

/// Resolves words against `v` and validates the binding.
ConceptBinding bind_concept(const Vocabulary& v, std::string name, std::string rare_word, std::string class_word);

/// Embedded prompt with concept annotations.
struct TokenSequence {
    std::vector<TokenId> ids;
    /// d x n; column j is the embedding of ids[j].
    num::Matrix x;
    std::map<std::string, std::vector<std::size_t>> rare_positions;
    std::map<std::string, std::vector<std::size_t>> class_positions;
    /// Rare token id of each annotated concept.
    std::map<std::string, TokenId> rare_tokens;

    std::size_t n() const noexcept { return ids.size(); }
    /// Positions of `concept_name`'s rare token; empty when the concept is absent or unknown.
    std::span<const std::size_t> rare_of(const std::string& concept_name) const;
    std::span<const std::size_t> class_of(const std::string& concept_name) const;
};

/// Splits a prompt on whitespace, lower-cases it and detaches a trailing period.
std::vector<std::string> tokenize(std::string_view prompt);

/// Frames the prompt with [BOS]/[EOS], looks up embeddings and records the rare and
/// class positions of every binding.
TokenSequence encode_prompt(const Vocabulary& v, std::span<const ConceptBinding> bindings,
                            std::span<const std::string> prompt);

/// Inverse of encode_prompt on ids: drops [BOS]/[EOS] and maps ids to words.
std::vector<std::string> decode(const Vocabulary& v, std::span<const TokenId> ids);

}  // namespace tara::text
