// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/text/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tara/error.hpp"
#include "tara/numerics/rng.hpp"

namespace tara::text {

bool Vocabulary::contains(std::string_view word) const { return ids_.find(std::string(word)) != ids_.end(); }

TokenId Vocabulary::id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) {
        throw ConfigError("unknown token '" + std::string(word) + "'");
    }
    return it->second;
}

std::string_view Vocabulary::word(TokenId id) const {
    if (id == kBos) {
        return kBosWord;
    }
    if (id == kEos) {
        return kEosWord;
    }
    if (id >= size()) {
        throw ConfigError("token id " + std::to_string(id) + " out of range");
    }
    return words_[id - 2];
}

std::span<const double> Vocabulary::embedding(TokenId id) const {
    if (id >= size()) {
        throw ConfigError("token id " + std::to_string(id) + " out of range");
    }
    return table_.row(id);
}

std::string Vocabulary::to_json() const {
    nlohmann::json j;
    j["d"] = d_;
    j["seed"] = seed_;
    j["words"] = words_;
    return j.dump(2);
}

Vocabulary Vocabulary::from_json(std::string_view json) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json);
        return build_vocab(j.at("seed").get<std::uint64_t>(), j.at("d").get<std::size_t>(),
                           j.at("words").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("vocabulary JSON: ") + e.what());
    }
}

Vocabulary build_vocab(std::uint64_t seed, std::size_t d, std::vector<std::string> words) {
    if (d < 4) {
        throw ConfigError("build_vocab: embedding width must be at least 4");
    }
    if (words.empty()) {
        throw ConfigError("build_vocab: word list is empty");
    }
    Vocabulary v;
    v.d_ = d;
    v.seed_ = seed;
    v.ids_.emplace(std::string(kBosWord), kBos);
    v.ids_.emplace(std::string(kEosWord), kEos);
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (words[i].empty()) {
            throw ConfigError("build_vocab: empty word");
        }
        if (!v.ids_.emplace(words[i], i + 2).second) {
            throw ConfigError("build_vocab: duplicate word '" + words[i] + "'");
        }
    }
    v.words_ = std::move(words);
    num::Rng rng(seed);
    v.table_ = rng.normal_matrix(v.size(), d, 1.0 / std::sqrt(static_cast<double>(d)));
    return v;
}

void save_vocab(const Vocabulary& v, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot write vocabulary to " + path);
    }
    out << v.to_json() << '\n';
}

Vocabulary load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read vocabulary from " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return Vocabulary::from_json(ss.str());
}

ConceptBinding bind_concept(const Vocabulary& v, std::string name, std::string rare_word, std::string class_word) {
    ConceptBinding b;
    b.rare = v.id(rare_word);
    b.cls = v.id(class_word);
    if (b.rare == kBos || b.rare == kEos) {
        throw ConfigError("concept '" + name + "': rare token cannot be [BOS] or [EOS]");
    }
    if (b.rare == b.cls) {
        throw ConfigError("concept '" + name + "': rare token must differ from class token");
    }
    b.name = std::move(name);
    b.rare_word = std::move(rare_word);
    b.class_word = std::move(class_word);
    return b;
}

std::span<const std::size_t> TokenSequence::rare_of(const std::string& concept_name) const {
    auto it = rare_positions.find(concept_name);
    if (it == rare_positions.end()) {
        return {};
    }
    return it->second;
}

std::span<const std::size_t> TokenSequence::class_of(const std::string& concept_name) const {
    auto it = class_positions.find(concept_name);
    if (it == class_positions.end()) {
        return {};
    }
    return it->second;
}

std::vector<std::string> tokenize(std::string_view prompt) {
    std::vector<std::string> out;
    std::istringstream in{std::string(prompt)};
    std::string word;
    while (in >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        bool period = word.size() > 1 && word.back() == '.';
        if (period) {
            word.pop_back();
        }
        out.push_back(word);
        if (period) {
            out.emplace_back(".");
        }
    }
    return out;
}

TokenSequence encode_prompt(const Vocabulary& v, std::span<const ConceptBinding> bindings,
                            std::span<const std::string> prompt) {
    std::set<TokenId> seen_rare;
    for (const ConceptBinding& b : bindings) {
        if (!seen_rare.insert(b.rare).second) {
            throw ConfigError("rare token '" + b.rare_word + "' bound to more than one concept");
        }
    }

    TokenSequence seq;
    seq.ids.reserve(prompt.size() + 2);
    seq.ids.push_back(kBos);
    for (const std::string& w : prompt) {
        seq.ids.push_back(v.id(w));
    }
    seq.ids.push_back(kEos);

    const std::size_t n = seq.ids.size();
    seq.x = num::Matrix(v.d(), n);
    for (std::size_t j = 0; j < n; ++j) {
        const auto e = v.embedding(seq.ids[j]);
        for (std::size_t r = 0; r < v.d(); ++r) {
            seq.x(r, j) = e[r];
        }
    }

    for (const ConceptBinding& b : bindings) {
        auto& rare = seq.rare_positions[b.name];
        auto& cls = seq.class_positions[b.name];
        seq.rare_tokens[b.name] = b.rare;
        for (std::size_t j = 1; j + 1 < n; ++j) {
            if (seq.ids[j] == b.rare) {
                rare.push_back(j);
            }
            if (seq.ids[j] == b.cls) {
                cls.push_back(j);
            }
        }
    }
    return seq;
}

std::vector<std::string> decode(const Vocabulary& v, std::span<const TokenId> ids) {
    std::vector<std::string> out;
    for (TokenId id : ids) {
        if (id == kBos || id == kEos) {
            continue;
        }
        out.emplace_back(v.word(id));
    }
    return out;
}

}  // namespace tara::text
