// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/lora/adapter.hpp"

#include <algorithm>
#include <cmath>

#include "tara/error.hpp"
#include "tara/io/container.hpp"
#include "tara/numerics/rng.hpp"

namespace tara::lora {

using attn::Projection;
using num::Matrix;

namespace {

constexpr std::string_view kMagic = "TARA";
constexpr std::uint32_t kVersion = 1;

std::size_t proj_index(Projection p) { return static_cast<std::size_t>(p); }

std::size_t input_width(const AdapterLayout& l, Projection p) {
    return (p == Projection::K || p == Projection::V) ? l.d_text : l.d_model;
}

std::string block_name(std::size_t layer, Projection p, char which) {
    return "l" + std::to_string(layer) + "." + std::string(attn::to_string(p)) + "." + which;
}

std::size_t layer_index(const LoraAdapter& a, std::size_t layer) {
    const auto it = std::find(a.layout.layers.begin(), a.layout.layers.end(), layer);
    if (it == a.layout.layers.end()) {
        throw ConfigError("adapter '" + a.binding.name + "' does not cover layer " + std::to_string(layer));
    }
    return static_cast<std::size_t>(it - a.layout.layers.begin());
}

void validate_layout(const AdapterLayout& layout, std::size_t rank) {
    if (rank < 1) {
        throw ConfigError("adapter rank must be at least 1");
    }
    if (layout.d_model == 0 || layout.d_text == 0) {
        throw ConfigError("adapter widths must be positive");
    }
    if (rank > std::min(layout.d_model, layout.d_text)) {
        throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(d_model, d_text) = " +
                          std::to_string(std::min(layout.d_model, layout.d_text)));
    }
    if (layout.targets.empty()) {
        throw ConfigError("adapter must target at least one projection");
    }
    for (std::size_t i = 1; i < layout.layers.size(); ++i) {
        if (std::find(layout.layers.begin(), layout.layers.begin() + static_cast<std::ptrdiff_t>(i),
                      layout.layers[i]) != layout.layers.begin() + static_cast<std::ptrdiff_t>(i)) {
            throw ConfigError("adapter layer " + std::to_string(layout.layers[i]) + " listed twice");
        }
    }
    for (Projection p : layout.targets) {
        if (layout.mask_policy == attn::MaskPolicy::TokenFocused && p != Projection::K && p != Projection::V) {
            throw ConfigError("token-focused adapters may only target K and V");
        }
    }
}

}  // namespace

std::string_view to_string(InitMode m) { return m == InitMode::Gaussian ? "gaussian" : "rob"; }

InitMode init_mode_from_string(std::string_view s) {
    if (s == "gaussian") return InitMode::Gaussian;
    if (s == "rob") return InitMode::Rob;
    throw ConfigError("unknown init mode '" + std::string(s) + "'");
}

bool LoraAdapter::covers(std::size_t layer) const {
    return std::find(layout.layers.begin(), layout.layers.end(), layer) != layout.layers.end();
}

const attn::LowRank& LoraAdapter::factors(std::size_t layer, Projection p) const {
    const auto& slot = weights[layer_index(*this, layer)][proj_index(p)];
    if (!slot) {
        throw ConfigError("adapter '" + binding.name + "' has no " + std::string(attn::to_string(p)) + " factors");
    }
    return *slot;
}

attn::LowRank& LoraAdapter::factors(std::size_t layer, Projection p) {
    auto& slot = weights[layer_index(*this, layer)][proj_index(p)];
    if (!slot) {
        throw ConfigError("adapter '" + binding.name + "' has no " + std::string(attn::to_string(p)) + " factors");
    }
    return *slot;
}

bool LoraAdapter::bitwise_equal(const LoraAdapter& o) const {
    if (binding.name != o.binding.name || binding.rare_word != o.binding.rare_word ||
        binding.class_word != o.binding.class_word || binding.rare != o.binding.rare || binding.cls != o.binding.cls ||
        rank != o.rank || init_mode != o.init_mode || layout.d_model != o.layout.d_model ||
        layout.d_text != o.layout.d_text || layout.layers != o.layout.layers || layout.targets != o.layout.targets ||
        layout.mask_policy != o.layout.mask_policy || weights.size() != o.weights.size()) {
        return false;
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
        for (std::size_t p = 0; p < 4; ++p) {
            const auto& x = weights[i][p];
            const auto& y = o.weights[i][p];
            if (x.has_value() != y.has_value()) {
                return false;
            }
            if (x && (!x->a.bitwise_equal(y->a) || !x->b.bitwise_equal(y->b))) {
                return false;
            }
        }
    }
    return true;
}

std::uint64_t LoraAdapter::checksum() const {
    const auto bytes = encode_adapter(*this);
    return io::fnv1a(bytes);
}

Matrix random_orthonormal_rows(std::size_t r, std::size_t n, std::uint64_t seed) {
    if (r > n) {
        throw ConfigError("random_orthonormal_rows: cannot fit " + std::to_string(r) + " orthonormal rows in width " +
                          std::to_string(n));
    }
    num::Rng rng(seed);
    Matrix q = rng.normal_matrix(r, n);
    // Two passes of modified Gram-Schmidt keep rows orthonormal to ~1e-15.
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < r; ++i) {
            auto ri = q.row(i);
            for (std::size_t j = 0; j < i; ++j) {
                const auto rj = q.row(j);
                double dot = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    dot += ri[c] * rj[c];
                }
                for (std::size_t c = 0; c < n; ++c) {
                    ri[c] -= dot * rj[c];
                }
            }
            double norm = 0.0;
            for (double v : ri) {
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                throw Error("random_orthonormal_rows: degenerate draw");
            }
            for (double& v : ri) {
                v /= norm;
            }
        }
    }
    return q;
}

LoraAdapter init_adapter(const text::ConceptBinding& binding, std::size_t rank, const AdapterLayout& layout,
                         InitMode mode, std::uint64_t seed) {
    validate_layout(layout, rank);
    LoraAdapter a;
    a.binding = binding;
    a.rank = rank;
    a.layout = layout;
    std::sort(a.layout.targets.begin(), a.layout.targets.end());
    a.layout.targets.erase(std::unique(a.layout.targets.begin(), a.layout.targets.end()), a.layout.targets.end());
    a.init_mode = mode;
    a.weights.resize(layout.layers.size());
    num::Rng rng(seed);
    for (std::size_t li = 0; li < layout.layers.size(); ++li) {
        for (Projection p : a.layout.targets) {
            const std::size_t in = input_width(layout, p);
            attn::LowRank f;
            if (mode == InitMode::Gaussian) {
                f.a = rng.normal_matrix(rank, in, 1.0 / std::sqrt(static_cast<double>(rank)));
            } else {
                f.a = random_orthonormal_rows(rank, in, rng.next_u64());
            }
            f.b = Matrix(layout.d_model, rank);
            a.weights[li][proj_index(p)] = std::move(f);
        }
    }
    return a;
}

void AdapterRegistry::add(LoraAdapter adapter) {
    if (has_rare_token(adapter.binding.rare)) {
        throw ConfigError("registry already holds an adapter for rare token '" + adapter.binding.rare_word + "'");
    }
    adapters_.push_back(std::move(adapter));
}

bool AdapterRegistry::has_rare_token(text::TokenId id) const {
    return std::any_of(adapters_.begin(), adapters_.end(), [id](const LoraAdapter& a) { return a.binding.rare == id; });
}

BoundAdapter bind(num::Tape& tape, const LoraAdapter& adapter, bool trainable) {
    BoundAdapter out;
    for (std::size_t li = 0; li < adapter.layout.layers.size(); ++li) {
        const std::size_t layer = adapter.layout.layers[li];
        attn::LayerInjection inj;
        inj.concept_name = adapter.binding.name;
        inj.rare_token = adapter.binding.rare;
        inj.policy = adapter.layout.mask_policy;
        for (Projection p : adapter.layout.targets) {
            const attn::LowRank& f = *adapter.weights[li][proj_index(p)];
            attn::LowRankVars v;
            if (trainable && !adapter.a_frozen()) {
                v.a = tape.leaf(f.a);
                out.leaves.emplace_back(block_name(layer, p, 'A'), v.a);
            } else {
                v.a = tape.constant(f.a);
            }
            if (trainable) {
                v.b = tape.leaf(f.b);
                out.leaves.emplace_back(block_name(layer, p, 'B'), v.b);
            } else {
                v.b = tape.constant(f.b);
            }
            inj.factors[proj_index(p)] = v;
        }
        out.layers.emplace(layer, std::move(inj));
    }
    return out;
}

BoundAdapter bind_vars(const LoraAdapter& adapter, std::span<const num::Var> blocks) {
    if (blocks.size() != 2 * adapter.layout.layers.size() * adapter.layout.targets.size()) {
        throw ShapeError("bind_vars: " + std::to_string(blocks.size()) + " variables for adapter '" +
                         adapter.binding.name + "'");
    }
    BoundAdapter out;
    std::size_t k = 0;
    for (std::size_t layer : adapter.layout.layers) {
        attn::LayerInjection inj;
        inj.concept_name = adapter.binding.name;
        inj.rare_token = adapter.binding.rare;
        inj.policy = adapter.layout.mask_policy;
        for (Projection p : adapter.layout.targets) {
            attn::LowRankVars v{blocks[k], blocks[k + 1]};
            out.leaves.emplace_back(block_name(layer, p, 'A'), v.a);
            out.leaves.emplace_back(block_name(layer, p, 'B'), v.b);
            k += 2;
            inj.factors[proj_index(p)] = v;
        }
        out.layers.emplace(layer, std::move(inj));
    }
    return out;
}

Matrix& block(LoraAdapter& adapter, const std::string& name) {
    for (std::size_t li = 0; li < adapter.layout.layers.size(); ++li) {
        for (Projection p : adapter.layout.targets) {
            const std::size_t layer = adapter.layout.layers[li];
            auto& f = *adapter.weights[li][proj_index(p)];
            if (name == block_name(layer, p, 'A')) {
                return f.a;
            }
            if (name == block_name(layer, p, 'B')) {
                return f.b;
            }
        }
    }
    throw ConfigError("adapter has no block '" + name + "'");
}

const Matrix& block(const LoraAdapter& adapter, const std::string& name) {
    return block(const_cast<LoraAdapter&>(adapter), name);
}

void assign(LoraAdapter& adapter, const std::string& name, const Matrix& value) {
    Matrix& dst = block(adapter, name);
    num::require_same_shape(dst, value, "assign");
    dst = value;
}

std::vector<std::string> block_names(const LoraAdapter& adapter) {
    std::vector<std::string> names;
    for (std::size_t layer : adapter.layout.layers) {
        for (Projection p : adapter.layout.targets) {
            names.push_back(block_name(layer, p, 'A'));
            names.push_back(block_name(layer, p, 'B'));
        }
    }
    return names;
}

std::vector<std::uint8_t> encode_adapter(const LoraAdapter& a) {
    io::Container c;
    c.version = kVersion;
    nlohmann::json targets = nlohmann::json::array();
    for (Projection p : a.layout.targets) {
        targets.push_back(std::string(attn::to_string(p)));
    }
    c.header = {
        {"concept",
         {{"name", a.binding.name},
          {"rare", a.binding.rare_word},
          {"class", a.binding.class_word},
          {"rare_id", a.binding.rare},
          {"class_id", a.binding.cls}}},
        {"rank", a.rank},
        {"layers", a.layout.layers},
        {"targets", targets},
        {"mask_policy", std::string(attn::to_string(a.layout.mask_policy))},
        {"init_mode", std::string(to_string(a.init_mode))},
        {"d_model", a.layout.d_model},
        {"d_text", a.layout.d_text},
    };
    for (const std::string& name : block_names(a)) {
        c.blocks.emplace_back(name, block(a, name));
    }
    return io::encode_container(kMagic, c);
}

LoraAdapter decode_adapter(std::span<const std::uint8_t> bytes) {
    io::Container c = io::decode_container(bytes, kMagic, kVersion);
    const std::size_t header_at = 12;
    LoraAdapter a;
    try {
        const auto& h = c.header;
        const auto& cj = h.at("concept");
        a.binding.name = cj.at("name").get<std::string>();
        a.binding.rare_word = cj.at("rare").get<std::string>();
        a.binding.class_word = cj.at("class").get<std::string>();
        a.binding.rare = cj.at("rare_id").get<text::TokenId>();
        a.binding.cls = cj.at("class_id").get<text::TokenId>();
        a.rank = h.at("rank").get<std::size_t>();
        a.layout.layers = h.at("layers").get<std::vector<std::size_t>>();
        a.layout.targets.clear();
        for (const auto& t : h.at("targets")) {
            a.layout.targets.push_back(attn::projection_from_string(t.get<std::string>()));
        }
        a.layout.mask_policy = attn::mask_policy_from_string(h.at("mask_policy").get<std::string>());
        a.init_mode = init_mode_from_string(h.at("init_mode").get<std::string>());
        a.layout.d_model = h.at("d_model").get<std::size_t>();
        a.layout.d_text = h.at("d_text").get<std::size_t>();
        validate_layout(a.layout, a.rank);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("adapter header: ") + e.what(), header_at);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("adapter header: ") + e.what(), header_at);
    }

    const auto names = block_names(a);
    if (names.size() != c.blocks.size()) {
        throw FormatError("adapter declares " + std::to_string(c.blocks.size()) + " blocks, layout needs " +
                              std::to_string(names.size()),
                          header_at);
    }
    a.weights.resize(a.layout.layers.size());
    std::size_t k = 0;
    for (std::size_t li = 0; li < a.layout.layers.size(); ++li) {
        for (Projection p : a.layout.targets) {
            attn::LowRank f;
            for (char which : {'A', 'B'}) {
                auto& [name, m] = c.blocks[k];
                if (name != names[k]) {
                    throw FormatError("expected block '" + names[k] + "', found '" + name + "'", header_at);
                }
                const std::size_t rows = which == 'A' ? a.rank : a.layout.d_model;
                const std::size_t cols = which == 'A' ? input_width(a.layout, p) : a.rank;
                if (m.rows() != rows || m.cols() != cols) {
                    throw FormatError("block '" + name + "' has shape " + m.shape_string(), header_at);
                }
                (which == 'A' ? f.a : f.b) = std::move(m);
                ++k;
            }
            a.weights[li][proj_index(p)] = std::move(f);
        }
    }
    return a;
}

void save_adapter(const LoraAdapter& a, const std::string& path) { io::write_file(path, encode_adapter(a)); }

LoraAdapter load_adapter(const std::string& path) {
    const auto bytes = io::read_file(path);
    return decode_adapter(bytes);
}

void check_binding(const LoraAdapter& a, const text::Vocabulary& v) {
    if (v.id(a.binding.rare_word) != a.binding.rare || v.id(a.binding.class_word) != a.binding.cls) {
        throw ConfigError("adapter '" + a.binding.name + "' was trained against a different vocabulary");
    }
}

void save_manifest(const std::vector<std::string>& paths, const std::string& path) {
    nlohmann::json j;
    j["adapters"] = paths;
    io::write_text(path, j.dump(2) + "\n");
}

std::vector<std::string> load_manifest(const std::string& path) {
    try {
        return nlohmann::json::parse(io::read_text(path)).at("adapters").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("registry manifest " + path + ": " + e.what());
    }
}

}  // namespace tara::lora
