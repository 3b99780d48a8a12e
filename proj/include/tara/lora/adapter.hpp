// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tara/attention/cross_attention.hpp"
#include "tara/numerics/tape.hpp"
#include "tara/text/vocabulary.hpp"

namespace tara::lora {

enum class InitMode { Gaussian, Rob };

std::string_view to_string(InitMode m);
InitMode init_mode_from_string(std::string_view s);

/// Where an adapter attaches: model widths, layers and projections.
struct AdapterLayout {
    std::size_t d_model = 0;
    std::size_t d_text = 0;
    std::vector<std::size_t> layers;
    std::vector<attn::Projection> targets{attn::Projection::K, attn::Projection::V};
    attn::MaskPolicy mask_policy = attn::MaskPolicy::TokenFocused;
};

/// Low-rank adapter for one concept: (A, B) per targeted projection in every covered layer.
struct LoraAdapter {
    text::ConceptBinding binding;
    std::size_t rank = 0;
    AdapterLayout layout;
    InitMode init_mode = InitMode::Gaussian;
    /// Parallel to layout.layers, indexed by Projection.
    std::vector<std::array<std::optional<attn::LowRank>, 4>> weights;

    /// ROB adapters keep A fixed; only B is trained.
    bool a_frozen() const noexcept { return init_mode == InitMode::Rob; }
    bool covers(std::size_t layer) const;
    const attn::LowRank& factors(std::size_t layer, attn::Projection p) const;
    attn::LowRank& factors(std::size_t layer, attn::Projection p);

    bool bitwise_equal(const LoraAdapter& other) const;
    std::uint64_t checksum() const;
};

/// Gaussian mode: A ~ N(0, 1/r), B = 0. Rob mode: A has orthonormal rows (QR of a
/// Gaussian draw), B = 0. Either way the fresh adapter leaves the model unchanged.
LoraAdapter init_adapter(const text::ConceptBinding& binding, std::size_t rank, const AdapterLayout& layout,
                         InitMode mode, std::uint64_t seed);

/// Orthonormal-row r x n matrix from modified Gram-Schmidt on a Gaussian draw.
num::Matrix random_orthonormal_rows(std::size_t r, std::size_t n, std::uint64_t seed);

/// Ordered set of adapters composed at inference. Rare tokens are pairwise distinct and
/// registration order fixes the summation order.
class AdapterRegistry {
public:
    /// Throws ConfigError when the adapter's rare token is already registered.
    void add(LoraAdapter adapter);
    std::size_t size() const noexcept { return adapters_.size(); }
    bool empty() const noexcept { return adapters_.empty(); }
    std::span<const LoraAdapter> adapters() const noexcept { return adapters_; }
    bool has_rare_token(text::TokenId id) const;

private:
    std::vector<LoraAdapter> adapters_;
};

/// Adapter placed on a tape for one forward pass.
struct BoundAdapter {
    std::map<std::size_t, attn::LayerInjection> layers;
    /// Trainable leaves in declaration order with their block names.
    std::vector<std::pair<std::string, num::Var>> leaves;
};

/// With `trainable`, B (and A unless frozen) become leaves; otherwise all factors are constants.
BoundAdapter bind(num::Tape& tape, const LoraAdapter& adapter, bool trainable);

/// Binds caller-provided factor variables, one per block_names() entry and in that order.
BoundAdapter bind_vars(const LoraAdapter& adapter, std::span<const num::Var> blocks);

/// Writes gradient-updated leaf values back into `adapter` (matched by block name).
void assign(LoraAdapter& adapter, const std::string& block, const num::Matrix& value);
num::Matrix& block(LoraAdapter& adapter, const std::string& name);
const num::Matrix& block(const LoraAdapter& adapter, const std::string& name);
/// Block names in file order: "l<layer>.<proj>.A", "l<layer>.<proj>.B".
std::vector<std::string> block_names(const LoraAdapter& adapter);

// .tara files
std::vector<std::uint8_t> encode_adapter(const LoraAdapter& a);
LoraAdapter decode_adapter(std::span<const std::uint8_t> bytes);
void save_adapter(const LoraAdapter& a, const std::string& path);
LoraAdapter load_adapter(const std::string& path);

/// Checks the stored words resolve to the stored ids in `v`.
void check_binding(const LoraAdapter& a, const text::Vocabulary& v);

/// Registry manifest: {"adapters": [paths in composition order]}.
void save_manifest(const std::vector<std::string>& paths, const std::string& path);
std::vector<std::string> load_manifest(const std::string& path);

}  // namespace tara::lora
