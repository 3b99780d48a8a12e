// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tara/numerics/matrix.hpp"
#include "tara/numerics/tape.hpp"
#include "tara/text/vocabulary.hpp"

namespace tara::attn {

enum class Projection : std::size_t { Q = 0, K = 1, V = 2, O = 3 };
inline constexpr std::array<Projection, 4> kAllProjections{Projection::Q, Projection::K, Projection::V, Projection::O};

std::string_view to_string(Projection p);
Projection projection_from_string(std::string_view s);

enum class MaskPolicy { TokenFocused, Unmasked };

std::string_view to_string(MaskPolicy p);
MaskPolicy mask_policy_from_string(std::string_view s);

/// Low-rank update Δ = B·A with A: r x in and B: out x r.
struct LowRank {
    num::Matrix a;
    num::Matrix b;

    num::Matrix materialize() const { return num::matmul(b, a); }
};

/// LowRank factors bound to a tape.
struct LowRankVars {
    num::Var a;
    num::Var b;
};

/// Binary column mask over an n-token sequence.
///
/// Logically M ∈ {0,1}^{d×n} with all-ones columns exactly at `columns`; it is never
/// materialized on the forward path, where only the listed columns are computed.
struct TokenMask {
    std::string concept_name;
    std::vector<std::size_t> columns;
    std::size_t n = 0;

    /// Mask on the rare-token positions of `concept_name` in `seq` (empty if absent).
    static TokenMask focus(const text::TokenSequence& seq, const std::string& concept_name);
    /// Every column set.
    static TokenMask full(std::size_t n, std::string concept_name = {});

    /// Explicit rows x n 0/1 matrix, for oracles and diagnostics.
    num::Matrix dense(std::size_t rows) const;
};

/// M ⊙ (Δ X): Δ x_j for masked columns j, exact zeros elsewhere.
num::Var masked_adapter_forward(const LowRankVars& delta, const num::Var& x, const TokenMask& mask);
num::Matrix masked_adapter_forward(const LowRank& delta, const num::Matrix& x, const TokenMask& mask);

/// One adapter's contribution to a projection.
struct AdapterTerm {
    LowRankVars delta;
    TokenMask mask;
    text::TokenId rare_token = 0;
};

/// W X + Σ_i M_i ⊙ (Δ_i X), summed in the given order. Columns outside every mask are
/// the plain W X columns, bit for bit. Two terms with the same rare token are rejected.
num::Var composed_projection(const num::Var& w, const num::Var& x, std::span<const AdapterTerm> adapters);

struct DenseAdapterTerm {
    LowRank delta;
    TokenMask mask;
    text::TokenId rare_token = 0;
};
num::Matrix composed_projection(const num::Matrix& w, const num::Matrix& x, std::span<const DenseAdapterTerm> adapters);

/// Frozen weights of one cross-attention layer.
class CrossAttentionLayer {
public:
    CrossAttentionLayer(std::size_t layer_id, num::Matrix wq, num::Matrix wk, num::Matrix wv, num::Matrix wo);

    std::size_t layer_id() const noexcept { return layer_id_; }
    std::size_t d_model() const noexcept { return wq_.rows(); }
    std::size_t d_text() const noexcept { return wk_.cols(); }
    const num::Matrix& weight(Projection p) const;

private:
    std::size_t layer_id_;
    num::Matrix wq_;  // d_model x d_model
    num::Matrix wk_;  // d_model x d_text
    num::Matrix wv_;  // d_model x d_text
    num::Matrix wo_;  // d_model x d_model
};

/// Layer weights bound to a tape (leaves when the base model is being trained).
struct LayerVars {
    std::size_t layer_id = 0;
    num::Var wq;
    num::Var wk;
    num::Var wv;
    num::Var wo;
};

LayerVars bind(num::Tape& tape, const CrossAttentionLayer& layer, bool trainable);

/// An adapter's factors at one layer. Unset projections carry no adapter.
struct LayerInjection {
    std::string concept_name;
    text::TokenId rare_token = 0;
    MaskPolicy policy = MaskPolicy::TokenFocused;
    std::array<std::optional<LowRankVars>, 4> factors;

    const std::optional<LowRankVars>& on(Projection p) const { return factors[static_cast<std::size_t>(p)]; }
};

/// Row-stochastic m x n map from latent patches to tokens, averaged over heads.
struct AttentionMap {
    std::size_t layer = 0;
    std::size_t step = 0;
    int timestep = 0;
    num::Matrix weights;
};

/// Per-token L2 norm of one adapter's output columns on the K or V path.
struct InfluenceRecord {
    std::string concept_name;
    Projection projection = Projection::K;
    std::size_t layer = 0;
    std::size_t step = 0;
    std::vector<double> column_norms;
};

/// Collects attention maps and adapter-output magnitudes during a forward pass.
/// Owned by a single generation job; the sampler sets `step`/`timestep`.
struct ProbeCollector {
    bool record_attention = true;
    bool record_influence = true;
    std::size_t step = 0;
    int timestep = 0;
    std::vector<AttentionMap> maps;
    std::vector<InfluenceRecord> influence;
};

struct AttentionOutput {
    num::Var output;  // m x d_model
    num::Matrix map;  // m x n
};

/// Cross-attention of latent patches `z` (m x d_model) over the text sequence `x` (d_text x n).
///
/// Q = z W_Qᵀ, K and V through composed_projection, A = softmax(Q Kᵀ / sqrt(d_head)) per head,
/// output = (A V) W_Oᵀ. Token-focused adapters touch only K and V; unmasked adapters may also
/// carry Q and O factors, applied to every patch.
AttentionOutput attention_forward(const LayerVars& layer, std::size_t heads, const num::Var& z, const num::Var& x,
                                  const text::TokenSequence& seq, std::span<const LayerInjection> adapters,
                                  ProbeCollector* probe = nullptr);

}  // namespace tara::attn
