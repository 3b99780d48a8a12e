// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tara/attention/cross_attention.hpp"
#include "tara/diffusion/denoiser.hpp"
#include "tara/lora/adapter.hpp"

namespace tara::analysis {

/// Mean L2 magnitude of each adapter's K/V output column, averaged over layers and steps.
struct TokenInfluenceReport {
    struct Row {
        std::string concept_name;
        attn::Projection projection = attn::Projection::K;
        std::vector<double> magnitude;  // one entry per token position
    };
    std::size_t n = 0;
    std::vector<Row> rows;

    /// Throws ConfigError when the (concept, projection) pair was never recorded.
    const Row& at(const std::string& concept_name, attn::Projection p) const;

    /// "concept,projection,position,token,magnitude" rows; `tokens` labels positions when given.
    std::string to_csv(std::span<const std::string> tokens = {}) const;
    nlohmann::json to_json() const;
};

/// Rows ordered by first appearance in the probe. Throws ConfigError when no influence
/// records were collected.
TokenInfluenceReport token_influence(const attn::ProbeCollector& probe);

/// Inclusive range of sampler step indices; unset bounds are open.
struct StepRange {
    std::optional<std::size_t> first;
    std::optional<std::size_t> last;

    bool contains(std::size_t step) const;
};

/// Aggregated spatial attention of selected token positions.
struct TokenAttentionSummary {
    std::vector<std::size_t> positions;
    double top_fraction = 0.2;
    std::size_t maps_used = 0;
    /// One m-vector per position, nonnegative and summing to 1.
    std::vector<std::vector<double>> mass;
    std::vector<double> entropy;
    /// iou[i][j]: IoU of the top-mass cell sets of positions i and j.
    std::vector<std::vector<double>> iou;

    std::string to_csv() const;
    nlohmann::json to_json() const;
};

/// Mean over layers, heads and the steps in `range` of the attention column of each
/// position, renormalized to sum 1. Throws ConfigError when the range selects no maps.
TokenAttentionSummary attention_summary(const attn::ProbeCollector& probe, std::span<const std::size_t> positions,
                                        const StepRange& range = {}, double top_fraction = 0.2);

/// Indices of the ceil(q m) largest cells; ties resolve to the lower index.
std::vector<std::size_t> top_mass_cells(std::span<const double> mass, double top_fraction);
double set_iou(std::span<const std::size_t> a, std::span<const std::size_t> b);
/// IoU of the top-mass set of `mass` with a fixed region.
double region_iou(std::span<const double> mass, std::span<const std::size_t> region, double top_fraction);
/// -sum p ln p with 0 ln 0 = 0.
double entropy(std::span<const double> p);

/// Solo-versus-composed region MSE per concept, for one or more methods.
struct InterferenceReport {
    struct Row {
        std::string method;
        std::string concept_name;
        double mse = 0.0;
    };
    std::vector<Row> rows;

    /// Mean MSE over the concepts of `method`; throws ConfigError for an unknown method.
    double mean(const std::string& method) const;
    std::vector<std::string> methods() const;
    std::string to_csv() const;
    /// Per-method means ranked ascending.
    std::string ordering_csv() const;
    nlohmann::json to_json() const;
};

/// A concept's region in the sample grid.
struct ConceptRegion {
    std::string concept_name;
    std::vector<std::size_t> region;
};

/// MSE between solo[i] and composed over regions[i]. Throws ConfigError on an empty region
/// or a solo/region count mismatch.
InterferenceReport interference(const std::string& method, std::span<const num::Matrix> solo,
                                const num::Matrix& composed, std::span<const ConceptRegion> regions);

/// Generates the composed sample and one solo sample per adapter (same prompt and seed,
/// only that adapter registered), then calls interference(). Regions pair with adapters by index.
InterferenceReport measure_interference(const std::string& method, const diffusion::ToyDenoiser& model,
                                        std::span<const lora::LoraAdapter> adapters, const text::TokenSequence& seq,
                                        std::uint64_t seed, std::size_t steps, std::span<const ConceptRegion> regions);

/// Method label implied by an adapter's masking policy and initialization.
std::string method_of(const lora::LoraAdapter& adapter);

/// Binary 16-bit PGM of a g x g map, min-max normalized to [0, 65535]; a constant map is all zeros.
std::vector<std::uint8_t> encode_pgm16(std::span<const double> values, std::size_t grid);
void write_pgm16(const std::string& path, std::span<const double> values, std::size_t grid);

/// Probe files: magic "TPRB", the io container layout with one block per map and record.
void save_probes(const attn::ProbeCollector& probe, const std::string& path);
attn::ProbeCollector load_probes(const std::string& path);

}  // namespace tara::analysis
