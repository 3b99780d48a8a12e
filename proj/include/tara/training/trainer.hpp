// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tara/diffusion/world.hpp"
#include "tara/lora/adapter.hpp"
#include "tara/numerics/optim.hpp"

namespace tara::train {

/// tara: token-focused K/V adapters with the alignment term. db-lora-unmasked: the same
/// adapters applied to every token, no alignment term. rob: db-lora-unmasked with a frozen
/// orthonormal A.
enum class Method { Tara, DbLoraUnmasked, Rob };

std::string_view to_string(Method m);
Method method_from_string(std::string_view s);

struct TrainConfig {
    double learning_rate = 1e-5;
    std::size_t batch_size = 1;
    std::size_t epochs = 1000;
    double lambda = 1.0;
    std::size_t rank = 8;
    std::uint64_t seed = 0;
    num::OptimizerKind optimizer = num::OptimizerKind::Sgd;
    double momentum = 0.0;
    /// Total optimizer steps; when unset, epochs x ceil(references / batch_size).
    std::optional<std::size_t> steps;
    /// (t, eps) draws per reference in the fixed evaluation set.
    std::size_t eval_draws = 16;
    std::size_t log_every = 10;
    Method method = Method::Tara;

    void validate() const;
    std::size_t total_steps(std::size_t references) const;

    /// Short runs for one CPU core; replaces the step budget, learning rate and optimizer.
    static TrainConfig desk_scale();

    nlohmann::json to_json() const;
    /// Keys present in `j` override the corresponding fields of `base`.
    static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
    static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
};

/// References and prompt ("a <rare> <class> .") for one concept.
struct ConceptDataset {
    diffusion::ConceptSpec spec;
    std::vector<num::Matrix> references;
    std::vector<std::string> prompt;

    static ConceptDataset make(const diffusion::World& world, const text::ConceptBinding& binding,
                               std::uint64_t seed, std::size_t references = 5);
};

/// (1/L) sum_l || W_K^l x_class - (W_K^l + Delta_K^l) x_rare ||_1 over every layer of the
/// model. The sequence must hold exactly one rare and one class position for the concept.
num::Var align_loss(const diffusion::BoundDenoiser& model, const lora::BoundAdapter& adapter,
                    const text::TokenSequence& seq, const num::Var& x, const std::string& concept_name);

double align_loss_value(const diffusion::ToyDenoiser& model, const lora::LoraAdapter& adapter,
                        const text::TokenSequence& seq);

struct LossTerms {
    num::Var total;
    num::Var denoise;
    num::Var align;
};

/// denoise + lambda * align on one tape; with lambda == 0 the total is the denoise node itself.
LossTerms total_loss(const diffusion::BoundDenoiser& model, const lora::BoundAdapter& adapter,
                     const text::TokenSequence& seq, const num::Var& x, const std::vector<num::Matrix>& z0,
                     const std::vector<int>& t, const std::vector<num::Matrix>& eps, double lambda,
                     const std::string& concept_name);

struct LossPoint {
    std::size_t step = 0;
    double denoise = 0.0;
    double align = 0.0;
    double total = 0.0;
};

/// Fixed-seed evaluation of both loss terms.
struct EvalLoss {
    double denoise = 0.0;
    double align = 0.0;
};

struct EvalDraw {
    std::size_t reference = 0;
    int t = 1;
    num::Matrix eps;
};

/// Stratified timesteps, eval_draws per reference, derived from `seed` only.
std::vector<EvalDraw> make_eval_set(const diffusion::ToyDenoiser& model, const ConceptDataset& data,
                                    std::size_t draws_per_reference, std::uint64_t seed);

EvalLoss evaluate(const diffusion::ToyDenoiser& model, const text::Vocabulary& vocab, const ConceptDataset& data,
                  const lora::LoraAdapter& adapter, const std::vector<EvalDraw>& eval_set);

struct TrainResult {
    lora::LoraAdapter adapter;
    std::vector<LossPoint> curve;
    EvalLoss before;
    EvalLoss after;
    std::size_t steps = 0;
};

/// Trains one adapter on `data` with the base model and embeddings frozen. Throws
/// DivergenceError carrying the step index when a loss turns non-finite.
TrainResult train_concept(const diffusion::ToyDenoiser& model, const text::Vocabulary& vocab,
                          const ConceptDataset& data, const TrainConfig& config,
                          const std::function<void(const LossPoint&)>& on_log = {});

/// train_concept with config.method forced to `mode` (DbLoraUnmasked or Rob).
TrainResult train_baseline(const diffusion::ToyDenoiser& model, const text::Vocabulary& vocab,
                           const ConceptDataset& data, TrainConfig config, Method mode);

/// The adapter train_concept starts from.
lora::LoraAdapter initial_adapter(const diffusion::ToyDenoiser& model, const text::ConceptBinding& binding,
                                  const TrainConfig& config);

/// "step,denoise,align,total" rows.
std::string loss_curve_csv(const std::vector<LossPoint>& curve);

}  // namespace tara::train
