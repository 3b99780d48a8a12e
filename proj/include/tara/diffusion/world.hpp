// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tara/diffusion/denoiser.hpp"
#include "tara/numerics/rng.hpp"
#include "tara/text/vocabulary.hpp"

namespace tara::diffusion {

/// Words of the default toy vocabulary.
std::vector<std::string> default_class_words();
std::vector<std::string> default_rare_words();
/// Function words, class words and rare words, in vocabulary order.
std::vector<std::string> default_words();

/// A class noun the base model knows: it paints `pattern` over one quadrant of the grid.
struct ClassSpec {
    std::string word;
    text::TokenId id = 0;
    std::size_t quadrant = 0;
    num::Matrix pattern;  // 1 x d_model
};

/// Synthetic data distribution the base model is pretrained on. Clean latents are the
/// class patterns over their quadrants plus iid N(0, sigma^2) everywhere.
struct World {
    std::size_t grid = 8;
    std::size_t d_model = 32;
    double sigma = 0.1;
    std::vector<ClassSpec> classes;

    /// Patch indices of quadrant q (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
    std::vector<std::size_t> region(std::size_t quadrant) const;
    const ClassSpec& find(const std::string& word) const;
};

/// Class c gets quadrant c mod 4 and a seeded N(0, 1) pattern.
World make_world(const text::Vocabulary& vocab, std::span<const std::string> class_words, const ModelConfig& config,
                 std::uint64_t seed);

/// One pretraining example: 1-4 classes in distinct quadrants and their prompt.
struct Scene {
    num::Matrix z0;
    std::vector<std::string> prompt;
};

Scene sample_scene(const World& world, num::Rng& rng);

/// "a x and a y and a z ." for the given nouns (rare words, when given, precede each noun).
std::vector<std::string> scene_prompt(std::span<const std::string> nouns, std::span<const std::string> rare = {});

/// A personalized instance of a known class: the class pattern shifted by a seeded offset
/// drawn inside the span of the known class patterns, so the base model can render it.
struct ConceptSpec {
    text::ConceptBinding binding;
    std::size_t quadrant = 0;
    num::Matrix pattern;  // 1 x d_model: class pattern + offset
    std::vector<std::size_t> region;
    /// m x d_model clean latent with the pattern over the region and zeros elsewhere.
    num::Matrix template_latent;
};

/// offset = sum_c g_c u_c with g_c ~ N(0, offset_scale^2 / #classes).
ConceptSpec make_concept(const World& world, const text::ConceptBinding& binding, std::uint64_t seed,
                         double offset_scale = 1.0);

/// `count` references: template + N(0, sigma^2) jitter. count must lie in [4, 6].
std::vector<num::Matrix> concept_references(const World& world, const ConceptSpec& concept_spec, std::size_t count,
                                            std::uint64_t seed);

/// Mean squared difference of two latents restricted to the given patches.
double region_mse(const num::Matrix& a, const num::Matrix& b, std::span<const std::size_t> region);

struct PretrainConfig {
    std::size_t steps = 8000;
    double lr = 2e-3;
    /// Linear decay of the learning rate to this fraction over the run.
    double final_lr_fraction = 0.05;
    std::uint64_t seed = 0;
};

/// Adam pretraining of a fresh denoiser on sample_scene data. `progress` is called
/// every 500 steps with the running mean loss.
ToyDenoiser pretrain(const World& world, const text::Vocabulary& vocab, const ModelConfig& config,
                     const PretrainConfig& pretrain_config,
                     const std::function<void(std::size_t, double)>& progress = {});

/// Base model and its world in one `.tbase` container.
struct BaseBundle {
    ToyDenoiser model;
    World world;
    /// Checksum of the vocabulary the bundle was built against.
    std::uint64_t vocab_checksum = 0;
};

void save_base(const BaseBundle& bundle, const std::string& path);
BaseBundle load_base(const std::string& path);

/// Throws ConfigError when `vocab` is not the vocabulary the bundle was built with.
void check_vocab(const BaseBundle& bundle, const text::Vocabulary& vocab);

}  // namespace tara::diffusion
