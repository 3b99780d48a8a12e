// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/training/gradcheck.hpp"

#include <cmath>

#include "tara/diffusion/world.hpp"
#include "tara/error.hpp"
#include "tara/lora/adapter.hpp"
#include "tara/numerics/rng.hpp"
#include "tara/training/trainer.hpp"

namespace tara::train {

using num::Matrix;
using num::Var;

void GradcheckConfig::validate() const {
    model.validate();
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("gradcheck: lambda must be finite and non-negative");
    }
    if (rank < 1) {
        throw ConfigError("gradcheck: rank must be at least 1");
    }
    if (!(step > 0.0)) {
        throw ConfigError("gradcheck: step must be positive");
    }
}

nlohmann::json GradcheckConfig::to_json() const {
    return {{"model", model.to_json()}, {"lambda", lambda},           {"rank", rank},
            {"seed", seed},             {"step", step}, {"base_blocks", base_blocks}};
}

GradcheckConfig GradcheckConfig::from_json(const nlohmann::json& j) {
    GradcheckConfig c;
    try {
        if (j.contains("model")) {
            c.model = diffusion::ModelConfig::from_json(j.at("model"));
        }
        c.lambda = j.value("lambda", c.lambda);
        c.rank = j.value("rank", c.rank);
        c.seed = j.value("seed", c.seed);
        c.step = j.value("step", c.step);
        c.base_blocks = j.value("base_blocks", c.base_blocks);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("gradcheck config: ") + e.what());
    }
    c.validate();
    return c;
}

num::FdReport gradient_check(const GradcheckConfig& config) {
    config.validate();
    const diffusion::ModelConfig& mc = config.model;
    const diffusion::ToyDenoiser model = diffusion::ToyDenoiser::init(mc, num::derive_seed(config.seed, 0));
    const text::Vocabulary vocab = text::build_vocab(num::derive_seed(config.seed, 1), mc.d_text,
                                                     diffusion::default_words());
    const text::ConceptBinding binding = text::bind_concept(vocab, "gc", "sks", "dog");

    lora::AdapterLayout layout;
    layout.d_model = mc.d_model;
    layout.d_text = mc.d_text;
    for (std::size_t l = 0; l < mc.layers; ++l) {
        layout.layers.push_back(l);
    }
    lora::LoraAdapter adapter =
        lora::init_adapter(binding, config.rank, layout, lora::InitMode::Gaussian, num::derive_seed(config.seed, 2));
    num::Rng rng(num::derive_seed(config.seed, 3));
    const std::vector<std::string> names = lora::block_names(adapter);
    for (const std::string& name : names) {
        Matrix& m = lora::block(adapter, name);
        if (name.back() == 'B') {
            m = rng.normal_matrix(m.rows(), m.cols(), 0.1);
        }
    }

    const std::vector<std::string> prompt{"a", "sks", "dog", "."};
    const text::TokenSequence seq = text::encode_prompt(vocab, std::span(&binding, 1), prompt);
    const std::vector<Matrix> z0{rng.normal_matrix(mc.patches(), mc.d_model)};
    const std::vector<int> t{std::max(1, mc.timesteps / 2)};
    const std::vector<Matrix> eps{rng.normal_matrix(mc.patches(), mc.d_model)};

    std::vector<Matrix> params;
    std::vector<std::string> labels;
    for (const std::string& name : names) {
        params.push_back(lora::block(adapter, name));
        labels.push_back("adapter." + name);
    }
    const std::size_t adapter_blocks = params.size();
    if (config.base_blocks) {
        for (const auto& [name, m] : model.named_weights()) {
            params.push_back(*m);
            labels.push_back("base." + name);
        }
    }

    const num::TapedScalarFn f = [&](num::Tape& tape, const std::vector<Var>& vars) {
        diffusion::BoundDenoiser bm = diffusion::bind(tape, model, false);
        if (config.base_blocks) {
            // Rebind the denoiser on the checked variables, in named_weights() order.
            std::size_t k = adapter_blocks;
            for (diffusion::BoundBlock& b : bm.blocks) {
                b.attn.wq = vars[k++];
                b.attn.wk = vars[k++];
                b.attn.wv = vars[k++];
                b.attn.wo = vars[k++];
                b.w1 = vars[k++];
                b.b1 = vars[k++];
                b.w2 = vars[k++];
                b.b2 = vars[k++];
            }
            bm.w_out = vars[k++];
            bm.b_out = vars[k++];
        }
        const lora::BoundAdapter ba =
            lora::bind_vars(adapter, std::span<const Var>(vars.data(), adapter_blocks));
        return total_loss(bm, ba, seq, tape.constant(seq.x), z0, t, eps, config.lambda, binding.name).total;
    };
    return num::fd_check(f, params, config.step, labels);
}

}  // namespace tara::train
