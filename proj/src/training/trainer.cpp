// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/training/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "tara/error.hpp"
#include "tara/numerics/rng.hpp"

namespace tara::train {

using num::Matrix;
using num::Tape;
using num::Var;

std::string_view to_string(Method m) {
    switch (m) {
    case Method::Tara: return "tara";
    case Method::DbLoraUnmasked: return "db-lora-unmasked";
    case Method::Rob: return "rob";
    }
    return "?";
}

Method method_from_string(std::string_view s) {
    if (s == "tara") return Method::Tara;
    if (s == "db-lora-unmasked") return Method::DbLoraUnmasked;
    if (s == "rob") return Method::Rob;
    throw ConfigError("unknown method '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning rate must be finite and non-negative");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("lambda must be finite and non-negative");
    }
    if (rank < 1) {
        throw ConfigError("rank must be at least 1");
    }
    if (batch_size < 1) {
        throw ConfigError("batch size must be at least 1");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("momentum must lie in [0, 1)");
    }
    if (eval_draws < 1 || log_every < 1) {
        throw ConfigError("eval_draws and log_every must be positive");
    }
}

std::size_t TrainConfig::total_steps(std::size_t references) const {
    if (steps) {
        return *steps;
    }
    return epochs * ((references + batch_size - 1) / batch_size);
}

TrainConfig TrainConfig::desk_scale() {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.optimizer = num::OptimizerKind::Adam;
    c.steps = 1500;
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j = {{"learning_rate", learning_rate},
                        {"batch_size", batch_size},
                        {"epochs", epochs},
                        {"lambda", lambda},
                        {"rank", rank},
                        {"seed", seed},
                        {"optimizer", std::string(num::to_string(optimizer))},
                        {"momentum", momentum},
                        {"eval_draws", eval_draws},
                        {"log_every", log_every},
                        {"method", std::string(to_string(method))}};
    j["steps"] = steps ? nlohmann::json(*steps) : nlohmann::json(nullptr);
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.lambda = j.value("lambda", c.lambda);
        c.rank = j.value("rank", c.rank);
        c.seed = j.value("seed", c.seed);
        if (j.contains("optimizer")) {
            c.optimizer = num::optimizer_from_string(j.at("optimizer").get<std::string>());
        }
        c.momentum = j.value("momentum", c.momentum);
        c.eval_draws = j.value("eval_draws", c.eval_draws);
        c.log_every = j.value("log_every", c.log_every);
        if (j.contains("method")) {
            c.method = method_from_string(j.at("method").get<std::string>());
        }
        if (j.contains("steps")) {
            c.steps = j.at("steps").is_null() ? std::nullopt : std::optional<std::size_t>(j.at("steps").get<std::size_t>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

ConceptDataset ConceptDataset::make(const diffusion::World& world, const text::ConceptBinding& binding,
                                    std::uint64_t seed, std::size_t references) {
    ConceptDataset d;
    d.spec = diffusion::make_concept(world, binding, num::derive_seed(seed, 0));
    d.references = diffusion::concept_references(world, d.spec, references, num::derive_seed(seed, 1));
    const std::vector<std::string> nouns{binding.class_word};
    const std::vector<std::string> rare{binding.rare_word};
    d.prompt = diffusion::scene_prompt(nouns, rare);
    return d;
}

Var align_loss(const diffusion::BoundDenoiser& model, const lora::BoundAdapter& adapter,
               const text::TokenSequence& seq, const Var& x, const std::string& concept_name) {
    const auto rare = seq.rare_of(concept_name);
    const auto cls = seq.class_of(concept_name);
    if (rare.size() != 1 || cls.size() != 1) {
        throw ConfigError("align_loss: prompt must contain concept '" + concept_name +
                          "' exactly once with its class word (found " + std::to_string(rare.size()) + " rare and " +
                          std::to_string(cls.size()) + " class positions)");
    }
    const std::size_t r_pos = rare[0];
    const std::size_t c_pos = cls[0];
    const Var x_r = num::gather_cols(x, std::span<const std::size_t>(&r_pos, 1));
    const Var x_c = num::gather_cols(x, std::span<const std::size_t>(&c_pos, 1));
    const std::size_t layers = model.blocks.size();
    Var acc;
    for (std::size_t l = 0; l < layers; ++l) {
        const Var& wk = model.blocks[l].attn.wk;
        Var k_r = num::matmul(wk, x_r);
        if (auto it = adapter.layers.find(l); it != adapter.layers.end()) {
            if (const auto& f = it->second.on(attn::Projection::K)) {
                k_r = num::add(k_r, num::matmul(f->b, num::matmul(f->a, x_r)));
            }
        }
        const Var term = num::l1_norm(num::sub(num::matmul(wk, x_c), k_r));
        acc = acc.valid() ? num::add(acc, term) : term;
    }
    return num::scale(acc, 1.0 / static_cast<double>(layers));
}

double align_loss_value(const diffusion::ToyDenoiser& model, const lora::LoraAdapter& adapter,
                        const text::TokenSequence& seq) {
    Tape tape;
    const diffusion::BoundDenoiser bm = diffusion::bind(tape, model, false);
    const lora::BoundAdapter ba = lora::bind(tape, adapter, false);
    return align_loss(bm, ba, seq, tape.constant(seq.x), adapter.binding.name).value().item();
}

LossTerms total_loss(const diffusion::BoundDenoiser& model, const lora::BoundAdapter& adapter,
                     const text::TokenSequence& seq, const Var& x, const std::vector<Matrix>& z0,
                     const std::vector<int>& t, const std::vector<Matrix>& eps, double lambda,
                     const std::string& concept_name) {
    if (!(lambda >= 0.0)) {
        throw ConfigError("total_loss: lambda must be non-negative");
    }
    if (z0.empty() || z0.size() != t.size() || z0.size() != eps.size()) {
        throw ShapeError("total_loss: batch of " + std::to_string(z0.size()) + " latents, " +
                         std::to_string(t.size()) + " timesteps and " + std::to_string(eps.size()) + " noise draws");
    }
    const std::span<const lora::BoundAdapter> adapters(&adapter, 1);
    Var denoise;
    for (std::size_t i = 0; i < z0.size(); ++i) {
        const Var li = diffusion::denoise_loss(model, adapters, seq, x, z0[i], t[i], eps[i]);
        denoise = denoise.valid() ? num::add(denoise, li) : li;
    }
    if (z0.size() > 1) {
        denoise = num::scale(denoise, 1.0 / static_cast<double>(z0.size()));
    }
    const Var align = align_loss(model, adapter, seq, x, concept_name);
    const Var total = lambda == 0.0 ? denoise : num::add(denoise, num::scale(align, lambda));
    return LossTerms{total, denoise, align};
}

std::vector<EvalDraw> make_eval_set(const diffusion::ToyDenoiser& model, const ConceptDataset& data,
                                    std::size_t draws_per_reference, std::uint64_t seed) {
    num::Rng rng(seed);
    const int T = model.config().timesteps;
    std::vector<EvalDraw> out;
    for (std::size_t r = 0; r < data.references.size(); ++r) {
        for (std::size_t k = 0; k < draws_per_reference; ++k) {
            const double u = (static_cast<double>(k) + rng.uniform()) / static_cast<double>(draws_per_reference);
            const int t = std::clamp(1 + static_cast<int>(u * T), 1, T);
            out.push_back(EvalDraw{r, t, rng.normal_matrix(data.references[r].rows(), data.references[r].cols())});
        }
    }
    return out;
}

EvalLoss evaluate(const diffusion::ToyDenoiser& model, const text::Vocabulary& vocab, const ConceptDataset& data,
                  const lora::LoraAdapter& adapter, const std::vector<EvalDraw>& eval_set) {
    const std::vector<text::ConceptBinding> bindings{adapter.binding};
    const text::TokenSequence seq = text::encode_prompt(vocab, bindings, data.prompt);
    const std::vector<lora::LoraAdapter> adapters{adapter};
    EvalLoss e;
    for (const EvalDraw& d : eval_set) {
        e.denoise += diffusion::denoise_loss_value(model, adapters, seq, data.references.at(d.reference), d.t, d.eps);
    }
    e.denoise /= static_cast<double>(eval_set.size());
    e.align = align_loss_value(model, adapter, seq);
    return e;
}

lora::LoraAdapter initial_adapter(const diffusion::ToyDenoiser& model, const text::ConceptBinding& binding,
                                  const TrainConfig& config) {
    const auto& mc = model.config();
    lora::AdapterLayout layout;
    layout.d_model = mc.d_model;
    layout.d_text = mc.d_text;
    for (std::size_t l = 0; l < mc.layers; ++l) {
        layout.layers.push_back(l);
    }
    layout.mask_policy = config.method == Method::Tara ? attn::MaskPolicy::TokenFocused : attn::MaskPolicy::Unmasked;
    const lora::InitMode mode = config.method == Method::Rob ? lora::InitMode::Rob : lora::InitMode::Gaussian;
    return lora::init_adapter(binding, config.rank, layout, mode, num::derive_seed(config.seed, 1));
}

TrainResult train_concept(const diffusion::ToyDenoiser& model, const text::Vocabulary& vocab,
                          const ConceptDataset& data, const TrainConfig& config,
                          const std::function<void(const LossPoint&)>& on_log) {
    config.validate();
    if (data.references.empty()) {
        throw ConfigError("train_concept: dataset has no references");
    }
    const text::ConceptBinding& binding = data.spec.binding;
    const std::vector<text::ConceptBinding> bindings{binding};
    const text::TokenSequence seq = text::encode_prompt(vocab, bindings, data.prompt);
    const double lambda = config.method == Method::Tara ? config.lambda : 0.0;

    TrainResult result{initial_adapter(model, binding, config), {}, {}, {}, config.total_steps(data.references.size())};
    lora::LoraAdapter& adapter = result.adapter;

    std::vector<std::string> names;
    {
        Tape probe;
        for (const auto& [name, leaf] : lora::bind(probe, adapter, true).leaves) {
            names.push_back(name);
        }
    }
    std::vector<Matrix*> params;
    for (const std::string& n : names) {
        params.push_back(&lora::block(adapter, n));
    }
    num::OptimizerConfig oc;
    oc.kind = config.optimizer;
    oc.lr = config.learning_rate;
    oc.momentum = config.momentum;
    num::Optimizer opt(oc, params);

    const auto eval_set = make_eval_set(model, data, config.eval_draws, num::derive_seed(config.seed, 3));
    result.before = evaluate(model, vocab, data, adapter, eval_set);

    num::Rng rng(num::derive_seed(config.seed, 2));
    const int T = model.config().timesteps;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    auto next_reference = [&]() {
        if (cursor == order.size()) {
            order.resize(data.references.size());
            for (std::size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            for (std::size_t i = order.size() - 1; i > 0; --i) {
                std::swap(order[i], order[rng.below(i + 1)]);
            }
            cursor = 0;
        }
        return order[cursor++];
    };

    for (std::size_t step = 0; step < result.steps; ++step) {
        std::vector<Matrix> z0;
        std::vector<int> ts;
        std::vector<Matrix> eps;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            z0.push_back(data.references[next_reference()]);
            ts.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(T))));
            eps.push_back(rng.normal_matrix(z0.back().rows(), z0.back().cols()));
        }

        Tape tape;
        const diffusion::BoundDenoiser bm = diffusion::bind(tape, model, false);
        const lora::BoundAdapter ba = lora::bind(tape, adapter, true);
        std::optional<LossTerms> loss;
        std::optional<num::Gradients> grads;
        try {
            loss = total_loss(bm, ba, seq, tape.constant(seq.x), z0, ts, eps, lambda, binding.name);
            if (std::isfinite(loss->total.value().item())) {
                grads = tape.grad(loss->total);
            }
        } catch (const NonFiniteError& e) {
            throw DivergenceError(std::string("training diverged: ") + e.what(), step);
        }
        const LossPoint point{step, loss->denoise.value().item(), loss->align.value().item(),
                              loss->total.value().item()};
        if (!std::isfinite(point.total)) {
            throw DivergenceError("training diverged: loss is " + std::to_string(point.total), step);
        }
        if (step % config.log_every == 0) {
            result.curve.push_back(point);
            if (on_log) {
                on_log(point);
            }
        }

        std::vector<const Matrix*> g;
        for (const auto& [name, leaf] : ba.leaves) {
            g.push_back(&(*grads)[leaf]);
        }
        opt.step(g);
        for (Matrix* p : params) {
            if (!num::all_finite(*p)) {
                throw DivergenceError("training diverged: non-finite adapter weights", step);
            }
        }
    }
    result.after = evaluate(model, vocab, data, adapter, eval_set);
    return result;
}

TrainResult train_baseline(const diffusion::ToyDenoiser& model, const text::Vocabulary& vocab,
                           const ConceptDataset& data, TrainConfig config, Method mode) {
    if (mode == Method::Tara) {
        throw ConfigError("train_baseline: mode must be db-lora-unmasked or rob");
    }
    config.method = mode;
    return train_concept(model, vocab, data, config);
}

std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
    std::string out = "step,denoise,align,total\n";
    char buf[128];
    for (const LossPoint& p : curve) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", p.step, p.denoise, p.align, p.total);
        out += buf;
    }
    return out;
}

}  // namespace tara::train
