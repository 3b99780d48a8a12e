// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/diffusion/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tara/error.hpp"
#include "tara/io/container.hpp"
#include "tara/numerics/optim.hpp"

namespace tara::diffusion {

using num::Matrix;

namespace {

constexpr std::string_view kBaseMagic = "TBAS";
constexpr std::uint32_t kBaseVersion = 1;

void paint(Matrix& z, std::span<const std::size_t> region, const Matrix& pattern) {
    for (std::size_t p : region) {
        auto row = z.row(p);
        for (std::size_t c = 0; c < row.size(); ++c) {
            row[c] += pattern(0, c);
        }
    }
}

}  // namespace

std::vector<std::string> default_class_words() { return {"dog", "cat", "bird", "car", "tree", "house", "cup", "shoe"}; }

std::vector<std::string> default_rare_words() {
    return {"sks", "xon", "vex", "qor", "zub", "plo", "mik", "ruv", "tav", "kel", "dax", "wem"};
}

std::vector<std::string> default_words() {
    std::vector<std::string> words{"a", "and", "."};
    for (auto& w : default_class_words()) {
        words.push_back(w);
    }
    for (auto& w : default_rare_words()) {
        words.push_back(w);
    }
    return words;
}

std::vector<std::size_t> World::region(std::size_t quadrant) const {
    if (quadrant > 3) {
        throw ConfigError("quadrant " + std::to_string(quadrant) + " out of range");
    }
    const std::size_t half = grid / 2;
    const std::size_t r0 = (quadrant / 2) * half;
    const std::size_t c0 = (quadrant % 2) * half;
    std::vector<std::size_t> cells;
    for (std::size_t r = r0; r < r0 + half; ++r) {
        for (std::size_t c = c0; c < c0 + half; ++c) {
            cells.push_back(r * grid + c);
        }
    }
    return cells;
}

const ClassSpec& World::find(const std::string& word) const {
    for (const ClassSpec& c : classes) {
        if (c.word == word) {
            return c;
        }
    }
    throw ConfigError("'" + word + "' is not a class known to the base model");
}

World make_world(const text::Vocabulary& vocab, std::span<const std::string> class_words, const ModelConfig& config,
                 std::uint64_t seed) {
    config.validate();
    if (class_words.size() < 4) {
        throw ConfigError("the toy world needs at least 4 classes, one per quadrant");
    }
    World w;
    w.grid = config.grid;
    w.d_model = config.d_model;
    w.sigma = config.sigma_data;
    num::Rng rng(seed);
    for (std::size_t c = 0; c < class_words.size(); ++c) {
        ClassSpec spec;
        spec.word = class_words[c];
        spec.id = vocab.id(class_words[c]);
        spec.quadrant = c % 4;
        spec.pattern = rng.normal_matrix(1, config.d_model);
        w.classes.push_back(std::move(spec));
    }
    return w;
}

std::vector<std::string> scene_prompt(std::span<const std::string> nouns, std::span<const std::string> rare) {
    if (!rare.empty() && rare.size() != nouns.size()) {
        throw ConfigError("scene_prompt: one rare word per noun required");
    }
    std::vector<std::string> words;
    for (std::size_t i = 0; i < nouns.size(); ++i) {
        if (i > 0) {
            words.push_back("and");
        }
        words.push_back("a");
        if (!rare.empty()) {
            words.push_back(rare[i]);
        }
        words.push_back(nouns[i]);
    }
    words.push_back(".");
    return words;
}

Scene sample_scene(const World& world, num::Rng& rng) {
    std::array<std::size_t, 4> quads{0, 1, 2, 3};
    for (std::size_t i = 3; i > 0; --i) {
        std::swap(quads[i], quads[rng.below(i + 1)]);
    }
    const std::size_t k = 1 + rng.below(4);
    const std::size_t m = world.grid * world.grid;
    Scene scene{rng.normal_matrix(m, world.d_model, world.sigma), {}};
    std::vector<std::string> nouns;
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<std::size_t> candidates;
        for (std::size_t c = 0; c < world.classes.size(); ++c) {
            if (world.classes[c].quadrant == quads[i]) {
                candidates.push_back(c);
            }
        }
        const ClassSpec& cls = world.classes[candidates[rng.below(candidates.size())]];
        paint(scene.z0, world.region(cls.quadrant), cls.pattern);
        nouns.push_back(cls.word);
    }
    scene.prompt = scene_prompt(nouns);
    return scene;
}

ConceptSpec make_concept(const World& world, const text::ConceptBinding& binding, std::uint64_t seed,
                         double offset_scale) {
    const ClassSpec& cls = world.find(binding.class_word);
    num::Rng rng(seed);
    ConceptSpec c;
    c.binding = binding;
    c.quadrant = cls.quadrant;
    c.pattern = cls.pattern;
    const double w = offset_scale / std::sqrt(static_cast<double>(world.classes.size()));
    for (const ClassSpec& other : world.classes) {
        c.pattern += (w * rng.normal()) * other.pattern;
    }
    c.region = world.region(cls.quadrant);
    c.template_latent = Matrix(world.grid * world.grid, world.d_model);
    paint(c.template_latent, c.region, c.pattern);
    return c;
}

std::vector<Matrix> concept_references(const World& world, const ConceptSpec& concept_spec, std::size_t count,
                                       std::uint64_t seed) {
    if (count < 4 || count > 6) {
        throw ConfigError("a concept needs 4-6 references, got " + std::to_string(count));
    }
    num::Rng rng(seed);
    std::vector<Matrix> refs;
    for (std::size_t i = 0; i < count; ++i) {
        refs.push_back(concept_spec.template_latent +
                       rng.normal_matrix(concept_spec.template_latent.rows(), world.d_model, world.sigma));
    }
    return refs;
}

double region_mse(const Matrix& a, const Matrix& b, std::span<const std::size_t> region) {
    num::require_same_shape(a, b, "region_mse");
    if (region.empty()) {
        throw ConfigError("region_mse: empty region");
    }
    double acc = 0.0;
    for (std::size_t p : region) {
        if (p >= a.rows()) {
            throw ConfigError("region_mse: patch " + std::to_string(p) + " out of range");
        }
        for (std::size_t c = 0; c < a.cols(); ++c) {
            const double d = a(p, c) - b(p, c);
            acc += d * d;
        }
    }
    return acc / static_cast<double>(region.size() * a.cols());
}

ToyDenoiser pretrain(const World& world, const text::Vocabulary& vocab, const ModelConfig& config,
                     const PretrainConfig& pc, const std::function<void(std::size_t, double)>& progress) {
    ToyDenoiser model = ToyDenoiser::init(config, num::derive_seed(pc.seed, 1));
    std::vector<Matrix*> params;
    for (auto& [name, m] : model.named_weights()) {
        params.push_back(m);
    }
    num::OptimizerConfig oc;
    oc.kind = num::OptimizerKind::Adam;
    oc.lr = pc.lr;
    num::Optimizer opt(oc, params);
    num::Rng rng(num::derive_seed(pc.seed, 2));
    const std::size_t m = config.patches();
    double running = 0.0;
    for (std::size_t step = 0; step < pc.steps; ++step) {
        const Scene scene = sample_scene(world, rng);
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.timesteps)));
        const Matrix eps = rng.normal_matrix(m, config.d_model);
        const text::TokenSequence seq = text::encode_prompt(vocab, {}, scene.prompt);

        num::Tape tape;
        const BoundDenoiser bm = bind(tape, model, true);
        const num::Var loss = denoise_loss(bm, {}, seq, tape.constant(seq.x), scene.z0, t, eps);
        const num::Gradients grads = tape.grad(loss);
        std::vector<const Matrix*> g;
        for (const auto& [name, leaf] : bm.leaves) {
            g.push_back(&grads[leaf]);
        }
        const double frac = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(1, pc.steps));
        opt.set_lr(pc.lr * (1.0 - (1.0 - pc.final_lr_fraction) * frac));
        opt.step(g);

        running += loss.value().item();
        if ((step + 1) % 500 == 0) {
            if (progress) {
                progress(step + 1, running / 500.0);
            }
            running = 0.0;
        }
    }
    return model;
}

void save_base(const BaseBundle& bundle, const std::string& path) {
    io::Container c;
    c.version = kBaseVersion;
    nlohmann::json classes = nlohmann::json::array();
    for (const ClassSpec& cls : bundle.world.classes) {
        classes.push_back({{"word", cls.word}, {"id", cls.id}, {"quadrant", cls.quadrant}});
    }
    c.header = {{"model", bundle.model.config().to_json()},
                {"world", {{"grid", bundle.world.grid}, {"d_model", bundle.world.d_model},
                           {"sigma", bundle.world.sigma}, {"classes", classes}}},
                {"vocab_checksum", io::hex64(bundle.vocab_checksum)}};
    for (const auto& [name, m] : bundle.model.named_weights()) {
        c.blocks.emplace_back(name, *m);
    }
    for (const ClassSpec& cls : bundle.world.classes) {
        c.blocks.emplace_back("class." + cls.word, cls.pattern);
    }
    io::write_file(path, io::encode_container(kBaseMagic, c));
}

BaseBundle load_base(const std::string& path) {
    const auto bytes = io::read_file(path);
    io::Container c = io::decode_container(bytes, kBaseMagic, kBaseVersion);
    constexpr std::size_t header_at = 12;
    try {
        const ModelConfig config = ModelConfig::from_json(c.header.at("model"));
        const auto& wj = c.header.at("world");
        World world;
        world.grid = wj.at("grid").get<std::size_t>();
        world.d_model = wj.at("d_model").get<std::size_t>();
        world.sigma = wj.at("sigma").get<double>();

        std::size_t k = 0;
        auto next = [&](const std::string& name) -> Matrix {
            if (k >= c.blocks.size() || c.blocks[k].first != name) {
                throw FormatError(path + ": expected block '" + name + "'", header_at);
            }
            return std::move(c.blocks[k++].second);
        };
        std::vector<BlockWeights> blocks(config.layers);
        for (std::size_t l = 0; l < config.layers; ++l) {
            const std::string p = "l" + std::to_string(l) + ".";
            BlockWeights& b = blocks[l];
            b.wq = next(p + "wq");
            b.wk = next(p + "wk");
            b.wv = next(p + "wv");
            b.wo = next(p + "wo");
            b.w1 = next(p + "w1");
            b.b1 = next(p + "b1");
            b.w2 = next(p + "w2");
            b.b2 = next(p + "b2");
        }
        Matrix w_out = next("w_out");
        Matrix b_out = next("b_out");
        for (const auto& cj : wj.at("classes")) {
            ClassSpec cls;
            cls.word = cj.at("word").get<std::string>();
            cls.id = cj.at("id").get<text::TokenId>();
            cls.quadrant = cj.at("quadrant").get<std::size_t>();
            cls.pattern = next("class." + cls.word);
            world.classes.push_back(std::move(cls));
        }
        if (k != c.blocks.size()) {
            throw FormatError(path + ": unexpected trailing blocks", header_at);
        }
        const std::string sum = c.header.at("vocab_checksum").get<std::string>();
        return BaseBundle{ToyDenoiser(config, std::move(blocks), std::move(w_out), std::move(b_out)), std::move(world),
                          std::stoull(sum, nullptr, 16)};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what(), header_at);
    } catch (const ShapeError& e) {
        throw FormatError(path + ": " + e.what(), header_at);
    } catch (const ConfigError& e) {
        throw FormatError(path + ": " + e.what(), header_at);
    }
}

void check_vocab(const BaseBundle& bundle, const text::Vocabulary& vocab) {
    if (vocab.checksum() != bundle.vocab_checksum) {
        throw ConfigError("vocabulary checksum " + io::hex64(vocab.checksum()) + " does not match the base model's " +
                          io::hex64(bundle.vocab_checksum));
    }
}

}  // namespace tara::diffusion
