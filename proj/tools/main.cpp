// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "commands.hpp"
#include "tara/error.hpp"

namespace {

using namespace tara::cli;

template <class F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const tara::DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kDiverged;
    } catch (const tara::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kConfigError;
    } catch (const tara::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kConfigError;
    } catch (const tara::ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInternal;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token-aware LoRA adapters on a toy latent-diffusion model"};
    app.require_subcommand(1);
    app.set_version_flag("--version", TARA_VERSION);
    app.footer("Exit codes: 0 ok, 1 check failed, 2 config/input error, 3 divergence, 4 internal error.\n"
               "Seeds: --seed, then the config file's \"seed\", then $TARA_SEED, then 0.");

    MakeVocabOptions mv;
    auto* c_vocab = app.add_subcommand("make-vocab", "Build a seeded token embedding table");
    c_vocab->add_option("--out", mv.out, "Output vocabulary JSON")->required();
    c_vocab->add_option("--dim", mv.dim, "Embedding dimension")->capture_default_str();
    c_vocab->add_option("--words", mv.words, "Words (default: the toy vocabulary)")->delimiter(',');
    c_vocab->add_option("--seed", mv.seed, "Seed");

    MakeBaseOptions mb;
    auto* c_base = app.add_subcommand("make-base", "Pretrain a toy base denoiser on the synthetic world");
    c_base->add_option("--vocab", mb.vocab, "Vocabulary JSON")->required();
    c_base->add_option("--out", mb.out, "Output .tbase file")->required();
    c_base->add_option("--config", mb.config, "JSON with model, pretrain, classes, seed");
    c_base->add_option("--steps", mb.steps, "Pretraining steps");
    c_base->add_option("--seed", mb.seed, "Seed");
    c_base->add_flag("--quiet", mb.quiet, "No progress output");

    TrainOptions tr;
    auto* c_train = app.add_subcommand("train", "Train one concept adapter");
    c_train->add_option("--vocab", tr.vocab, "Vocabulary JSON")->required();
    c_train->add_option("--base", tr.base, "Base model .tbase")->required();
    c_train->add_option("--out", tr.out, "Output .tara adapter")->required();
    c_train->add_option("--config", tr.config, "Train config JSON");
    c_train->add_option("--concept", tr.concept_name, "Concept name (default: the rare word)");
    c_train->add_option("--rare", tr.rare, "Rare token")->required();
    c_train->add_option("--class", tr.class_word, "Class noun")->required();
    c_train->add_option("--preset", tr.preset, "full (default) or desk");
    c_train->add_option("--method", tr.method, "tara, db-lora-unmasked or rob");
    c_train->add_option("--steps", tr.steps, "Optimizer steps (overrides epochs)");
    c_train->add_option("--lr", tr.lr, "Learning rate");
    c_train->add_option("--lambda", tr.lambda, "Alignment loss weight");
    c_train->add_option("--rank", tr.rank, "Adapter rank");
    c_train->add_option("--optimizer", tr.optimizer, "sgd or adam");
    c_train->add_option("--momentum", tr.momentum, "SGD momentum");
    c_train->add_option("--epochs", tr.epochs, "Epochs over the references");
    c_train->add_option("--references", tr.references, "Reference count, 4-6");
    c_train->add_option("--seed", tr.seed, "Training seed");
    c_train->add_option("--data-seed", tr.data_seed, "Concept seed (default: the training seed)");

    GenerateOptions gen;
    auto* c_gen = app.add_subcommand("generate", "Sample with composed adapters and record probes");
    c_gen->add_option("--vocab", gen.vocab, "Vocabulary JSON")->required();
    c_gen->add_option("--base", gen.base, "Base model .tbase")->required();
    c_gen->add_option("--adapter", gen.adapters, "Adapter file, repeatable, composition order");
    c_gen->add_option("--adapters", gen.adapter_manifest, "Adapter manifest JSON (listed first)");
    c_gen->add_option("--prompt", gen.prompt, "Prompt")->required();
    c_gen->add_option("--out-dir", gen.out_dir, "Run directory")->required();
    c_gen->add_option("--steps", gen.steps, "Sampler steps")->capture_default_str();
    c_gen->add_option("--seed", gen.seed, "Sampling seed");
    c_gen->add_flag("--solo", gen.solo, "Also sample each adapter alone on the same prompt and seed");
    c_gen->add_flag("!--no-probes", gen.probes, "Skip attention and influence probes");

    ComposeCheckOptions cc;
    auto* c_cc = app.add_subcommand("compose-check", "Verify masking, composition and non-interference");
    c_cc->add_option("--vocab", cc.vocab, "Vocabulary JSON")->required();
    c_cc->add_option("--base", cc.base, "Base model .tbase")->required();
    c_cc->add_option("--adapter", cc.adapters, "Adapter file, repeatable");
    c_cc->add_option("--adapters", cc.adapter_manifest, "Adapter manifest JSON");
    c_cc->add_option("--prompt", cc.prompt, "Prompt")->required();
    c_cc->add_option("--steps", cc.steps, "Sampler steps")->capture_default_str();
    c_cc->add_option("--seeds", cc.seeds, "Sampling seeds for the non-interference check")->capture_default_str();
    c_cc->add_option("--seed", cc.seed, "Base seed");
    c_cc->add_option("--report", cc.report, "Write the JSON report here");

    AnalyzeOptions an;
    auto* c_an = app.add_subcommand("analyze", "Token influence, attention and interference reports");
    c_an->add_option("--run-dir", an.run_dirs, "Run directory from generate (repeatable for interference)")
        ->required();
    c_an->add_option("--mode", an.mode, "tokens, attention or interference")
        ->required()
        ->check(CLI::IsMember({"tokens", "attention", "interference"}));
    c_an->add_option("--out-dir", an.out_dir, "Output directory (default: <run>/analysis-<mode>)");
    c_an->add_option("--positions", an.positions, "Token positions (default: rare positions)")->delimiter(',');
    c_an->add_option("--first-step", an.first_step, "First sampler step to aggregate");
    c_an->add_option("--last-step", an.last_step, "Last sampler step to aggregate");
    c_an->add_option("--top", an.top_fraction, "Top-mass fraction for IoU")->capture_default_str();
    c_an->add_flag("!--no-per-map", an.per_map_heatmaps, "Only aggregated heatmaps");

    GradcheckOptions gc;
    auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of the training gradients");
    c_gc->add_option("--config", gc.config, "JSON with model, lambda, rank, seed");
    c_gc->add_option("--lambda", gc.lambda, "Alignment loss weight (0 checks the denoise path only)");
    c_gc->add_option("--rank", gc.rank, "Adapter rank");
    c_gc->add_option("--seed", gc.seed, "Seed");
    c_gc->add_option("--step", gc.step, "Relative central-difference step")->capture_default_str();
    c_gc->add_option("--tolerance", gc.tolerance, "Max relative error")->capture_default_str();
    c_gc->add_flag("--inject-fault", gc.inject_fault, "Corrupt the softmax adjoint (negative control)");
    c_gc->add_option("--report", gc.report, "Write the JSON report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    if (c_vocab->parsed()) return guarded([&] { return make_vocab(mv); });
    if (c_base->parsed()) return guarded([&] { return make_base(mb); });
    if (c_train->parsed()) return guarded([&] { return train(tr); });
    if (c_gen->parsed()) return guarded([&] { return generate(gen); });
    if (c_cc->parsed()) return guarded([&] { return compose_check(cc); });
    if (c_an->parsed()) return guarded([&] { return analyze(an); });
    if (c_gc->parsed()) return guarded([&] { return gradcheck(gc); });
    return kConfigError;
}
