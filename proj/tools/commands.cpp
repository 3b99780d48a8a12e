// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "tara/analysis/analysis.hpp"
#include "tara/diffusion/world.hpp"
#include "tara/error.hpp"
#include "tara/io/container.hpp"
#include "tara/numerics/rng.hpp"
#include "tara/training/gradcheck.hpp"
#include "tara/training/trainer.hpp"

#ifndef TARA_VERSION
#define TARA_VERSION "0.0.0"
#endif

namespace tara::cli {

namespace fs = std::filesystem;
using num::Matrix;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const nlohmann::json& config) {
    if (flag) {
        return *flag;
    }
    if (config.is_object() && config.contains("seed")) {
        try {
            return config.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config seed: ") + e.what());
        }
    }
    if (const char* env = std::getenv("TARA_SEED"); env != nullptr && *env != '\0') {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(env, &used, 10);
            if (used != std::string_view(env).size()) {
                throw std::invalid_argument(env);
            }
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError(std::string("TARA_SEED is not an unsigned integer: '") + env + "'");
        }
    }
    return 0;
}

nlohmann::json read_config(const std::string& path) {
    if (path.empty()) {
        return nlohmann::json::object();
    }
    try {
        nlohmann::json j = nlohmann::json::parse(io::read_text(path));
        if (!j.is_object()) {
            throw ConfigError(path + ": config must be a JSON object");
        }
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string RunManifest::experiment_id() const {
    nlohmann::json key = {{"command", command}, {"config", config}, {"seeds", seeds}, {"inputs", inputs}};
    const std::string s = key.dump();
    return command + "-" + io::hex64(io::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
}

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j = {{"experiment_id", experiment_id()},
                        {"command", command},
                        {"config", config},
                        {"seeds", seeds},
                        {"inputs", inputs},
                        {"outputs", outputs},
                        {"tool_version", TARA_VERSION}};
    for (const auto& [k, v] : extra.items()) {
        j[k] = v;
    }
    return j;
}

void RunManifest::write(const std::string& path) const { io::write_text(path, to_json().dump(2) + "\n"); }

namespace {

std::string sibling(const std::string& path, const std::string& suffix) {
    fs::path p(path);
    p.replace_extension(suffix);
    return p.string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw ConfigError("cannot create directory " + dir + ": " + ec.message());
    }
}

std::uint64_t file_checksum(const std::string& path) { return io::fnv1a(io::read_file(path)); }

struct Inputs {
    text::Vocabulary vocab;
    diffusion::BaseBundle base;
};

Inputs load_inputs(const std::string& vocab_path, const std::string& base_path) {
    if (vocab_path.empty() || base_path.empty()) {
        throw ConfigError("--vocab and --base are required");
    }
    Inputs in{text::load_vocab(vocab_path), diffusion::load_base(base_path)};
    diffusion::check_vocab(in.base, in.vocab);
    return in;
}

std::vector<std::string> adapter_paths(const std::vector<std::string>& listed, const std::string& manifest) {
    std::vector<std::string> paths;
    if (!manifest.empty()) {
        paths = lora::load_manifest(manifest);
    }
    paths.insert(paths.end(), listed.begin(), listed.end());
    return paths;
}

void check_compatible(const lora::LoraAdapter& a, const diffusion::ModelConfig& mc) {
    if (a.layout.d_model != mc.d_model || a.layout.d_text != mc.d_text) {
        throw ConfigError("adapter '" + a.binding.name + "' was built for d_model " + std::to_string(a.layout.d_model) +
                          ", d_text " + std::to_string(a.layout.d_text) + "; the base model has " +
                          std::to_string(mc.d_model) + ", " + std::to_string(mc.d_text));
    }
    for (std::size_t l : a.layout.layers) {
        if (l >= mc.layers) {
            throw ConfigError("adapter '" + a.binding.name + "' targets layer " + std::to_string(l) +
                              " but the base model has " + std::to_string(mc.layers));
        }
    }
}

/// Loads adapters in composition order into a registry, which rejects duplicate rare tokens.
lora::AdapterRegistry load_registry(const std::vector<std::string>& paths, const Inputs& in) {
    lora::AdapterRegistry registry;
    for (const std::string& p : paths) {
        lora::LoraAdapter a = lora::load_adapter(p);
        lora::check_binding(a, in.vocab);
        check_compatible(a, in.base.model.config());
        registry.add(std::move(a));
    }
    return registry;
}

text::TokenSequence encode(const Inputs& in, std::span<const lora::LoraAdapter> adapters, const std::string& prompt) {
    std::vector<text::ConceptBinding> bindings;
    for (const auto& a : adapters) {
        bindings.push_back(a.binding);
    }
    const std::vector<std::string> words = text::tokenize(prompt);
    if (words.empty()) {
        throw ConfigError("empty prompt");
    }
    return text::encode_prompt(in.vocab, bindings, words);
}

nlohmann::json concept_entry(const lora::LoraAdapter& a, const text::TokenSequence& seq, const diffusion::World& world) {
    const auto rare = seq.rare_of(a.binding.name);
    const auto cls = seq.class_of(a.binding.name);
    nlohmann::json j = {{"name", a.binding.name},
                        {"rare", a.binding.rare_word},
                        {"class", a.binding.class_word},
                        {"method", analysis::method_of(a)},
                        {"rare_positions", std::vector<std::size_t>(rare.begin(), rare.end())},
                        {"class_positions", std::vector<std::size_t>(cls.begin(), cls.end())}};
    for (const auto& c : world.classes) {
        if (c.word == a.binding.class_word) {
            j["region"] = world.region(c.quadrant);
        }
    }
    return j;
}

}  // namespace

int make_vocab(const MakeVocabOptions& o) {
    if (o.out.empty()) {
        throw ConfigError("--out is required");
    }
    const std::uint64_t seed = resolve_seed(o.seed, {});
    std::vector<std::string> words = o.words.empty() ? diffusion::default_words() : o.words;
    const text::Vocabulary v = text::build_vocab(seed, o.dim, words);
    text::save_vocab(v, o.out);

    RunManifest m;
    m.command = "make-vocab";
    m.config = {{"dim", o.dim}, {"words", words}};
    m.seeds = {{"seed", seed}};
    m.outputs = {o.out};
    m.extra = {{"vocab_checksum", io::hex64(v.checksum())}};
    m.write(sibling(o.out, ".manifest.json"));
    std::printf("vocabulary: %zu tokens, d=%zu, checksum %s\n", v.size(), v.d(), io::hex64(v.checksum()).c_str());
    return kOk;
}

int make_base(const MakeBaseOptions& o) {
    if (o.out.empty() || o.vocab.empty()) {
        throw ConfigError("--vocab and --out are required");
    }
    const nlohmann::json cfg = read_config(o.config);
    const std::uint64_t seed = resolve_seed(o.seed, cfg);
    const diffusion::ModelConfig mc = diffusion::ModelConfig::from_json(cfg.value("model", nlohmann::json::object()));
    diffusion::PretrainConfig pc;
    try {
        const nlohmann::json pj = cfg.value("pretrain", nlohmann::json::object());
        pc.steps = pj.value("steps", pc.steps);
        pc.lr = pj.value("lr", pc.lr);
        pc.final_lr_fraction = pj.value("final_lr_fraction", pc.final_lr_fraction);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pretrain config: ") + e.what());
    }
    if (o.steps) {
        pc.steps = *o.steps;
    }
    if (!(pc.lr > 0.0) || pc.final_lr_fraction < 0.0 || pc.final_lr_fraction > 1.0) {
        throw ConfigError("pretrain: lr must be positive and final_lr_fraction in [0, 1]");
    }
    pc.seed = num::derive_seed(seed, 1);
    const text::Vocabulary vocab = text::load_vocab(o.vocab);
    if (vocab.d() != mc.d_text) {
        throw ConfigError("vocabulary dimension " + std::to_string(vocab.d()) + " does not match d_text " +
                          std::to_string(mc.d_text));
    }
    const std::vector<std::string> classes =
        cfg.contains("classes") ? cfg.at("classes").get<std::vector<std::string>>() : diffusion::default_class_words();
    diffusion::World world = diffusion::make_world(vocab, classes, mc, num::derive_seed(seed, 0));
    diffusion::ToyDenoiser model =
        diffusion::pretrain(world, vocab, mc, pc, [&](std::size_t step, double loss) {
            if (!o.quiet) {
                std::fprintf(stderr, "pretrain step %zu loss %.5f\n", step, loss);
            }
        });
    const diffusion::BaseBundle bundle{std::move(model), std::move(world), vocab.checksum()};
    diffusion::save_base(bundle, o.out);

    RunManifest m;
    m.command = "make-base";
    m.config = {{"model", mc.to_json()},
                {"pretrain", {{"steps", pc.steps}, {"lr", pc.lr}, {"final_lr_fraction", pc.final_lr_fraction}}},
                {"classes", classes}};
    m.seeds = {{"seed", seed}};
    m.inputs = {o.vocab};
    m.outputs = {o.out};
    m.extra = {{"base_checksum", io::hex64(bundle.model.checksum())}};
    m.write(sibling(o.out, ".manifest.json"));
    std::printf("base model: %zu steps, checksum %s\n", pc.steps, io::hex64(bundle.model.checksum()).c_str());
    return kOk;
}

int train(const TrainOptions& o) {
    if (o.out.empty() || o.rare.empty() || o.class_word.empty()) {
        throw ConfigError("--out, --rare and --class are required");
    }
    nlohmann::json cfg = read_config(o.config);
    const std::string preset = o.preset.value_or(cfg.value("preset", std::string("full")));
    train::TrainConfig defaults;
    if (preset == "desk") {
        defaults = train::TrainConfig::desk_scale();
    } else if (preset != "full") {
        throw ConfigError("unknown preset '" + preset + "' (expected full or desk)");
    }
    train::TrainConfig c = train::TrainConfig::from_json(cfg, defaults);
    if (o.method) c.method = train::method_from_string(*o.method);
    if (o.steps) c.steps = *o.steps;
    if (o.lr) c.learning_rate = *o.lr;
    if (o.lambda) c.lambda = *o.lambda;
    if (o.rank) c.rank = *o.rank;
    if (o.optimizer) c.optimizer = num::optimizer_from_string(*o.optimizer);
    if (o.momentum) c.momentum = *o.momentum;
    if (o.epochs) c.epochs = *o.epochs;
    c.seed = resolve_seed(o.seed, cfg);
    c.validate();
    const std::uint64_t data_seed = o.data_seed.value_or(cfg.value("data_seed", c.seed));
    const std::size_t refs = o.references.value_or(cfg.value("references", std::size_t{5}));

    const std::uint64_t base_file_before = file_checksum(o.base);
    const Inputs in = load_inputs(o.vocab, o.base);
    const std::uint64_t model_before = in.base.model.checksum();
    const std::uint64_t vocab_before = in.vocab.checksum();

    const std::string name = o.concept_name.empty() ? o.rare : o.concept_name;
    const text::ConceptBinding binding = text::bind_concept(in.vocab, name, o.rare, o.class_word);
    const train::ConceptDataset data = train::ConceptDataset::make(in.base.world, binding, data_seed, refs);
    const train::TrainResult r = train::train_concept(in.base.model, in.vocab, data, c);

    const std::uint64_t model_after = in.base.model.checksum();
    const std::uint64_t vocab_after = in.vocab.checksum();
    const std::uint64_t base_file_after = file_checksum(o.base);
    if (model_after != model_before || vocab_after != vocab_before || base_file_after != base_file_before) {
        throw Error("base model or embeddings changed during training");
    }

    lora::save_adapter(r.adapter, o.out);
    const std::string csv = sibling(o.out, ".loss.csv");
    io::write_text(csv, train::loss_curve_csv(r.curve));

    RunManifest m;
    m.command = "train";
    m.config = c.to_json();
    m.config["preset"] = preset;
    m.config["references"] = refs;
    m.config["concept"] = {{"name", name}, {"rare", o.rare}, {"class", o.class_word}};
    m.seeds = {{"seed", c.seed}, {"data_seed", data_seed}};
    m.inputs = {o.vocab, o.base};
    m.outputs = {o.out, csv};
    m.extra = {{"steps", r.steps},
               {"eval_before", {{"denoise", r.before.denoise}, {"align", r.before.align}}},
               {"eval_after", {{"denoise", r.after.denoise}, {"align", r.after.align}}},
               {"base_checksum", {{"before", io::hex64(model_before)}, {"after", io::hex64(model_after)}}},
               {"vocab_checksum", {{"before", io::hex64(vocab_before)}, {"after", io::hex64(vocab_after)}}},
               {"adapter_checksum", io::hex64(r.adapter.checksum())}};
    m.write(sibling(o.out, ".manifest.json"));
    std::printf("trained %s (%s, rank %zu, %zu steps): denoise %.5f -> %.5f, align %.5f -> %.5f\n", name.c_str(),
                std::string(train::to_string(c.method)).c_str(), c.rank, r.steps, r.before.denoise, r.after.denoise,
                r.before.align, r.after.align);
    return kOk;
}

int generate(const GenerateOptions& o) {
    if (o.out_dir.empty() || o.prompt.empty()) {
        throw ConfigError("--prompt and --out-dir are required");
    }
    const Inputs in = load_inputs(o.vocab, o.base);
    const std::vector<std::string> paths = adapter_paths(o.adapters, o.adapter_manifest);
    const lora::AdapterRegistry registry = load_registry(paths, in);
    const auto adapters = registry.adapters();
    const text::TokenSequence seq = encode(in, adapters, o.prompt);
    const std::uint64_t seed = resolve_seed(o.seed, {});
    if (o.steps < 1 || o.steps > static_cast<std::size_t>(in.base.model.config().timesteps)) {
        throw ConfigError("--steps must lie in [1, T]");
    }

    ensure_dir(o.out_dir);
    attn::ProbeCollector probe;
    const Matrix z = diffusion::sample(in.base.model, adapters, seq, seed, o.steps, o.probes ? &probe : nullptr);
    const nlohmann::json sidecar = {{"seed", seed}, {"steps", o.steps}, {"provenance", "generated"},
                                    {"prompt", o.prompt}};
    RunManifest m;
    m.command = "generate";
    m.config = {{"prompt", o.prompt}, {"steps", o.steps}, {"solo", o.solo}, {"probes", o.probes}};
    m.seeds = {{"seed", seed}};
    m.inputs = {o.vocab, o.base};
    m.inputs.insert(m.inputs.end(), paths.begin(), paths.end());

    const std::string sample_path = (fs::path(o.out_dir) / "sample.f64").string();
    diffusion::save_latent(sample_path, z, sidecar);
    m.outputs = {sample_path, sample_path + ".json"};
    if (o.probes) {
        const std::string probe_path = (fs::path(o.out_dir) / "probes.tprb").string();
        analysis::save_probes(probe, probe_path);
        m.outputs.push_back(probe_path);
    }
    nlohmann::json concepts = nlohmann::json::array();
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        nlohmann::json cj = concept_entry(adapters[i], seq, in.base.world);
        if (o.solo) {
            const std::string solo_path = (fs::path(o.out_dir) / ("solo_" + std::to_string(i) + ".f64")).string();
            nlohmann::json sj = sidecar;
            sj["solo"] = adapters[i].binding.name;
            diffusion::save_latent(solo_path,
                                   diffusion::sample(in.base.model, adapters.subspan(i, 1), seq, seed, o.steps), sj);
            m.outputs.push_back(solo_path);
            m.outputs.push_back(solo_path + ".json");
            cj["solo"] = fs::path(solo_path).filename().string();
        }
        concepts.push_back(cj);
    }
    std::vector<std::string> tokens;
    for (text::TokenId id : seq.ids) {
        tokens.emplace_back(in.vocab.word(id));
    }
    m.extra = {{"tokens", tokens},
               {"grid", in.base.model.config().grid},
               {"concepts", concepts},
               {"sample_checksum", io::hex64(num::checksum(z))}};
    m.write((fs::path(o.out_dir) / "manifest.json").string());
    std::printf("generated %s (seed %llu, %zu adapters)\n", sample_path.c_str(), static_cast<unsigned long long>(seed),
                adapters.size());
    return kOk;
}

int compose_check(const ComposeCheckOptions& o) {
    if (o.prompt.empty()) {
        throw ConfigError("--prompt is required");
    }
    const Inputs in = load_inputs(o.vocab, o.base);
    const std::vector<std::string> paths = adapter_paths(o.adapters, o.adapter_manifest);
    const lora::AdapterRegistry registry = load_registry(paths, in);
    const auto adapters = registry.adapters();
    const text::TokenSequence seq = encode(in, adapters, o.prompt);
    const std::uint64_t seed = resolve_seed(o.seed, {});
    const diffusion::ModelConfig& mc = in.base.model.config();

    // Fast path against the dense multiply-mask-sum oracle, and exact zeros off the mask.
    double max_oracle_diff = 0.0;
    std::size_t off_mask_nonzero = 0;
    for (std::size_t l = 0; l < mc.layers; ++l) {
        const attn::CrossAttentionLayer layer = in.base.model.attention_layer(l);
        for (attn::Projection p : {attn::Projection::K, attn::Projection::V}) {
            num::Tape tape;
            const num::Var x = tape.constant(seq.x);
            std::vector<attn::AdapterTerm> terms;
            std::vector<attn::DenseAdapterTerm> dense;
            for (const lora::LoraAdapter& a : adapters) {
                if (!a.covers(l) || std::find(a.layout.targets.begin(), a.layout.targets.end(), p) ==
                                        a.layout.targets.end()) {
                    continue;
                }
                const attn::LowRank& f = a.factors(l, p);
                const attn::TokenMask mask = a.layout.mask_policy == attn::MaskPolicy::TokenFocused
                                                 ? attn::TokenMask::focus(seq, a.binding.name)
                                                 : attn::TokenMask::full(seq.n(), a.binding.name);
                terms.push_back({{tape.constant(f.a), tape.constant(f.b)}, mask, a.binding.rare});
                dense.push_back({f, mask, a.binding.rare});
                if (a.layout.mask_policy == attn::MaskPolicy::TokenFocused) {
                    const Matrix out = attn::masked_adapter_forward(f, seq.x, mask);
                    for (std::size_t col = 0; col < out.cols(); ++col) {
                        if (std::find(mask.columns.begin(), mask.columns.end(), col) != mask.columns.end()) {
                            continue;
                        }
                        for (std::size_t r = 0; r < out.rows(); ++r) {
                            off_mask_nonzero += out(r, col) != 0.0;
                        }
                    }
                }
            }
            const Matrix fast = attn::composed_projection(tape.constant(layer.weight(p)), x, terms).value();
            const Matrix slow = attn::composed_projection(layer.weight(p), seq.x, dense);
            for (std::size_t i = 0; i < fast.size(); ++i) {
                max_oracle_diff = std::max(max_oracle_diff, std::abs(fast.data()[i] - slow.data()[i]));
            }
        }
    }

    // Adapters whose rare token is absent must not change samples at all.
    std::vector<lora::LoraAdapter> present;
    std::vector<std::string> absent;
    for (const lora::LoraAdapter& a : adapters) {
        if (seq.rare_of(a.binding.name).empty()) {
            absent.push_back(a.binding.name);
        } else {
            present.push_back(a);
        }
    }
    std::size_t identical = 0;
    for (std::size_t s = 0; s < o.seeds; ++s) {
        const std::uint64_t sd = num::derive_seed(seed, s);
        const Matrix all = diffusion::sample(in.base.model, adapters, seq, sd, o.steps);
        const Matrix some = diffusion::sample(in.base.model, present, seq, sd, o.steps);
        identical += all.bitwise_equal(some);
    }

    constexpr double kOracleTolerance = 1e-12;
    const bool pass = max_oracle_diff <= kOracleTolerance && off_mask_nonzero == 0 && identical == o.seeds;
    const nlohmann::json report = {{"adapters", adapters.size()},
                                   {"absent_adapters", absent},
                                   {"oracle_max_abs_diff", max_oracle_diff},
                                   {"oracle_tolerance", kOracleTolerance},
                                   {"off_mask_nonzero", off_mask_nonzero},
                                   {"seeds", o.seeds},
                                   {"non_interference_identical", identical},
                                   {"pass", pass}};
    if (!o.report.empty()) {
        io::write_text(o.report, report.dump(2) + "\n");
    }
    std::printf("%s\n", report.dump().c_str());
    return pass ? kOk : kCheckFailed;
}

namespace {

struct RunDir {
    std::string dir;
    nlohmann::json manifest;

    std::string path(const std::string& name) const { return (fs::path(dir) / name).string(); }
};

RunDir open_run(const std::string& dir) {
    RunDir r{dir, {}};
    const std::string mp = r.path("manifest.json");
    if (!fs::exists(mp)) {
        throw ConfigError(dir + " is not a run directory (no manifest.json)");
    }
    try {
        r.manifest = nlohmann::json::parse(io::read_text(mp));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(mp + ": " + e.what());
    }
    return r;
}

attn::ProbeCollector run_probes(const RunDir& r) {
    const std::string p = r.path("probes.tprb");
    if (!fs::exists(p)) {
        throw ConfigError(r.dir + " holds no probes (generated with --no-probes?)");
    }
    return analysis::load_probes(p);
}

}  // namespace

int analyze(const AnalyzeOptions& o) {
    if (o.run_dirs.empty()) {
        throw ConfigError("--run-dir is required");
    }
    const RunDir first = open_run(o.run_dirs.front());
    const std::string out = o.out_dir.empty() ? first.path("analysis-" + o.mode) : o.out_dir;
    RunManifest m;
    m.command = "analyze";
    m.config = {{"mode", o.mode}, {"top_fraction", o.top_fraction}};
    m.inputs = o.run_dirs;
    nlohmann::json summary;

    if (o.mode == "tokens") {
        const analysis::TokenInfluenceReport rep = analysis::token_influence(run_probes(first));
        ensure_dir(out);
        const auto tokens = first.manifest.value("tokens", std::vector<std::string>{});
        const std::string csv = (fs::path(out) / "influence.csv").string();
        io::write_text(csv, rep.to_csv(tokens));
        m.outputs.push_back(csv);
        summary = rep.to_json();
        summary["tokens"] = tokens;
    } else if (o.mode == "attention") {
        const attn::ProbeCollector probe = run_probes(first);
        if (probe.maps.empty()) {
            throw ConfigError(first.dir + " holds no attention maps");
        }
        std::vector<std::size_t> positions = o.positions;
        const nlohmann::json concepts = first.manifest.value("concepts", nlohmann::json::array());
        if (positions.empty()) {
            for (const auto& c : concepts) {
                for (std::size_t p : c.at("rare_positions").get<std::vector<std::size_t>>()) {
                    positions.push_back(p);
                }
            }
        }
        if (positions.empty()) {
            for (std::size_t p = 0; p < probe.maps.front().weights.cols(); ++p) {
                positions.push_back(p);
            }
        }
        const analysis::StepRange range{o.first_step, o.last_step};
        const analysis::TokenAttentionSummary s = analysis::attention_summary(probe, positions, range, o.top_fraction);
        const std::size_t grid = first.manifest.at("grid").get<std::size_t>();
        ensure_dir(out);
        const std::string csv = (fs::path(out) / "attention.csv").string();
        io::write_text(csv, s.to_csv());
        m.outputs.push_back(csv);
        const std::vector<std::string> tokens =
            first.manifest.value("tokens", nlohmann::json::array()).get<std::vector<std::string>>();
        auto token_at = [&](std::size_t pos) { return pos < tokens.size() ? tokens[pos] : std::string(); };
        std::string index = "file,layer,step,timestep,position,token\n";
        for (std::size_t i = 0; i < positions.size(); ++i) {
            const std::string name = "agg_tok" + std::to_string(positions[i]) + ".pgm";
            const std::string p = (fs::path(out) / name).string();
            analysis::write_pgm16(p, s.mass[i], grid);
            m.outputs.push_back(p);
            index += name + ",all,all,all," + std::to_string(positions[i]) + "," + token_at(positions[i]) + "\n";
        }
        if (o.per_map_heatmaps) {
            for (const attn::AttentionMap& map : probe.maps) {
                if (!range.contains(map.step)) {
                    continue;
                }
                for (std::size_t pos : positions) {
                    const std::string name = "l" + std::to_string(map.layer) + "_t" + std::to_string(map.timestep) +
                                             "_tok" + std::to_string(pos) + ".pgm";
                    const std::string p = (fs::path(out) / name).string();
                    analysis::write_pgm16(p, map.weights.column(pos), grid);
                    m.outputs.push_back(p);
                    index += name + "," + std::to_string(map.layer) + "," + std::to_string(map.step) + "," +
                             std::to_string(map.timestep) + "," + std::to_string(pos) + "," + token_at(pos) + "\n";
                }
            }
        }
        const std::string index_path = (fs::path(out) / "heatmaps.csv").string();
        io::write_text(index_path, index);
        m.outputs.push_back(index_path);
        summary = s.to_json();
        nlohmann::json region_iou = nlohmann::json::object();
        for (std::size_t i = 0; i < positions.size(); ++i) {
            nlohmann::json per = nlohmann::json::object();
            for (const auto& c : concepts) {
                if (c.contains("region")) {
                    const auto region = c.at("region").get<std::vector<std::size_t>>();
                    per[c.at("name").get<std::string>()] = analysis::region_iou(s.mass[i], region, o.top_fraction);
                }
            }
            region_iou[std::to_string(positions[i])] = per;
        }
        summary["region_iou"] = region_iou;
    } else if (o.mode == "interference") {
        analysis::InterferenceReport rep;
        for (const std::string& dir : o.run_dirs) {
            const RunDir r = dir == first.dir ? first : open_run(dir);
            const nlohmann::json concepts = r.manifest.value("concepts", nlohmann::json::array());
            if (concepts.empty()) {
                throw ConfigError(dir + ": run has no adapters to compare");
            }
            std::vector<Matrix> solo;
            std::vector<analysis::ConceptRegion> regions;
            std::string method;
            for (const auto& c : concepts) {
                if (!c.contains("solo")) {
                    throw ConfigError(dir + ": no solo samples (generate with --solo)");
                }
                if (!c.contains("region")) {
                    throw ConfigError(dir + ": concept '" + c.at("name").get<std::string>() + "' has no region");
                }
                solo.push_back(diffusion::load_latent(r.path(c.at("solo").get<std::string>())));
                regions.push_back({c.at("name").get<std::string>(), c.at("region").get<std::vector<std::size_t>>()});
                const std::string cm = c.at("method").get<std::string>();
                method = method.empty() || method == cm ? cm : "mixed";
            }
            const Matrix composed = diffusion::load_latent(r.path("sample.f64"));
            const analysis::InterferenceReport part = analysis::interference(method, solo, composed, regions);
            rep.rows.insert(rep.rows.end(), part.rows.begin(), part.rows.end());
        }
        ensure_dir(out);
        const std::string csv = (fs::path(out) / "interference.csv").string();
        const std::string ord = (fs::path(out) / "ordering.csv").string();
        io::write_text(csv, rep.to_csv());
        io::write_text(ord, rep.ordering_csv());
        m.outputs.push_back(csv);
        m.outputs.push_back(ord);
        summary = rep.to_json();
    } else {
        throw ConfigError("unknown analyze mode '" + o.mode + "' (expected tokens, attention or interference)");
    }
    const std::string sp = (fs::path(out) / "summary.json").string();
    io::write_text(sp, summary.dump(2) + "\n");
    m.outputs.push_back(sp);
    m.write((fs::path(out) / "manifest.json").string());
    std::printf("wrote %zu artifacts to %s\n", m.outputs.size(), out.c_str());
    return kOk;
}

int gradcheck(const GradcheckOptions& o) {
    const nlohmann::json cfg = read_config(o.config);
    train::GradcheckConfig c = train::GradcheckConfig::from_json(cfg);
    if (o.lambda) c.lambda = *o.lambda;
    if (o.rank) c.rank = *o.rank;
    c.step = o.step;
    c.seed = resolve_seed(o.seed, cfg);
    c.validate();

    num::testing::set_adjoint_fault(o.inject_fault);
    const num::FdReport rep = train::gradient_check(c);
    num::testing::set_adjoint_fault(false);

    nlohmann::json blocks = nlohmann::json::array();
    for (const num::BlockCheck& b : rep.blocks) {
        blocks.push_back({{"block", b.name}, {"relative_error", b.relative_error}, {"aborted", b.aborted}});
    }
    const bool pass = rep.passed(o.tolerance);
    const num::BlockCheck* worst = rep.worst();
    const nlohmann::json report = {{"config", c.to_json()},
                                   {"tolerance", o.tolerance},
                                   {"max_relative_error", rep.max_relative_error()},
                                   {"worst_block", worst != nullptr ? worst->name : ""},
                                   {"blocks", blocks},
                                   {"pass", pass}};
    if (!o.report.empty()) {
        io::write_text(o.report, report.dump(2) + "\n");
    }
    std::printf("gradcheck %s: max relative error %.3e in %s (%zu blocks, lambda %g)\n", pass ? "PASS" : "FAIL",
                rep.max_relative_error(), worst != nullptr ? worst->name.c_str() : "-", rep.blocks.size(), c.lambda);
    return pass ? kOk : kCheckFailed;
}

}  // namespace tara::cli
