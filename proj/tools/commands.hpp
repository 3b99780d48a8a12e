// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace tara::cli {

/// Process exit codes.
enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,  // gradcheck or compose-check found a violation
    kConfigError = 2,  // bad flags, config, input files or missing probes
    kDiverged = 3,     // training loss or weights became non-finite
    kInternal = 4,
};

/// Seed precedence: --seed, then the config file's "seed", then $TARA_SEED, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const nlohmann::json& config);

/// Reads a JSON config file; an empty path yields an empty object.
nlohmann::json read_config(const std::string& path);

/// Provenance record written next to every command's artifacts.
struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json seeds = nlohmann::json::object();
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    nlohmann::json extra = nlohmann::json::object();

    /// Deterministic id: command plus a digest of config, seeds and inputs.
    std::string experiment_id() const;
    nlohmann::json to_json() const;
    void write(const std::string& path) const;
};

struct MakeVocabOptions {
    std::string out;
    std::size_t dim = 32;
    std::vector<std::string> words;
    std::optional<std::uint64_t> seed;
};

struct MakeBaseOptions {
    std::string vocab;
    std::string out;
    std::string config;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

struct TrainOptions {
    std::string vocab;
    std::string base;
    std::string config;
    std::string out;
    std::string concept_name;
    std::string rare;
    std::string class_word;
    std::optional<std::string> preset;
    std::optional<std::string> method;
    std::optional<std::size_t> steps;
    std::optional<double> lr;
    std::optional<double> lambda;
    std::optional<std::size_t> rank;
    std::optional<std::string> optimizer;
    std::optional<double> momentum;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> references;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> data_seed;
    bool quiet = false;
};

struct GenerateOptions {
    std::string vocab;
    std::string base;
    std::vector<std::string> adapters;
    std::string adapter_manifest;
    std::string prompt;
    std::string out_dir;
    std::size_t steps = 25;
    std::optional<std::uint64_t> seed;
    bool solo = false;
    bool probes = true;
};

struct ComposeCheckOptions {
    std::string vocab;
    std::string base;
    std::vector<std::string> adapters;
    std::string adapter_manifest;
    std::string prompt;
    std::size_t steps = 25;
    std::size_t seeds = 3;
    std::optional<std::uint64_t> seed;
    std::string report;
};

struct AnalyzeOptions {
    std::vector<std::string> run_dirs;
    std::string mode;
    std::string out_dir;
    std::vector<std::size_t> positions;
    std::optional<std::size_t> first_step;
    std::optional<std::size_t> last_step;
    double top_fraction = 0.2;
    bool per_map_heatmaps = true;
};

struct GradcheckOptions {
    std::string config;
    std::optional<double> lambda;
    std::optional<std::size_t> rank;
    std::optional<std::uint64_t> seed;
    double step = 1e-5;
    double tolerance = 1e-4;
    bool inject_fault = false;
    std::string report;
};

int make_vocab(const MakeVocabOptions& o);
int make_base(const MakeBaseOptions& o);
int train(const TrainOptions& o);
int generate(const GenerateOptions& o);
int compose_check(const ComposeCheckOptions& o);
int analyze(const AnalyzeOptions& o);
int gradcheck(const GradcheckOptions& o);

}  // namespace tara::cli
