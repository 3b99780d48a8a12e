// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "tara/diffusion/world.hpp"
#include "tara/error.hpp"
#include "tara/io/container.hpp"

namespace tara::analysis {

using num::Matrix;

namespace {

constexpr std::string_view kProbeMagic = "TPRB";
constexpr std::uint32_t kProbeVersion = 1;

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

const TokenInfluenceReport::Row& TokenInfluenceReport::at(const std::string& concept_name, attn::Projection p) const {
    for (const Row& r : rows) {
        if (r.concept_name == concept_name && r.projection == p) {
            return r;
        }
    }
    throw ConfigError("no influence recorded for concept '" + concept_name + "' on " +
                      std::string(attn::to_string(p)));
}

std::string TokenInfluenceReport::to_csv(std::span<const std::string> tokens) const {
    std::string out = "concept,projection,position,token,magnitude\n";
    for (const Row& r : rows) {
        for (std::size_t j = 0; j < r.magnitude.size(); ++j) {
            out += r.concept_name + "," + std::string(attn::to_string(r.projection)) + "," + std::to_string(j) + "," +
                   (j < tokens.size() ? tokens[j] : std::string()) + "," + fmt_double(r.magnitude[j]) + "\n";
        }
    }
    return out;
}

nlohmann::json TokenInfluenceReport::to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const Row& r : rows) {
        rj.push_back({{"concept", r.concept_name},
                      {"projection", std::string(attn::to_string(r.projection))},
                      {"magnitude", r.magnitude}});
    }
    return {{"n", n}, {"rows", rj}};
}

TokenInfluenceReport token_influence(const attn::ProbeCollector& probe) {
    if (probe.influence.empty()) {
        throw ConfigError("token_influence: no adapter probes were collected");
    }
    TokenInfluenceReport report;
    report.n = probe.influence.front().column_norms.size();
    std::vector<std::size_t> counts;
    for (const attn::InfluenceRecord& rec : probe.influence) {
        if (rec.column_norms.size() != report.n) {
            throw ShapeError("token_influence: records cover sequences of different lengths");
        }
        auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const TokenInfluenceReport::Row& r) {
            return r.concept_name == rec.concept_name && r.projection == rec.projection;
        });
        if (it == report.rows.end()) {
            report.rows.push_back({rec.concept_name, rec.projection, std::vector<double>(report.n, 0.0)});
            counts.push_back(0);
            it = report.rows.end() - 1;
        }
        const auto idx = static_cast<std::size_t>(it - report.rows.begin());
        for (std::size_t j = 0; j < report.n; ++j) {
            it->magnitude[j] += rec.column_norms[j];
        }
        ++counts[idx];
    }
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        for (double& v : report.rows[i].magnitude) {
            v /= static_cast<double>(counts[i]);
        }
    }
    return report;
}

bool StepRange::contains(std::size_t step) const {
    return (!first || step >= *first) && (!last || step <= *last);
}

std::vector<std::size_t> top_mass_cells(std::span<const double> mass, double top_fraction) {
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
        throw ConfigError("top fraction must lie in (0, 1]");
    }
    const auto k = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(mass.size())));
    std::vector<std::size_t> idx(mass.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    idx.resize(std::min(k, idx.size()));
    std::sort(idx.begin(), idx.end());
    return idx;
}

double set_iou(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    std::vector<std::size_t> sa(a.begin(), a.end());
    std::vector<std::size_t> sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
    std::sort(sb.begin(), sb.end());
    sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
    std::vector<std::size_t> inter;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    const std::size_t uni = sa.size() + sb.size() - inter.size();
    return uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

double region_iou(std::span<const double> mass, std::span<const std::size_t> region, double top_fraction) {
    if (region.empty()) {
        throw ConfigError("region_iou: empty region");
    }
    const auto top = top_mass_cells(mass, top_fraction);
    return set_iou(top, region);
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return h;
}

std::string TokenAttentionSummary::to_csv() const {
    std::string out = "# top_fraction=" + fmt_double(top_fraction) + "\nposition,entropy";
    for (std::size_t p : positions) {
        out += ",iou_" + std::to_string(p);
    }
    out += "\n";
    for (std::size_t i = 0; i < positions.size(); ++i) {
        out += std::to_string(positions[i]) + "," + fmt_double(entropy[i]);
        for (double v : iou[i]) {
            out += "," + fmt_double(v);
        }
        out += "\n";
    }
    return out;
}

nlohmann::json TokenAttentionSummary::to_json() const {
    return {{"positions", positions}, {"top_fraction", top_fraction}, {"maps_used", maps_used},
            {"entropy", entropy},     {"iou", iou},                   {"mass", mass}};
}

TokenAttentionSummary attention_summary(const attn::ProbeCollector& probe, std::span<const std::size_t> positions,
                                        const StepRange& range, double top_fraction) {
    if (range.first && range.last && *range.first > *range.last) {
        throw ConfigError("attention_summary: empty step range");
    }
    TokenAttentionSummary s;
    s.positions.assign(positions.begin(), positions.end());
    s.top_fraction = top_fraction;
    std::size_t m = 0;
    for (const attn::AttentionMap& map : probe.maps) {
        if (!range.contains(map.step)) {
            continue;
        }
        if (s.maps_used == 0) {
            m = map.weights.rows();
            s.mass.assign(positions.size(), std::vector<double>(m, 0.0));
        }
        if (map.weights.rows() != m) {
            throw ShapeError("attention_summary: maps of different sizes");
        }
        for (std::size_t i = 0; i < positions.size(); ++i) {
            if (positions[i] >= map.weights.cols()) {
                throw ConfigError("attention_summary: token position " + std::to_string(positions[i]) +
                                  " out of range");
            }
            for (std::size_t r = 0; r < m; ++r) {
                s.mass[i][r] += map.weights(r, positions[i]);
            }
        }
        ++s.maps_used;
    }
    if (s.maps_used == 0) {
        throw ConfigError("attention_summary: the step range selects no attention maps");
    }
    std::vector<std::vector<std::size_t>> tops;
    for (auto& v : s.mass) {
        const double total = std::accumulate(v.begin(), v.end(), 0.0);
        for (double& x : v) {
            x /= total;
        }
        s.entropy.push_back(entropy(v));
        tops.push_back(top_mass_cells(v, top_fraction));
    }
    s.iou.assign(positions.size(), std::vector<double>(positions.size(), 0.0));
    for (std::size_t i = 0; i < positions.size(); ++i) {
        for (std::size_t j = 0; j < positions.size(); ++j) {
            s.iou[i][j] = set_iou(tops[i], tops[j]);
        }
    }
    return s;
}

double InterferenceReport::mean(const std::string& method) const {
    double acc = 0.0;
    std::size_t k = 0;
    for (const Row& r : rows) {
        if (r.method == method) {
            acc += r.mse;
            ++k;
        }
    }
    if (k == 0) {
        throw ConfigError("no interference rows for method '" + method + "'");
    }
    return acc / static_cast<double>(k);
}

std::vector<std::string> InterferenceReport::methods() const {
    std::vector<std::string> out;
    for (const Row& r : rows) {
        if (std::find(out.begin(), out.end(), r.method) == out.end()) {
            out.push_back(r.method);
        }
    }
    return out;
}

std::string InterferenceReport::to_csv() const {
    std::string out = "method,concept,mse\n";
    for (const Row& r : rows) {
        out += r.method + "," + r.concept_name + "," + fmt_double(r.mse) + "\n";
    }
    return out;
}

std::string InterferenceReport::ordering_csv() const {
    std::vector<std::pair<double, std::string>> ranked;
    for (const std::string& m : methods()) {
        ranked.emplace_back(mean(m), m);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::string out = "rank,method,mean_mse\n";
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        out += std::to_string(i + 1) + "," + ranked[i].second + "," + fmt_double(ranked[i].first) + "\n";
    }
    return out;
}

nlohmann::json InterferenceReport::to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const Row& r : rows) {
        rj.push_back({{"method", r.method}, {"concept", r.concept_name}, {"mse", r.mse}});
    }
    nlohmann::json means = nlohmann::json::object();
    for (const std::string& m : methods()) {
        means[m] = mean(m);
    }
    return {{"rows", rj}, {"mean", means}};
}

InterferenceReport interference(const std::string& method, std::span<const Matrix> solo, const Matrix& composed,
                                std::span<const ConceptRegion> regions) {
    if (solo.size() != regions.size()) {
        throw ConfigError("interference: " + std::to_string(solo.size()) + " solo runs for " +
                          std::to_string(regions.size()) + " regions");
    }
    InterferenceReport report;
    for (std::size_t i = 0; i < solo.size(); ++i) {
        if (regions[i].region.empty()) {
            throw ConfigError("interference: concept '" + regions[i].concept_name + "' has no region");
        }
        report.rows.push_back({method, regions[i].concept_name,
                               diffusion::region_mse(solo[i], composed, regions[i].region)});
    }
    return report;
}

InterferenceReport measure_interference(const std::string& method, const diffusion::ToyDenoiser& model,
                                        std::span<const lora::LoraAdapter> adapters, const text::TokenSequence& seq,
                                        std::uint64_t seed, std::size_t steps, std::span<const ConceptRegion> regions) {
    if (adapters.size() != regions.size()) {
        throw ConfigError("measure_interference: one region per adapter required");
    }
    const Matrix composed = diffusion::sample(model, adapters, seq, seed, steps);
    std::vector<Matrix> solo;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        solo.push_back(diffusion::sample(model, adapters.subspan(i, 1), seq, seed, steps));
    }
    return interference(method, solo, composed, regions);
}

std::string method_of(const lora::LoraAdapter& adapter) {
    if (adapter.layout.mask_policy == attn::MaskPolicy::TokenFocused) {
        return "tara";
    }
    return adapter.init_mode == lora::InitMode::Rob ? "rob" : "db-lora-unmasked";
}

std::vector<std::uint8_t> encode_pgm16(std::span<const double> values, std::size_t grid) {
    if (values.size() != grid * grid) {
        throw ShapeError("encode_pgm16: " + std::to_string(values.size()) + " values for a " + std::to_string(grid) +
                         "x" + std::to_string(grid) + " grid");
    }
    const std::string head = "P5\n" + std::to_string(grid) + " " + std::to_string(grid) + "\n65535\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    double lo = 0.0;
    double hi = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (!std::isfinite(v)) {
            throw NonFiniteError("encode_pgm16: heatmap values must be finite");
        }
        lo = i == 0 ? v : std::min(lo, v);
        hi = i == 0 ? v : std::max(hi, v);
    }
    const double span = hi - lo;
    for (double v : values) {
        const auto q = static_cast<std::uint16_t>(span > 0.0 ? std::lround(65535.0 * (v - lo) / span) : 0);
        out.push_back(static_cast<std::uint8_t>(q >> 8));
        out.push_back(static_cast<std::uint8_t>(q & 0xff));
    }
    return out;
}

void write_pgm16(const std::string& path, std::span<const double> values, std::size_t grid) {
    io::write_file(path, encode_pgm16(values, grid));
}

void save_probes(const attn::ProbeCollector& probe, const std::string& path) {
    io::Container c;
    c.version = kProbeVersion;
    nlohmann::json maps = nlohmann::json::array();
    for (std::size_t i = 0; i < probe.maps.size(); ++i) {
        const attn::AttentionMap& m = probe.maps[i];
        maps.push_back({{"layer", m.layer}, {"step", m.step}, {"timestep", m.timestep}});
        c.blocks.emplace_back("map." + std::to_string(i), m.weights);
    }
    nlohmann::json infl = nlohmann::json::array();
    for (std::size_t i = 0; i < probe.influence.size(); ++i) {
        const attn::InfluenceRecord& r = probe.influence[i];
        infl.push_back({{"concept", r.concept_name},
                        {"projection", std::string(attn::to_string(r.projection))},
                        {"layer", r.layer},
                        {"step", r.step}});
        c.blocks.emplace_back("influence." + std::to_string(i), Matrix::row_vector(r.column_norms));
    }
    c.header = {{"maps", maps}, {"influence", infl}};
    io::write_file(path, io::encode_container(kProbeMagic, c));
}

attn::ProbeCollector load_probes(const std::string& path) {
    const auto bytes = io::read_file(path);
    io::Container c = io::decode_container(bytes, kProbeMagic, kProbeVersion);
    constexpr std::size_t header_at = 12;
    attn::ProbeCollector p;
    try {
        const auto& maps = c.header.at("maps");
        const auto& infl = c.header.at("influence");
        if (c.blocks.size() != maps.size() + infl.size()) {
            throw FormatError(path + ": block count does not match the header", header_at);
        }
        std::size_t k = 0;
        for (const auto& mj : maps) {
            p.maps.push_back({mj.at("layer").get<std::size_t>(), mj.at("step").get<std::size_t>(),
                              mj.at("timestep").get<int>(), std::move(c.blocks[k++].second)});
        }
        for (const auto& ij : infl) {
            const Matrix& v = c.blocks[k++].second;
            p.influence.push_back({ij.at("concept").get<std::string>(),
                                   attn::projection_from_string(ij.at("projection").get<std::string>()),
                                   ij.at("layer").get<std::size_t>(), ij.at("step").get<std::size_t>(),
                                   std::vector<double>(v.data().begin(), v.data().end())});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what(), header_at);
    } catch (const ConfigError& e) {
        throw FormatError(path + ": " + e.what(), header_at);
    }
    return p;
}

}  // namespace tara::analysis
