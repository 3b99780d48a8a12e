// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/diffusion/denoiser.hpp"

#include <bit>
#include <cmath>

#include "tara/error.hpp"
#include "tara/io/container.hpp"
#include "tara/numerics/rng.hpp"

namespace tara::diffusion {

using num::Matrix;
using num::Tape;
using num::Var;

void ModelConfig::validate() const {
    if (grid < 2 || grid % 2 != 0) {
        throw ConfigError("grid must be even and at least 2");
    }
    if (d_model < 2 || d_model % 4 != 0) {
        throw ConfigError("d_model must be a positive multiple of 4");
    }
    if (d_text < 1 || layers < 1 || mlp_hidden < 1) {
        throw ConfigError("d_text, layers and mlp_hidden must be positive");
    }
    if (heads < 1 || d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (!(sigma_data > 0.0)) {
        throw ConfigError("sigma_data must be positive");
    }
    static_cast<void>(NoiseSchedule(timesteps, beta_start, beta_end));
}

nlohmann::json ModelConfig::to_json() const {
    return {{"grid", grid},           {"d_model", d_model},       {"d_text", d_text},
            {"layers", layers},       {"heads", heads},           {"mlp_hidden", mlp_hidden},
            {"timesteps", timesteps}, {"beta_start", beta_start}, {"beta_end", beta_end},
            {"sigma_data", sigma_data}, {"position_scale", position_scale}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.grid = j.value("grid", c.grid);
        c.d_model = j.value("d_model", c.d_model);
        c.d_text = j.value("d_text", c.d_text);
        c.layers = j.value("layers", c.layers);
        c.heads = j.value("heads", c.heads);
        c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
        c.timesteps = j.value("timesteps", c.timesteps);
        c.beta_start = j.value("beta_start", c.beta_start);
        c.beta_end = j.value("beta_end", c.beta_end);
        c.sigma_data = j.value("sigma_data", c.sigma_data);
        c.position_scale = j.value("position_scale", c.position_scale);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

Matrix timestep_embedding(int t, std::size_t d) {
    Matrix e(1, d);
    const std::size_t half = d / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) / static_cast<double>(half));
        e(0, 2 * i) = std::sin(t * freq);
        e(0, 2 * i + 1) = std::cos(t * freq);
    }
    return e;
}

Matrix grid_embedding(std::size_t g, std::size_t d) {
    Matrix p(g * g, d);
    const std::size_t quarter = d / 4;
    for (std::size_t r = 0; r < g; ++r) {
        for (std::size_t c = 0; c < g; ++c) {
            auto row = p.row(r * g + c);
            for (std::size_t i = 0; i < quarter; ++i) {
                const double freq = std::exp(-std::log(100.0) * static_cast<double>(i) / static_cast<double>(quarter));
                row[2 * i] = std::sin(static_cast<double>(r) * freq);
                row[2 * i + 1] = std::cos(static_cast<double>(r) * freq);
                row[d / 2 + 2 * i] = std::sin(static_cast<double>(c) * freq);
                row[d / 2 + 2 * i + 1] = std::cos(static_cast<double>(c) * freq);
            }
        }
    }
    return p;
}

ToyDenoiser::ToyDenoiser(ModelConfig config, std::vector<BlockWeights> blocks, Matrix w_out, Matrix b_out)
    : config_(config),
      schedule_(config.schedule()),
      blocks_(std::move(blocks)),
      w_out_(std::move(w_out)),
      b_out_(std::move(b_out)),
      positional_(config.position_scale * grid_embedding(config.grid, config.d_model)) {
    config_.validate();
    const std::size_t d = config_.d_model;
    const std::size_t h = config_.mlp_hidden;
    if (blocks_.size() != config_.layers) {
        throw ShapeError("ToyDenoiser: " + std::to_string(blocks_.size()) + " blocks for " +
                         std::to_string(config_.layers) + " layers");
    }
    auto expect = [](const Matrix& m, std::size_t r, std::size_t c, const char* what) {
        if (m.rows() != r || m.cols() != c) {
            throw ShapeError(std::string("ToyDenoiser: ") + what + " has shape " + m.shape_string() + ", expected " +
                             std::to_string(r) + "x" + std::to_string(c));
        }
    };
    for (const BlockWeights& b : blocks_) {
        expect(b.wq, d, d, "W_Q");
        expect(b.wk, d, config_.d_text, "W_K");
        expect(b.wv, d, config_.d_text, "W_V");
        expect(b.wo, d, d, "W_O");
        expect(b.w1, h, d, "W1");
        expect(b.b1, 1, h, "b1");
        expect(b.w2, d, h, "W2");
        expect(b.b2, 1, d, "b2");
    }
    expect(w_out_, d, d, "W_out");
    expect(b_out_, 1, d, "b_out");
}

ToyDenoiser ToyDenoiser::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    num::Rng rng(seed);
    const std::size_t d = config.d_model;
    const std::size_t h = config.mlp_hidden;
    const auto sd = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    std::vector<BlockWeights> blocks;
    for (std::size_t l = 0; l < config.layers; ++l) {
        BlockWeights b;
        b.wq = rng.normal_matrix(d, d, sd(d));
        b.wk = rng.normal_matrix(d, config.d_text, sd(config.d_text));
        b.wv = rng.normal_matrix(d, config.d_text, sd(config.d_text));
        b.wo = rng.normal_matrix(d, d, 0.5 * sd(d));
        b.w1 = rng.normal_matrix(h, d, sd(d));
        b.b1 = Matrix(1, h);
        b.w2 = rng.normal_matrix(d, h, 0.5 * sd(h));
        b.b2 = Matrix(1, d);
        blocks.push_back(std::move(b));
    }
    Matrix w_out = rng.normal_matrix(d, d, 0.1 * sd(d));
    return ToyDenoiser(config, std::move(blocks), std::move(w_out), Matrix(1, d));
}

attn::CrossAttentionLayer ToyDenoiser::attention_layer(std::size_t l) const {
    const BlockWeights& b = blocks_.at(l);
    return attn::CrossAttentionLayer(l, b.wq, b.wk, b.wv, b.wo);
}

std::vector<std::pair<std::string, const Matrix*>> ToyDenoiser::named_weights() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (const auto& [name, m] : const_cast<ToyDenoiser*>(this)->named_weights()) {
        out.emplace_back(name, m);
    }
    return out;
}

std::vector<std::pair<std::string, Matrix*>> ToyDenoiser::named_weights() {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        BlockWeights& b = blocks_[l];
        const std::string p = "l" + std::to_string(l) + ".";
        out.emplace_back(p + "wq", &b.wq);
        out.emplace_back(p + "wk", &b.wk);
        out.emplace_back(p + "wv", &b.wv);
        out.emplace_back(p + "wo", &b.wo);
        out.emplace_back(p + "w1", &b.w1);
        out.emplace_back(p + "b1", &b.b1);
        out.emplace_back(p + "w2", &b.w2);
        out.emplace_back(p + "b2", &b.b2);
    }
    out.emplace_back("w_out", &w_out_);
    out.emplace_back("b_out", &b_out_);
    return out;
}

std::uint64_t ToyDenoiser::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, m] : named_weights()) {
        h = num::checksum(*m, h);
    }
    return h;
}

BoundDenoiser bind(Tape& tape, const ToyDenoiser& model, bool trainable) {
    BoundDenoiser out;
    out.model = &model;
    auto put = [&](const std::string& name, const Matrix& m) {
        if (!trainable) {
            return tape.constant(m);
        }
        Var v = tape.leaf(m);
        out.leaves.emplace_back(name, v);
        return v;
    };
    for (std::size_t l = 0; l < model.blocks().size(); ++l) {
        const BlockWeights& b = model.blocks()[l];
        const std::string p = "l" + std::to_string(l) + ".";
        BoundBlock bb;
        bb.attn.layer_id = l;
        bb.attn.wq = put(p + "wq", b.wq);
        bb.attn.wk = put(p + "wk", b.wk);
        bb.attn.wv = put(p + "wv", b.wv);
        bb.attn.wo = put(p + "wo", b.wo);
        bb.w1 = put(p + "w1", b.w1);
        bb.b1 = put(p + "b1", b.b1);
        bb.w2 = put(p + "w2", b.w2);
        bb.b2 = put(p + "b2", b.b2);
        out.blocks.push_back(bb);
    }
    out.w_out = put("w_out", model.w_out());
    out.b_out = put("b_out", model.b_out());
    out.positional = tape.constant(model.positional());
    return out;
}

Var predict_noise(const BoundDenoiser& model, const Var& z_t, int t, const Var& x, const text::TokenSequence& seq,
                  std::span<const lora::BoundAdapter> adapters, attn::ProbeCollector* probe) {
    const ToyDenoiser& m = *model.model;
    const ModelConfig& cfg = m.config();
    if (z_t.rows() != cfg.patches() || z_t.cols() != cfg.d_model) {
        throw ShapeError("predict_noise: latent " + z_t.value().shape_string() + " does not match " +
                         std::to_string(cfg.patches()) + "x" + std::to_string(cfg.d_model));
    }
    if (x.rows() != cfg.d_text) {
        throw ShapeError("predict_noise: text embeddings have width " + std::to_string(x.rows()) + ", model expects " +
                         std::to_string(cfg.d_text));
    }
    const double a = m.schedule().signal(t);
    const double s = m.schedule().noise_level(t);
    Tape& tape = *z_t.tape();

    Var h = num::add_row(num::add(z_t, model.positional), tape.constant(timestep_embedding(t, cfg.d_model)));
    std::vector<attn::LayerInjection> injections;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const BoundBlock& b = model.blocks[l];
        injections.clear();
        for (const lora::BoundAdapter& ad : adapters) {
            if (auto it = ad.layers.find(l); it != ad.layers.end()) {
                injections.push_back(it->second);
            }
        }
        const attn::AttentionOutput att = attn::attention_forward(b.attn, cfg.heads, h, x, seq, injections, probe);
        h = num::add(h, att.output);
        const Var u = num::silu(num::add_row(num::matmul(h, num::transpose(b.w1)), b.b1));
        h = num::add(h, num::add_row(num::matmul(u, num::transpose(b.w2)), b.b2));
    }
    const Var f = num::add_row(num::matmul(h, num::transpose(model.w_out)), model.b_out);
    const double denom = a * a * cfg.sigma_data * cfg.sigma_data + s * s;
    return num::add(num::scale(z_t, s / denom), num::scale(f, -a * s / denom));
}

Var denoise_loss(const BoundDenoiser& model, std::span<const lora::BoundAdapter> adapters,
                 const text::TokenSequence& seq, const Var& x, const Matrix& z0, int t, const Matrix& eps) {
    Tape& tape = *x.tape();
    const Var z_t = tape.constant(noise(model.model->schedule(), z0, t, eps));
    const Var pred = predict_noise(model, z_t, t, x, seq, adapters);
    return num::mean(num::square(num::sub(tape.constant(eps), pred)));
}

double denoise_loss_value(const ToyDenoiser& model, std::span<const lora::LoraAdapter> adapters,
                          const text::TokenSequence& seq, const Matrix& z0, int t, const Matrix& eps) {
    Tape tape;
    const BoundDenoiser bm = bind(tape, model, false);
    std::vector<lora::BoundAdapter> bound;
    for (const lora::LoraAdapter& a : adapters) {
        bound.push_back(lora::bind(tape, a, false));
    }
    return denoise_loss(bm, bound, seq, tape.constant(seq.x), z0, t, eps).value().item();
}

std::vector<int> sampler_timesteps(int T, std::size_t steps) {
    if (steps < 1 || steps > static_cast<std::size_t>(T)) {
        throw ConfigError("sampler steps must lie in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
    }
    std::vector<int> out;
    for (std::size_t i = 0; i < steps; ++i) {
        const double frac = static_cast<double>(steps - i) / static_cast<double>(steps);
        out.push_back(static_cast<int>(std::lround(frac * T)));
    }
    return out;
}

Matrix sample(const ToyDenoiser& model, std::span<const lora::LoraAdapter> adapters, const text::TokenSequence& seq,
              std::uint64_t seed, std::size_t steps, attn::ProbeCollector* probe) {
    const ModelConfig& cfg = model.config();
    const std::vector<int> taus = sampler_timesteps(cfg.timesteps, steps);
    num::Rng rng(seed);
    Matrix z = rng.normal_matrix(cfg.patches(), cfg.d_model);
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const int t = taus[i];
        const int t_next = i + 1 < taus.size() ? taus[i + 1] : 0;
        if (probe != nullptr) {
            probe->step = i;
            probe->timestep = t;
        }
        Tape tape;
        const BoundDenoiser bm = bind(tape, model, false);
        std::vector<lora::BoundAdapter> bound;
        for (const lora::LoraAdapter& a : adapters) {
            bound.push_back(lora::bind(tape, a, false));
        }
        const Matrix eps = predict_noise(bm, tape.constant(z), t, tape.constant(seq.x), seq, bound, probe).value();
        const double a = model.schedule().signal(t);
        const double s = model.schedule().noise_level(t);
        const double a_next = model.schedule().signal(t_next);
        const double s_next = model.schedule().noise_level(t_next);
        auto zd = z.data();
        const auto ed = eps.data();
        for (std::size_t k = 0; k < zd.size(); ++k) {
            const double x0 = (zd[k] - s * ed[k]) / a;
            zd[k] = a_next * x0 + s_next * ed[k];
        }
        num::require_finite(z, "sample");
    }
    return z;
}

void save_latent(const std::string& path, const Matrix& z, const nlohmann::json& sidecar) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(z.size() * 8);
    for (double v : z.data()) {
        const auto u = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
            bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
        }
    }
    io::write_file(path, bytes);
    nlohmann::json meta = sidecar;
    meta["rows"] = z.rows();
    meta["cols"] = z.cols();
    meta["dtype"] = "f64le";
    io::write_text(path + ".json", meta.dump(2) + "\n");
}

Matrix load_latent(const std::string& path) {
    std::size_t rows = 0;
    std::size_t cols = 0;
    try {
        const auto meta = nlohmann::json::parse(io::read_text(path + ".json"));
        rows = meta.at("rows").get<std::size_t>();
        cols = meta.at("cols").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ".json: " + e.what(), 0);
    }
    const auto bytes = io::read_file(path);
    if (bytes.size() != rows * cols * 8) {
        throw FormatError(path + ": expected " + std::to_string(rows * cols * 8) + " bytes, found " +
                              std::to_string(bytes.size()),
                          std::min(bytes.size(), rows * cols * 8));
    }
    std::vector<double> data(rows * cols);
    for (std::size_t k = 0; k < data.size(); ++k) {
        std::uint64_t u = 0;
        for (int i = 0; i < 8; ++i) {
            u |= static_cast<std::uint64_t>(bytes[8 * k + i]) << (8 * i);
        }
        data[k] = std::bit_cast<double>(u);
    }
    return Matrix(rows, cols, std::move(data));
}

}  // namespace tara::diffusion
