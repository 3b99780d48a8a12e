// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tara/attention/cross_attention.hpp"
#include "tara/diffusion/schedule.hpp"
#include "tara/lora/adapter.hpp"
#include "tara/numerics/tape.hpp"
#include "tara/text/vocabulary.hpp"

namespace tara::diffusion {

struct ModelConfig {
    std::size_t grid = 8;
    std::size_t d_model = 32;
    std::size_t d_text = 32;
    std::size_t layers = 4;
    std::size_t heads = 1;
    std::size_t mlp_hidden = 64;
    int timesteps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    /// Per-entry spread of clean latents around their conditional mean; sets the
    /// noise-conditioned skip of the output head.
    double sigma_data = 0.1;
    /// Gain on the fixed patch embedding relative to the unit-variance latent.
    double position_scale = 3.0;

    std::size_t patches() const noexcept { return grid * grid; }
    void validate() const;
    NoiseSchedule schedule() const { return NoiseSchedule(timesteps, beta_start, beta_end); }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Frozen weights of one denoiser block: cross-attention followed by a residual MLP.
struct BlockWeights {
    num::Matrix wq, wk, wv, wo;  // d x d, d x d_text, d x d_text, d x d
    num::Matrix w1, b1;          // hidden x d, 1 x hidden
    num::Matrix w2, b2;          // d x hidden, 1 x d
};

/// Patch-grid denoiser eps_theta(z_t, t, c).
///
/// h_0 = z_t + g P + tau(t); each block applies h += CrossAttn(h, X) then
/// h += W2 silu(W1 h + b1) + b2; F = W_out h + b_out. The noise estimate is
/// eps = c_skip(t) z_t + c_out(t) F with c_skip = s/(a^2 sigma^2 + s^2) and
/// c_out = -a s/(a^2 sigma^2 + s^2), a = sqrt(ab_t), s = sqrt(1 - ab_t).
class ToyDenoiser {
public:
    ToyDenoiser(ModelConfig config, std::vector<BlockWeights> blocks, num::Matrix w_out, num::Matrix b_out);

    /// Freshly initialized, untrained weights.
    static ToyDenoiser init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }
    const std::vector<BlockWeights>& blocks() const noexcept { return blocks_; }
    const num::Matrix& w_out() const noexcept { return w_out_; }
    const num::Matrix& b_out() const noexcept { return b_out_; }
    /// Fixed 2D sinusoidal patch embedding, m x d_model.
    const num::Matrix& positional() const noexcept { return positional_; }
    attn::CrossAttentionLayer attention_layer(std::size_t l) const;

    /// Every weight block in file order with a stable name.
    std::vector<std::pair<std::string, const num::Matrix*>> named_weights() const;
    std::vector<std::pair<std::string, num::Matrix*>> named_weights();
    std::uint64_t checksum() const;

private:
    ModelConfig config_;
    NoiseSchedule schedule_;
    std::vector<BlockWeights> blocks_;
    num::Matrix w_out_;
    num::Matrix b_out_;
    num::Matrix positional_;
};

/// 1 x d sinusoidal timestep embedding.
num::Matrix timestep_embedding(int t, std::size_t d);
/// m x d sinusoidal embedding of a g x g grid (first half rows, second half columns).
num::Matrix grid_embedding(std::size_t g, std::size_t d);

struct BoundBlock {
    attn::LayerVars attn;
    num::Var w1, b1, w2, b2;
};

/// Denoiser weights placed on a tape.
struct BoundDenoiser {
    const ToyDenoiser* model = nullptr;
    std::vector<BoundBlock> blocks;
    num::Var w_out, b_out, positional;
    /// Populated only when bound trainable, in named_weights() order.
    std::vector<std::pair<std::string, num::Var>> leaves;
};

BoundDenoiser bind(num::Tape& tape, const ToyDenoiser& model, bool trainable);

/// Noise prediction for latent `z_t` (m x d_model) at timestep t, conditioned on the
/// embedded prompt `x` (d_text x n) and any bound adapters.
num::Var predict_noise(const BoundDenoiser& model, const num::Var& z_t, int t, const num::Var& x,
                       const text::TokenSequence& seq, std::span<const lora::BoundAdapter> adapters,
                       attn::ProbeCollector* probe = nullptr);

/// mean((eps - eps_theta(z_t, t, c))^2) with z_t = noise(z0, t, eps).
num::Var denoise_loss(const BoundDenoiser& model, std::span<const lora::BoundAdapter> adapters,
                      const text::TokenSequence& seq, const num::Var& x, const num::Matrix& z0, int t,
                      const num::Matrix& eps);

/// Gradient-free evaluation of denoise_loss.
double denoise_loss_value(const ToyDenoiser& model, std::span<const lora::LoraAdapter> adapters,
                          const text::TokenSequence& seq, const num::Matrix& z0, int t, const num::Matrix& eps);

/// Evenly spaced descending timesteps T = tau_0 > ... > tau_{steps-1} >= 1.
std::vector<int> sampler_timesteps(int T, std::size_t steps);

/// Deterministic DDIM (eta = 0) generation from z_T ~ N(0, I) drawn with `seed`.
/// Adapters compose in the given order. `probe`, when given, receives attention maps and
/// adapter-output magnitudes for every layer and sampler step.
num::Matrix sample(const ToyDenoiser& model, std::span<const lora::LoraAdapter> adapters,
                   const text::TokenSequence& seq, std::uint64_t seed, std::size_t steps,
                   attn::ProbeCollector* probe = nullptr);

/// Raw little-endian f64 latent plus a JSON sidecar at `path + ".json"`.
void save_latent(const std::string& path, const num::Matrix& z, const nlohmann::json& sidecar);
num::Matrix load_latent(const std::string& path);

}  // namespace tara::diffusion
