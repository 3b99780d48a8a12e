// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/attention/cross_attention.hpp"

#include <cmath>
#include <set>

#include "tara/error.hpp"

namespace tara::attn {

using num::Matrix;
using num::Tape;
using num::Var;

std::string_view to_string(Projection p) {
    switch (p) {
    case Projection::Q: return "Q";
    case Projection::K: return "K";
    case Projection::V: return "V";
    case Projection::O: return "O";
    }
    return "?";
}

Projection projection_from_string(std::string_view s) {
    if (s == "Q") return Projection::Q;
    if (s == "K") return Projection::K;
    if (s == "V") return Projection::V;
    if (s == "O") return Projection::O;
    throw ConfigError("unknown projection '" + std::string(s) + "'");
}

std::string_view to_string(MaskPolicy p) {
    return p == MaskPolicy::TokenFocused ? "token-focused" : "unmasked";
}

MaskPolicy mask_policy_from_string(std::string_view s) {
    if (s == "token-focused") return MaskPolicy::TokenFocused;
    if (s == "unmasked") return MaskPolicy::Unmasked;
    throw ConfigError("unknown mask policy '" + std::string(s) + "'");
}

TokenMask TokenMask::focus(const text::TokenSequence& seq, const std::string& concept_name) {
    const auto pos = seq.rare_of(concept_name);
    return TokenMask{concept_name, std::vector<std::size_t>(pos.begin(), pos.end()), seq.n()};
}

TokenMask TokenMask::full(std::size_t n, std::string concept_name) {
    TokenMask m{std::move(concept_name), {}, n};
    m.columns.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
        m.columns.push_back(j);
    }
    return m;
}

Matrix TokenMask::dense(std::size_t rows) const {
    Matrix m(rows, n);
    for (std::size_t c : columns) {
        for (std::size_t r = 0; r < rows; ++r) {
            m(r, c) = 1.0;
        }
    }
    return m;
}

namespace {

void check_factors(const LowRankVars& delta, std::size_t in, const char* what) {
    const Matrix& a = delta.a.value();
    const Matrix& b = delta.b.value();
    if (a.rows() != b.cols()) {
        throw ShapeError(std::string(what) + ": A " + a.shape_string() + " and B " + b.shape_string() +
                         " disagree on rank");
    }
    if (a.cols() != in) {
        throw ShapeError(std::string(what) + ": A " + a.shape_string() + " cannot act on input width " +
                         std::to_string(in));
    }
}

void check_mask(const TokenMask& mask, std::size_t n, const char* what) {
    if (mask.n != n) {
        throw ShapeError(std::string(what) + ": mask built for " + std::to_string(mask.n) + " tokens, input has " +
                         std::to_string(n));
    }
    for (std::size_t c : mask.columns) {
        if (c >= n) {
            throw ShapeError(std::string(what) + ": mask column " + std::to_string(c) + " out of range");
        }
    }
}

// B (A X_cols) for the masked columns only.
Var adapter_columns(const LowRankVars& delta, const Var& x, const TokenMask& mask) {
    const Var xs = num::gather_cols(x, mask.columns);
    return num::matmul(delta.b, num::matmul(delta.a, xs));
}

}  // namespace

Var masked_adapter_forward(const LowRankVars& delta, const Var& x, const TokenMask& mask) {
    check_factors(delta, x.rows(), "masked_adapter_forward");
    check_mask(mask, x.cols(), "masked_adapter_forward");
    Tape& tape = *x.tape();
    const Var zeros = tape.constant(Matrix(delta.b.rows(), x.cols()));
    if (mask.columns.empty()) {
        return zeros;
    }
    return num::add_to_cols(zeros, mask.columns, adapter_columns(delta, x, mask));
}

Matrix masked_adapter_forward(const LowRank& delta, const Matrix& x, const TokenMask& mask) {
    Tape tape;
    const LowRankVars d{tape.constant(delta.a), tape.constant(delta.b)};
    return masked_adapter_forward(d, tape.constant(x), mask).value();
}

Var composed_projection(const Var& w, const Var& x, std::span<const AdapterTerm> adapters) {
    std::set<text::TokenId> rare;
    for (const AdapterTerm& t : adapters) {
        if (!rare.insert(t.rare_token).second) {
            throw ConfigError("composed_projection: two adapters bound to rare token " + std::to_string(t.rare_token) +
                              " (concept '" + t.mask.concept_name + "')");
        }
    }
    Var out = num::matmul(w, x);
    for (const AdapterTerm& t : adapters) {
        check_factors(t.delta, x.rows(), "composed_projection");
        check_mask(t.mask, x.cols(), "composed_projection");
        if (t.delta.b.rows() != w.rows()) {
            throw ShapeError("composed_projection: B " + t.delta.b.value().shape_string() +
                             " does not match projection output width " + std::to_string(w.rows()));
        }
        if (t.mask.columns.empty()) {
            continue;
        }
        out = num::add_to_cols(out, t.mask.columns, adapter_columns(t.delta, x, t.mask));
    }
    return out;
}

Matrix composed_projection(const Matrix& w, const Matrix& x, std::span<const DenseAdapterTerm> adapters) {
    Tape tape;
    std::vector<AdapterTerm> terms;
    terms.reserve(adapters.size());
    for (const DenseAdapterTerm& t : adapters) {
        terms.push_back(AdapterTerm{{tape.constant(t.delta.a), tape.constant(t.delta.b)}, t.mask, t.rare_token});
    }
    return composed_projection(tape.constant(w), tape.constant(x), terms).value();
}

CrossAttentionLayer::CrossAttentionLayer(std::size_t layer_id, Matrix wq, Matrix wk, Matrix wv, Matrix wo)
    : layer_id_(layer_id), wq_(std::move(wq)), wk_(std::move(wk)), wv_(std::move(wv)), wo_(std::move(wo)) {
    const std::size_t d = wq_.rows();
    if (wq_.cols() != d || wo_.rows() != d || wo_.cols() != d) {
        throw ShapeError("CrossAttentionLayer: W_Q and W_O must be d_model x d_model");
    }
    if (wk_.rows() != d || wv_.rows() != d || wk_.cols() != wv_.cols()) {
        throw ShapeError("CrossAttentionLayer: W_K/W_V must be d_model x d_text, got " + wk_.shape_string() + " and " +
                         wv_.shape_string());
    }
}

const Matrix& CrossAttentionLayer::weight(Projection p) const {
    switch (p) {
    case Projection::Q: return wq_;
    case Projection::K: return wk_;
    case Projection::V: return wv_;
    case Projection::O: return wo_;
    }
    return wq_;
}

LayerVars bind(Tape& tape, const CrossAttentionLayer& layer, bool trainable) {
    auto put = [&](const Matrix& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
    return LayerVars{layer.layer_id(), put(layer.weight(Projection::Q)), put(layer.weight(Projection::K)),
                     put(layer.weight(Projection::V)), put(layer.weight(Projection::O))};
}

namespace {

std::vector<AdapterTerm> terms_for(Projection p, std::span<const LayerInjection> adapters,
                                   const text::TokenSequence& seq) {
    std::vector<AdapterTerm> terms;
    for (const LayerInjection& inj : adapters) {
        const auto& f = inj.on(p);
        if (!f) {
            continue;
        }
        TokenMask mask = inj.policy == MaskPolicy::TokenFocused ? TokenMask::focus(seq, inj.concept_name)
                                                                 : TokenMask::full(seq.n(), inj.concept_name);
        terms.push_back(AdapterTerm{*f, std::move(mask), inj.rare_token});
    }
    return terms;
}

// Unmasked low-rank update on a patch-side projection: y + (u Aᵀ) Bᵀ.
Var patch_side_update(const Var& y, const Var& u, const LowRankVars& f) {
    return num::add(y, num::matmul(num::matmul(u, num::transpose(f.a)), num::transpose(f.b)));
}

void record_influence(ProbeCollector& probe, std::size_t layer, Projection p, std::span<const AdapterTerm> terms,
                      const Var& x) {
    for (const AdapterTerm& t : terms) {
        const Matrix out = masked_adapter_forward(LowRank{t.delta.a.value(), t.delta.b.value()}, x.value(), t.mask);
        InfluenceRecord rec{t.mask.concept_name, p, layer, probe.step, std::vector<double>(out.cols(), 0.0)};
        for (std::size_t c = 0; c < out.cols(); ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < out.rows(); ++r) {
                s += out(r, c) * out(r, c);
            }
            rec.column_norms[c] = std::sqrt(s);
        }
        probe.influence.push_back(std::move(rec));
    }
}

}  // namespace

AttentionOutput attention_forward(const LayerVars& layer, std::size_t heads, const Var& z, const Var& x,
                                  const text::TokenSequence& seq, std::span<const LayerInjection> adapters,
                                  ProbeCollector* probe) {
    const std::size_t d = layer.wq.rows();
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention_forward: d_model " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    if (z.cols() != d) {
        throw ShapeError("attention_forward: latent " + z.value().shape_string() + " does not match d_model " +
                         std::to_string(d));
    }
    if (x.cols() != seq.n()) {
        throw ShapeError("attention_forward: text matrix has " + std::to_string(x.cols()) + " columns, sequence has " +
                         std::to_string(seq.n()) + " tokens");
    }
    for (const LayerInjection& inj : adapters) {
        if (inj.policy == MaskPolicy::TokenFocused && (inj.on(Projection::Q) || inj.on(Projection::O))) {
            throw ConfigError("attention_forward: token-focused adapter '" + inj.concept_name +
                              "' may only target K and V");
        }
    }

    Var q = num::matmul(z, num::transpose(layer.wq));
    for (const LayerInjection& inj : adapters) {
        if (const auto& f = inj.on(Projection::Q)) {
            q = patch_side_update(q, z, *f);
        }
    }

    const auto k_terms = terms_for(Projection::K, adapters, seq);
    const auto v_terms = terms_for(Projection::V, adapters, seq);
    const Var k = composed_projection(layer.wk, x, k_terms);
    const Var v = composed_projection(layer.wv, x, v_terms);
    if (probe != nullptr && probe->record_influence) {
        record_influence(*probe, layer.layer_id, Projection::K, k_terms, x);
        record_influence(*probe, layer.layer_id, Projection::V, v_terms, x);
    }

    const Var kt = num::transpose(k);  // n x d
    const Var vt = num::transpose(v);  // n x d
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix map(z.rows(), x.cols());
    std::vector<Var> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = heads == 1 ? q : num::slice_cols(q, h * dh, dh);
        const Var kh = heads == 1 ? kt : num::slice_cols(kt, h * dh, dh);
        const Var vh = heads == 1 ? vt : num::slice_cols(vt, h * dh, dh);
        const Var a = num::softmax_rows(num::scale(num::matmul(qh, num::transpose(kh)), inv_sqrt));
        map += a.value();
        head_out.push_back(num::matmul(a, vh));
    }
    if (heads > 1) {
        map *= 1.0 / static_cast<double>(heads);
    }
    const Var mixed = heads == 1 ? head_out.front() : num::hconcat(head_out);

    Var out = num::matmul(mixed, num::transpose(layer.wo));
    for (const LayerInjection& inj : adapters) {
        if (const auto& f = inj.on(Projection::O)) {
            out = patch_side_update(out, mixed, *f);
        }
    }

    if (probe != nullptr && probe->record_attention) {
        probe->maps.push_back(AttentionMap{layer.layer_id, probe->step, probe->timestep, map});
    }
    return AttentionOutput{out, std::move(map)};
}

}  // namespace tara::attn
