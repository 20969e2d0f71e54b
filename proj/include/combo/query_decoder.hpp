// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Mask-classification transformer decoder. Object queries attend to the
// pixel embeddings P_4, P_3, P_2 in turn (L rounds, 3L layers). Each layer is
// pre-norm: masked cross-attention, self-attention, feed-forward. After every
// layer the heads emit class logits and mask logits against P_1'.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "combo/bilateral_fusion.hpp"
#include "combo/ops.hpp"
#include "combo/params.hpp"
#include "combo/pixel_decoder.hpp"

namespace combo {

enum class QueryMode { all, add };

inline QueryMode parse_query_mode(std::string_view s) {
    if (s == "add") return QueryMode::add;
    if (s == "all") return QueryMode::all;
    throw ConfigError("unknown query mode '" + std::string(s) + "' (add|all)");
}

inline std::string to_string(QueryMode m) { return m == QueryMode::add ? "add" : "all"; }

struct QuerySet {
    Tensor effective;  // [T, N_q, d]
    QueryMode mode = QueryMode::add;
};

// add: learnable + expand(F_a'[t]) for every query; all: expand(F_a'[t])
// replicated `replicas` times (must equal the learnable query count).
inline QuerySet build_queries(const Tensor& fused_audio, const Tensor& learnable, const Tensor& expand,
                              QueryMode mode, std::size_t replicas) {
    if (fused_audio.rank() != 2 || learnable.rank() != 2 || fused_audio.dim(1) != learnable.dim(1))
        throw DimensionError("build_queries: audio " + shape_str(fused_audio.shape()) + " vs learnable " +
                             shape_str(learnable.shape()));
    if (mode == QueryMode::all && replicas != learnable.dim(0))
        throw ConfigError("build_queries: 'all' mode replicates " + std::to_string(replicas) +
                          " queries but the decoder has " + std::to_string(learnable.dim(0)));
    Tensor per_frame = repeat(matmul(fused_audio, expand), 1, learnable.dim(0));
    QuerySet out;
    out.mode = mode;
    out.effective = mode == QueryMode::add ? add(per_frame, learnable) : per_frame;
    return out;
}

struct DecoderConfig {
    std::size_t width = 32;        // d
    std::size_t num_queries = 8;   // N_q
    std::size_t rounds = 3;        // L
    std::size_t num_classes = 3;   // K_c (logits carry K_c + 1)
    std::size_t ffn_multiplier = 4;
    std::size_t pixel_channels = 32;  // C of P_2..P_4
    double mask_threshold = 0.5;

    std::size_t layers() const noexcept { return 3 * rounds; }
};

struct PredictionSet {
    Tensor cls;   // [T, N_q, K_c + 1]
    Tensor mask;  // [T, N_q, H_1, W_1]
};

struct DecoderTrace {
    std::size_t masked_layers = 0;
    std::size_t attention_rows = 0;
    std::size_t fallback_rows = 0;
    // Blocking pattern per masked layer of the last recorded forward. With
    // replay set, forward reuses it instead of thresholding again, which pins
    // the piecewise-constant mask while finite differences probe a point.
    std::vector<std::vector<std::uint8_t>> blocked;
    bool replay = false;
};

inline Tensor transpose_last2(const Tensor& x) { return permute(x, {0, 2, 1}); }

class QueryDecoder {
public:
    QueryDecoder() = default;

    QueryDecoder(ParamStore& store, const DecoderConfig& cfg) : cfg_(cfg) {
        const std::size_t d = cfg.width, h = cfg.ffn_multiplier * d;
        learnable_ = store.create("dec.query", {cfg.num_queries, d}, Init::normal(1.0));
        expand_ = store.create("dec.audio_expand", {d, d}, Init::xavier(d, d));
        if (cfg.pixel_channels != d) {
            for (std::size_t lvl = 1; lvl < 4; ++lvl)
                input_proj_[lvl] = store.create("dec.input_proj" + std::to_string(lvl + 1), {cfg.pixel_channels, d},
                                                Init::xavier(cfg.pixel_channels, d));
        }
        auto lin = [&](const std::string& name, std::size_t in, std::size_t out) {
            return store.create(name, {in, out}, Init::xavier(in, out));
        };
        for (std::size_t l = 0; l < cfg.layers(); ++l) {
            const std::string p = "dec.layer" + std::to_string(l);
            Layer L;
            for (int n = 0; n < 3; ++n) {
                L.ln_gain[n] = store.create(p + ".ln" + std::to_string(n) + ".gain", {d}, Init::ones());
                L.ln_bias[n] = store.create(p + ".ln" + std::to_string(n) + ".bias", {d}, Init::zeros());
            }
            L.ca_q = lin(p + ".ca.wq", d, d);
            L.ca_k = lin(p + ".ca.wk", d, d);
            L.ca_v = lin(p + ".ca.wv", d, d);
            L.ca_o = lin(p + ".ca.wo", d, d);
            L.sa_q = lin(p + ".sa.wq", d, d);
            L.sa_k = lin(p + ".sa.wk", d, d);
            L.sa_v = lin(p + ".sa.wv", d, d);
            L.sa_o = lin(p + ".sa.wo", d, d);
            L.ffn_w1 = store.create(p + ".ffn.w1", {d, h}, Init::he(d));
            L.ffn_b1 = store.create(p + ".ffn.b1", {h}, Init::zeros());
            L.ffn_w2 = lin(p + ".ffn.w2", h, d);
            L.ffn_b2 = store.create(p + ".ffn.b2", {d}, Init::zeros());
            layers_.push_back(L);
        }
        head_ln_gain_ = store.create("dec.head.ln.gain", {d}, Init::ones());
        head_ln_bias_ = store.create("dec.head.ln.bias", {d}, Init::zeros());
        cls_w_ = lin("dec.head.cls.weight", d, cfg.num_classes + 1);
        cls_b_ = store.create("dec.head.cls.bias", {cfg.num_classes + 1}, Init::zeros());
        for (int i = 0; i < 3; ++i) {
            mask_w_[i] = store.create("dec.head.mask_mlp" + std::to_string(i) + ".weight", {d, d},
                                      i < 2 ? Init::he(d) : Init::xavier(d, d));
            mask_b_[i] = store.create("dec.head.mask_mlp" + std::to_string(i) + ".bias", {d}, Init::zeros());
        }
    }

    QuerySet queries(const Tensor& fused_audio, QueryMode mode) const {
        return build_queries(fused_audio, learnable_, expand_, mode, cfg_.num_queries);
    }

    // Mask logits of one set of query states against P_1' [T, d, H_1, W_1].
    PredictionSet heads(const Tensor& q, const Tensor& mask_features) const {
        const std::size_t T = mask_features.dim(0), d = mask_features.dim(1), H = mask_features.dim(2),
                          W = mask_features.dim(3);
        Tensor h = layer_norm(q, head_ln_gain_, head_ln_bias_);
        PredictionSet out;
        out.cls = linear(h, cls_w_, cls_b_);
        Tensor e = relu(linear(h, mask_w_[0], mask_b_[0]));
        e = relu(linear(e, mask_w_[1], mask_b_[1]));
        e = linear(e, mask_w_[2], mask_b_[2]);
        Tensor m = bmm(e, reshape(mask_features, {T, d, H * W}));
        out.mask = reshape(m, {T, q.dim(1), H, W});
        return out;
    }

    std::vector<PredictionSet> forward(const QuerySet& queries, const PixelEmbeddings& pixels,
                                       const Tensor& mask_features, DecoderTrace* trace = nullptr) const {
        const Tensor& q0 = queries.effective;
        if (q0.rank() != 3 || q0.dim(2) != cfg_.width)
            throw DimensionError("decoder queries must be [T,N_q," + std::to_string(cfg_.width) + "], got " +
                                 shape_str(q0.shape()));
        if (mask_features.rank() != 4 || mask_features.dim(1) != cfg_.width || mask_features.dim(0) != q0.dim(0))
            throw DimensionError("decoder mask features must be [T," + std::to_string(cfg_.width) + ",H,W], got " +
                                 shape_str(mask_features.shape()));
        const std::size_t T = q0.dim(0), d = cfg_.width;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

        // Memory tokens per level (P_2..P_4 at indices 1..3).
        std::array<Tensor, 4> mem, keys;
        for (std::size_t lvl = 1; lvl < 4; ++lvl) {
            const Tensor& p = pixels.levels[lvl];
            if (p.rank() != 4 || p.dim(0) != T || p.dim(1) != cfg_.pixel_channels)
                throw DimensionError("decoder level P_" + std::to_string(lvl + 1) + " has shape " + shape_str(p.shape()));
            const std::size_t hw = p.dim(2) * p.dim(3);
            Tensor tok = permute(reshape(p, {T, p.dim(1), hw}), {0, 2, 1});
            if (input_proj_[lvl].defined()) tok = linear(tok, input_proj_[lvl]);
            mem[lvl] = tok;
            Tensor pe = reshape(transpose(reshape(sine_positional_encoding(p.dim(2), p.dim(3), d), {d, hw})), {hw, d});
            keys[lvl] = add(tok, pe);
        }

        std::vector<PredictionSet> outputs;
        Tensor q = q0;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const Layer& L = layers_[l];
            const std::size_t lvl = 3 - (l % 3);

            // masked cross-attention
            Tensor qn = layer_norm(q, L.ln_gain[0], L.ln_bias[0]);
            Tensor scores = scale(bmm(linear(qn, L.ca_q), transpose_last2(linear(keys[lvl], L.ca_k))), inv_sqrt_d);
            Tensor attn;
            if (outputs.empty()) {
                attn = softmax(scores, -1);
            } else {
                if (trace && trace->replay) {
                    if (l - 1 >= trace->blocked.size()) throw ContractError("decoder replay has no recorded mask");
                    attn = masked_softmax(scores, trace->blocked[l - 1]);
                } else {
                    auto blocked = attention_mask(outputs.back().mask, pixels.levels[lvl].dim(2),
                                                  pixels.levels[lvl].dim(3), trace);
                    attn = masked_softmax(scores, blocked);
                    if (trace) {
                        if (l == 1) trace->blocked.clear();
                        trace->blocked.push_back(std::move(blocked));
                    }
                }
            }
            q = add(q, linear(bmm(attn, linear(mem[lvl], L.ca_v)), L.ca_o));

            // self-attention
            qn = layer_norm(q, L.ln_gain[1], L.ln_bias[1]);
            Tensor sa = softmax(scale(bmm(linear(qn, L.sa_q), transpose_last2(linear(qn, L.sa_k))), inv_sqrt_d), -1);
            q = add(q, linear(bmm(sa, linear(qn, L.sa_v)), L.sa_o));

            // feed-forward
            qn = layer_norm(q, L.ln_gain[2], L.ln_bias[2]);
            q = add(q, linear(relu(linear(qn, L.ffn_w1, L.ffn_b1)), L.ffn_w2, L.ffn_b2));

            outputs.push_back(heads(q, mask_features));
        }
        return outputs;
    }

    const DecoderConfig& config() const noexcept { return cfg_; }
    const Tensor& learnable_queries() const noexcept { return learnable_; }
    const Tensor& audio_expand() const noexcept { return expand_; }
    const Tensor& classifier_weight() const noexcept { return cls_w_; }
    const Tensor& classifier_bias() const noexcept { return cls_b_; }

private:
    // Blocks pixel tokens whose pooled previous-layer mask probability is
    // below the threshold; rows that would be fully blocked stay unmasked.
    std::vector<std::uint8_t> attention_mask(const Tensor& prev_mask, std::size_t h, std::size_t w,
                                             DecoderTrace* trace) const {
        const std::size_t T = prev_mask.dim(0), Nq = prev_mask.dim(1), H1 = prev_mask.dim(2), W1 = prev_mask.dim(3);
        if (H1 % h || W1 % w) throw DimensionError("decoder level does not divide the mask resolution");
        const std::size_t fy = H1 / h, fx = W1 / w;
        const double threshold_logit = std::log(cfg_.mask_threshold / (1.0 - cfg_.mask_threshold));
        std::vector<std::uint8_t> blocked(T * Nq * h * w, 0);
        for (std::size_t r = 0; r < T * Nq; ++r) {
            std::size_t open = 0;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    double acc = 0.0;
                    for (std::size_t dy = 0; dy < fy; ++dy)
                        for (std::size_t dx = 0; dx < fx; ++dx) acc += prev_mask[(r * H1 + y * fy + dy) * W1 + x * fx + dx];
                    const bool b = acc / static_cast<double>(fy * fx) < threshold_logit;
                    blocked[r * h * w + y * w + x] = b;
                    open += !b;
                }
            if (open == 0) {
                std::fill_n(blocked.begin() + static_cast<long>(r * h * w), h * w, 0);
                if (trace) ++trace->fallback_rows;
            }
        }
        if (trace) {
            ++trace->masked_layers;
            trace->attention_rows += T * Nq;
        }
        return blocked;
    }

    struct Layer {
        std::array<Tensor, 3> ln_gain, ln_bias;
        Tensor ca_q, ca_k, ca_v, ca_o;
        Tensor sa_q, sa_k, sa_v, sa_o;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    DecoderConfig cfg_;
    Tensor learnable_, expand_;
    std::array<Tensor, 4> input_proj_;
    std::vector<Layer> layers_;
    Tensor head_ln_gain_, head_ln_bias_, cls_w_, cls_b_;
    std::array<Tensor, 3> mask_w_, mask_b_;
};

// Bilinear (align_corners=false) resize of mask logits [T,N_q,H_1,W_1] to the
// input resolution.
inline Tensor upsample_masks(const Tensor& mask_logits, std::size_t height, std::size_t width) {
    if (mask_logits.rank() != 4) throw DimensionError("upsample_masks expects [T,N_q,H,W]");
    return upsample_bilinear(mask_logits, height, width);
}

}  // namespace combo
