// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "llmctx/error.hpp"

namespace llmctx::tinylm {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;

std::vector<float> random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                 double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<float> m(rows * cols);
    for (auto& v : m) v = static_cast<float>(dist(rng));
    return m;
}

void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
    float sum_sq = 0.0f;
    for (float v : x) sum_sq += v * v;
    const float inv = 1.0f / std::sqrt(sum_sq / static_cast<float>(x.size()) + kNormEps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

// out = x * W, W row-major (in x out).
void matvec(std::span<const float> x, const std::vector<float>& w, std::size_t out_dim,
            std::span<float> out) {
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float xi = x[i];
        const float* row = w.data() + i * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) out[j] += xi * row[j];
    }
}

void apply_rope(std::span<float> vec, std::size_t heads, std::size_t head_dim,
                std::size_t position) {
    for (std::size_t h = 0; h < heads; ++h) {
        float* base = vec.data() + h * head_dim;
        for (std::size_t i = 0; i < head_dim / 2; ++i) {
            const double theta = static_cast<double>(position) *
                                 std::pow(kRopeBase, -2.0 * static_cast<double>(i) /
                                                         static_cast<double>(head_dim));
            const auto c = static_cast<float>(std::cos(theta));
            const auto s = static_cast<float>(std::sin(theta));
            const float a = base[2 * i];
            const float b = base[2 * i + 1];
            base[2 * i] = a * c - b * s;
            base[2 * i + 1] = a * s + b * c;
        }
    }
}

float silu(float v) { return v / (1.0f + std::exp(-v)); }

void softmax_inplace(std::span<float> v) {
    const float mx = *std::max_element(v.begin(), v.end());
    float sum = 0.0f;
    for (auto& e : v) {
        e = std::exp(e - mx);
        sum += e;
    }
    for (auto& e : v) e /= sum;
}

void check_token(const Config& config, TokenId token) {
    if (token < 0 || static_cast<std::size_t>(token) >= config.vocab) {
        raise(Errc::argument, "token id " + std::to_string(token) + " outside vocabulary");
    }
}

// residual += FFN(norm(residual))
void feed_forward(const Config& cfg, const LayerWeights& lw, std::span<float> residual) {
    const std::size_t hidden = cfg.hidden();
    std::vector<float> normed(hidden), up(cfg.ffn_dim()), down(hidden);
    rms_norm(residual, lw.ffn_norm, normed);
    matvec(normed, lw.w_up, cfg.ffn_dim(), up);
    for (auto& u : up) u = silu(u);
    matvec(up, lw.w_down, hidden, down);
    for (std::size_t i = 0; i < hidden; ++i) residual[i] += down[i];
}

std::vector<float> project_logits(const Model& model, std::span<const float> residual) {
    const auto& cfg = model.config();
    std::vector<float> normed(cfg.hidden()), logits(cfg.vocab);
    rms_norm(residual, model.weights().final_norm, normed);
    matvec(normed, model.weights().unembed, cfg.vocab, logits);
    return logits;
}

}  // namespace

void Config::validate() const {
    if (layers < 1 || heads < 1 || head_dim < 2 || head_dim % 2 != 0 || vocab < 1 || max_seq < 1) {
        raise(Errc::argument,
              "tinylm config needs layers, heads, vocab, max_seq >= 1 and an even head_dim");
    }
}

Model::Model(const Config& config) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const std::size_t hidden = config_.hidden();
    const std::size_t ffn = config_.ffn_dim();
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(hidden));
    const double down_std = 1.0 / std::sqrt(static_cast<double>(ffn));

    weights_.embed = random_matrix(rng, config_.vocab, hidden, 1.0);
    weights_.layers.resize(config_.layers);
    for (auto& lw : weights_.layers) {
        lw.attn_norm.assign(hidden, 1.0f);
        lw.wq = random_matrix(rng, hidden, hidden, attn_std);
        lw.wk = random_matrix(rng, hidden, hidden, attn_std);
        lw.wv = random_matrix(rng, hidden, hidden, attn_std);
        lw.wo = random_matrix(rng, hidden, hidden, attn_std);
        lw.ffn_norm.assign(hidden, 1.0f);
        lw.w_up = random_matrix(rng, hidden, ffn, attn_std);
        lw.w_down = random_matrix(rng, ffn, hidden, down_std);
    }
    weights_.final_norm.assign(hidden, 1.0f);
    weights_.unembed = random_matrix(rng, hidden, config_.vocab, attn_std);
}

KvTensor::KvTensor(std::size_t layers_, std::size_t heads_, std::size_t head_dim_,
                   std::size_t length_, std::size_t first_position_)
    : layers(layers_), heads(heads_), head_dim(head_dim_), first_position(first_position_),
      length(length_), keys(layers_), values(layers_) {
    for (std::size_t l = 0; l < layers; ++l) {
        keys[l].assign(length * hidden(), 0.0f);
        values[l].assign(length * hidden(), 0.0f);
    }
}

std::span<float> KvTensor::key_row(std::size_t layer, std::size_t row) {
    return {keys[layer].data() + row * hidden(), hidden()};
}
std::span<const float> KvTensor::key_row(std::size_t layer, std::size_t row) const {
    return {keys[layer].data() + row * hidden(), hidden()};
}
std::span<float> KvTensor::value_row(std::size_t layer, std::size_t row) {
    return {values[layer].data() + row * hidden(), hidden()};
}
std::span<const float> KvTensor::value_row(std::size_t layer, std::size_t row) const {
    return {values[layer].data() + row * hidden(), hidden()};
}

void KvTensor::resize(std::size_t new_length) {
    for (std::size_t l = 0; l < layers; ++l) {
        keys[l].resize(new_length * hidden(), 0.0f);
        values[l].resize(new_length * hidden(), 0.0f);
    }
    length = new_length;
}

void KvTensor::drop_front(std::size_t rows) {
    rows = std::min(rows, length);
    const auto offset = static_cast<std::ptrdiff_t>(rows * hidden());
    for (std::size_t l = 0; l < layers; ++l) {
        keys[l].erase(keys[l].begin(), keys[l].begin() + offset);
        values[l].erase(values[l].begin(), values[l].begin() + offset);
    }
    length -= rows;
    first_position += rows;
}

float KvTensor::max_abs_diff(const KvTensor& other) const {
    if (layers != other.layers || length != other.length || hidden() != other.hidden()) {
        raise(Errc::consistency, "KV tensors differ in shape");
    }
    float worst = 0.0f;
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t i = 0; i < keys[l].size(); ++i) {
            worst = std::max(worst, std::abs(keys[l][i] - other.keys[l][i]));
            worst = std::max(worst, std::abs(values[l][i] - other.values[l][i]));
        }
    }
    return worst;
}

ForwardResult forward_full(const Model& model, std::span<const TokenId> tokens,
                           std::size_t first_position) {
    const auto& cfg = model.config();
    const auto& w = model.weights();
    const std::size_t n = tokens.size();
    if (n < 1 || n > cfg.max_seq) {
        raise(Errc::length, "sequence of " + std::to_string(n) + " tokens outside [1, " +
                                std::to_string(cfg.max_seq) + "]");
    }
    for (TokenId t : tokens) check_token(cfg, t);

    const std::size_t hidden = cfg.hidden();
    const std::size_t d = cfg.head_dim;
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));

    ForwardResult out;
    out.kv = KvTensor(cfg.layers, cfg.heads, d, n, first_position);
    out.attention.layers = cfg.layers;
    out.attention.heads = cfg.heads;
    out.attention.rows = n;
    out.attention.first_position = first_position;
    out.attention.scores.assign(cfg.layers * cfg.heads * n * n, 0.0f);

    // Residual stream, n x hidden.
    std::vector<float> x(n * hidden);
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(w.embed.data() + static_cast<std::size_t>(tokens[r]) * hidden, hidden,
                    x.data() + r * hidden);
    }

    std::vector<float> normed(n * hidden), q(n * hidden), attn_out(n * hidden);
    std::vector<float> scores(n);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& lw = w.layers[l];
        auto& keys = out.kv.keys[l];
        auto& values = out.kv.values[l];
        for (std::size_t r = 0; r < n; ++r) {
            std::span<const float> xr(x.data() + r * hidden, hidden);
            std::span<float> nr(normed.data() + r * hidden, hidden);
            rms_norm(xr, lw.attn_norm, nr);
            std::span<float> qr(q.data() + r * hidden, hidden);
            std::span<float> kr(keys.data() + r * hidden, hidden);
            std::span<float> vr(values.data() + r * hidden, hidden);
            matvec(nr, lw.wq, hidden, qr);
            matvec(nr, lw.wk, hidden, kr);
            matvec(nr, lw.wv, hidden, vr);
            apply_rope(qr, cfg.heads, d, first_position + r);
            apply_rope(kr, cfg.heads, d, first_position + r);
        }

        std::fill(attn_out.begin(), attn_out.end(), 0.0f);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            for (std::size_t r = 0; r < n; ++r) {
                const float* qh = q.data() + r * hidden + h * d;
                for (std::size_t c = 0; c <= r; ++c) {
                    const float* kh = keys.data() + c * hidden + h * d;
                    float dot = 0.0f;
                    for (std::size_t i = 0; i < d; ++i) dot += qh[i] * kh[i];
                    scores[c] = dot * inv_sqrt_d;
                }
                softmax_inplace(std::span<float>(scores.data(), r + 1));
                float* oh = attn_out.data() + r * hidden + h * d;
                for (std::size_t c = 0; c <= r; ++c) {
                    out.attention.at(l, h, r, c) = scores[c];
                    const float* vh = values.data() + c * hidden + h * d;
                    for (std::size_t i = 0; i < d; ++i) oh[i] += scores[c] * vh[i];
                }
            }
        }

        std::vector<float> projected(hidden);
        for (std::size_t r = 0; r < n; ++r) {
            std::span<float> xr(x.data() + r * hidden, hidden);
            matvec(std::span<const float>(attn_out.data() + r * hidden, hidden), lw.wo, hidden,
                   projected);
            for (std::size_t i = 0; i < hidden; ++i) xr[i] += projected[i];
            feed_forward(cfg, lw, xr);
        }
    }

    out.logits = project_logits(model, std::span<const float>(x.data() + (n - 1) * hidden, hidden));
    return out;
}

RowRecomputer::RowRecomputer(const Model& model, KvTensor& kv, std::vector<std::size_t> rows,
                             std::span<const TokenId> tokens)
    : model_(&model), kv_(&kv), rows_(std::move(rows)) {
    const auto& cfg = model.config();
    if (kv.layers != cfg.layers || kv.heads != cfg.heads || kv.head_dim != cfg.head_dim) {
        raise(Errc::consistency, "KV tensor shape does not match the model");
    }
    std::sort(rows_.begin(), rows_.end());
    const std::size_t hidden = cfg.hidden();
    residual_.resize(rows_.size() * hidden);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        const std::size_t r = rows_[k];
        if (r >= kv.length || r >= tokens.size()) {
            raise(Errc::consistency, "target row " + std::to_string(r) + " outside the cache");
        }
        check_token(cfg, tokens[r]);
        std::copy_n(model.weights().embed.data() + static_cast<std::size_t>(tokens[r]) * hidden,
                    hidden, residual_.data() + k * hidden);
    }
    last_rows_.resize(cfg.layers * cfg.heads);
}

void RowRecomputer::run_layer(std::size_t layer) {
    const auto& cfg = model_->config();
    if (layer != next_layer_ || layer >= cfg.layers) {
        raise(Errc::consistency, "layers must be recomputed in order");
    }
    const auto& lw = model_->weights().layers[layer];
    const std::size_t hidden = cfg.hidden();
    const std::size_t d = cfg.head_dim;
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    KvTensor& kv = *kv_;

    // Project every target row first so that later targets can attend to
    // earlier ones within the same layer.
    std::vector<float> normed(hidden);
    std::vector<float> q(rows_.size() * hidden);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        const std::size_t r = rows_[k];
        const std::size_t pos = kv.first_position + r;
        rms_norm(std::span<const float>(residual_.data() + k * hidden, hidden), lw.attn_norm,
                 normed);
        std::span<float> qk(q.data() + k * hidden, hidden);
        matvec(normed, lw.wq, hidden, qk);
        matvec(normed, lw.wk, hidden, kv.key_row(layer, r));
        matvec(normed, lw.wv, hidden, kv.value_row(layer, r));
        apply_rope(qk, cfg.heads, d, pos);
        apply_rope(kv.key_row(layer, r), cfg.heads, d, pos);
    }

    std::vector<float> scores;
    std::vector<float> attn_out(hidden), projected(hidden);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        const std::size_t r = rows_[k];
        const bool last = k + 1 == rows_.size();
        std::fill(attn_out.begin(), attn_out.end(), 0.0f);
        scores.resize(r + 1);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const float* qh = q.data() + k * hidden + h * d;
            // Causal mask: a row at position p sees exactly the rows <= p.
            for (std::size_t c = 0; c <= r; ++c) {
                const float* kh = kv.keys[layer].data() + c * hidden + h * d;
                float dot = 0.0f;
                for (std::size_t i = 0; i < d; ++i) dot += qh[i] * kh[i];
                scores[c] = dot * inv_sqrt_d;
            }
            softmax_inplace(scores);
            float* oh = attn_out.data() + h * d;
            for (std::size_t c = 0; c <= r; ++c) {
                const float* vh = kv.values[layer].data() + c * hidden + h * d;
                for (std::size_t i = 0; i < d; ++i) oh[i] += scores[c] * vh[i];
            }
            if (last) last_rows_[layer * cfg.heads + h] = scores;
        }
        std::span<float> xr(residual_.data() + k * hidden, hidden);
        matvec(attn_out, lw.wo, hidden, projected);
        for (std::size_t i = 0; i < hidden; ++i) xr[i] += projected[i];
        feed_forward(cfg, lw, xr);
    }
    ++next_layer_;
}

void RowRecomputer::run_all() {
    while (next_layer_ < model_->config().layers) run_layer(next_layer_);
}

std::vector<float> RowRecomputer::last_logits() const {
    if (rows_.empty() || next_layer_ != model_->config().layers) {
        raise(Errc::consistency, "logits requested before all layers ran");
    }
    const std::size_t hidden = model_->config().hidden();
    return project_logits(*model_,
                          std::span<const float>(residual_.data() + (rows_.size() - 1) * hidden,
                                                 hidden));
}

StepResult forward_step(const Model& model, KvTensor& kv, TokenId token) {
    const auto& cfg = model.config();
    if (kv.layers == 0) kv = KvTensor(cfg.layers, cfg.heads, cfg.head_dim, 0, kv.first_position);
    if (kv.length >= cfg.max_seq) {
        raise(Errc::window, "KV cache is full (" + std::to_string(kv.length) + " rows)");
    }
    for (std::size_t l = 1; l < kv.layers; ++l) {
        if (kv.keys[l].size() != kv.keys[0].size() || kv.values[l].size() != kv.keys[0].size()) {
            raise(Errc::consistency, "per-layer cache lengths differ");
        }
    }
    const std::size_t row = kv.length;
    kv.resize(row + 1);
    // Only the new row's token matters; earlier rows are read from the cache.
    std::vector<TokenId> tokens(row + 1, 0);
    tokens[row] = token;
    RowRecomputer step(model, kv, {row}, tokens);
    step.run_all();
    return {step.last_attention_rows(), step.last_logits()};
}

KvTensor recompute_chunks(const Model& model, const PartialKv& resident,
                          std::span<const TokenSpan> missing, std::span<const TokenId> tokens) {
    const KvTensor& base = resident.kv;
    if (resident.present.size() != base.length || tokens.size() != base.length) {
        raise(Errc::consistency, "residency mask and token ids must cover every cache row");
    }
    std::vector<bool> target(base.length, false);
    std::vector<std::size_t> rows;
    for (const auto& span : missing) {
        if (span.start < base.first_position || span.end() > base.first_position + base.length) {
            raise(Errc::consistency, "missing span outside the cached window");
        }
        for (std::size_t p = span.start; p < span.end(); ++p) {
            const std::size_t r = p - base.first_position;
            if (target[r]) raise(Errc::consistency, "missing spans overlap");
            if (resident.present[r]) {
                raise(Errc::consistency,
                      "position " + std::to_string(p) + " is both resident and missing");
            }
            target[r] = true;
            rows.push_back(r);
        }
    }
    for (std::size_t r = 0; r < base.length; ++r) {
        if (!target[r] && !resident.present[r]) {
            raise(Errc::consistency, "row " + std::to_string(r) + " is neither resident nor missing");
        }
    }

    KvTensor out = base;
    if (rows.empty()) return out;
    RowRecomputer recompute(model, out, std::move(rows), tokens);
    recompute.run_all();
    return out;
}

TokenId argmax(std::span<const float> logits) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace llmctx::tinylm
