// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// A small deterministic decoder-only transformer with an explicit KV cache.
//
// Weights are drawn from a seeded normal generator, positions use rotary
// embeddings over *global* token indices, and attention is materialized so
// that score matrices are always available to the density ledger.
//
// Two independent code paths exist on purpose:
//   * forward_full() is a batch implementation over the whole sequence;
//   * forward_step() / recompute_chunks() share a row-subset kernel that
//     computes an arbitrary set of rows against an existing cache.
// Tests compare the two.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace llmctx::tinylm {

using TokenId = std::int32_t;

struct Config {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t vocab = 256;
    std::size_t max_seq = 256;
    std::uint64_t seed = 0;

    std::size_t hidden() const noexcept { return heads * head_dim; }
    std::size_t ffn_dim() const noexcept { return 2 * hidden(); }

    /// Throws Errc::argument on an unusable configuration.
    void validate() const;
};

struct LayerWeights {
    std::vector<float> attn_norm;  // hidden
    std::vector<float> wq, wk, wv, wo;  // hidden x hidden, row-major (in x out)
    std::vector<float> ffn_norm;  // hidden
    std::vector<float> w_up;    // hidden x ffn
    std::vector<float> w_down;  // ffn x hidden
};

struct Weights {
    std::vector<float> embed;  // vocab x hidden
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // hidden
    std::vector<float> unembed;     // hidden x vocab
};

class Model {
public:
    explicit Model(const Config& config);

    const Config& config() const noexcept { return config_; }
    const Weights& weights() const noexcept { return weights_; }

private:
    Config config_;
    Weights weights_;
};

/// Per-layer K and V, each `length x heads x head_dim`. Row r holds the token
/// at global position `first_position + r`.
struct KvTensor {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    std::size_t first_position = 0;
    std::size_t length = 0;
    std::vector<std::vector<float>> keys;    // [layer][row * hidden + head * d + i]
    std::vector<std::vector<float>> values;

    KvTensor() = default;
    KvTensor(std::size_t layers, std::size_t heads, std::size_t head_dim, std::size_t length,
             std::size_t first_position = 0);

    std::size_t hidden() const noexcept { return heads * head_dim; }

    std::span<float> key_row(std::size_t layer, std::size_t row);
    std::span<const float> key_row(std::size_t layer, std::size_t row) const;
    std::span<float> value_row(std::size_t layer, std::size_t row);
    std::span<const float> value_row(std::size_t layer, std::size_t row) const;

    /// Grows or shrinks the row count, keeping existing rows.
    void resize(std::size_t new_length);
    /// Removes the first `rows` rows; surviving rows keep their global positions.
    void drop_front(std::size_t rows);

    float max_abs_diff(const KvTensor& other) const;
};

/// Lower-triangular softmax scores for every (layer, head) over R rows.
struct AttentionMatrix {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t rows = 0;
    std::size_t first_position = 0;
    std::vector<float> scores;  // [layer][head][row][col]

    float at(std::size_t layer, std::size_t head, std::size_t row, std::size_t col) const {
        return scores[((layer * heads + head) * rows + row) * rows + col];
    }
    float& at(std::size_t layer, std::size_t head, std::size_t row, std::size_t col) {
        return scores[((layer * heads + head) * rows + row) * rows + col];
    }
};

struct ForwardResult {
    KvTensor kv;
    AttentionMatrix attention;
    std::vector<float> logits;  // next-token logits after the last input token
};

/// One new attention row per (layer, head); row i of `rows` is for
/// layer i / heads, head i % heads, with `kv.length` entries after the step.
struct StepResult {
    std::vector<std::vector<float>> attention_rows;
    std::vector<float> logits;
};

/// Half-open span of global token positions.
struct TokenSpan {
    std::size_t start = 0;
    std::size_t count = 0;

    std::size_t end() const noexcept { return start + count; }
};

/// A KV tensor where only some rows are valid.
struct PartialKv {
    KvTensor kv;
    std::vector<bool> present;  // one flag per row
};

ForwardResult forward_full(const Model& model, std::span<const TokenId> tokens,
                           std::size_t first_position = 0);

/// Appends one token to `kv` in place. Throws Errc::window when the cache is
/// already at `max_seq` rows.
StepResult forward_step(const Model& model, KvTensor& kv, TokenId token);

/// Rebuilds the rows named by `missing` (global positions) from their token
/// ids, using the resident rows as context. `tokens[r]` is the token at row r.
KvTensor recompute_chunks(const Model& model, const PartialKv& resident,
                          std::span<const TokenSpan> missing, std::span<const TokenId> tokens);

/// Layer-stepped recompute of a set of rows, used by the overlapped loader:
/// run_layer(l) needs every non-target row of layer l to be filled in `kv`.
class RowRecomputer {
public:
    RowRecomputer(const Model& model, KvTensor& kv, std::vector<std::size_t> rows,
                  std::span<const TokenId> tokens);

    void run_layer(std::size_t layer);
    /// Convenience: runs every remaining layer.
    void run_all();

    std::size_t next_layer() const noexcept { return next_layer_; }
    const std::vector<std::size_t>& rows() const noexcept { return rows_; }
    /// Final-normed logits of the last target row; valid after all layers ran.
    std::vector<float> last_logits() const;
    /// Attention rows emitted for the last target row during each layer,
    /// indexed like StepResult::attention_rows.
    const std::vector<std::vector<float>>& last_attention_rows() const noexcept {
        return last_rows_;
    }

private:
    const Model* model_;
    KvTensor* kv_;
    std::vector<std::size_t> rows_;
    std::vector<float> residual_;  // rows_.size() x hidden
    std::vector<std::vector<float>> last_rows_;
    std::size_t next_layer_ = 0;
};

/// Greedy argmax over logits.
TokenId argmax(std::span<const float> logits);

}  // namespace llmctx::tinylm
