// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "llmctx/error.hpp"
#include "llmctx/tinylm.hpp"

using namespace llmctx;
using namespace llmctx::tinylm;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> pick(1, 255);
    std::vector<TokenId> out(n);
    for (auto& t : out) t = pick(rng);
    return out;
}

Config small() {
    Config c;
    c.layers = 2;
    c.heads = 4;
    c.head_dim = 16;
    c.max_seq = 64;
    c.seed = 3;
    return c;
}

// Blanks the rows of `spans` in a copy of kv and marks them absent.
PartialKv knock_out(const KvTensor& kv, const std::vector<TokenSpan>& spans) {
    PartialKv p{kv, std::vector<bool>(kv.length, true)};
    for (const auto& s : spans) {
        for (std::size_t pos = s.start; pos < s.end(); ++pos) {
            const std::size_t r = pos - kv.first_position;
            p.present[r] = false;
            for (std::size_t l = 0; l < kv.layers; ++l) {
                std::fill(p.kv.key_row(l, r).begin(), p.kv.key_row(l, r).end(), 0.0f);
                std::fill(p.kv.value_row(l, r).begin(), p.kv.value_row(l, r).end(), 0.0f);
            }
        }
    }
    return p;
}

}  // namespace

TEST(TinyLm, SameSeedSameWeights) {
    Model a(small());
    Model b(small());
    EXPECT_EQ(a.weights().embed, b.weights().embed);
    auto c = small();
    c.seed = 4;
    Model other(c);
    EXPECT_NE(a.weights().embed, other.weights().embed);
}

TEST(TinyLm, StepMatchesFullForward) {
    Model model(small());
    const auto tokens = random_tokens(40, 1);
    const auto full = forward_full(model, tokens);

    KvTensor kv(2, 4, 16, 0);
    StepResult last;
    for (auto t : tokens) last = forward_step(model, kv, t);
    EXPECT_EQ(kv.length, 40u);
    EXPECT_LE(kv.max_abs_diff(full.kv), 1e-5f);
    ASSERT_EQ(last.logits.size(), full.logits.size());
    for (std::size_t i = 0; i < last.logits.size(); ++i) EXPECT_NEAR(last.logits[i], full.logits[i], 1e-4);

    // The last step's attention rows equal the last rows of the full matrix.
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t h = 0; h < 4; ++h) {
            const auto& row = last.attention_rows[l * 4 + h];
            ASSERT_EQ(row.size(), 40u);
            for (std::size_t c = 0; c < 40; ++c) EXPECT_NEAR(row[c], full.attention.at(l, h, 39, c), 1e-5);
        }
    }
}

TEST(TinyLm, AttentionRowsAreCausalDistributions) {
    Model model(small());
    const auto full = forward_full(model, random_tokens(24, 2));
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t h = 0; h < 4; ++h) {
            for (std::size_t r = 0; r < 24; ++r) {
                double sum = 0.0;
                for (std::size_t c = 0; c < 24; ++c) {
                    const float a = full.attention.at(l, h, r, c);
                    if (c > r) {
                        EXPECT_EQ(a, 0.0f);
                    } else {
                        EXPECT_GE(a, 0.0f);
                    }
                    sum += a;
                }
                EXPECT_NEAR(sum, 1.0, 1e-5);
            }
        }
    }
}

TEST(TinyLm, RecomputeOfInterleavedChunksMatchesFullForward) {
    Model model(small());
    const auto tokens = random_tokens(64, 5);
    const auto full = forward_full(model, tokens);
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<TokenSpan> spans;
        for (std::size_t k = 0; k < 4; ++k) {
            if (rng() % 2) spans.push_back({k * 16, 16});
        }
        if (spans.empty()) spans.push_back({(rng() % 4) * 16, 16});
        const auto partial = knock_out(full.kv, spans);
        const auto rebuilt = recompute_chunks(model, partial, spans, tokens);
        EXPECT_LE(rebuilt.max_abs_diff(full.kv), 1e-4f) << "trial " << trial;
    }
}

TEST(TinyLm, RowRecomputerMatchesBatchRecompute) {
    Model model(small());
    const auto tokens = random_tokens(48, 6);
    const auto full = forward_full(model, tokens);
    const std::vector<TokenSpan> spans = {{0, 16}, {32, 16}};
    auto partial = knock_out(full.kv, spans);
    std::vector<std::size_t> rows;
    for (const auto& s : spans) {
        for (std::size_t p = s.start; p < s.end(); ++p) rows.push_back(p);
    }
    RowRecomputer rec(model, partial.kv, rows, tokens);
    EXPECT_THROW(rec.last_logits(), Error);
    for (std::size_t l = 0; l < 2; ++l) rec.run_layer(l);
    EXPECT_LE(partial.kv.max_abs_diff(full.kv), 1e-4f);
    // The last target row is the last token, so its logits are the model's.
    const auto logits = rec.last_logits();
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(logits[i], full.logits[i], 1e-4);
}

TEST(TinyLm, WindowedRecomputeMatchesWindowedForward) {
    Model model(small());
    const auto tokens = random_tokens(48, 8);
    // The window starts at position 16; the oracle is a forward pass over it.
    const std::vector<TokenId> window(tokens.begin() + 16, tokens.end());
    const auto full = forward_full(model, window, 16);
    EXPECT_EQ(full.kv.first_position, 16u);
    const std::vector<TokenSpan> spans = {{32, 16}};
    const auto partial = knock_out(full.kv, spans);
    const auto rebuilt = recompute_chunks(model, partial, spans, window);
    EXPECT_LE(rebuilt.max_abs_diff(full.kv), 1e-4f);
}

TEST(TinyLm, Errors) {
    Model model(small());
    EXPECT_THROW(forward_full(model, std::vector<TokenId>{}), Error);
    try {
        forward_full(model, random_tokens(65, 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::length);
    }
    try {
        forward_full(model, std::vector<TokenId>{300});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::argument);
    }
    KvTensor kv(2, 4, 16, 0);
    for (int i = 0; i < 64; ++i) forward_step(model, kv, 7);
    try {
        forward_step(model, kv, 7);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::window);
    }
    const auto full = forward_full(model, random_tokens(32, 2));
    auto partial = knock_out(full.kv, {{0, 16}});
    // Overlapping spans are rejected.
    const std::vector<TokenSpan> overlap = {{0, 16}, {8, 16}};
    EXPECT_THROW(recompute_chunks(model, partial, overlap, random_tokens(32, 2)), Error);
}

TEST(TinyLm, DropFrontKeepsPositions) {
    KvTensor kv(1, 1, 2, 4, 0);
    for (std::size_t r = 0; r < 4; ++r) kv.key_row(0, r)[0] = static_cast<float>(r);
    kv.drop_front(2);
    EXPECT_EQ(kv.first_position, 2u);
    EXPECT_EQ(kv.length, 2u);
    EXPECT_EQ(kv.key_row(0, 0)[0], 2.0f);
}

TEST(TinyLm, ArgmaxPicksFirstMaximum) {
    const std::vector<float> logits = {0.1f, 3.0f, 3.0f, -1.0f};
    EXPECT_EQ(argmax(logits), 1);
}
