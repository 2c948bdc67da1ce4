// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "llmctx/error.hpp"
#include "llmctx/quant.hpp"

using namespace llmctx;
using namespace llmctx::quant;

namespace {

ChunkTensor random_chunk(ChunkShape shape, std::uint64_t seed, float spread = 3.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, spread);
    ChunkTensor t{shape, std::vector<float>(shape.elements())};
    for (auto& v : t.data) v = dist(rng);
    return t;
}

const ChunkShape kShape{2, 4, 16, 16};

}  // namespace

TEST(Quant, PayloadAndMetadataSizes) {
    EXPECT_EQ(kShape.channels(), 2u * 2 * 64);
    EXPECT_EQ(payload_bytes(kShape, 8), kShape.elements());
    EXPECT_EQ(payload_bytes(kShape, 4), kShape.elements() / 2);
    EXPECT_EQ(payload_bytes(kShape, 2), kShape.elements() / 4);
    EXPECT_EQ(payload_bytes(kShape, kRawBitwidth), kShape.elements() * 4);
    EXPECT_EQ(metadata_bytes(kShape), kShape.channels() * 8);
    // Odd element counts round up to whole bytes.
    const ChunkShape odd{1, 1, 3, 1};
    EXPECT_EQ(payload_bytes(odd, 2), 2u);
    EXPECT_EQ(payload_bytes(odd, 4), 3u);
}

TEST(Quant, ErrorWithinHalfAStep) {
    for (int bits : {2, 4, 8}) {
        const auto chunk = random_chunk(kShape, 100 + bits);
        const auto q = quantize(chunk, bits);
        const auto back = dequantize(q);
        for (std::size_t l = 0; l < kShape.layers; ++l) {
            for (std::size_t kv = 0; kv < 2; ++kv) {
                for (std::size_t hd = 0; hd < kShape.hidden(); ++hd) {
                    const float scale = q.scales[kShape.channel(l, kv, hd)];
                    for (std::size_t t = 0; t < kShape.tokens; ++t) {
                        const std::size_t e = kShape.element(l, kv, t, hd);
                        EXPECT_LE(std::fabs(back.data[e] - chunk.data[e]), 0.5f * scale * (1.0f + 1e-5f) + 1e-6f);
                    }
                }
            }
        }
    }
}

TEST(Quant, ConstantChannelIsExact) {
    ChunkTensor t{ChunkShape{1, 1, 2, 4}, std::vector<float>(16, 1.25f)};
    const auto back = dequantize(quantize(t, 2));
    for (float v : back.data) EXPECT_EQ(v, 1.25f);
}

TEST(Quant, ExtremesMapToEndCodes) {
    ChunkTensor t{ChunkShape{1, 1, 1, 4}, {-2.0f, -1.0f, 0.5f, 4.0f, 0, 0, 0, 0}};
    const auto q = quantize(t, 4);
    const auto codes = codes_of(q);
    EXPECT_EQ(codes[0], 0);
    EXPECT_EQ(codes[3], 15);
    EXPECT_FLOAT_EQ(q.zero_points[0], -2.0f);
    EXPECT_FLOAT_EQ(q.scales[0], 6.0f / 15.0f);
}

TEST(Quant, PackUnpackIsABijection) {
    std::mt19937_64 rng(9);
    for (int bits : {2, 4, 8}) {
        const unsigned top = (1u << bits) - 1;
        for (std::size_t n : {1u, 3u, 7u, 64u, 1001u}) {
            std::vector<std::uint8_t> codes(n);
            for (auto& c : codes) c = static_cast<std::uint8_t>(rng() % (top + 1));
            const auto packed = pack_codes(codes, bits);
            EXPECT_EQ(packed.size(), (n * bits + 7) / 8);
            EXPECT_EQ(unpack_codes(packed, bits, n), codes);
        }
        // Every byte value unpacks and repacks to itself.
        std::vector<std::uint8_t> all(256);
        for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
        const std::size_t per = 8 / bits;
        EXPECT_EQ(pack_codes(unpack_codes(all, bits, 256 * per), bits), all);
    }
}

TEST(Quant, RawRoundTripIsBitExact) {
    const auto chunk = random_chunk(kShape, 4);
    const auto raw = store_raw(chunk);
    EXPECT_EQ(raw.bitwidth, kRawBitwidth);
    EXPECT_EQ(dequantize(raw).data, chunk.data);
}

TEST(Quant, RequantizeOnlyLowers) {
    const auto q8 = quantize(random_chunk(kShape, 5), 8);
    const auto q4 = requantize(q8, 4);
    EXPECT_EQ(q4.bitwidth, 4);
    EXPECT_EQ(q4.packed.size(), payload_bytes(kShape, 4));
    EXPECT_THROW(requantize(q4, 8), Error);
    // Lower precision costs accuracy but stays near the source.
    const auto a = dequantize(q8);
    const auto b = dequantize(q4);
    for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 4.0);
}

TEST(Quant, RejectsBadInput) {
    auto chunk = random_chunk(kShape, 6);
    EXPECT_THROW(quantize(chunk, 3), Error);
    chunk.data[5] = std::nanf("");
    try {
        quantize(chunk, 8);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::numeric);
    }
    auto q = quantize(random_chunk(kShape, 7), 8);
    q.packed.pop_back();
    EXPECT_THROW(validate(q), Error);
}
