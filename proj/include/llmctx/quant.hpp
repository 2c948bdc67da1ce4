// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Channel-wise asymmetric linear quantization of KV chunks.
//
// A chunk tensor holds every layer's K and V rows for a run of tokens, laid
// out as (layer, K/V, token, head, dim). A *channel* is one
// (layer, K/V, head, dim) lane followed across the chunk's tokens, so there
// are layers * 2 * heads * head_dim channels, each with its own f32 scale and
// zero point.
//
// Codes are packed in element order, LSB-first within each byte: four 2-bit
// codes or two 4-bit codes per byte. Bitwidth 32 is a pass-through format
// storing raw little-endian f32 values (used when quantization is disabled).

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace llmctx::quant {

inline constexpr int kRawBitwidth = 32;

/// True for 2, 4 and 8.
bool is_code_bitwidth(int bits) noexcept;
/// True for 2, 4, 8 and the raw pass-through width.
bool is_storage_bitwidth(int bits) noexcept;

struct ChunkShape {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    std::size_t tokens = 0;

    std::size_t hidden() const noexcept { return heads * head_dim; }
    std::size_t channels() const noexcept { return layers * 2 * hidden(); }
    std::size_t elements() const noexcept { return channels() * tokens; }

    /// Channel of element (layer, kv, head, dim); kv is 0 for K and 1 for V.
    std::size_t channel(std::size_t layer, std::size_t kv, std::size_t head_dim_index) const noexcept {
        return (layer * 2 + kv) * hidden() + head_dim_index;
    }
    /// Flat element index in (layer, K/V, token, head, dim) order.
    std::size_t element(std::size_t layer, std::size_t kv, std::size_t token,
                        std::size_t head_dim_index) const noexcept {
        return ((layer * 2 + kv) * tokens + token) * hidden() + head_dim_index;
    }

    friend bool operator==(const ChunkShape&, const ChunkShape&) = default;
};

/// Packed payload bytes for a chunk stored at `bits` (metadata excluded).
std::size_t payload_bytes(const ChunkShape& shape, int bits);
/// Bytes of the per-channel scale and zero-point arrays.
std::size_t metadata_bytes(const ChunkShape& shape) noexcept;

struct ChunkTensor {
    ChunkShape shape;
    std::vector<float> data;  // shape.elements(), (layer, K/V, token, head, dim)
};

struct QuantizedChunkPayload {
    ChunkShape shape;
    int bitwidth = 8;
    std::vector<float> scales;       // one per channel
    std::vector<float> zero_points;  // one per channel
    std::vector<std::uint8_t> packed;

    friend bool operator==(const QuantizedChunkPayload&, const QuantizedChunkPayload&) = default;
};

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, int bits,
                                       std::size_t count);

QuantizedChunkPayload quantize(const ChunkTensor& chunk, int bits);
/// Bitwidth-32 pass-through payload; dequantize() returns `chunk` bit-exactly.
QuantizedChunkPayload store_raw(const ChunkTensor& chunk);
ChunkTensor dequantize(const QuantizedChunkPayload& payload);
QuantizedChunkPayload requantize(const QuantizedChunkPayload& payload, int lower_bits);

/// Unpacked integer codes of a quantized payload (not valid for raw payloads).
std::vector<std::uint8_t> codes_of(const QuantizedChunkPayload& payload);

/// Throws Errc::format unless the payload's sizes and padding are consistent.
void validate(const QuantizedChunkPayload& payload);

}  // namespace llmctx::quant
